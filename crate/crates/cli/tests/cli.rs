use std::path::Path;
use std::process::{Command, Output};

use msgan_core::optimize::fuse_demodulation;
use msgan_core::WeightContainer;
use serde_json::Value;

fn msgan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msgan"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = msgan(args, cwd);
    assert!(
        out.status.success(),
        "msgan {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.toml"))
        .to_string_lossy()
        .into_owned()
}

fn init(dir: &Path, cfg: &str, out: &str) {
    ok(&["init", "--config", &config(cfg), "--seed", "3", "--out", out], dir);
}

fn png_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    v.sort();
    v
}

fn png_size(path: &Path) -> (u32, u32) {
    let b = std::fs::read(path).unwrap();
    assert_eq!(&b[1..4], b"PNG");
    let w = u32::from_be_bytes(b[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(b[20..24].try_into().unwrap());
    (w, h)
}

#[test]
fn generate_one_image_with_manifest() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    init(d, "mobile_64", "w.msgw");
    ok(
        &[
            "generate",
            "--config",
            &config("mobile_64"),
            "--weights",
            "w.msgw",
            "--seed",
            "7",
            "--count",
            "1",
            "--out-dir",
            "out",
        ],
        d,
    );
    assert_eq!(png_files(&d.join("out")), ["seed000007.png"]);
    assert_eq!(png_size(&d.join("out/seed000007.png")), (64, 64));
    let m = json_file(&d.join("out/manifest.json"));
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["weights_path"], "w.msgw");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 1);
    assert!(m["timings"]
        .as_object()
        .unwrap()
        .values()
        .all(|v| v.as_f64().unwrap() >= 0.0));
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn pyramid_writes_one_image_per_head() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    init(d, "mobile_64", "w.msgw");
    ok(
        &[
            "generate",
            "--weights",
            "w.msgw",
            "--seed",
            "2",
            "--out-dir",
            "out",
            "--pyramid",
        ],
        d,
    );
    let files = png_files(&d.join("out"));
    assert_eq!(files.len(), 5, "{files:?}");
    for s in [8u32, 16, 32, 64] {
        let p = d.join(format!("out/seed000002_head{s:04}.png"));
        assert_eq!(png_size(&p), (s, s));
    }
    // The finest head is the final image.
    assert_eq!(
        std::fs::read(d.join("out/seed000002_head0064.png")).unwrap(),
        std::fs::read(d.join("out/seed000002.png")).unwrap()
    );
}

#[test]
fn generate_rejects_bad_weights() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let missing = msgan(&["generate", "--weights", "nope.msgw", "--out-dir", "out"], d);
    assert!(!missing.status.success());
    assert!(stderr(&missing).contains("nope.msgw"), "{}", stderr(&missing));
    assert!(stdout(&missing).is_empty());

    std::fs::write(d.join("junk.msgw"), b"MSGW not really").unwrap();
    let junk = msgan(&["generate", "--weights", "junk.msgw", "--out-dir", "out"], d);
    assert!(!junk.status.success());
    assert!(stderr(&junk).contains("weight container"), "{}", stderr(&junk));
    assert!(png_files(&d.join("out")).is_empty());
    assert_eq!(json_file(&d.join("out/manifest.json"))["status"], "failed");

    init(d, "mobile_64", "w.msgw");
    let wrong = msgan(
        &[
            "generate",
            "--config",
            &config("baseline_64"),
            "--weights",
            "w.msgw",
            "--out-dir",
            "o2",
        ],
        d,
    );
    assert!(!wrong.status.success());
    assert!(stderr(&wrong).contains("different config"));
}

#[test]
fn optimize_writes_verified_idempotent_output() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    init(d, "mobile_64", "w.msgw");
    let out = ok(&["optimize", "--weights-in", "w.msgw", "--weights-out", "f.msgw"], d);
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["verified_samples"], 16);
    assert!(report["max_abs_divergence"].as_f64().unwrap() <= 1e-9);
    assert!(report["nodes_removed"].as_u64().unwrap() > 0);
    assert!(d.join("f.msgw.manifest.json").exists());

    ok(&["optimize", "--weights-in", "f.msgw", "--weights-out", "ff.msgw"], d);
    assert_eq!(
        std::fs::read(d.join("f.msgw")).unwrap(),
        std::fs::read(d.join("ff.msgw")).unwrap()
    );

    let f = WeightContainer::load(d.join("f.msgw")).unwrap();
    assert!(!f.names().any(|n| n.ends_with("p_demod")));
}

#[test]
fn optimize_refuses_style_demodulation() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    init(d, "mobile_64_style", "s.msgw");
    let out = msgan(&["optimize", "--weights-in", "s.msgw", "--weights-out", "f.msgw"], d);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("not foldable"), "{}", stderr(&out));
    assert!(!d.join("f.msgw").exists());
}

#[test]
fn optimize_refuses_to_write_when_verification_fails() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    init(d, "mobile_64", "w.msgw");
    let out = msgan(
        &[
            "optimize",
            "--weights-in",
            "w.msgw",
            "--weights-out",
            "f.msgw",
            "--tol",
            "0",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("verification failed"), "{}", stderr(&out));
    assert!(!d.join("f.msgw").exists());
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["passed"], false);
}

#[test]
fn count_prints_table_ratio_and_json() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let table = stdout(&ok(&["count", "--config", &config("stylegan2_f_1024")], d));
    assert!(table.contains("dense_baseline@1024"));
    assert!(table.contains("28.27"), "{table}");

    let cmp = stdout(&ok(
        &["count", "--config", "stylegan2_f_1024", "--compare", "mobile_1024"],
        d,
    ));
    assert!(cmp.contains("ratio"), "{cmp}");
    assert!(cmp.contains("5.35x") && cmp.contains("18.08x"), "{cmp}");

    let json: Value =
        serde_json::from_str(&stdout(&ok(&["count", "--config", "stylegan2_f_1024", "--json"], d))).unwrap();
    assert_eq!(json["total_params"], 28_268_812);
    assert!(json["per_layer"].as_array().unwrap().len() > 10);

    let all: Value = serde_json::from_str(&stdout(&ok(
        &["count", "--config", "mobile_64", "--json", "--include-mapping"],
        d,
    )))
    .unwrap();
    let w = msgan_core::generator::init_random(&msgan_core::GeneratorConfig::mobile_64(), 0).unwrap();
    assert_eq!(all["total_params"].as_u64().unwrap(), w.scalar_count());
    assert_eq!(json_file(&d.join("msgan-count.manifest.json"))["command"], "count");
}

#[test]
fn bench_reports_medians_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    init(d, "mobile_64", "w.msgw");
    let out = ok(&["bench", "--weights", "w.msgw", "--iters", "1", "--warmup", "0"], d);
    assert!(stdout(&out).contains("Time (sec.)"));
    let m = json_file(&d.join("msgan-bench.manifest.json"));
    assert_eq!(m["status"], "ok");
    assert!(m["timings"]["median_s"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["details"]["threads"], 1);

    let out = ok(
        &[
            "bench",
            "--weights",
            "w.msgw",
            "--iters",
            "3",
            "--warmup",
            "1",
            "--fused-vs-unfused",
            "--manifest",
            "b.json",
        ],
        d,
    );
    let text = stdout(&out);
    assert!(
        text.contains("msgan fused") && text.contains("msgan unfused") && text.contains("speedup"),
        "{text}"
    );
    assert!(text.contains(std::env::consts::ARCH));
    let m = json_file(&d.join("b.json"));
    assert!(m["timings"]["fused_median_s"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["details"]["timing"]["iters"], 3);
}

#[test]
fn verify_all_passes_and_lists_tolerances() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let out = ok(&["verify", "--suite", "all"], d);
    let text = stdout(&out);
    for s in ["wavelet", "modconv", "fusion", "losses"] {
        assert!(text.contains(s));
    }
    assert!(text.contains("<= 1e-10") && text.contains("<= 1e-12"), "{text}");
    assert!(text.contains("4/4 suite(s) passed"));
    let json: Value = serde_json::from_str(&stdout(&ok(&["verify", "--suite", "losses", "--json"], d))).unwrap();
    assert_eq!(json[0]["passed"], true);
}

#[test]
fn verify_detects_corrupted_fused_weights() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    init(d, "mobile_64", "w.msgw");
    let c = WeightContainer::load(d.join("w.msgw")).unwrap();
    let (mut f, _) = fuse_demodulation(&c).unwrap();
    ok(&["verify", "--suite", "fusion", "--weights", "w.msgw"], d);
    f.get_mut("synthesis.b1.conv_main.pw").unwrap().data_mut()[0] += 1e-4;
    f.save(d.join("bad.msgw")).unwrap();
    let out = msgan(
        &[
            "verify",
            "--suite",
            "fusion",
            "--weights",
            "w.msgw",
            "--fused",
            "bad.msgw",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(stdout(&out).contains("FAIL"));
    assert!(stderr(&out).contains("verification failed: fusion"));
    assert_eq!(json_file(&d.join("msgan-verify.manifest.json"))["status"], "failed");
}

#[test]
fn replay_reproduces_a_run() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    init(d, "mobile_64", "w.msgw");
    ok(
        &[
            "generate",
            "--weights",
            "w.msgw",
            "--seed",
            "11",
            "--count",
            "2",
            "--out-dir",
            "out",
        ],
        d,
    );
    let first: Vec<Vec<u8>> = png_files(&d.join("out"))
        .iter()
        .map(|f| std::fs::read(d.join("out").join(f)).unwrap())
        .collect();
    for f in png_files(&d.join("out")) {
        std::fs::remove_file(d.join("out").join(f)).unwrap();
    }
    std::fs::copy(d.join("out/manifest.json"), d.join("run.json")).unwrap();
    ok(&["replay", "run.json"], d);
    let again: Vec<Vec<u8>> = png_files(&d.join("out"))
        .iter()
        .map(|f| std::fs::read(d.join("out").join(f)).unwrap())
        .collect();
    assert_eq!(first, again);
    assert_eq!(first.len(), 2);
}

#[test]
fn usage_errors_exit_nonzero() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    assert!(!msgan(&["generate"], d).status.success());
    assert!(!msgan(&["count", "--config", "no_such_preset"], d).status.success());
    init(d, "mobile_64", "w.msgw");
    let zero = msgan(
        &["generate", "--weights", "w.msgw", "--count", "0", "--out-dir", "o"],
        d,
    );
    assert!(!zero.status.success());
    assert!(stderr(&zero).contains("--count"));
}
