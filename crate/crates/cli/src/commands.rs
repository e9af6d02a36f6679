use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::Parser;
use msgan_core::complexity::{compare, count_network, label, CountOptions};
use msgan_core::export::encode_png;
use msgan_core::generator::init_random;
use msgan_core::optimize::{optimize, DEFAULT_TOLERANCE, DEFAULT_VERIFY_SAMPLES};
use msgan_core::suites::{run_suite, Suite, SuiteInputs, SuiteReport};
use msgan_core::timing::{machine_id, median, time_forward, time_pair};
use msgan_core::{Exec, Generator, WeightContainer};
use rayon::prelude::*;

use crate::config_file::load_config;
use crate::manifest::{beside, RunManifest};
use crate::{BenchArgs, Cli, Command, CountArgs, GenerateArgs, InitArgs, OptimizeArgs, SuiteArg, VerifyArgs};

/// Runs one parsed command line. `Ok(false)` means the command ran but
/// reported a failure (a verification suite did not pass).
pub fn run(cli: Cli, argv: Vec<String>) -> Result<bool> {
    if let Command::Replay(r) = &cli.command {
        let recorded = RunManifest::load(&r.manifest_file)?;
        let inner = Cli::try_parse_from(std::iter::once("msgan".to_string()).chain(recorded.argv.iter().cloned()))
            .with_context(|| format!("manifest {} holds an unparseable command", r.manifest_file.display()))?;
        ensure!(
            !matches!(inner.command, Command::Replay(_)),
            "refusing to replay a replay"
        );
        eprintln!("replaying: msgan {}", recorded.argv.join(" "));
        return run(inner, recorded.argv);
    }

    let (name, default_manifest) = match &cli.command {
        Command::Init(a) => ("init", beside(&a.out)),
        Command::Generate(a) => ("generate", a.out_dir.join("manifest.json")),
        Command::Optimize(a) => ("optimize", beside(&a.weights_out)),
        Command::Count(a) => (
            "count",
            a.out
                .as_deref()
                .map(beside)
                .unwrap_or_else(|| "msgan-count.manifest.json".into()),
        ),
        Command::Bench(_) => ("bench", PathBuf::from("msgan-bench.manifest.json")),
        Command::Verify(_) => ("verify", PathBuf::from("msgan-verify.manifest.json")),
        Command::Replay(_) => unreachable!(),
    };
    let manifest_path = cli.manifest.clone().unwrap_or(default_manifest);
    let mut m = RunManifest::new(name, &argv);
    let start = Instant::now();
    let result = match &cli.command {
        Command::Init(a) => init(a, &mut m).map(|_| true),
        Command::Generate(a) => generate(a, &mut m).map(|_| true),
        Command::Optimize(a) => cmd_optimize(a, &mut m).map(|_| true),
        Command::Count(a) => count(a, &mut m).map(|_| true),
        Command::Bench(a) => bench(a, &mut m).map(|_| true),
        Command::Verify(a) => verify(a, &mut m),
        Command::Replay(_) => unreachable!(),
    };
    m.time("total_s", start.elapsed().as_secs_f64());
    match &result {
        Ok(true) => {}
        Ok(false) => m.status = "failed".into(),
        Err(e) => {
            m.status = "failed".into();
            m.error = Some(format!("{e:#}"));
        }
    }
    m.save(&manifest_path)?;
    eprintln!("manifest: {}", manifest_path.display());
    result
}

/// Writes results to stdout. A closed pipe (`msgan ... | head`) is not an
/// error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.context("writing to stdout"),
    }
}

fn load_weights(path: &Path, m: &mut RunManifest) -> Result<WeightContainer> {
    m.weights_path = Some(path.display().to_string());
    WeightContainer::load(path).with_context(|| format!("loading weights {}", path.display()))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building thread pool")
}

fn init(a: &InitArgs, m: &mut RunManifest) -> Result<()> {
    m.config_path = Some(a.config.clone());
    m.seed = Some(a.seed);
    let cfg = load_config(&a.config)?;
    let c = init_random(&cfg, a.seed)?;
    c.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    m.output(&a.out);
    eprintln!("wrote {} ({} parameters)", a.out.display(), c.scalar_count());
    Ok(())
}

type Rendered = Vec<(String, Vec<u8>)>;

fn render(g: &Generator, seed: u64, pyramid: bool) -> Result<Rendered> {
    let img = g.generate(seed, 1)?;
    let mut out = vec![(format!("seed{seed:06}.png"), encode_png(&img, 0)?)];
    if pyramid {
        let (z, noises) = g.sample_inputs(seed, 1);
        let style = g.mapping_forward(&z)?;
        for level in g.synthesize_pyramid(&style, &noises)?.levels() {
            let size = level.image.shape()[3];
            let clamped = level.image.map(|v| v.clamp(-1.0, 1.0));
            out.push((format!("seed{seed:06}_head{size:04}.png"), encode_png(&clamped, 0)?));
        }
    }
    Ok(out)
}

fn generate(a: &GenerateArgs, m: &mut RunManifest) -> Result<()> {
    m.seed = Some(a.seed);
    ensure!(a.count > 0, "--count must be at least 1");
    ensure!(a.workers != Some(0), "--workers must be at least 1");
    a.seed
        .checked_add(a.count - 1)
        .context("--seed + --count overflows the seed range")?;
    let t = Instant::now();
    let c = load_weights(&a.weights, m)?;
    if let Some(path) = &a.config {
        m.config_path = Some(path.clone());
        let want = load_config(path)?;
        ensure!(
            want == c.config,
            "weights {} were built for a different config than {path}",
            a.weights.display()
        );
    }
    let g = Generator::from_container(&c)?;
    m.time("load_s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let workers = pool(a.workers.unwrap_or(0))?;
    let rendered: Vec<Rendered> = workers.install(|| {
        (0..a.count)
            .into_par_iter()
            .map(|i| render(&g, a.seed + i, a.pyramid))
            .collect::<Result<_>>()
    })?;
    m.time("render_s", t.elapsed().as_secs_f64());

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (file, bytes) in rendered.into_iter().flatten() {
        let path = a.out_dir.join(file);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        m.output(&path);
    }
    eprintln!("wrote {} file(s) to {}", m.outputs.len(), a.out_dir.display());
    Ok(())
}

fn cmd_optimize(a: &OptimizeArgs, m: &mut RunManifest) -> Result<()> {
    m.seed = Some(a.seed);
    ensure!(a.verify_samples > 0, "--verify-samples must be at least 1");
    ensure!(a.tol >= 0.0, "--tol must be non-negative");
    let c = load_weights(&a.weights_in, m)?;
    let t = Instant::now();
    let (out, report) = optimize(&c, a.verify_samples, a.tol, a.seed)?;
    m.time("optimize_s", t.elapsed().as_secs_f64());
    m.details = serde_json::to_value(&report)?;
    emit(&(report.to_json() + "\n"))?;
    if report.passed != Some(true) {
        bail!(
            "verification failed: max divergence {:e} exceeds tolerance {:e}; {} not written",
            report.max_abs_divergence.unwrap_or(f64::NAN),
            a.tol,
            a.weights_out.display()
        );
    }
    out.save(&a.weights_out)
        .with_context(|| format!("writing {}", a.weights_out.display()))?;
    m.output(&a.weights_out);
    eprintln!(
        "optimized: {} params folded, {} nodes removed, max divergence {:e}",
        report.params_folded,
        report.nodes_removed,
        report.max_abs_divergence.unwrap_or(0.0)
    );
    Ok(())
}

fn count(a: &CountArgs, m: &mut RunManifest) -> Result<()> {
    m.config_path = Some(a.config.clone());
    let opts = CountOptions {
        include_mapping: a.include_mapping,
        include_bias: !a.no_bias,
        count_modulation: !a.no_modulation,
        demod_fused: a.demod_fused,
    };
    let cfg = load_config(&a.config)?;
    let text = match &a.compare {
        Some(other) => {
            let cmp = compare(&cfg, &load_config(other)?, opts);
            if a.json {
                cmp.to_json() + "\n"
            } else if a.detailed {
                format!(
                    "{}\n{}\n{}",
                    cmp.a.detailed_table(),
                    cmp.b.detailed_table(),
                    cmp.table()
                )
            } else {
                cmp.table()
            }
        }
        None => {
            let r = count_network(&cfg, opts);
            if a.json {
                r.to_json() + "\n"
            } else if a.detailed {
                format!("{}\n{}", r.detailed_table(), r.table())
            } else {
                r.table()
            }
        }
    };
    emit(&text)?;
    if let Some(out) = &a.out {
        std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
        m.output(out);
    }
    Ok(())
}

fn bench_table(machine: &str, net: &str, rows: &[(&str, f64)], speedup: Option<f64>) -> String {
    let mut s = format!("{:<28} {:<18} {:>14}\n", "Network", "Engine", "Time (sec.)");
    for (engine, secs) in rows {
        s += &format!("{net:<28} {engine:<18} {secs:>14.6}\n");
    }
    if let Some(x) = speedup {
        s += &format!("speedup (unfused / fused): {x:.3}x\n");
    }
    s + &format!("median per image on {machine}\n")
}

fn bench(a: &BenchArgs, m: &mut RunManifest) -> Result<()> {
    m.seed = Some(a.seed);
    ensure!(a.iters > 0, "--iters must be at least 1");
    ensure!(a.threads > 0, "--threads must be at least 1");
    let exec = if a.threads == 1 {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let c = load_weights(&a.weights, m)?;
    let net = label(&c.config);
    let g = Generator::from_container(&c)?.with_exec(exec);
    let workers = pool(a.threads)?;
    let machine = machine_id();
    let (rows, speedup, details) = if a.fused_vs_unfused {
        let (f, report) = optimize(&c, DEFAULT_VERIFY_SAMPLES, DEFAULT_TOLERANCE, a.seed)?;
        ensure!(
            report.passed == Some(true),
            "optimized graph failed verification: {}",
            report.to_json()
        );
        let gf = Generator::from_container(&f)?.with_exec(exec);
        let pt = workers.install(|| time_pair(&g, &gf, a.seed, a.warmup, a.iters))?;
        m.time("unfused_median_s", pt.a_median_s);
        m.time("fused_median_s", pt.b_median_s);
        let rows = vec![("msgan unfused", pt.a_median_s), ("msgan fused", pt.b_median_s)];
        (rows, Some(pt.speedup), serde_json::to_value(&pt)?)
    } else {
        let samples = workers.install(|| time_forward(&g, a.seed, a.warmup, a.iters))?;
        let med = median(&samples);
        m.time("median_s", med);
        (vec![("msgan", med)], None, serde_json::json!({ "samples_s": samples }))
    };
    m.details = serde_json::json!({
        "machine": machine,
        "threads": a.threads,
        "iters": a.iters,
        "warmup": a.warmup,
        "timing": details,
    });
    if a.json {
        emit(&(serde_json::to_string_pretty(&m.details)? + "\n"))?;
    } else {
        emit(&bench_table(&machine, &net, &rows, speedup))?;
    }
    Ok(())
}

fn suite_table(reports: &[SuiteReport]) -> String {
    let mut s = format!(
        "{:<9} {:<42} {:<20} {:>12}  result\n",
        "suite", "check", "tolerance", "measured"
    );
    for r in reports {
        for c in &r.checks {
            s += &format!(
                "{:<9} {:<42} {:<20} {:>12.3e}  {}\n",
                r.suite.name(),
                c.name,
                c.tolerance,
                c.measured,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
    }
    let ok = reports.iter().filter(|r| r.passed).count();
    s + &format!("{ok}/{} suite(s) passed\n", reports.len())
}

fn verify(a: &VerifyArgs, m: &mut RunManifest) -> Result<bool> {
    m.seed = Some(a.seed);
    let weights = a.weights.as_deref().map(|p| load_weights(p, m)).transpose()?;
    let fused = a
        .fused
        .as_deref()
        .map(|p| WeightContainer::load(p).with_context(|| format!("loading fused weights {}", p.display())))
        .transpose()?;
    let suites: Vec<Suite> = match a.suite {
        SuiteArg::All => Suite::ALL.to_vec(),
        SuiteArg::Wavelet => vec![Suite::Wavelet],
        SuiteArg::Modconv => vec![Suite::Modconv],
        SuiteArg::Fusion => vec![Suite::Fusion],
        SuiteArg::Losses => vec![Suite::Losses],
    };
    let inputs = SuiteInputs {
        weights: weights.as_ref(),
        fused: fused.as_ref(),
    };
    let reports: Vec<SuiteReport> = suites
        .iter()
        .map(|&s| {
            let t = Instant::now();
            let r = run_suite(s, &inputs, a.seed);
            m.time(&format!("{}_s", s.name()), t.elapsed().as_secs_f64());
            r
        })
        .collect();
    m.details = serde_json::to_value(&reports)?;
    if a.json {
        emit(&(serde_json::to_string_pretty(&reports)? + "\n"))?;
    } else {
        emit(&suite_table(&reports))?;
    }
    let passed = reports.iter().all(|r| r.passed);
    if !passed {
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.suite.name()).collect();
        eprintln!("verification failed: {}", failed.join(", "));
    }
    Ok(passed)
}
