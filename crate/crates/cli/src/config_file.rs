use std::path::Path;

use anyhow::{bail, Context, Result};
use msgan_core::GeneratorConfig;

pub const PRESETS: [&str; 5] = [
    "mobile_64",
    "baseline_64",
    "mobile_1024",
    "mobile_1024_wide",
    "stylegan2_f_1024",
];

fn preset(name: &str) -> Option<GeneratorConfig> {
    Some(match name {
        "mobile_64" => GeneratorConfig::mobile_64(),
        "baseline_64" => GeneratorConfig::baseline_64(),
        "mobile_1024" => GeneratorConfig::mobile_1024(),
        "mobile_1024_wide" => GeneratorConfig::mobile_1024_wide(),
        "stylegan2_f_1024" => GeneratorConfig::stylegan2_f(1024),
        _ => return None,
    })
}

/// A TOML file path, or one of [`PRESETS`] when no such file exists.
pub fn load_config(arg: &str) -> Result<GeneratorConfig> {
    let path = Path::new(arg);
    let cfg = if path.exists() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {arg}"))?;
        toml::from_str::<GeneratorConfig>(&text).with_context(|| format!("parsing config {arg}"))?
    } else if let Some(c) = preset(arg) {
        c
    } else {
        bail!("config `{arg}` is neither a file nor a preset ({})", PRESETS.join(", "));
    };
    cfg.validate().with_context(|| format!("invalid config {arg}"))?;
    Ok(cfg)
}
