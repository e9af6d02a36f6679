//! Parameter and multiply-accumulate accounting.
//!
//! One MAC is one multiply-accumulate; additions alone are free, so the
//! add-only IDWT costs nothing. Spatial extents are output extents.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{GeneratorConfig, Variant};
use crate::generator::HEAD_CHANNELS;
use crate::modconv::{DemodMode, DW_KERNEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Depthwise,
    Pointwise,
    Linear,
    Idwt,
    /// Per-input-channel style scaling.
    Modulation,
    /// Per-output-channel rescale.
    Demodulation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// Weight scalars.
    pub params: u64,
    /// Bias scalars (not included in `params`).
    pub bias: u64,
    pub macs: u64,
}

/// Standard accounting for one layer. `k` is ignored where meaningless.
pub fn count_layer(kind: LayerKind, cin: u64, cout: u64, k: u64, h_out: u64, w_out: u64) -> LayerCost {
    let hw = h_out * w_out;
    match kind {
        LayerKind::Dense => LayerCost {
            params: cout * cin * k * k,
            bias: cout,
            macs: cout * cin * k * k * hw,
        },
        LayerKind::Depthwise => LayerCost {
            params: cin * k * k,
            bias: 0,
            macs: cin * k * k * hw,
        },
        LayerKind::Pointwise => LayerCost {
            params: cout * cin,
            bias: cout,
            macs: cout * cin * hw,
        },
        LayerKind::Linear => LayerCost {
            params: cout * cin,
            bias: cout,
            macs: cout * cin,
        },
        LayerKind::Idwt => LayerCost::default(),
        LayerKind::Modulation => LayerCost {
            macs: cin * hw,
            ..Default::default()
        },
        LayerKind::Demodulation => LayerCost {
            macs: cout * hw,
            ..Default::default()
        },
    }
}

/// Counting conventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountOptions {
    pub include_mapping: bool,
    /// Count biases and the other per-layer auxiliary scalars (noise
    /// strengths, `p_demod`).
    pub include_bias: bool,
    /// Count modulation and demodulation multiplies.
    pub count_modulation: bool,
    /// Count trainable demodulation as already folded.
    pub demod_fused: bool,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self {
            include_mapping: false,
            include_bias: true,
            count_modulation: true,
            demod_fused: false,
        }
    }
}

impl CountOptions {
    /// Everything a weight container stores.
    pub fn all_params() -> Self {
        Self {
            include_mapping: true,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: Option<LayerKind>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub label: String,
    pub options: CountOptions,
    pub per_layer: Vec<LayerEntry>,
    pub total_params: u64,
    pub total_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: ComplexityReport,
    pub b: ComplexityReport,
    /// `a / b`
    pub ratio_params: f64,
    pub ratio_macs: f64,
}

pub fn label(config: &GeneratorConfig) -> String {
    let v = match config.variant {
        Variant::Mobile => "mobile",
        Variant::DenseBaseline => "dense_baseline",
    };
    format!("{v}@{}", config.target_resolution)
}

struct Walker {
    opts: CountOptions,
    entries: Vec<LayerEntry>,
}

impl Walker {
    fn push(&mut self, name: String, kind: Option<LayerKind>, cost: LayerCost) {
        let bias = if self.opts.include_bias { cost.bias } else { 0 };
        self.entries.push(LayerEntry {
            name,
            kind,
            params: cost.params + bias,
            macs: cost.macs,
        });
    }

    fn aux(&mut self, name: String, scalars: u64) {
        if self.opts.include_bias && scalars > 0 {
            self.push(
                name,
                None,
                LayerCost {
                    params: scalars,
                    ..Default::default()
                },
            );
        }
    }

    fn affine(&mut self, prefix: &str, sd: u64, cin: u64) {
        self.push(
            format!("{prefix}.affine"),
            Some(LayerKind::Linear),
            count_layer(LayerKind::Linear, sd, cin, 1, 1, 1),
        );
    }

    fn modulation(&mut self, prefix: &str, cin: u64, r: u64) {
        if self.opts.count_modulation {
            let c = count_layer(LayerKind::Modulation, cin, cin, 1, r, r);
            self.push(format!("{prefix}.modulate"), Some(LayerKind::Modulation), c);
        }
    }

    fn demodulation(&mut self, prefix: &str, cout: u64, r: u64) {
        if self.opts.count_modulation {
            let c = count_layer(LayerKind::Demodulation, cout, cout, 1, r, r);
            self.push(format!("{prefix}.demod"), Some(LayerKind::Demodulation), c);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn ds(&mut self, prefix: &str, sd: u64, cin: u64, cout: u64, r: u64, mode: DemodMode, noise: bool) {
        let k = DW_KERNEL as u64;
        self.affine(prefix, sd, cin);
        self.modulation(prefix, cin, r);
        self.push(
            format!("{prefix}.dw"),
            Some(LayerKind::Depthwise),
            count_layer(LayerKind::Depthwise, cin, cin, k, r, r),
        );
        self.push(
            format!("{prefix}.pw"),
            Some(LayerKind::Pointwise),
            count_layer(LayerKind::Pointwise, cin, cout, 1, r, r),
        );
        let mode = match mode {
            DemodMode::Trainable if self.opts.demod_fused => DemodMode::Fused,
            m => m,
        };
        match mode {
            DemodMode::Style => self.demodulation(prefix, cout, r),
            DemodMode::Trainable => {
                self.demodulation(prefix, cout, r);
                self.aux(format!("{prefix}.p_demod"), cin);
            }
            DemodMode::Fused | DemodMode::None => {}
        }
        if noise {
            self.aux(format!("{prefix}.noise_strength"), 1);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn dense(&mut self, prefix: &str, sd: u64, cin: u64, cout: u64, k: u64, r: u64, demod: bool, noise: bool) {
        self.affine(prefix, sd, cin);
        self.modulation(prefix, cin, r);
        self.push(
            format!("{prefix}.conv"),
            Some(LayerKind::Dense),
            count_layer(LayerKind::Dense, cin, cout, k, r, r),
        );
        if demod {
            self.demodulation(prefix, cout, r);
        }
        if noise {
            self.aux(format!("{prefix}.noise_strength"), 1);
        }
    }
}

/// Walks the generator layout implied by `config`.
pub fn count_network(config: &GeneratorConfig, opts: CountOptions) -> ComplexityReport {
    let mut w = Walker { opts, entries: vec![] };
    let sd = config.style_dim as u64;
    if opts.include_mapping {
        for i in 0..config.mapping_layers {
            w.push(
                format!("mapping.{i}"),
                Some(LayerKind::Linear),
                count_layer(LayerKind::Linear, sd, sd, 1, 1, 1),
            );
        }
    }
    let res = config.block_resolutions();
    let c0 = config.width(res[0]) as u64;
    let base = config.base_resolution as u64;
    w.push(
        "synthesis.const".into(),
        None,
        LayerCost {
            params: c0 * base * base,
            ..Default::default()
        },
    );
    let mut prev = c0;
    for (k, &r) in res.iter().enumerate() {
        let c = config.width(r) as u64;
        let r = r as u64;
        let p = |part: &str| format!("synthesis.b{k}.{part}");
        match config.variant {
            Variant::Mobile => {
                let mode = config.demod_mode();
                if k > 0 {
                    w.push(
                        p("idwt"),
                        Some(LayerKind::Idwt),
                        count_layer(LayerKind::Idwt, prev, prev / 4, 0, r, r),
                    );
                    w.ds(&p("conv_post_idwt"), sd, prev / 4, c, r, mode, true);
                }
                w.ds(&p("conv_main"), sd, c, c, r, mode, true);
                w.ds(&p("head"), sd, c, HEAD_CHANNELS as u64, r, DemodMode::None, false);
            }
            Variant::DenseBaseline => {
                if k > 0 {
                    w.dense(&p("conv_up"), sd, prev, c, 3, r, true, true);
                }
                w.dense(&p("conv"), sd, c, c, 3, r, true, true);
                w.dense(&p("to_rgb"), sd, c, 3, 1, r, false, false);
            }
        }
        prev = c;
    }
    if config.variant == Variant::Mobile {
        let last = 2 * *res.last().expect("validated") as u64;
        w.push(
            "synthesis.output_idwt".into(),
            Some(LayerKind::Idwt),
            count_layer(LayerKind::Idwt, 12, 3, 0, last, last),
        );
    }
    let total_params = w.entries.iter().map(|e| e.params).sum();
    let total_macs = w.entries.iter().map(|e| e.macs).sum();
    ComplexityReport {
        label: label(config),
        options: opts,
        per_layer: w.entries,
        total_params,
        total_macs,
    }
}

pub fn compare(a: &GeneratorConfig, b: &GeneratorConfig, opts: CountOptions) -> Comparison {
    let ra = count_network(a, opts);
    let rb = count_network(b, opts);
    Comparison {
        ratio_params: ra.total_params as f64 / rb.total_params as f64,
        ratio_macs: ra.total_macs as f64 / rb.total_macs as f64,
        a: ra,
        b: rb,
    }
}

fn table_row(out: &mut String, name: &str, params: &str, gmac: &str) {
    let _ = writeln!(out, "{name:<24} {params:>12} {gmac:>10}");
}

impl ComplexityReport {
    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gmac(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    /// Aligned totals table (`Network`, `#Params (M)`, `GMAC`).
    pub fn table(&self) -> String {
        let mut s = String::new();
        table_row(&mut s, "Network", "#Params (M)", "GMAC");
        table_row(
            &mut s,
            &self.label,
            &format!("{:.2}", self.params_millions()),
            &format!("{:.2}", self.gmac()),
        );
        s
    }

    /// Per-layer breakdown followed by the totals.
    pub fn detailed_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<44} {:>12} {:>16}", "layer", "params", "macs");
        for e in &self.per_layer {
            let _ = writeln!(s, "{:<44} {:>12} {:>16}", e.name, e.params, e.macs);
        }
        let _ = writeln!(s, "{:<44} {:>12} {:>16}", "total", self.total_params, self.total_macs);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl Comparison {
    pub fn table(&self) -> String {
        let mut s = String::new();
        table_row(&mut s, "Network", "#Params (M)", "GMAC");
        for r in [&self.a, &self.b] {
            table_row(
                &mut s,
                &r.label,
                &format!("{:.2}", r.params_millions()),
                &format!("{:.2}", r.gmac()),
            );
        }
        table_row(
            &mut s,
            "ratio (first / second)",
            &format!("{:.2}x", self.ratio_params),
            &format!("{:.2}x", self.ratio_macs),
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}
