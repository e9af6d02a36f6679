//! Inference-time graph rewrites and their verifier.
//!
//! Passes are pure `WeightContainer -> WeightContainer` functions.

use serde::{Deserialize, Serialize};

use crate::container::WeightContainer;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::modconv::{compute_demod_trainable, DemodMode, DsModConvParams};
use crate::tensor::Tensor;

/// Default verifier sample count.
pub const DEFAULT_VERIFY_SAMPLES: usize = 16;
/// Default verifier tolerance on max-abs divergence.
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// Counters produced by a single pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassStats {
    /// Scalars absorbed into neighbouring weights and dropped.
    pub params_folded: u64,
    /// Runtime nodes removed from the graph.
    pub nodes_removed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub passes_applied: Vec<String>,
    pub params_folded: u64,
    pub nodes_removed: u64,
    /// Set only once the verifier has run.
    pub max_abs_divergence: Option<f64>,
    /// `max_abs_divergence / max|reference|`.
    pub max_rel_divergence: Option<f64>,
    pub verified_samples: usize,
    pub tolerance: Option<f64>,
    pub passed: Option<bool>,
}

impl OptimizationReport {
    pub fn record(&mut self, pass: &str, stats: PassStats) {
        self.passes_applied.push(pass.to_string());
        self.params_folded += stats.params_folded;
        self.nodes_removed += stats.nodes_removed;
    }

    /// Copies the verification fields of `v` into `self`.
    pub fn absorb_verification(&mut self, v: &OptimizationReport) {
        self.max_abs_divergence = v.max_abs_divergence;
        self.max_rel_divergence = v.max_rel_divergence;
        self.verified_samples = v.verified_samples;
        self.tolerance = v.tolerance;
        self.passed = v.passed;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runtime nodes of one separable layer that folding can remove.
fn foldable_nodes(p: &DsModConvParams) -> u64 {
    let demod = matches!(p.demod_mode, DemodMode::Style | DemodMode::Trainable) as u64;
    demod + p.out_scales.len() as u64 + p.act_gain.is_some() as u64
}

fn scale_rows(w_pw: &mut Tensor, scale: &[f64]) {
    let cin = w_pw.shape()[1];
    for (row, &s) in w_pw.data_mut().chunks_mut(cin).zip(scale) {
        for v in row {
            *v *= s;
        }
    }
}

/// Multiplies each layer's trainable demodulation into its pointwise rows
/// and drops `p_demod`. Layers already fused, or without demodulation, are
/// left alone, so the pass is idempotent.
pub fn fuse_demodulation(c: &WeightContainer) -> Result<(WeightContainer, PassStats)> {
    if let Some((name, _)) = c.layers.iter().find(|(_, m)| **m == DemodMode::Style) {
        return Err(Error::NotFoldable {
            layer: name.clone(),
            reason: "style demodulation depends on the per-sample style".into(),
        });
    }
    let mut g = Generator::from_container(c)?;
    if g.ds_layers().is_empty() {
        return Err(Error::NotFoldable {
            layer: "synthesis".into(),
            reason: "the dense baseline demodulates from the style".into(),
        });
    }
    let mut stats = PassStats::default();
    for (_, p) in g.ds_layers_mut() {
        if p.demod_mode != DemodMode::Trainable {
            continue;
        }
        let pd = p.p_demod.take().expect("validated");
        let d = compute_demod_trainable(&p.w_dw, &p.w_pw, &pd)?;
        scale_rows(&mut p.w_pw, d.data());
        p.demod_mode = DemodMode::Fused;
        stats.params_folded += pd.len() as u64;
        stats.nodes_removed += 1;
    }
    Ok((g.to_container(), stats))
}

/// Collapses chained per-channel scales and pre-merges activation gains.
///
/// In layers whose demodulation no longer reads `w_pw` (fused or none),
/// output scales and a positive activation gain are multiplied into the
/// pointwise rows; the gain also scales bias and noise strength, which is
/// exact because leaky relu is positively homogeneous. In layers that still
/// demodulate at runtime a chain of output scales becomes one scale.
/// Mapping-layer gains are merged into that layer's weight and bias.
pub fn fold_constants(c: &WeightContainer) -> Result<(WeightContainer, PassStats)> {
    let mut g = Generator::from_container(c)?;
    let mut stats = PassStats::default();
    for l in &mut g.mapping {
        if let Some(gain) = l.act_gain.filter(|&v| v > 0.0) {
            l.weight = l.weight.scale(gain);
            l.bias = l.bias.scale(gain);
            l.act_gain = None;
            stats.params_folded += 1;
            stats.nodes_removed += 1;
        }
    }
    for (_, p) in g.ds_layers_mut() {
        let before = foldable_nodes(p);
        let folded_scalars: u64 =
            p.out_scales.iter().map(|s| s.len() as u64).sum::<u64>() + p.act_gain.is_some() as u64;
        let mut chain = p
            .out_scales
            .drain(..)
            .reduce(|a, b| a.zip_map(&b, "fold_constants", |x, y| x * y).expect("validated"));
        let mut kept_scalars = 0;
        match p.demod_mode {
            DemodMode::Fused | DemodMode::None => {
                let cout = p.cout();
                let mut rows = chain.take().unwrap_or_else(|| Tensor::ones(&[cout]));
                if let Some(gain) = p.act_gain.filter(|&v| v > 0.0) {
                    rows = rows.scale(gain);
                    p.bias = p.bias.scale(gain);
                    p.noise_strength = p.noise_strength.map(|k| k * gain);
                    p.act_gain = None;
                } else if p.act_gain.is_some() {
                    kept_scalars += 1;
                }
                scale_rows(&mut p.w_pw, rows.data());
            }
            DemodMode::Style | DemodMode::Trainable => {
                if let Some(s) = chain {
                    kept_scalars += s.len() as u64;
                    p.out_scales.push(s);
                }
                if p.act_gain.is_some() {
                    kept_scalars += 1;
                }
            }
        }
        stats.nodes_removed += before - foldable_nodes(p);
        stats.params_folded += folded_scalars - kept_scalars;
    }
    if stats == PassStats::default() {
        return Ok((c.clone(), stats));
    }
    Ok((g.to_container(), stats))
}

/// Runs both generators on `n_samples` shared `(z, noise)` draws and
/// compares unclamped final images.
pub fn verify_equivalence(
    a: &Generator,
    b: &Generator,
    n_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<OptimizationReport> {
    if a.config() != b.config() {
        return Err(Error::ConfigMismatch(format!(
            "graphs were built for different configs:\n{}\nvs\n{}",
            a.config().to_json(),
            b.config().to_json()
        )));
    }
    let mut max_abs = 0.0f64;
    let mut max_ref = 0.0f64;
    for i in 0..n_samples {
        let (z, noises) = a.sample_inputs(seed.wrapping_add(i as u64), 1);
        let (ya, yb) = run_pair(a, b, &z, &noises);
        let (ya, yb) = (ya?, yb?);
        let d = ya.max_abs_diff(&yb)?;
        max_abs = if d.is_nan() || max_abs.is_nan() {
            f64::NAN
        } else {
            max_abs.max(d)
        };
        max_ref = max_ref.max(ya.max_abs());
    }
    let rel = if max_ref > 0.0 { max_abs / max_ref } else { max_abs };
    Ok(OptimizationReport {
        max_abs_divergence: Some(max_abs),
        max_rel_divergence: Some(rel),
        verified_samples: n_samples,
        tolerance: Some(tol),
        passed: Some(max_abs <= tol),
        ..Default::default()
    })
}

#[cfg(feature = "parallel")]
fn run_pair(a: &Generator, b: &Generator, z: &Tensor, noises: &[Tensor]) -> (Result<Tensor>, Result<Tensor>) {
    rayon::join(|| a.forward(z, noises), || b.forward(z, noises))
}

#[cfg(not(feature = "parallel"))]
fn run_pair(a: &Generator, b: &Generator, z: &Tensor, noises: &[Tensor]) -> (Result<Tensor>, Result<Tensor>) {
    (a.forward(z, noises), b.forward(z, noises))
}

/// Fusion, constant folding, then verification against the input graph.
pub fn optimize(
    c: &WeightContainer,
    verify_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<(WeightContainer, OptimizationReport)> {
    let mut report = OptimizationReport::default();
    let (fused, s) = fuse_demodulation(c)?;
    report.record("fuse_demodulation", s);
    let (folded, s) = fold_constants(&fused)?;
    report.record("fold_constants", s);
    let before = Generator::from_container(c)?;
    let after = Generator::from_container(&folded)?;
    let v = verify_equivalence(&before, &after, verify_samples, tol, seed)?;
    report.absorb_verification(&v);
    Ok((folded, report))
}
