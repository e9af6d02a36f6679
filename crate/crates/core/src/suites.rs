//! Self-checks runnable from the command line.

use serde::{Deserialize, Serialize};

use crate::config::GeneratorConfig;
use crate::container::WeightContainer;
use crate::error::Result;
use crate::generator::{init_random, Generator};
use crate::losses::{
    discriminator_gan_loss, f_printed, finite_difference_grad_sqnorm, full_objective, pixel_distillation_loss, GanForm,
    LossParts, LossWeights, QuadraticDiscriminator,
};
use crate::modconv::{compose_dense, ds_modconv_forward, DemodMode, DsModConvParams, StyleAffine, StyleVector};
use crate::ops;
use crate::optimize::{fuse_demodulation, verify_equivalence};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::wavelet::{build_pyramid, dwt2, idwt2, idwt2_addonly, idwt2_addonly_counted, WaveletPyramid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Wavelet,
    Modconv,
    Fusion,
    Losses,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Wavelet, Suite::Modconv, Suite::Fusion, Suite::Losses];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Wavelet => "wavelet",
            Suite::Modconv => "modconv",
            Suite::Fusion => "fusion",
            Suite::Losses => "losses",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Human-readable acceptance condition.
    pub tolerance: String,
    pub measured: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn at_most(name: &str, measured: f64, tol: f64) -> Check {
    Check {
        name: name.into(),
        tolerance: format!("<= {tol:e}"),
        measured,
        passed: measured <= tol,
    }
}

fn exact(name: &str, ok: bool) -> Check {
    Check {
        name: name.into(),
        tolerance: "exact".into(),
        measured: if ok { 0.0 } else { 1.0 },
        passed: ok,
    }
}

fn uint8_image(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.below(256) as f64)
}

fn wavelet_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut bitwise = true;
    let mut muls = 0;
    for _ in 0..20 {
        let img = uint8_image(&mut rng, &[1, 3, 64, 64]);
        let w = dwt2(&img)?;
        worst = worst.max(idwt2(&w).max_abs_diff(&img)?);
        let (add_only, counts) = idwt2_addonly_counted(&w);
        bitwise &= add_only.bit_eq(&idwt2(&w)) && add_only.bit_eq(&idwt2_addonly(&w));
        muls += counts.muls;
    }
    Ok(vec![
        at_most("round trip max abs error", worst, 1e-12),
        exact("add-only inverse bitwise equal", bitwise),
        at_most("add-only inverse multiplications", muls as f64, 0.0),
    ])
}

fn random_layer(rng: &mut Rng, cin: usize, cout: usize, sd: usize, mode: DemodMode) -> DsModConvParams {
    DsModConvParams {
        w_dw: rng.normal_tensor(&[cin, 1, 3, 3], 1.0 / 3.0),
        w_pw: rng.normal_tensor(&[cout, cin, 1, 1], 1.0 / (cin as f64).sqrt()),
        bias: Tensor::zeros(&[cout]),
        affine: StyleAffine {
            weight: rng.normal_tensor(&[cin, sd], 1.0 / (sd as f64).sqrt()),
            bias: Tensor::ones(&[cin]),
        },
        p_demod: None,
        demod_mode: mode,
        noise_strength: None,
        activation: None,
        out_scales: vec![],
        act_gain: None,
    }
}

fn modconv_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut worst_rel = 0.0f64;
    for _ in 0..20 {
        let cin = 1 + rng.below(8) as usize;
        let cout = 1 + rng.below(8) as usize;
        let w_dw = rng.normal_tensor(&[cin, 1, 3, 3], 1.0);
        let w_pw = rng.normal_tensor(&[cout, cin, 1, 1], 1.0);
        let x = rng.normal_tensor(&[1, cin, 6, 6], 1.0);
        let sep = ops::conv2d_pointwise(&ops::conv2d_depthwise(&x, &w_dw, 1)?, &w_pw)?;
        let dense = ops::conv2d_dense(&x, &compose_dense(&w_dw, &w_pw)?, 1, 1)?;
        let scale = dense.max_abs().max(f64::MIN_POSITIVE);
        worst_rel = worst_rel.max(sep.max_abs_diff(&dense)? / scale);
    }

    let (cin, cout, sd, n) = (6, 5, 8, 4000);
    let p = random_layer(&mut rng, cin, cout, sd, DemodMode::Style);
    let style = StyleVector::new(rng.normal_tensor(&[n, sd], 1.0))?;
    let x = rng.normal_tensor(&[n, cin, 3, 3], 1.0);
    let y = ds_modconv_forward(&x, &style, &p, None)?;
    let mut worst_std = 0.0f64;
    for j in 0..cout {
        let vals: Vec<f64> = (0..n).map(|b| y.at4(b, j, 1, 1)).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        worst_std = worst_std.max((var.sqrt() - 1.0).abs());
    }
    Ok(vec![
        at_most("separable vs composed dense (relative)", worst_rel, 1e-10),
        at_most("demodulated output |std - 1|", worst_std, 0.2),
    ])
}

fn fusion_checks(inputs: &SuiteInputs, seed: u64) -> Result<Vec<Check>> {
    let owned;
    let c = match inputs.weights {
        Some(c) => c,
        None => {
            owned = init_random(&GeneratorConfig::mobile_64(), seed)?;
            &owned
        }
    };
    let fused = match inputs.fused {
        Some(f) => f.clone(),
        None => fuse_demodulation(c)?.0,
    };
    let (again, _) = fuse_demodulation(&fused)?;
    let a = Generator::from_container(c)?;
    let b = Generator::from_container(&fused)?;
    let r = verify_equivalence(&a, &b, 16, 1e-10, seed)?;
    let non_finite = !(0..2u64).all(|i| {
        let (z, noises) = a.sample_inputs(seed.wrapping_add(i), 1);
        a.forward(&z, &noises).map(|t| t.all_finite()).unwrap_or(false)
    });
    let (z, noises) = a.sample_inputs(seed, 1);
    let ops_before = a.forward_tallied(&z, &noises)?.1.macs;
    let ops_after = b.forward_tallied(&z, &noises)?.1.macs;
    Ok(vec![
        at_most(
            "fused vs unfused max abs divergence",
            r.max_abs_divergence.unwrap_or(f64::NAN),
            1e-10,
        ),
        exact("reference output finite", !non_finite),
        exact("fusion idempotent (bitwise)", again.bit_eq(&fused)),
        Check {
            name: "fused forward arithmetic ops".into(),
            tolerance: format!("< unfused ({ops_before})"),
            measured: ops_after as f64,
            passed: ops_after < ops_before,
        },
    ])
}

fn loss_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let teacher = build_pyramid(&rng.normal_tensor(&[1, 3, 32, 32], 1.0), 3)?.images();
    let student = WaveletPyramid::from_wavelets(teacher.iter().map(dwt2).collect::<Result<Vec<_>>>()?)?;
    let pix = pixel_distillation_loss(&student, &teacher)?.total;

    let f0 = (f_printed(0.0) + std::f64::consts::LN_2).abs();

    let d = 4;
    let m = rng.normal_tensor(&[d, d], 1.0);
    let a = (0..d * d)
        .map(|k| 0.5 * (m.data()[k] + m.data()[(k % d) * d + k / d]))
        .collect();
    let disc = QuadraticDiscriminator {
        a,
        b: rng.normal_tensor(&[d], 1.0).into_data(),
    };
    let x = rng.normal_tensor(&[d], 1.0).into_data();
    let fd = finite_difference_grad_sqnorm(|p| disc.score(p), &x, 1e-5);
    let r1 = (fd - disc.grad_sqnorm(&x)).abs();

    let parts = LossParts {
        pixel: 2.0,
        perceptual: 3.0,
        generator_gan: 10.0,
        discriminator: 0.0,
    };
    let (obj, _) = full_objective(parts, LossWeights::default())?;
    let z = Tensor::zeros(&[2]);
    let d2 = discriminator_gan_loss(&z, &z, &Tensor::ones(&[2]), 2.0, GanForm::Printed)?;
    Ok(vec![
        at_most("pixel loss on matched pyramids", pix.abs(), 1e-12),
        at_most("|f(0) + log 2|", f0, 1e-12),
        at_most("R1 finite difference vs analytic", r1, 1e-6),
        exact("objective (1, 1, 0.1) on (2, 3, 10) == 6", obj == 6.0),
        at_most(
            "discriminator loss gamma=2 identity",
            (d2 - (1.0 - 2.0 * std::f64::consts::LN_2)).abs(),
            1e-12,
        ),
    ])
}

/// Optional inputs for the fusion suite.
#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteInputs<'a> {
    /// Unfused weights; a random mobile generator when absent.
    pub weights: Option<&'a WeightContainer>,
    /// A previously fused version of `weights` to check instead of fusing
    /// afresh.
    pub fused: Option<&'a WeightContainer>,
}

/// Runs one suite. Errors inside a suite become a failed check rather than
/// an `Err`.
pub fn run_suite(suite: Suite, inputs: &SuiteInputs, seed: u64) -> SuiteReport {
    let result = match suite {
        Suite::Wavelet => wavelet_checks(seed),
        Suite::Modconv => modconv_checks(seed),
        Suite::Fusion => fusion_checks(inputs, seed),
        Suite::Losses => loss_checks(seed),
    };
    let checks = result.unwrap_or_else(|e| {
        vec![Check {
            name: format!("suite raised: {e}"),
            tolerance: "no error".into(),
            measured: f64::NAN,
            passed: false,
        }]
    });
    SuiteReport {
        suite,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_on_defaults() {
        for s in Suite::ALL {
            let r = run_suite(s, &SuiteInputs::default(), 0);
            assert!(r.passed, "{r:#?}");
        }
    }

    #[test]
    fn corrupted_weights_fail_fusion() {
        let mut c = init_random(&GeneratorConfig::mobile_64(), 1).unwrap();
        c.get_mut("synthesis.b1.conv_main.pw").unwrap().data_mut()[3] = f64::NAN;
        let inputs = SuiteInputs {
            weights: Some(&c),
            fused: None,
        };
        assert!(!run_suite(Suite::Fusion, &inputs, 0).passed);
    }

    #[test]
    fn corrupted_fused_file_fails_fusion() {
        let c = init_random(&GeneratorConfig::mobile_64(), 1).unwrap();
        let (mut f, _) = fuse_demodulation(&c).unwrap();
        f.get_mut("synthesis.b2.conv_post_idwt.dw").unwrap().data_mut()[0] += 1e-3;
        let inputs = SuiteInputs {
            weights: Some(&c),
            fused: Some(&f),
        };
        let r = run_suite(Suite::Fusion, &inputs, 0);
        assert!(!r.passed);
        assert!(!r.checks[0].passed);
    }
}
