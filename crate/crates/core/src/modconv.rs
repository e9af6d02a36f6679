//! Modulated convolutions.
//!
//! Modulation scales input activations by a style-derived vector `s`,
//! demodulation rescales each output channel by
//! `1 / sqrt(sum_{i,k} (s_i * w'_{j,i,k})^2 + eps)` where `w'` is the
//! effective dense kernel. In the depthwise-separable form `w'` is the
//! composition of the 3x3 depthwise and 1x1 pointwise kernels.
//!
//! Per-layer runtime order: modulate, depthwise, pointwise, demodulate,
//! pending output scales, bias, noise, activation, activation gain.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::exec::Exec;
use crate::ops;
use crate::tensor::Tensor;

/// Guard inside the demodulation square root.
pub const DEMOD_EPS: f64 = 1e-8;

/// Depthwise kernel extent.
pub const DW_KERNEL: usize = 3;

/// How a layer demodulates its output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemodMode {
    /// Coefficients computed from the per-sample style.
    Style,
    /// Coefficients computed from learned constants `p_demod`.
    Trainable,
    /// Coefficients already multiplied into the pointwise weights.
    Fused,
    None,
}

impl DemodMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DemodMode::Style => "style",
            DemodMode::Trainable => "trainable",
            DemodMode::Fused => "fused",
            DemodMode::None => "none",
        }
    }
}

/// Style vectors `[N, style_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector(Tensor);

impl StyleVector {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims2("StyleVector")?;
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Affine projection from the style vector to per-input-channel scales.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleAffine {
    /// `[Cin, style_dim]`
    pub weight: Tensor,
    /// `[Cin]`
    pub bias: Tensor,
}

impl StyleAffine {
    pub fn apply(&self, style: &StyleVector) -> Result<Tensor> {
        ops::linear(style.tensor(), &self.weight, &self.bias)
    }
}

/// Tally of multiplications a forward pass actually executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpTally {
    pub macs: u64,
}

impl OpTally {
    pub fn add(&mut self, n: usize) {
        self.macs += n as u64;
    }
}

/// Depthwise-separable modulated convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DsModConvParams {
    /// `[Cin, 1, 3, 3]`
    pub w_dw: Tensor,
    /// `[Cout, Cin, 1, 1]`
    pub w_pw: Tensor,
    /// `[Cout]`
    pub bias: Tensor,
    pub affine: StyleAffine,
    /// `[Cin]`, present exactly when `demod_mode` is `Trainable`.
    pub p_demod: Option<Tensor>,
    pub demod_mode: DemodMode,
    /// Per-pixel noise strength, if this layer injects noise.
    pub noise_strength: Option<f64>,
    /// Leaky-relu slope, if this layer is followed by an activation.
    pub activation: Option<f64>,
    /// Per-output-channel `[Cout]` scales applied after demodulation and
    /// before the bias. Left by exporters; removed by constant folding.
    pub out_scales: Vec<Tensor>,
    /// Scalar gain applied after the activation.
    pub act_gain: Option<f64>,
}

impl DsModConvParams {
    pub fn cin(&self) -> usize {
        self.w_dw.shape()[0]
    }

    pub fn cout(&self) -> usize {
        self.w_pw.shape()[0]
    }

    /// Checks shapes and the mode/parameter pairing.
    pub fn validate(&self, name: &str) -> Result<()> {
        const OP: &str = "DsModConvParams";
        let cin = self.cin();
        let cout = self.cout();
        let ok = self.w_dw.shape() == [cin, 1, DW_KERNEL, DW_KERNEL]
            && self.w_pw.shape() == [cout, cin, 1, 1]
            && self.bias.shape() == [cout]
            && self.affine.weight.rank() == 2
            && self.affine.weight.shape()[0] == cin
            && self.affine.bias.shape() == [cin]
            && self.out_scales.iter().all(|s| s.shape() == [cout]);
        if !ok {
            return Err(shape_err(
                OP,
                format!(
                    "{name}: w_dw {:?}, w_pw {:?}, bias {:?}, affine {:?}/{:?}",
                    self.w_dw.shape(),
                    self.w_pw.shape(),
                    self.bias.shape(),
                    self.affine.weight.shape(),
                    self.affine.bias.shape()
                ),
            ));
        }
        match (self.demod_mode, &self.p_demod) {
            (DemodMode::Trainable, None) => Err(invalid(OP, format!("{name}: trainable demodulation without p_demod"))),
            (DemodMode::Trainable, Some(p)) => {
                if p.shape() != [cin] {
                    return Err(shape_err(
                        OP,
                        format!("{name}: p_demod {:?}, expected [{cin}]", p.shape()),
                    ));
                }
                if p.data().iter().any(|&v| v <= 0.0 || !v.is_finite()) {
                    return Err(invalid(OP, format!("{name}: p_demod must be strictly positive")));
                }
                Ok(())
            }
            (DemodMode::Fused, Some(_)) => Err(invalid(
                OP,
                format!(
                    "{name}: fused layer still carries a runtime demodulation (p_demod); its weights already absorb it"
                ),
            )),
            (_, Some(_)) => Err(invalid(
                OP,
                format!("{name}: p_demod given but mode is {}", self.demod_mode.as_str()),
            )),
            _ => Ok(()),
        }
    }
}

/// `x'[n, i] = s[n, i] * x[n, i]`.
pub fn modulate(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    ops::scale_channels(x, s)
}

/// Dense kernel equivalent to depthwise followed by pointwise:
/// `w[j, i, :, :] = w_pw[j, i] * w_dw[i, 0, :, :]`.
pub fn compose_dense(w_dw: &Tensor, w_pw: &Tensor) -> Result<Tensor> {
    const OP: &str = "compose_dense";
    let (cin, one, kh, kw) = w_dw.dims4(OP)?;
    let (cout, pcin, ph, pw) = w_pw.dims4(OP)?;
    if one != 1 || pcin != cin || ph != 1 || pw != 1 {
        return Err(shape_err(
            OP,
            format!("depthwise {:?} vs pointwise {:?}", w_dw.shape(), w_pw.shape()),
        ));
    }
    let k = kh * kw;
    let mut out = Tensor::zeros(&[cout, cin, kh, kw]);
    let (dw, pwd) = (w_dw.data(), w_pw.data());
    for (idx, taps) in out.data_mut().chunks_mut(k).enumerate() {
        let (j, i) = (idx / cin, idx % cin);
        let p = pwd[j * cin + i];
        for (t, &d) in taps.iter_mut().zip(&dw[i * k..(i + 1) * k]) {
            *t = p * d;
        }
    }
    Ok(out)
}

/// Demodulation coefficients for a dense kernel `[Cout, Cin, k, k]` and
/// scales `s: [N, Cin]`, giving `[N, Cout]`.
pub fn demod_from_dense(w_dense: &Tensor, s: &Tensor) -> Result<Tensor> {
    const OP: &str = "compute_demod";
    let (cout, cin, kh, kw) = w_dense.dims4(OP)?;
    let (n, sc) = s.dims2(OP)?;
    if sc != cin {
        return Err(shape_err(
            OP,
            format!("kernel {:?} vs style scales {:?}", w_dense.shape(), s.shape()),
        ));
    }
    let k = kh * kw;
    let wd = w_dense.data();
    let ss = s.data();
    let mut out = Tensor::zeros(&[n, cout]);
    for (idx, o) in out.data_mut().iter_mut().enumerate() {
        let (b, j) = (idx / cout, idx % cout);
        let mut acc = 0.0;
        for i in 0..cin {
            let si = ss[b * cin + i];
            for &w in &wd[(j * cin + i) * k..(j * cin + i + 1) * k] {
                let v = si * w;
                acc += v * v;
            }
        }
        *o = 1.0 / (acc + DEMOD_EPS).sqrt();
    }
    Ok(out)
}

/// Style-dependent demodulation `[N, Cout]` for a separable layer.
pub fn compute_demod(w_dw: &Tensor, w_pw: &Tensor, s: &Tensor) -> Result<Tensor> {
    demod_from_dense(&compose_dense(w_dw, w_pw)?, s)
}

/// Style-independent demodulation `[Cout]` using learned constants in
/// place of the style scales.
pub fn compute_demod_trainable(w_dw: &Tensor, w_pw: &Tensor, p_demod: &Tensor) -> Result<Tensor> {
    let cin = w_dw.shape()[0];
    if p_demod.shape() != [cin] {
        return Err(shape_err(
            "compute_demod_trainable",
            format!("p_demod {:?} vs depthwise {:?}", p_demod.shape(), w_dw.shape()),
        ));
    }
    let s = p_demod.clone().reshape(&[1, cin])?;
    let d = compute_demod(w_dw, w_pw, &s)?;
    let cout = d.shape()[1];
    d.reshape(&[cout])
}

/// Bias, noise, activation and gain: the tail shared by both conv kinds.
fn epilogue(
    mut y: Tensor,
    bias: &Tensor,
    noise_strength: Option<f64>,
    noise: Option<&Tensor>,
    activation: Option<f64>,
    act_gain: Option<f64>,
    tally: &mut OpTally,
) -> Result<Tensor> {
    y = ops::add_channel_bias(&y, bias)?;
    match (noise_strength, noise) {
        (Some(k), Some(z)) => {
            y = ops::noise_inject(&y, z, k)?;
            tally.add(z.len());
        }
        (None, Some(_)) => {
            return Err(invalid("modconv", "noise supplied to a layer without noise injection"));
        }
        _ => {}
    }
    if let Some(slope) = activation {
        y = ops::leaky_relu(&y, slope);
    }
    if let Some(g) = act_gain {
        y = y.scale(g);
        tally.add(y.len());
    }
    Ok(y)
}

/// Forward pass of a depthwise-separable modulated convolution.
pub fn ds_modconv_forward(
    x: &Tensor,
    style: &StyleVector,
    params: &DsModConvParams,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    ds_modconv_forward_with(x, style, params, noise, Exec::default(), &mut OpTally::default())
}

pub fn ds_modconv_forward_with(
    x: &Tensor,
    style: &StyleVector,
    params: &DsModConvParams,
    noise: Option<&Tensor>,
    exec: Exec,
    tally: &mut OpTally,
) -> Result<Tensor> {
    params.validate("ds_modconv")?;
    let (n, cin, h, w) = x.dims4("ds_modconv_forward")?;
    if cin != params.cin() || style.batch() != n {
        return Err(shape_err(
            "ds_modconv_forward",
            format!(
                "input {:?} / style {:?} vs layer Cin={}",
                x.shape(),
                style.tensor().shape(),
                params.cin()
            ),
        ));
    }
    let cout = params.cout();
    let hw = h * w;
    let s = params.affine.apply(style)?;
    tally.add(n * params.affine.weight.len());
    let x1 = modulate(x, &s)?;
    tally.add(n * cin * hw);
    let x2 = ops::conv2d_depthwise_with(&x1, &params.w_dw, DW_KERNEL / 2, exec)?;
    tally.add(n * cin * hw * DW_KERNEL * DW_KERNEL);
    let mut y = ops::conv2d_pointwise_with(&x2, &params.w_pw, exec)?;
    tally.add(n * cout * cin * hw);

    let k = DW_KERNEL * DW_KERNEL;
    match params.demod_mode {
        DemodMode::Style => {
            let d = compute_demod(&params.w_dw, &params.w_pw, &s)?;
            tally.add(cout * cin * k + 2 * n * cout * cin * k);
            y = ops::scale_channels(&y, &d)?;
            tally.add(n * cout * hw);
        }
        DemodMode::Trainable => {
            let p = params.p_demod.as_ref().expect("validated");
            let d = compute_demod_trainable(&params.w_dw, &params.w_pw, p)?;
            tally.add(cout * cin * k + 2 * cout * cin * k);
            y = ops::scale_channels(&y, &d)?;
            tally.add(n * cout * hw);
        }
        DemodMode::Fused | DemodMode::None => {}
    }
    for sc in &params.out_scales {
        y = ops::scale_channels(&y, sc)?;
        tally.add(n * cout * hw);
    }
    epilogue(
        y,
        &params.bias,
        params.noise_strength,
        noise,
        params.activation,
        params.act_gain,
        tally,
    )
}

/// Dense modulated convolution in the StyleGAN2 form.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseModConvParams {
    /// `[Cout, Cin, k, k]` with odd `k`.
    pub weight: Tensor,
    /// `[Cout]`
    pub bias: Tensor,
    pub affine: StyleAffine,
    /// Style demodulation on or off.
    pub demodulate: bool,
    pub noise_strength: Option<f64>,
    pub activation: Option<f64>,
}

impl DenseModConvParams {
    pub fn cin(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Modulate, dense convolution, demodulate with the dense kernel directly.
pub fn modconv_dense_forward(
    x: &Tensor,
    style: &StyleVector,
    params: &DenseModConvParams,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    modconv_dense_forward_with(x, style, params, noise, Exec::default(), &mut OpTally::default())
}

pub fn modconv_dense_forward_with(
    x: &Tensor,
    style: &StyleVector,
    params: &DenseModConvParams,
    noise: Option<&Tensor>,
    exec: Exec,
    tally: &mut OpTally,
) -> Result<Tensor> {
    let (n, cin, h, w) = x.dims4("modconv_dense_forward")?;
    let k = params.kernel();
    let s = params.affine.apply(style)?;
    tally.add(n * params.affine.weight.len());
    let x1 = modulate(x, &s)?;
    tally.add(n * cin * h * w);
    let mut y = ops::conv2d_dense_with(&x1, &params.weight, 1, k / 2, exec)?;
    tally.add(n * params.weight.len() * h * w);
    if params.demodulate {
        let d = demod_from_dense(&params.weight, &s)?;
        tally.add(2 * n * params.weight.len());
        y = ops::scale_channels(&y, &d)?;
        tally.add(y.len());
    }
    epilogue(
        y,
        &params.bias,
        params.noise_strength,
        noise,
        params.activation,
        None,
        tally,
    )
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn eye_pw(c: usize) -> Tensor {
        Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 })
    }

    fn identity_dw(c: usize) -> Tensor {
        Tensor::from_fn(&[c, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 })
    }

    fn random_params(rng: &mut Rng, cin: usize, cout: usize, sd: usize, mode: DemodMode) -> DsModConvParams {
        DsModConvParams {
            w_dw: rng.normal_tensor(&[cin, 1, 3, 3], 1.0 / 3.0),
            w_pw: rng.normal_tensor(&[cout, cin, 1, 1], 1.0 / (cin as f64).sqrt()),
            bias: rng.normal_tensor(&[cout], 0.1),
            affine: StyleAffine {
                weight: rng.normal_tensor(&[cin, sd], 1.0 / (sd as f64).sqrt()),
                bias: Tensor::ones(&[cin]),
            },
            p_demod: (mode == DemodMode::Trainable).then(|| rng.uniform_tensor(&[cin], 0.5, 1.5)),
            demod_mode: mode,
            noise_strength: None,
            activation: None,
            out_scales: vec![],
            act_gain: None,
        }
    }

    #[test]
    fn modulate_cases() {
        let mut rng = Rng::new(1);
        let x = rng.normal_tensor(&[2, 3, 4, 4], 1.0);
        assert_eq!(modulate(&x, &Tensor::ones(&[2, 3])).unwrap(), x);
        assert_eq!(modulate(&x, &Tensor::full(&[2, 3], 2.0)).unwrap(), x.scale(2.0));
        let s = rng.normal_tensor(&[2, 3], 1.0);
        let y = modulate(&x, &s).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for r in 0..4 {
                    for k in 0..4 {
                        assert_eq!(y.at4(b, c, r, k), s.data()[b * 3 + c] * x.at4(b, c, r, k));
                    }
                }
            }
        }
    }

    #[test]
    fn compose_scalar_and_identity_cases() {
        let mut rng = Rng::new(2);
        let k = rng.normal_tensor(&[1, 1, 3, 3], 1.0);
        let p = Tensor::full(&[1, 1, 1, 1], -1.5);
        assert_eq!(compose_dense(&k, &p).unwrap(), k.scale(-1.5));

        let dw = rng.normal_tensor(&[4, 1, 3, 3], 1.0);
        let dense = compose_dense(&dw, &eye_pw(4)).unwrap();
        for j in 0..4 {
            for i in 0..4 {
                for t in 0..9 {
                    let want = if i == j { dw.data()[i * 9 + t] } else { 0.0 };
                    assert_eq!(dense.data()[(j * 4 + i) * 9 + t], want);
                }
            }
        }
    }

    #[test]
    fn separable_equals_composed_dense() {
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor(&[2, 3, 6, 6], 1.0);
        let dw = rng.normal_tensor(&[3, 1, 3, 3], 1.0);
        let pw = rng.normal_tensor(&[2, 3, 1, 1], 1.0);
        let seq = ops::conv2d_pointwise(&ops::conv2d_depthwise(&x, &dw, 1).unwrap(), &pw).unwrap();
        let dense = ops::conv2d_dense(&x, &compose_dense(&dw, &pw).unwrap(), 1, 1).unwrap();
        assert!(seq.max_abs_diff(&dense).unwrap() / dense.max_abs() <= 1e-10);
    }

    #[test]
    fn demod_single_tap_hand_value() {
        let mut dw = Tensor::zeros(&[1, 1, 3, 3]);
        dw.data_mut()[4] = 3.0;
        let pw = Tensor::ones(&[1, 1, 1, 1]);
        let d = compute_demod(&dw, &pw, &Tensor::full(&[1, 1], 2.0)).unwrap();
        let want = 1.0 / (36.0f64 + 1e-8).sqrt();
        assert_eq!(d.data()[0], want);
        assert!((d.data()[0] - 0.1666667).abs() < 1e-7);
    }

    #[test]
    fn demod_zero_style_is_inverse_sqrt_eps() {
        let mut rng = Rng::new(4);
        let dw = rng.normal_tensor(&[3, 1, 3, 3], 1.0);
        let pw = rng.normal_tensor(&[5, 3, 1, 1], 1.0);
        let d = compute_demod(&dw, &pw, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(d.data().iter().all(|&v| v == 1.0 / DEMOD_EPS.sqrt()));
    }

    #[test]
    fn demod_matches_brute_force_loop() {
        let mut rng = Rng::new(5);
        let (cin, cout, n) = (4, 3, 2);
        let dw = rng.normal_tensor(&[cin, 1, 3, 3], 1.0);
        let pw = rng.normal_tensor(&[cout, cin, 1, 1], 1.0);
        let s = rng.normal_tensor(&[n, cin], 1.0);
        let d = compute_demod(&dw, &pw, &s).unwrap();
        for b in 0..n {
            for j in 0..cout {
                let mut acc = 0.0;
                for i in 0..cin {
                    for k in 0..9 {
                        let wprime = pw.data()[j * cin + i] * dw.data()[i * 9 + k];
                        acc += (s.data()[b * cin + i] * wprime).powi(2);
                    }
                }
                let want = 1.0 / (acc + DEMOD_EPS).sqrt();
                assert!((d.data()[b * cout + j] - want).abs() <= 1e-12 * want);
            }
        }
    }

    #[test]
    fn trainable_demod_substitution_and_weight_norm() {
        let mut rng = Rng::new(6);
        let dw = rng.normal_tensor(&[3, 1, 3, 3], 1.0);
        let pw = rng.normal_tensor(&[2, 3, 1, 1], 1.0);
        let p = rng.uniform_tensor(&[3], 0.5, 2.0);
        let t = compute_demod_trainable(&dw, &pw, &p).unwrap();
        let s = compute_demod(&dw, &pw, &p.clone().reshape(&[1, 3]).unwrap()).unwrap();
        assert_eq!(t.data(), s.data());

        let ones = compute_demod_trainable(&dw, &pw, &Tensor::ones(&[3])).unwrap();
        let dense = compose_dense(&dw, &pw).unwrap();
        for j in 0..2 {
            let norm2: f64 = dense.data()[j * 27..(j + 1) * 27].iter().map(|v| v * v).sum();
            assert!((ones.data()[j] - 1.0 / (norm2 + DEMOD_EPS).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn full_identity_chain() {
        let mut rng = Rng::new(7);
        let c = 3;
        let x = rng.normal_tensor(&[2, c, 5, 5], 1.0);
        let params = DsModConvParams {
            w_dw: identity_dw(c),
            w_pw: eye_pw(c),
            bias: Tensor::zeros(&[c]),
            affine: StyleAffine {
                weight: Tensor::zeros(&[c, 4]),
                bias: Tensor::ones(&[c]),
            },
            p_demod: None,
            demod_mode: DemodMode::None,
            noise_strength: Some(0.7),
            activation: Some(1.0),
            out_scales: vec![],
            act_gain: None,
        };
        let style = StyleVector::new(rng.normal_tensor(&[2, 4], 1.0)).unwrap();
        let zero_noise = Tensor::zeros(&[2, 1, 5, 5]);
        let y = ds_modconv_forward(&x, &style, &params, Some(&zero_noise)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn fused_mode_rejects_runtime_demod() {
        let mut rng = Rng::new(8);
        let mut p = random_params(&mut rng, 3, 2, 4, DemodMode::Fused);
        p.p_demod = Some(Tensor::ones(&[3]));
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let style = StyleVector::new(Tensor::zeros(&[1, 4])).unwrap();
        assert!(ds_modconv_forward(&x, &style, &p, None).is_err());
    }

    #[test]
    fn trainable_requires_positive_p_demod() {
        let mut rng = Rng::new(9);
        let mut p = random_params(&mut rng, 3, 2, 4, DemodMode::Trainable);
        p.p_demod = Some(Tensor::new(vec![3], vec![1.0, 0.0, 1.0]).unwrap());
        assert!(p.validate("t").is_err());
    }

    #[test]
    fn dense_equals_separable_in_style_mode() {
        let mut rng = Rng::new(10);
        let p = random_params(&mut rng, 4, 5, 6, DemodMode::Style);
        let dense = DenseModConvParams {
            weight: compose_dense(&p.w_dw, &p.w_pw).unwrap(),
            bias: p.bias.clone(),
            affine: p.affine.clone(),
            demodulate: true,
            noise_strength: None,
            activation: None,
        };
        let x = rng.normal_tensor(&[3, 4, 7, 7], 1.0);
        let style = StyleVector::new(rng.normal_tensor(&[3, 6], 1.0)).unwrap();
        let a = ds_modconv_forward(&x, &style, &p, None).unwrap();
        let b = modconv_dense_forward(&x, &style, &dense, None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() / b.max_abs() <= 1e-10);
    }

    #[test]
    fn dense_forward_matches_brute_force() {
        let mut rng = Rng::new(11);
        let (cin, cout, sd, hw) = (2, 3, 4, 4);
        let params = DenseModConvParams {
            weight: rng.normal_tensor(&[cout, cin, 3, 3], 1.0),
            bias: rng.normal_tensor(&[cout], 1.0),
            affine: StyleAffine {
                weight: rng.normal_tensor(&[cin, sd], 1.0),
                bias: Tensor::ones(&[cin]),
            },
            demodulate: true,
            noise_strength: None,
            activation: Some(0.2),
        };
        let x = rng.normal_tensor(&[1, cin, hw, hw], 1.0);
        let style = StyleVector::new(rng.normal_tensor(&[1, sd], 1.0)).unwrap();
        let got = modconv_dense_forward(&x, &style, &params, None).unwrap();

        let sv = style.tensor().data();
        let s: Vec<f64> = (0..cin)
            .map(|i| {
                (0..sd)
                    .map(|t| params.affine.weight.data()[i * sd + t] * sv[t])
                    .sum::<f64>()
                    + 1.0
            })
            .collect();
        for j in 0..cout {
            let mut norm = 0.0;
            for i in 0..cin {
                for k in 0..9 {
                    norm += (s[i] * params.weight.data()[(j * cin + i) * 9 + k]).powi(2);
                }
            }
            let demod = 1.0 / (norm + DEMOD_EPS).sqrt();
            for r in 0..hw {
                for c in 0..hw {
                    let mut acc = 0.0;
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (yy, xx) = (r as isize + ky as isize - 1, c as isize + kx as isize - 1);
                                if yy < 0 || xx < 0 || yy >= hw as isize || xx >= hw as isize {
                                    continue;
                                }
                                acc += s[i] * x.at4(0, i, yy as usize, xx as usize) * params.weight.at4(j, i, ky, kx);
                            }
                        }
                    }
                    let v = demod * acc + params.bias.data()[j];
                    let want = if v >= 0.0 { v } else { 0.2 * v };
                    assert!((got.at4(0, j, r, c) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn style_demod_normalizes_output_statistics() {
        // Monte-Carlo: unit-variance inputs, centre pixel of a 3x3 map so
        // the whole kernel footprint is inside the image.
        let mut rng = Rng::new(12);
        let (cin, cout, sd, n) = (6, 5, 8, 10_000);
        let p = random_params(&mut rng, cin, cout, sd, DemodMode::Style);
        let style = StyleVector::new(rng.normal_tensor(&[n, sd], 1.0)).unwrap();
        let x = rng.normal_tensor(&[n, cin, 3, 3], 1.0);
        let mut p0 = p.clone();
        p0.bias = Tensor::zeros(&[cout]);
        let y = ds_modconv_forward(&x, &style, &p0, None).unwrap();
        for j in 0..cout {
            let vals: Vec<f64> = (0..n).map(|b| y.at4(b, j, 1, 1)).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let std = var.sqrt();
            assert!((std - 1.0).abs() <= 0.1, "channel {j} std {std}");
        }
    }

    #[test]
    fn style_scaling_is_cancelled_by_demod() {
        let mut rng = Rng::new(13);
        let mut p = random_params(&mut rng, 4, 3, 5, DemodMode::Style);
        // Keep the demod sum far above the epsilon so the cancellation is exact
        // to rounding.
        p.w_dw = p.w_dw.scale(30.0);
        let x = rng.normal_tensor(&[2, 4, 5, 5], 1.0);
        let style = StyleVector::new(rng.normal_tensor(&[2, 5], 1.0)).unwrap();
        let base = ds_modconv_forward(&x, &style, &p, None).unwrap();
        for lambda in [0.5, 3.0, 10.0] {
            let mut q = p.clone();
            q.affine.weight = q.affine.weight.scale(lambda);
            q.affine.bias = q.affine.bias.scale(lambda);
            let y = ds_modconv_forward(&x, &style, &q, None).unwrap();
            let d = y.max_abs_diff(&base).unwrap();
            assert!(d <= 1e-9, "lambda {lambda}: {d}");
        }
    }

    #[test]
    fn trainable_mode_is_linear_in_x() {
        let mut rng = Rng::new(14);
        let mut p = random_params(&mut rng, 3, 4, 5, DemodMode::Trainable);
        p.bias = Tensor::zeros(&[4]);
        let style = StyleVector::new(rng.normal_tensor(&[1, 5], 1.0)).unwrap();
        let x = rng.normal_tensor(&[1, 3, 6, 6], 1.0);
        let y = rng.normal_tensor(&[1, 3, 6, 6], 1.0);
        let (a, b) = (1.7, -0.4);
        let f = |t: &Tensor| ds_modconv_forward(t, &style, &p, None).unwrap();
        let lhs = f(&x.scale(a).add(&y.scale(b)).unwrap());
        let rhs = f(&x).scale(a).add(&f(&y).scale(b)).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }
}
