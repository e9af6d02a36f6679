//! Executable generator graph.
//!
//! Mobile variant, for feature resolutions `r_0 = base, r_1 = 2 base, ...,
//! target / 2`:
//!
//! ```text
//! const [1, C0, base, base]
//! block 0:  conv_main (C0 -> C0)                         -> head (C0 -> 12)
//! block k:  IDWT (C -> C/4, 2x)  -> conv_post_idwt (C/4 -> Ck)
//!                                -> conv_main (Ck -> Ck)  -> head (Ck -> 12)
//! ```
//!
//! Every head predicts 12 wavelet channels (LL, HL, LH, HH for each of RGB)
//! at its block's resolution; its IDWT is the image at twice that size.
//! Only the last head feeds the final image; the others form the auxiliary
//! pyramid. Heads do not feed back into the trunk.
//!
//! Dense baseline (StyleGAN2-like), for resolutions `base ..= target`:
//!
//! ```text
//! block 0:  conv (C0 -> C0)                         rgb  = to_rgb(x)
//! block k:  up2 -> conv_up (C -> Ck) -> conv (Ck)   rgb  = up2(rgb) + to_rgb(x)
//! ```

use std::collections::BTreeSet;

use crate::config::{GeneratorConfig, Variant};
use crate::container::WeightContainer;
use crate::error::{invalid, shape_err, Error, Result};
use crate::exec::Exec;
use crate::modconv::{
    ds_modconv_forward_with, modconv_dense_forward_with, DemodMode, DenseModConvParams, DsModConvParams, OpTally,
    StyleAffine, StyleVector,
};
use crate::ops;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::wavelet::{idwt2_addonly_with, WaveletImage, WaveletPyramid};

/// Leaky-relu slope used throughout.
pub const LRELU_SLOPE: f64 = 0.2;

/// Wavelet channels predicted by each head: 4 subbands x RGB.
pub const HEAD_CHANNELS: usize = 12;

/// Initial per-layer noise strength.
pub const NOISE_STRENGTH_INIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MappingLayer {
    /// `[style_dim, style_dim]`
    pub weight: Tensor,
    pub bias: Tensor,
    /// Scalar gain after the activation, if not yet folded.
    pub act_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisBlock {
    pub resolution: usize,
    /// Absent for the first block, which does not upscale.
    pub conv_post_idwt: Option<DsModConvParams>,
    pub conv_main: DsModConvParams,
    pub head: DsModConvParams,
}

impl SynthesisBlock {
    pub fn upscales(&self) -> bool {
        self.conv_post_idwt.is_some()
    }

    pub fn c_in(&self) -> usize {
        match &self.conv_post_idwt {
            Some(c) => 4 * c.cin(),
            None => self.conv_main.cin(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    pub resolution: usize,
    pub conv_up: Option<DenseModConvParams>,
    pub conv: DenseModConvParams,
    pub to_rgb: DenseModConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Synthesis {
    Mobile(Vec<SynthesisBlock>),
    Dense(Vec<DenseBlock>),
}

/// What `synthesis_forward` returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputMode {
    Final,
    Pyramid,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SynthesisOutput {
    Image(Tensor),
    Pyramid(WaveletPyramid),
}

/// A noise-injection site: layer name and spatial resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseSite {
    pub layer: String,
    pub resolution: usize,
}

/// A loaded generator. Immutable; forward passes may run concurrently.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    pub mapping: Vec<MappingLayer>,
    /// `[1, C0, base, base]`
    pub constant: Tensor,
    pub synthesis: Synthesis,
    exec: Exec,
}

fn mobile_prefix(k: usize, part: &str) -> String {
    format!("synthesis.b{k}.{part}")
}

fn scalar_param(c: &WeightContainer, name: &str) -> Result<f64> {
    let t = c.require(name)?;
    if t.shape() != [1] {
        return Err(shape_err("load", format!("`{name}` must be [1], got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Reads named tensors out of a container, remembering what was used.
struct Reader<'a> {
    c: &'a WeightContainer,
    used: BTreeSet<String>,
    used_layers: BTreeSet<String>,
}

impl<'a> Reader<'a> {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        let t = self.c.require(name)?.clone();
        self.used.insert(name.to_string());
        Ok(t)
    }

    fn take_opt(&mut self, name: &str) -> Option<Tensor> {
        let t = self.c.get(name)?.clone();
        self.used.insert(name.to_string());
        Some(t)
    }

    fn take_scalar(&mut self, name: &str) -> Result<f64> {
        let v = scalar_param(self.c, name)?;
        self.used.insert(name.to_string());
        Ok(v)
    }

    fn take_scalar_opt(&mut self, name: &str) -> Result<Option<f64>> {
        if self.c.contains(name) {
            self.take_scalar(name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn affine(&mut self, prefix: &str) -> Result<StyleAffine> {
        Ok(StyleAffine {
            weight: self.take(&format!("{prefix}.affine.weight"))?,
            bias: self.take(&format!("{prefix}.affine.bias"))?,
        })
    }

    fn ds(&mut self, prefix: &str, noise: bool, activation: Option<f64>) -> Result<DsModConvParams> {
        let mode = *self
            .c
            .layers
            .get(prefix)
            .ok_or_else(|| Error::Container(format!("no demodulation mode recorded for `{prefix}`")))?;
        self.used_layers.insert(prefix.to_string());
        let mut out_scales = vec![];
        while let Some(s) = self.take_opt(&format!("{prefix}.out_scale.{}", out_scales.len())) {
            out_scales.push(s);
        }
        let p = DsModConvParams {
            w_dw: self.take(&format!("{prefix}.dw"))?,
            w_pw: self.take(&format!("{prefix}.pw"))?,
            bias: self.take(&format!("{prefix}.bias"))?,
            affine: self.affine(prefix)?,
            p_demod: self.take_opt(&format!("{prefix}.p_demod")),
            demod_mode: mode,
            noise_strength: if noise {
                Some(self.take_scalar(&format!("{prefix}.noise_strength"))?)
            } else {
                None
            },
            activation,
            out_scales,
            act_gain: self.take_scalar_opt(&format!("{prefix}.act_gain"))?,
        };
        p.validate(prefix)?;
        Ok(p)
    }

    fn dense(
        &mut self,
        prefix: &str,
        demodulate: bool,
        noise: bool,
        activation: Option<f64>,
    ) -> Result<DenseModConvParams> {
        Ok(DenseModConvParams {
            weight: self.take(&format!("{prefix}.weight"))?,
            bias: self.take(&format!("{prefix}.bias"))?,
            affine: self.affine(prefix)?,
            demodulate,
            noise_strength: if noise {
                Some(self.take_scalar(&format!("{prefix}.noise_strength"))?)
            } else {
                None
            },
            activation,
        })
    }
}

fn write_affine(c: &mut WeightContainer, prefix: &str, a: &StyleAffine) -> Result<()> {
    c.insert(format!("{prefix}.affine.weight"), a.weight.clone())?;
    c.insert(format!("{prefix}.affine.bias"), a.bias.clone())
}

fn write_ds(c: &mut WeightContainer, prefix: &str, p: &DsModConvParams) -> Result<()> {
    c.layers.insert(prefix.to_string(), p.demod_mode);
    c.insert(format!("{prefix}.dw"), p.w_dw.clone())?;
    c.insert(format!("{prefix}.pw"), p.w_pw.clone())?;
    c.insert(format!("{prefix}.bias"), p.bias.clone())?;
    write_affine(c, prefix, &p.affine)?;
    if let Some(pd) = &p.p_demod {
        c.insert(format!("{prefix}.p_demod"), pd.clone())?;
    }
    if let Some(k) = p.noise_strength {
        c.insert(format!("{prefix}.noise_strength"), Tensor::scalar(k))?;
    }
    for (i, s) in p.out_scales.iter().enumerate() {
        c.insert(format!("{prefix}.out_scale.{i}"), s.clone())?;
    }
    if let Some(g) = p.act_gain {
        c.insert(format!("{prefix}.act_gain"), Tensor::scalar(g))?;
    }
    Ok(())
}

fn write_dense(c: &mut WeightContainer, prefix: &str, p: &DenseModConvParams) -> Result<()> {
    c.insert(format!("{prefix}.weight"), p.weight.clone())?;
    c.insert(format!("{prefix}.bias"), p.bias.clone())?;
    write_affine(c, prefix, &p.affine)?;
    if let Some(k) = p.noise_strength {
        c.insert(format!("{prefix}.noise_strength"), Tensor::scalar(k))?;
    }
    Ok(())
}

fn init_affine(rng: &mut Rng, cin: usize, style_dim: usize) -> StyleAffine {
    StyleAffine {
        weight: rng.normal_tensor(&[cin, style_dim], 1.0 / (style_dim as f64).sqrt()),
        bias: Tensor::ones(&[cin]),
    }
}

fn init_ds(
    rng: &mut Rng,
    cin: usize,
    cout: usize,
    style_dim: usize,
    mode: DemodMode,
    noise: bool,
    activation: Option<f64>,
) -> DsModConvParams {
    DsModConvParams {
        w_dw: rng.normal_tensor(&[cin, 1, 3, 3], 1.0 / 3.0),
        w_pw: rng.normal_tensor(&[cout, cin, 1, 1], 1.0 / (cin as f64).sqrt()),
        bias: Tensor::zeros(&[cout]),
        affine: init_affine(rng, cin, style_dim),
        p_demod: (mode == DemodMode::Trainable).then(|| Tensor::ones(&[cin])),
        demod_mode: mode,
        noise_strength: noise.then_some(NOISE_STRENGTH_INIT),
        activation,
        out_scales: vec![],
        act_gain: None,
    }
}

#[allow(clippy::too_many_arguments)]
fn init_dense(
    rng: &mut Rng,
    cin: usize,
    cout: usize,
    k: usize,
    style_dim: usize,
    demodulate: bool,
    noise: bool,
    activation: Option<f64>,
) -> DenseModConvParams {
    DenseModConvParams {
        weight: rng.normal_tensor(&[cout, cin, k, k], 1.0 / ((cin * k * k) as f64).sqrt()),
        bias: Tensor::zeros(&[cout]),
        affine: init_affine(rng, cin, style_dim),
        demodulate,
        noise_strength: noise.then_some(NOISE_STRENGTH_INIT),
        activation,
    }
}

impl Generator {
    /// Random generator with the documented initialization: weights
    /// `N(0, 1/fan_in)`, biases 0, style-affine bias 1, `p_demod` 1, noise
    /// strength 0.1, constant input `N(0, 1)`.
    pub fn random(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let sd = config.style_dim;
        let mapping = (0..config.mapping_layers)
            .map(|_| MappingLayer {
                weight: rng.normal_tensor(&[sd, sd], 1.0 / (sd as f64).sqrt()),
                bias: Tensor::zeros(&[sd]),
                act_gain: None,
            })
            .collect();
        let res = config.block_resolutions();
        let c0 = config.width(res[0]);
        let base = config.base_resolution;
        let constant = rng.normal_tensor(&[1, c0, base, base], 1.0);
        let act = Some(LRELU_SLOPE);
        let synthesis = match config.variant {
            Variant::Mobile => {
                let mode = config.demod_mode();
                let mut blocks = vec![];
                let mut prev = c0;
                for &r in &res {
                    let c = config.width(r);
                    let conv_post_idwt = (r != base).then(|| init_ds(&mut rng, prev / 4, c, sd, mode, true, act));
                    let conv_main = init_ds(&mut rng, c, c, sd, mode, true, act);
                    let head = init_ds(&mut rng, c, HEAD_CHANNELS, sd, DemodMode::None, false, None);
                    blocks.push(SynthesisBlock {
                        resolution: r,
                        conv_post_idwt,
                        conv_main,
                        head,
                    });
                    prev = c;
                }
                Synthesis::Mobile(blocks)
            }
            Variant::DenseBaseline => {
                let mut blocks = vec![];
                let mut prev = c0;
                for &r in &res {
                    let c = config.width(r);
                    let conv_up = (r != base).then(|| init_dense(&mut rng, prev, c, 3, sd, true, true, act));
                    let conv = init_dense(&mut rng, c, c, 3, sd, true, true, act);
                    let to_rgb = init_dense(&mut rng, c, 3, 1, sd, false, false, None);
                    blocks.push(DenseBlock {
                        resolution: r,
                        conv_up,
                        conv,
                        to_rgb,
                    });
                    prev = c;
                }
                Synthesis::Dense(blocks)
            }
        };
        Ok(Self {
            config: config.clone(),
            mapping,
            constant,
            synthesis,
            exec: Exec::default(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Builds the runtime graph from a container. Every parameter the graph
    /// names must be present exactly once and the container may hold
    /// nothing else.
    pub fn from_container(c: &WeightContainer) -> Result<Self> {
        let config = c.config.clone();
        config.validate()?;
        let mut rd = Reader {
            c,
            used: BTreeSet::new(),
            used_layers: BTreeSet::new(),
        };
        let mut mapping = vec![];
        for i in 0..config.mapping_layers {
            mapping.push(MappingLayer {
                weight: rd.take(&format!("mapping.{i}.weight"))?,
                bias: rd.take(&format!("mapping.{i}.bias"))?,
                act_gain: rd.take_scalar_opt(&format!("mapping.{i}.act_gain"))?,
            });
        }
        let constant = rd.take("synthesis.const")?;
        let res = config.block_resolutions();
        let act = Some(LRELU_SLOPE);
        let synthesis = match config.variant {
            Variant::Mobile => {
                let mut blocks = vec![];
                for (k, &r) in res.iter().enumerate() {
                    let conv_post_idwt = if k == 0 {
                        None
                    } else {
                        Some(rd.ds(&mobile_prefix(k, "conv_post_idwt"), true, act)?)
                    };
                    blocks.push(SynthesisBlock {
                        resolution: r,
                        conv_post_idwt,
                        conv_main: rd.ds(&mobile_prefix(k, "conv_main"), true, act)?,
                        head: rd.ds(&mobile_prefix(k, "head"), false, None)?,
                    });
                }
                Synthesis::Mobile(blocks)
            }
            Variant::DenseBaseline => {
                let mut blocks = vec![];
                for (k, &r) in res.iter().enumerate() {
                    let conv_up = if k == 0 {
                        None
                    } else {
                        Some(rd.dense(&mobile_prefix(k, "conv_up"), true, true, act)?)
                    };
                    blocks.push(DenseBlock {
                        resolution: r,
                        conv_up,
                        conv: rd.dense(&mobile_prefix(k, "conv"), true, true, act)?,
                        to_rgb: rd.dense(&mobile_prefix(k, "to_rgb"), false, false, None)?,
                    });
                }
                Synthesis::Dense(blocks)
            }
        };
        if let Some(extra) = c.names().find(|n| !rd.used.contains(*n)) {
            return Err(Error::Container(format!(
                "parameter `{extra}` is not used by the graph"
            )));
        }
        if let Some(extra) = c.layers.keys().find(|n| !rd.used_layers.contains(*n)) {
            return Err(Error::Container(format!("layer mode for unknown layer `{extra}`")));
        }
        let g = Self {
            config,
            mapping,
            constant,
            synthesis,
            exec: Exec::default(),
        };
        g.check_shapes()?;
        Ok(g)
    }

    fn check_shapes(&self) -> Result<()> {
        let sd = self.config.style_dim;
        for (i, l) in self.mapping.iter().enumerate() {
            if l.weight.shape() != [sd, sd] || l.bias.shape() != [sd] {
                return Err(shape_err(
                    "load",
                    format!("mapping.{i}: {:?}/{:?}", l.weight.shape(), l.bias.shape()),
                ));
            }
        }
        let res = self.config.block_resolutions();
        let c0 = self.config.width(res[0]);
        let b = self.config.base_resolution;
        if self.constant.shape() != [1, c0, b, b] {
            return Err(shape_err(
                "load",
                format!("synthesis.const {:?}", self.constant.shape()),
            ));
        }
        let check_affine = |name: String, a: &StyleAffine| -> Result<()> {
            if a.weight.shape()[1] != sd {
                return Err(shape_err(
                    "load",
                    format!("{name}: affine {:?} vs style_dim {sd}", a.weight.shape()),
                ));
            }
            Ok(())
        };
        let mut prev = c0;
        match &self.synthesis {
            Synthesis::Mobile(blocks) => {
                for (k, blk) in blocks.iter().enumerate() {
                    let c = self.config.width(res[k]);
                    let want_in = if k == 0 { c } else { prev / 4 };
                    let mut ok = blk.conv_main.cin() == c && blk.conv_main.cout() == c;
                    ok &= blk.head.cin() == c && blk.head.cout() == HEAD_CHANNELS;
                    if let Some(p) = &blk.conv_post_idwt {
                        ok &= p.cin() == want_in && p.cout() == c;
                        check_affine(mobile_prefix(k, "conv_post_idwt"), &p.affine)?;
                    }
                    if !ok {
                        return Err(shape_err(
                            "load",
                            format!("block {k} channel flow does not match config"),
                        ));
                    }
                    check_affine(mobile_prefix(k, "conv_main"), &blk.conv_main.affine)?;
                    check_affine(mobile_prefix(k, "head"), &blk.head.affine)?;
                    prev = c;
                }
            }
            Synthesis::Dense(blocks) => {
                for (k, blk) in blocks.iter().enumerate() {
                    let c = self.config.width(res[k]);
                    let mut ok = blk.conv.weight.shape() == [c, c, 3, 3];
                    ok &= blk.to_rgb.weight.shape() == [3, c, 1, 1];
                    if let Some(p) = &blk.conv_up {
                        ok &= p.weight.shape() == [c, prev, 3, 3];
                        check_affine(mobile_prefix(k, "conv_up"), &p.affine)?;
                    }
                    if !ok {
                        return Err(shape_err(
                            "load",
                            format!("block {k} channel flow does not match config"),
                        ));
                    }
                    check_affine(mobile_prefix(k, "conv"), &blk.conv.affine)?;
                    check_affine(mobile_prefix(k, "to_rgb"), &blk.to_rgb.affine)?;
                    prev = c;
                }
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> WeightContainer {
        self.try_to_container().expect("graph parameter names are unique")
    }

    fn try_to_container(&self) -> Result<WeightContainer> {
        let mut c = WeightContainer::new(self.config.clone());
        for (i, l) in self.mapping.iter().enumerate() {
            c.insert(format!("mapping.{i}.weight"), l.weight.clone())?;
            c.insert(format!("mapping.{i}.bias"), l.bias.clone())?;
            if let Some(g) = l.act_gain {
                c.insert(format!("mapping.{i}.act_gain"), Tensor::scalar(g))?;
            }
        }
        c.insert("synthesis.const", self.constant.clone())?;
        match &self.synthesis {
            Synthesis::Mobile(blocks) => {
                for (k, b) in blocks.iter().enumerate() {
                    if let Some(p) = &b.conv_post_idwt {
                        write_ds(&mut c, &mobile_prefix(k, "conv_post_idwt"), p)?;
                    }
                    write_ds(&mut c, &mobile_prefix(k, "conv_main"), &b.conv_main)?;
                    write_ds(&mut c, &mobile_prefix(k, "head"), &b.head)?;
                }
            }
            Synthesis::Dense(blocks) => {
                for (k, b) in blocks.iter().enumerate() {
                    if let Some(p) = &b.conv_up {
                        write_dense(&mut c, &mobile_prefix(k, "conv_up"), p)?;
                    }
                    write_dense(&mut c, &mobile_prefix(k, "conv"), &b.conv)?;
                    write_dense(&mut c, &mobile_prefix(k, "to_rgb"), &b.to_rgb)?;
                }
            }
        }
        Ok(c)
    }

    /// Every separable modulated convolution with its container prefix.
    pub fn ds_layers(&self) -> Vec<(String, &DsModConvParams)> {
        let mut out = vec![];
        if let Synthesis::Mobile(blocks) = &self.synthesis {
            for (k, b) in blocks.iter().enumerate() {
                if let Some(p) = &b.conv_post_idwt {
                    out.push((mobile_prefix(k, "conv_post_idwt"), p));
                }
                out.push((mobile_prefix(k, "conv_main"), &b.conv_main));
                out.push((mobile_prefix(k, "head"), &b.head));
            }
        }
        out
    }

    pub fn ds_layers_mut(&mut self) -> Vec<(String, &mut DsModConvParams)> {
        let mut out = vec![];
        if let Synthesis::Mobile(blocks) = &mut self.synthesis {
            for (k, b) in blocks.iter_mut().enumerate() {
                if let Some(p) = &mut b.conv_post_idwt {
                    out.push((mobile_prefix(k, "conv_post_idwt"), p));
                }
                out.push((mobile_prefix(k, "conv_main"), &mut b.conv_main));
                out.push((mobile_prefix(k, "head"), &mut b.head));
            }
        }
        out
    }

    /// Noise-injection sites in the order `noises` arguments must follow.
    pub fn noise_sites(&self) -> Vec<NoiseSite> {
        let mut out = vec![];
        let mut push = |k: usize, part: &str, resolution: usize| {
            out.push(NoiseSite {
                layer: mobile_prefix(k, part),
                resolution,
            })
        };
        match &self.synthesis {
            Synthesis::Mobile(blocks) => {
                for (k, b) in blocks.iter().enumerate() {
                    if b.conv_post_idwt.is_some() {
                        push(k, "conv_post_idwt", b.resolution);
                    }
                    push(k, "conv_main", b.resolution);
                }
            }
            Synthesis::Dense(blocks) => {
                for (k, b) in blocks.iter().enumerate() {
                    if b.conv_up.is_some() {
                        push(k, "conv_up", b.resolution);
                    }
                    push(k, "conv", b.resolution);
                }
            }
        }
        out
    }

    /// Resolutions of the pixel-domain images each head reconstructs to.
    pub fn head_image_sizes(&self) -> Vec<usize> {
        match &self.synthesis {
            Synthesis::Mobile(blocks) => blocks.iter().map(|b| 2 * b.resolution).collect(),
            Synthesis::Dense(blocks) => blocks.iter().map(|b| b.resolution).collect(),
        }
    }

    /// Latent `[n, style_dim]` and per-site noise drawn from `seed`.
    pub fn sample_inputs(&self, seed: u64, n: usize) -> (Tensor, Vec<Tensor>) {
        let mut rng = Rng::new(seed);
        let z = rng.normal_tensor(&[n, self.config.style_dim], 1.0);
        let noises = self
            .noise_sites()
            .iter()
            .map(|s| rng.normal_tensor(&[n, 1, s.resolution, s.resolution], 1.0))
            .collect();
        (z, noises)
    }

    pub fn mapping_forward(&self, z: &Tensor) -> Result<StyleVector> {
        self.mapping_forward_tallied(z, &mut OpTally::default())
    }

    fn mapping_forward_tallied(&self, z: &Tensor, tally: &mut OpTally) -> Result<StyleVector> {
        let (n, d) = z.dims2("mapping_forward")?;
        if d != self.config.style_dim {
            return Err(shape_err(
                "mapping_forward",
                format!("latent {:?} vs style_dim {}", z.shape(), self.config.style_dim),
            ));
        }
        let mut x = ops::pixel_norm(z)?;
        for l in &self.mapping {
            x = ops::leaky_relu(&ops::linear(&x, &l.weight, &l.bias)?, LRELU_SLOPE);
            tally.add(n * l.weight.len());
            if let Some(g) = l.act_gain {
                x = x.scale(g);
                tally.add(x.len());
            }
        }
        StyleVector::new(x)
    }

    fn check_noises(&self, noises: &[Tensor], n: usize) -> Result<()> {
        let sites = self.noise_sites();
        if noises.is_empty() {
            return Ok(());
        }
        if noises.len() != sites.len() {
            return Err(Error::NoiseCount {
                expected: sites.len(),
                got: noises.len(),
                sites: sites
                    .iter()
                    .map(|s| format!("{}@{}", s.layer, s.resolution))
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
        for (z, s) in noises.iter().zip(&sites) {
            if z.shape() != [n, 1, s.resolution, s.resolution] {
                return Err(shape_err(
                    "synthesis_forward",
                    format!(
                        "noise for {} must be [{n}, 1, {r}, {r}], got {:?}",
                        s.layer,
                        z.shape(),
                        r = s.resolution
                    ),
                ));
            }
        }
        Ok(())
    }

    fn const_batch(&self, n: usize) -> Result<Tensor> {
        Tensor::stack(&vec![self.constant.clone(); n])
    }

    /// Runs the mobile trunk, returning every head's wavelet prediction.
    fn run_mobile(
        &self,
        blocks: &[SynthesisBlock],
        style: &StyleVector,
        noises: &[Tensor],
        tally: &mut OpTally,
    ) -> Result<Vec<WaveletImage>> {
        let n = style.batch();
        let mut x = self.const_batch(n)?;
        let mut noise_iter = noises.iter();
        let mut heads = vec![];
        for b in blocks {
            let k = if b.upscales() { 2 } else { 1 };
            let mine: Vec<&Tensor> = (0..k).filter_map(|_| noise_iter.next()).collect();
            let (features, head) = block_forward_with(&x, style, &mine, b, self.exec, tally)?;
            x = features;
            heads.push(head);
        }
        Ok(heads)
    }

    fn run_dense(
        &self,
        blocks: &[DenseBlock],
        style: &StyleVector,
        noises: &[Tensor],
        tally: &mut OpTally,
    ) -> Result<Tensor> {
        let n = style.batch();
        let mut x = self.const_batch(n)?;
        let mut rgb: Option<Tensor> = None;
        let mut noise_iter = noises.iter();
        for b in blocks {
            if let Some(up) = &b.conv_up {
                x = ops::upsample_nearest2(&x)?;
                x = modconv_dense_forward_with(&x, style, up, noise_iter.next(), self.exec, tally)?;
            }
            x = modconv_dense_forward_with(&x, style, &b.conv, noise_iter.next(), self.exec, tally)?;
            let y = modconv_dense_forward_with(&x, style, &b.to_rgb, None, self.exec, tally)?;
            rgb = Some(match rgb {
                Some(prev) => {
                    let up = ops::upsample_nearest2(&prev)?;
                    tally.add(up.len());
                    up.add(&y)?
                }
                None => y,
            });
        }
        Ok(rgb.expect("at least one block"))
    }

    /// Synthesis from style vectors. `noises` is one tensor per
    /// [`noise_site`](Self::noise_sites), or empty for zero noise.
    pub fn synthesis_forward(
        &self,
        style: &StyleVector,
        noises: &[Tensor],
        mode: OutputMode,
    ) -> Result<SynthesisOutput> {
        self.synthesis_forward_tallied(style, noises, mode, &mut OpTally::default())
    }

    pub fn synthesis_forward_tallied(
        &self,
        style: &StyleVector,
        noises: &[Tensor],
        mode: OutputMode,
        tally: &mut OpTally,
    ) -> Result<SynthesisOutput> {
        if style.dim() != self.config.style_dim {
            return Err(shape_err(
                "synthesis_forward",
                format!(
                    "style {:?} vs style_dim {}",
                    style.tensor().shape(),
                    self.config.style_dim
                ),
            ));
        }
        self.check_noises(noises, style.batch())?;
        match (&self.synthesis, mode) {
            (Synthesis::Mobile(blocks), OutputMode::Final) => {
                let heads = self.run_mobile(blocks, style, noises, tally)?;
                let last = heads.last().expect("at least one block");
                Ok(SynthesisOutput::Image(idwt2_addonly_with(last, self.exec)))
            }
            (Synthesis::Mobile(blocks), OutputMode::Pyramid) => {
                let heads = self.run_mobile(blocks, style, noises, tally)?;
                Ok(SynthesisOutput::Pyramid(WaveletPyramid::from_wavelets(heads)?))
            }
            (Synthesis::Dense(blocks), OutputMode::Final) => {
                Ok(SynthesisOutput::Image(self.run_dense(blocks, style, noises, tally)?))
            }
            (Synthesis::Dense(_), OutputMode::Pyramid) => Err(invalid(
                "synthesis_forward",
                "pyramid output needs per-block wavelet heads (mobile variant)",
            )),
        }
    }

    /// Final image, unclamped.
    pub fn synthesize(&self, style: &StyleVector, noises: &[Tensor]) -> Result<Tensor> {
        match self.synthesis_forward(style, noises, OutputMode::Final)? {
            SynthesisOutput::Image(t) => Ok(t),
            SynthesisOutput::Pyramid(_) => unreachable!(),
        }
    }

    pub fn synthesize_pyramid(&self, style: &StyleVector, noises: &[Tensor]) -> Result<WaveletPyramid> {
        match self.synthesis_forward(style, noises, OutputMode::Pyramid)? {
            SynthesisOutput::Pyramid(p) => Ok(p),
            SynthesisOutput::Image(_) => unreachable!(),
        }
    }

    /// Mapping plus synthesis, unclamped, with the executed MAC tally.
    pub fn forward_tallied(&self, z: &Tensor, noises: &[Tensor]) -> Result<(Tensor, OpTally)> {
        let mut tally = OpTally::default();
        let style = self.mapping_forward_tallied(z, &mut tally)?;
        let img = match self.synthesis_forward_tallied(&style, noises, OutputMode::Final, &mut tally)? {
            SynthesisOutput::Image(t) => t,
            SynthesisOutput::Pyramid(_) => unreachable!(),
        };
        Ok((img, tally))
    }

    pub fn forward(&self, z: &Tensor, noises: &[Tensor]) -> Result<Tensor> {
        Ok(self.forward_tallied(z, noises)?.0)
    }

    /// End-to-end sample for `seed`: latent and noise drawn from the seed,
    /// output clamped to `[-1, 1]`. Shape `[n, 3, R, R]`.
    pub fn generate(&self, seed: u64, n: usize) -> Result<Tensor> {
        let (z, noises) = self.sample_inputs(seed, n);
        Ok(self.forward(&z, &noises)?.map(|v| v.clamp(-1.0, 1.0)))
    }
}

/// Random weights for `config`, as a container.
pub fn init_random(config: &GeneratorConfig, seed: u64) -> Result<WeightContainer> {
    Ok(Generator::random(config, seed)?.to_container())
}

/// One mobile building block. `noises` holds the block's noise tensors in
/// site order (possibly empty for zero noise).
pub fn block_forward(
    x: &Tensor,
    style: &StyleVector,
    noises: &[&Tensor],
    block: &SynthesisBlock,
) -> Result<(Tensor, WaveletImage)> {
    block_forward_with(x, style, noises, block, Exec::default(), &mut OpTally::default())
}

pub fn block_forward_with(
    x: &Tensor,
    style: &StyleVector,
    noises: &[&Tensor],
    block: &SynthesisBlock,
    exec: Exec,
    tally: &mut OpTally,
) -> Result<(Tensor, WaveletImage)> {
    let (_, c, _, _) = x.dims4("block_forward")?;
    if c != block.c_in() {
        return Err(shape_err(
            "block_forward",
            format!("input {:?} vs block C_in {}", x.shape(), block.c_in()),
        ));
    }
    let mut noise = noises.iter().copied();
    let mut h = x.clone();
    if let Some(post) = &block.conv_post_idwt {
        let wav = WaveletImage::new(h)?;
        h = idwt2_addonly_with(&wav, exec);
        h = ds_modconv_forward_with(&h, style, post, noise.next(), exec, tally)?;
    }
    h = ds_modconv_forward_with(&h, style, &block.conv_main, noise.next(), exec, tally)?;
    let head = ds_modconv_forward_with(&h, style, &block.head, None, exec, tally)?;
    Ok((h, WaveletImage::new(head)?))
}
