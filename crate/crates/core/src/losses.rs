//! Distillation objectives, forward only.
//!
//! Reductions are per-level means so magnitudes do not depend on
//! resolution. Gradient penalties are inputs: this module has no autodiff.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::generator::Generator;
use crate::modconv::StyleVector;
use crate::ops;
use crate::tensor::Tensor;
use crate::wavelet::{build_pyramid, dwt2, WaveletPyramid};

/// Side length images are resized to before feature extraction.
pub const PERCEPTUAL_SIZE: usize = 256;

fn mean_abs_diff(a: &Tensor, b: &Tensor, op: &'static str) -> Result<f64> {
    Ok(a.zip_map(b, op, |x, y| (x - y).abs())?.mean())
}

fn mean_sq_diff(a: &Tensor, b: &Tensor, op: &'static str) -> Result<f64> {
    Ok(a.zip_map(b, op, |x, y| (x - y) * (x - y))?.mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelLoss {
    /// Sum over levels of mean `|F_s - dwt2(I_t)|`.
    pub wavelet_term: f64,
    /// Sum over levels of mean `|idwt2(F_s) - I_t|`.
    pub pixel_term: f64,
    pub total: f64,
}

/// Multi-scale distillation loss between a student's head predictions and
/// teacher images ordered coarse to fine.
pub fn pixel_distillation_loss(student: &WaveletPyramid, teacher: &[Tensor]) -> Result<PixelLoss> {
    const OP: &str = "pixel_distillation_loss";
    if student.len() != teacher.len() {
        return Err(invalid(
            OP,
            format!("student has {} levels, teacher {}", student.len(), teacher.len()),
        ));
    }
    let mut wavelet_term = 0.0;
    let mut pixel_term = 0.0;
    for (k, (lvl, img)) in student.levels().iter().zip(teacher).enumerate() {
        if lvl.image.shape() != img.shape() {
            return Err(shape_err(
                OP,
                format!(
                    "level {k}: student {:?} vs teacher {:?}",
                    lvl.image.shape(),
                    img.shape()
                ),
            ));
        }
        wavelet_term += mean_abs_diff(lvl.wavelet.tensor(), dwt2(img)?.tensor(), OP)?;
        pixel_term += mean_abs_diff(&lvl.image, img, OP)?;
    }
    Ok(PixelLoss {
        wavelet_term,
        pixel_term,
        total: wavelet_term + pixel_term,
    })
}

/// Maps an image batch to named feature tensors. The layer list must not
/// change between calls.
pub trait FeatureExtractor {
    fn layer_names(&self) -> Vec<String>;
    fn extract(&self, img: &Tensor) -> Result<Vec<(String, Tensor)>>;
}

/// Returns the image itself as its only feature.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn layer_names(&self) -> Vec<String> {
        vec!["identity".into()]
    }

    fn extract(&self, img: &Tensor) -> Result<Vec<(String, Tensor)>> {
        Ok(vec![("identity".into(), img.clone())])
    }
}

/// Integer-factor resize of a square power-of-two image to `size`:
/// average pooling down, nearest-neighbour up.
pub fn resize_square(img: &Tensor, size: usize) -> Result<Tensor> {
    let (_, _, h, w) = img.dims4("resize_square")?;
    if h != w || !size.is_multiple_of(h.min(size)) || !h.is_multiple_of(size.min(h)) {
        return Err(shape_err(
            "resize_square",
            format!(
                "{:?} cannot be resized to {size}x{size} by an integer factor",
                img.shape()
            ),
        ));
    }
    match h.cmp(&size) {
        std::cmp::Ordering::Equal => Ok(img.clone()),
        std::cmp::Ordering::Greater => ops::avg_pool(img, h / size),
        std::cmp::Ordering::Less => ops::upsample_nearest(img, size / h),
    }
}

fn checked_features(ext: &dyn FeatureExtractor, img: &Tensor, names: &[String]) -> Result<Vec<Tensor>> {
    let feats = ext.extract(img)?;
    let got: Vec<&str> = feats.iter().map(|(n, _)| n.as_str()).collect();
    if got != names.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(invalid(
            "perceptual_loss",
            format!("extractor returned layers {got:?}, declared {names:?}"),
        ));
    }
    Ok(feats.into_iter().map(|(_, t)| t).collect())
}

/// Sum over extractor layers of the mean squared feature difference, after
/// resizing both images to 256x256.
pub fn perceptual_loss(ext: &dyn FeatureExtractor, img_s: &Tensor, img_t: &Tensor) -> Result<f64> {
    if img_s.shape() != img_t.shape() {
        return Err(shape_err(
            "perceptual_loss",
            format!("student {:?} vs teacher {:?}", img_s.shape(), img_t.shape()),
        ));
    }
    let names = ext.layer_names();
    let fs = checked_features(ext, &resize_square(img_s, PERCEPTUAL_SIZE)?, &names)?;
    let ft = checked_features(ext, &resize_square(img_t, PERCEPTUAL_SIZE)?, &names)?;
    fs.iter()
        .zip(&ft)
        .map(|(a, b)| mean_sq_diff(a, b, "perceptual_loss"))
        .sum()
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `f(t) = -log(1 + e^{-t})`.
pub fn f_printed(t: f64) -> f64 {
    -softplus(-t)
}

/// Which adversarial loss form to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanForm {
    /// Generator: `mean f(-score)`; discriminator:
    /// `mean f(-real) + mean f(fake)`.
    #[default]
    Printed,
    /// Non-saturating softplus form. Generator: `mean softplus(-score)`;
    /// discriminator: `mean softplus(-real) + mean softplus(fake)`.
    Softplus,
}

fn check_scores(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 1 {
        return Err(shape_err(
            "gan_loss",
            format!("{what} must be [N], got {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn mean_of(t: &Tensor, f: impl Fn(f64) -> f64) -> f64 {
    t.map(f).mean()
}

pub fn generator_gan_loss(scores_fake: &Tensor, form: GanForm) -> Result<f64> {
    check_scores(scores_fake, "scores_fake")?;
    Ok(match form {
        GanForm::Printed => mean_of(scores_fake, |s| f_printed(-s)),
        GanForm::Softplus => mean_of(scores_fake, |s| softplus(-s)),
    })
}

/// Adversarial discriminator loss plus `gamma / 2 * mean(r1_grad_sqnorms)`.
pub fn discriminator_gan_loss(
    scores_real: &Tensor,
    scores_fake: &Tensor,
    r1_grad_sqnorms: &Tensor,
    gamma: f64,
    form: GanForm,
) -> Result<f64> {
    check_scores(scores_real, "scores_real")?;
    check_scores(scores_fake, "scores_fake")?;
    check_scores(r1_grad_sqnorms, "r1_grad_sqnorms")?;
    let adv = match form {
        GanForm::Printed => mean_of(scores_real, |s| f_printed(-s)) + mean_of(scores_fake, f_printed),
        GanForm::Softplus => mean_of(scores_real, |s| softplus(-s)) + mean_of(scores_fake, softplus),
    };
    Ok(adv + 0.5 * gamma * r1_grad_sqnorms.mean())
}

/// Loss weights. Defaults: `lambda = (1, 1, 0.1)`, `gamma = 10`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pix: f64,
    pub lambda_perc: f64,
    pub lambda_gan: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pix: 1.0,
            lambda_perc: 1.0,
            lambda_gan: 0.1,
            gamma: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_pix, self.lambda_perc, self.lambda_gan, self.gamma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(
                "LossWeights",
                format!("weights must be finite and >= 0, got {self:?}"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pixel: f64,
    pub perceptual: f64,
    pub generator_gan: f64,
    pub discriminator: f64,
}

/// `(lambda_pix * pixel + lambda_perc * perceptual + lambda_gan * gan,
/// discriminator)`.
pub fn full_objective(parts: LossParts, w: LossWeights) -> Result<(f64, f64)> {
    w.validate()?;
    let student = w.lambda_pix * parts.pixel + w.lambda_perc * parts.perceptual + w.lambda_gan * parts.generator_gan;
    Ok((student, parts.discriminator))
}

/// One distillation training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub style: StyleVector,
    pub noise: Vec<Tensor>,
    /// Teacher images coarse to fine.
    pub teacher_pyramid: Vec<Tensor>,
}

/// Runs the teacher and downsamples its image to the student's head
/// reconstruction sizes.
pub fn make_triplet(teacher: &Generator, z: &Tensor, noises: &[Tensor], student_sizes: &[usize]) -> Result<Triplet> {
    const OP: &str = "make_triplet";
    let style = teacher.mapping_forward(z)?;
    let img = teacher.synthesize(&style, noises)?;
    let r = img.shape()[2];
    let ok = !student_sizes.is_empty()
        && student_sizes.last() == Some(&r)
        && student_sizes.windows(2).all(|w| w[1] == 2 * w[0]);
    if !ok {
        return Err(invalid(
            OP,
            format!("student sizes {student_sizes:?} must double up to the teacher's {r}"),
        ));
    }
    let pyr: WaveletPyramid = build_pyramid(&img, student_sizes.len())?;
    Ok(Triplet {
        style,
        noise: noises.to_vec(),
        teacher_pyramid: pyr.images(),
    })
}

/// Central-difference squared gradient norm of `f` at `x`.
pub fn finite_difference_grad_sqnorm(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut total = 0.0;
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        let g = (up - down) / (2.0 * h);
        total += g * g;
    }
    total
}

/// `D(x) = 0.5 x^T A x + b^T x` with symmetric `A`; a discriminator whose
/// input gradient is known in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticDiscriminator {
    /// Row-major `d x d`, symmetric.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl QuadraticDiscriminator {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut s = 0.0;
        for i in 0..d {
            let row: f64 = (0..d).map(|j| self.a[i * d + j] * x[j]).sum();
            s += 0.5 * x[i] * row + self.b[i] * x[i];
        }
        s
    }

    /// `|A x + b|^2`
    pub fn grad_sqnorm(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        (0..d)
            .map(|i| {
                let g: f64 = (0..d).map(|j| self.a[i * d + j] * x[j]).sum::<f64>() + self.b[i];
                g * g
            })
            .sum()
    }
}
