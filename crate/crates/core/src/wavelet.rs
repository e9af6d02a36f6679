//! Single-level 2-D Haar transform and image pyramids.
//!
//! For every 2x2 pixel block
//!
//! ```text
//! A B
//! C D
//! ```
//!
//! the synthesis (inverse) transform is
//!
//! ```text
//! A = LL + HL + LH + HH
//! B = LL - HL + LH - HH
//! C = LL + HL - LH - HH
//! D = LL - HL - LH + HH
//! ```
//!
//! and the analysis transform is its exact left inverse, which carries a
//! factor of 1/4 (`LL = (A + B + C + D) / 4`, ...). This is *not* the
//! orthonormal 1/2 convention: LL is the block mean, and detail magnitudes
//! are a quarter of what an orthonormal transform would give. Loss values
//! computed in the wavelet domain depend on this choice.
//!
//! Wavelet tensors are `[N, 4*C, H/2, W/2]` with the four subbands of source
//! channel `c` stored at channels `4c..4c+4` in the order LL, HL, LH, HH.

use std::cell::Cell;
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{invalid, shape_err, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

/// Subband order within each group of four channels.
pub const SUBBAND_ORDER: [&str; 4] = ["LL", "HL", "LH", "HH"];

/// Synthesis filter bank: `SYNTHESIS[p][b]` is the sign with which subband
/// `b` contributes to block position `p` (A, B, C, D).
const SYNTHESIS: [[f64; 4]; 4] = [
    [1.0, 1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0, -1.0],
    [1.0, 1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0, 1.0],
];

/// A wavelet-domain image `[N, 4*C, H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletImage(Tensor);

impl WaveletImage {
    pub fn new(coeffs: Tensor) -> Result<Self> {
        let (_, c, _, _) = coeffs.dims4("WaveletImage")?;
        if c % 4 != 0 {
            return Err(invalid(
                "WaveletImage",
                format!("channel count {c} is not divisible by 4 (shape {:?})", coeffs.shape()),
            ));
        }
        Ok(Self(coeffs))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Channel count of the pixel-domain image this reconstructs to.
    pub fn source_channels(&self) -> usize {
        self.0.shape()[1] / 4
    }

    /// Spatial size of the reconstruction `(H, W)`.
    pub fn image_size(&self) -> (usize, usize) {
        (2 * self.0.shape()[2], 2 * self.0.shape()[3])
    }
}

/// Forward Haar transform. Spatial extents must be even.
pub fn dwt2(img: &Tensor) -> Result<WaveletImage> {
    dwt2_with(img, Exec::default())
}

pub fn dwt2_with(img: &Tensor, exec: Exec) -> Result<WaveletImage> {
    const OP: &str = "dwt2";
    let (n, c, h, w) = img.dims4(OP)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid(OP, format!("spatial extents must be even, got {h}x{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, 4 * c, h2, w2]);
    let src = img.data();
    // One chunk per source plane: its four subbands are contiguous.
    exec.for_each_chunk(out.data_mut(), 4 * h2 * w2, |idx, bands| {
        let plane = &src[idx * h * w..(idx + 1) * h * w];
        let (ll, rest) = bands.split_at_mut(h2 * w2);
        let (hl, rest) = rest.split_at_mut(h2 * w2);
        let (lh, hh) = rest.split_at_mut(h2 * w2);
        for y in 0..h2 {
            for x in 0..w2 {
                let a = plane[2 * y * w + 2 * x];
                let b = plane[2 * y * w + 2 * x + 1];
                let cc = plane[(2 * y + 1) * w + 2 * x];
                let d = plane[(2 * y + 1) * w + 2 * x + 1];
                let i = y * w2 + x;
                ll[i] = 0.25 * (a + b + cc + d);
                hl[i] = 0.25 * (a - b + cc - d);
                lh[i] = 0.25 * (a + b - cc - d);
                hh[i] = 0.25 * (a - b - cc + d);
            }
        }
    });
    WaveletImage::new(out)
}

/// Scalar arithmetic the inverse-transform kernels are written against.
/// Instantiated with `f64` for real work and with [`Counted`] to audit
/// which arithmetic a kernel performs.
pub trait Sample: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Sample for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Arithmetic performed on coefficient values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub adds: u64,
    pub muls: u64,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts { adds: 0, muls: 0 }) };
}

/// An `f64` that tallies every addition/subtraction and multiplication
/// performed on it in a thread-local counter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Counted(pub f64);

impl Counted {
    fn bump(adds: u64, muls: u64) {
        COUNTS.with(|c| {
            let mut v = c.get();
            v.adds += adds;
            v.muls += muls;
            c.set(v);
        });
    }

    /// Resets this thread's counters, returning the previous totals.
    pub fn take_counts() -> OpCounts {
        COUNTS.with(|c| c.replace(OpCounts::default()))
    }
}

impl Add for Counted {
    type Output = Counted;
    fn add(self, rhs: Counted) -> Counted {
        Counted::bump(1, 0);
        Counted(self.0 + rhs.0)
    }
}

impl Sub for Counted {
    type Output = Counted;
    fn sub(self, rhs: Counted) -> Counted {
        Counted::bump(1, 0);
        Counted(self.0 - rhs.0)
    }
}

impl Mul for Counted {
    type Output = Counted;
    fn mul(self, rhs: Counted) -> Counted {
        Counted::bump(0, 1);
        Counted(self.0 * rhs.0)
    }
}

impl Neg for Counted {
    type Output = Counted;
    fn neg(self) -> Counted {
        Counted(-self.0)
    }
}

impl Sample for Counted {
    fn from_f64(v: f64) -> Self {
        Counted(v)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
}

/// Filter-bank inverse for one source plane: each output pixel is the
/// signed combination of its four coefficients through [`SYNTHESIS`].
fn idwt_plane_filter_bank<S: Sample>(bands: &[S], out: &mut [S], h2: usize, w2: usize) {
    let n = h2 * w2;
    let taps: [[S; 4]; 4] = SYNTHESIS.map(|row| row.map(S::from_f64));
    let w = 2 * w2;
    for y in 0..h2 {
        for x in 0..w2 {
            let i = y * w2 + x;
            let coeff = [bands[i], bands[n + i], bands[2 * n + i], bands[3 * n + i]];
            for (p, tap) in taps.iter().enumerate() {
                let mut acc = coeff[0] * tap[0];
                for b in 1..4 {
                    acc = acc + coeff[b] * tap[b];
                }
                out[(2 * y + p / 2) * w + 2 * x + p % 2] = acc;
            }
        }
    }
}

/// Add-only inverse for one source plane. The association order matches
/// [`idwt_plane_filter_bank`] term by term (`acc + c*(-1)` is exactly
/// `acc - c` in IEEE arithmetic), so both produce identical bits.
fn idwt_plane_addonly<S: Sample>(bands: &[S], out: &mut [S], h2: usize, w2: usize) {
    let n = h2 * w2;
    let w = 2 * w2;
    for y in 0..h2 {
        for x in 0..w2 {
            let i = y * w2 + x;
            let (ll, hl, lh, hh) = (bands[i], bands[n + i], bands[2 * n + i], bands[3 * n + i]);
            let top = 2 * y * w + 2 * x;
            let bottom = top + w;
            out[top] = ll + hl + lh + hh;
            out[top + 1] = ll - hl + lh - hh;
            out[bottom] = ll + hl - lh - hh;
            out[bottom + 1] = ll - hl - lh + hh;
        }
    }
}

type PlaneKernel<S> = fn(&[S], &mut [S], usize, usize);

fn idwt_dims(w: &WaveletImage) -> (usize, usize, usize, usize) {
    let s = w.tensor().shape();
    (s[0], s[1] / 4, s[2], s[3])
}

fn run_idwt_f64(w: &WaveletImage, kernel: PlaneKernel<f64>, exec: Exec) -> Tensor {
    let (n, c, h2, w2) = idwt_dims(w);
    let mut out = Tensor::zeros(&[n, c, 2 * h2, 2 * w2]);
    let src = w.tensor().data();
    let band_len = 4 * h2 * w2;
    exec.for_each_chunk(out.data_mut(), 4 * h2 * w2, |idx, plane| {
        kernel(&src[idx * band_len..(idx + 1) * band_len], plane, h2, w2);
    });
    out
}

fn run_idwt_counted(w: &WaveletImage, kernel: PlaneKernel<Counted>) -> (Tensor, OpCounts) {
    let (n, c, h2, w2) = idwt_dims(w);
    let src: Vec<Counted> = w.tensor().data().iter().map(|&v| Counted(v)).collect();
    let mut out = vec![Counted(0.0); n * c * 4 * h2 * w2];
    let band_len = 4 * h2 * w2;
    Counted::take_counts();
    for (idx, plane) in out.chunks_mut(band_len).enumerate() {
        kernel(&src[idx * band_len..(idx + 1) * band_len], plane, h2, w2);
    }
    let counts = Counted::take_counts();
    let data = out.into_iter().map(|v| v.0).collect();
    let t = Tensor::new(vec![n, c, 2 * h2, 2 * w2], data).expect("shape computed above");
    (t, counts)
}

/// Inverse Haar transform, written as a synthesis filter bank.
pub fn idwt2(w: &WaveletImage) -> Tensor {
    run_idwt_f64(w, idwt_plane_filter_bank::<f64>, Exec::default())
}

pub fn idwt2_with(w: &WaveletImage, exec: Exec) -> Tensor {
    run_idwt_f64(w, idwt_plane_filter_bank::<f64>, exec)
}

/// Inverse Haar transform using only additions and subtractions.
/// Bit-identical to [`idwt2`].
pub fn idwt2_addonly(w: &WaveletImage) -> Tensor {
    run_idwt_f64(w, idwt_plane_addonly::<f64>, Exec::default())
}

pub fn idwt2_addonly_with(w: &WaveletImage, exec: Exec) -> Tensor {
    run_idwt_f64(w, idwt_plane_addonly::<f64>, exec)
}

/// [`idwt2`] on instrumented scalars, returning the arithmetic it performed.
pub fn idwt2_counted(w: &WaveletImage) -> (Tensor, OpCounts) {
    run_idwt_counted(w, idwt_plane_filter_bank::<Counted>)
}

/// [`idwt2_addonly`] on instrumented scalars.
pub fn idwt2_addonly_counted(w: &WaveletImage) -> (Tensor, OpCounts) {
    run_idwt_counted(w, idwt_plane_addonly::<Counted>)
}

/// Convenience: wraps a raw `[N, 4C, h, w]` tensor and inverts it.
pub fn idwt2_tensor(coeffs: &Tensor) -> Result<Tensor> {
    Ok(idwt2_addonly(&WaveletImage::new(coeffs.clone())?))
}

/// Block-mean downsampling: the LL band of [`dwt2`].
pub fn ll_band(img: &Tensor) -> Result<Tensor> {
    let wav = dwt2(img)?;
    let (n, c4, h2, w2) = wav.tensor().dims4("ll_band")?;
    let c = c4 / 4;
    let plane = h2 * w2;
    let src = wav.tensor().data();
    let mut data = Vec::with_capacity(n * c * plane);
    for idx in 0..n * c {
        data.extend_from_slice(&src[4 * idx * plane..(4 * idx + 1) * plane]);
    }
    Tensor::new(vec![n, c, h2, w2], data)
}

/// One pyramid level: its wavelet coefficients and pixel-domain image.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub wavelet: WaveletImage,
    pub image: Tensor,
}

/// Per-scale images ordered coarse to fine, each level twice the size of
/// the previous one.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    levels: Vec<PyramidLevel>,
}

impl WaveletPyramid {
    pub fn new(levels: Vec<PyramidLevel>) -> Result<Self> {
        const OP: &str = "WaveletPyramid";
        if levels.is_empty() {
            return Err(invalid(OP, "pyramid needs at least one level"));
        }
        for (k, lvl) in levels.iter().enumerate() {
            let (_, _, h, w) = lvl.image.dims4(OP)?;
            if lvl.wavelet.image_size() != (h, w) {
                return Err(shape_err(
                    OP,
                    format!(
                        "level {k}: wavelet {:?} does not reconstruct to image {:?}",
                        lvl.wavelet.tensor().shape(),
                        lvl.image.shape()
                    ),
                ));
            }
            if k > 0 {
                let prev = levels[k - 1].image.shape();
                if prev[2] * 2 != h || prev[3] * 2 != w {
                    return Err(shape_err(
                        OP,
                        format!("level {k} size {h}x{w} is not twice level {} ({:?})", k - 1, prev),
                    ));
                }
            }
        }
        Ok(Self { levels })
    }

    /// Builds levels from wavelet predictions, reconstructing each image.
    pub fn from_wavelets(wavelets: Vec<WaveletImage>) -> Result<Self> {
        let levels = wavelets
            .into_iter()
            .map(|wavelet| PyramidLevel {
                image: idwt2_addonly(&wavelet),
                wavelet,
            })
            .collect();
        Self::new(levels)
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn finest(&self) -> &PyramidLevel {
        self.levels.last().expect("pyramid is never empty")
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.levels.iter().map(|l| l.image.clone()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.image.shape()[2]).collect()
    }
}

/// Pyramid of `levels` images, the finest being `img` itself and each
/// coarser one the LL band of the next. Level `k` has size
/// `size / 2^(levels - 1 - k)`.
pub fn build_pyramid(img: &Tensor, levels: usize) -> Result<WaveletPyramid> {
    const OP: &str = "build_pyramid";
    let (_, _, h, w) = img.dims4(OP)?;
    let max_levels = h.min(w).ilog2() as usize;
    if levels == 0 || levels > max_levels {
        return Err(invalid(
            OP,
            format!("levels must be in 1..={max_levels} for a {h}x{w} image, got {levels}"),
        ));
    }
    let mut images = vec![img.clone()];
    for _ in 1..levels {
        let next = ll_band(images.last().expect("non-empty"))?;
        images.push(next);
    }
    images.reverse();
    let levels = images
        .into_iter()
        .map(|image| {
            Ok(PyramidLevel {
                wavelet: dwt2(&image)?,
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    WaveletPyramid::new(levels)
}
