//! Convolution, affine and activation primitives.
//!
//! Convolutions are cross-correlations (no kernel flip) with zero padding.
//! Each output plane is computed by one task with a fixed loop order, so the
//! result does not depend on [`Exec`].

use crate::error::{invalid, shape_err, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

/// Epsilon inside the pixel-norm square root.
pub const PIXEL_NORM_EPS: f64 = 1e-8;

fn out_extent(op: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(invalid(op, format!("kernel {k} larger than padded input {padded}")));
    }
    Ok((padded - k) / stride + 1)
}

/// Accumulates `wv * x[iy, ix]` into one output plane for a single kernel tap.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_tap(
    out: &mut [f64],
    plane: &[f64],
    wv: f64,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    (ky, kx): (usize, usize),
    stride: usize,
    pad: usize,
) {
    // ix = ox*stride + kx - pad must land in [0, w).
    let ox_lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let ox_hi = if w + pad > kx {
        ((w + pad - kx - 1) / stride + 1).min(ow)
    } else {
        0
    };
    if ox_lo >= ox_hi {
        return;
    }
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let row_in = &plane[iy as usize * w..(iy as usize + 1) * w];
        let row_out = &mut out[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            let shift = kx as isize - pad as isize;
            let src = &row_in[(ox_lo as isize + shift) as usize..(ox_hi as isize + shift) as usize];
            for (o, &v) in row_out[ox_lo..ox_hi].iter_mut().zip(src) {
                *o += wv * v;
            }
        } else {
            for ox in ox_lo..ox_hi {
                row_out[ox] += wv * row_in[ox * stride + kx - pad];
            }
        }
    }
}

pub fn conv2d_dense(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    conv2d_dense_with(x, w, stride, pad, Exec::default())
}

pub fn conv2d_dense_with(x: &Tensor, w: &Tensor, stride: usize, pad: usize, exec: Exec) -> Result<Tensor> {
    const OP: &str = "conv2d_dense";
    let (n, cin, h, wd) = x.dims4(OP)?;
    let (cout, wcin, kh, kw) = w.dims4(OP)?;
    if wcin != cin {
        return Err(shape_err(
            OP,
            format!(
                "input {:?} has {cin} channels but kernel {:?} expects {wcin}",
                x.shape(),
                w.shape()
            ),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(invalid(OP, format!("kernel extents must be odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(invalid(OP, "stride must be >= 1"));
    }
    let oh = out_extent(OP, h, kh, stride, pad)?;
    let ow = out_extent(OP, wd, kw, stride, pad)?;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let xs = x.data();
    let ws = w.data();
    let plane_in = h * wd;
    exec.for_each_chunk(out.data_mut(), oh * ow, |idx, plane_out| {
        let (b, co) = (idx / cout, idx % cout);
        let sample = &xs[b * cin * plane_in..(b + 1) * cin * plane_in];
        let wk = &ws[co * cin * kh * kw..(co + 1) * cin * kh * kw];
        for ci in 0..cin {
            let plane = &sample[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wk[(ci * kh + ky) * kw + kx];
                    accumulate_tap(plane_out, plane, wv, (h, wd), (oh, ow), (ky, kx), stride, pad);
                }
            }
        }
    });
    Ok(out)
}

/// Per-channel convolution with "same" output size; `w` is `[C, 1, kh, kw]`.
pub fn conv2d_depthwise(x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
    conv2d_depthwise_with(x, w, pad, Exec::default())
}

pub fn conv2d_depthwise_with(x: &Tensor, w: &Tensor, pad: usize, exec: Exec) -> Result<Tensor> {
    const OP: &str = "conv2d_depthwise";
    let (n, c, h, wd) = x.dims4(OP)?;
    let (wc, one, kh, kw) = w.dims4(OP)?;
    if wc != c || one != 1 {
        return Err(shape_err(
            OP,
            format!("input {:?} needs kernel [{c}, 1, k, k], got {:?}", x.shape(), w.shape()),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 || pad != (kh - 1) / 2 || kh != kw {
        return Err(invalid(
            OP,
            format!("need square odd kernel with pad (k-1)/2, got {kh}x{kw} pad {pad}"),
        ));
    }
    let mut out = Tensor::zeros(&[n, c, h, wd]);
    let xs = x.data();
    let ws = w.data();
    let plane = h * wd;
    exec.for_each_chunk(out.data_mut(), plane, |idx, plane_out| {
        let ch = idx % c;
        let src = &xs[idx * plane..(idx + 1) * plane];
        let wk = &ws[ch * kh * kw..(ch + 1) * kh * kw];
        for ky in 0..kh {
            for kx in 0..kw {
                accumulate_tap(plane_out, src, wk[ky * kw + kx], (h, wd), (h, wd), (ky, kx), 1, pad);
            }
        }
    });
    Ok(out)
}

/// 1x1 convolution: a per-pixel matrix product across channels.
pub fn conv2d_pointwise(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    conv2d_pointwise_with(x, w, Exec::default())
}

pub fn conv2d_pointwise_with(x: &Tensor, w: &Tensor, exec: Exec) -> Result<Tensor> {
    const OP: &str = "conv2d_pointwise";
    let (n, cin, h, wd) = x.dims4(OP)?;
    let (cout, wcin, kh, kw) = w.dims4(OP)?;
    if wcin != cin || kh != 1 || kw != 1 {
        return Err(shape_err(
            OP,
            format!(
                "input {:?} needs kernel [Cout, {cin}, 1, 1], got {:?}",
                x.shape(),
                w.shape()
            ),
        ));
    }
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    let xs = x.data();
    let ws = w.data();
    let plane = h * wd;
    exec.for_each_chunk(out.data_mut(), plane, |idx, plane_out| {
        let (b, co) = (idx / cout, idx % cout);
        let sample = &xs[b * cin * plane..(b + 1) * cin * plane];
        for ci in 0..cin {
            let wv = ws[co * cin + ci];
            for (o, &v) in plane_out.iter_mut().zip(&sample[ci * plane..(ci + 1) * plane]) {
                *o += wv * v;
            }
        }
    });
    Ok(out)
}

/// Affine map `x @ w^T + b` with `x: [N, Cin]`, `w: [Cout, Cin]`, `b: [Cout]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    const OP: &str = "linear";
    let (n, cin) = x.dims2(OP)?;
    let (cout, wcin) = w.dims2(OP)?;
    if wcin != cin || b.shape() != [cout] {
        return Err(shape_err(
            OP,
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[n, cout]);
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let (s, j) = (i / cout, i % cout);
        let row = &ws[j * cin..(j + 1) * cin];
        let xv = &xs[s * cin..(s + 1) * cin];
        *o = row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>() + bs[j];
    }
    Ok(out)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// `x + scale * noise`, broadcasting the single noise channel over all channels.
pub fn noise_inject(x: &Tensor, noise: &Tensor, scale: f64) -> Result<Tensor> {
    const OP: &str = "noise_inject";
    let (n, c, h, w) = x.dims4(OP)?;
    if noise.shape() != [n, 1, h, w] {
        return Err(shape_err(
            OP,
            format!(
                "x {:?} needs noise [{n}, 1, {h}, {w}], got {:?}",
                x.shape(),
                noise.shape()
            ),
        ));
    }
    let mut out = x.clone();
    let plane = h * w;
    let ns = noise.data();
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = idx / c;
        for (o, &z) in chunk.iter_mut().zip(&ns[b * plane..(b + 1) * plane]) {
            *o += scale * z;
        }
    }
    Ok(out)
}

/// Per-sample normalization to unit root-mean-square.
pub fn pixel_norm(x: &Tensor) -> Result<Tensor> {
    let (_, c) = x.dims2("pixel_norm")?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let inv = 1.0 / (ms + PIXEL_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Adds `b[c]` to every pixel of channel `c`.
pub fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4("add_channel_bias")?;
    if b.shape() != [c] {
        return Err(shape_err(
            "add_channel_bias",
            format!("x {:?} vs bias {:?}", x.shape(), b.shape()),
        ));
    }
    let mut out = x.clone();
    let bs = b.data();
    for (idx, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        let bv = bs[idx % c];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
    Ok(out)
}

/// Multiplies channel `c` of sample `n` by `s[n, c]`; `s` may also be `[C]`
/// (shared across the batch).
pub fn scale_channels(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    const OP: &str = "scale_channels";
    let (n, c, h, w) = x.dims4(OP)?;
    let shared = match s.shape() {
        [sc] if *sc == c => true,
        [sn, sc] if *sn == n && *sc == c => false,
        _ => {
            return Err(shape_err(
                OP,
                format!(
                    "x {:?} needs scales [{n}, {c}] or [{c}], got {:?}",
                    x.shape(),
                    s.shape()
                ),
            ))
        }
    };
    let mut out = x.clone();
    let ss = s.data();
    for (idx, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        let k = if shared { ss[idx % c] } else { ss[idx] };
        chunk.iter_mut().for_each(|v| *v *= k);
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("upsample_nearest2")?;
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let xs = x.data();
    for (idx, plane) in out.data_mut().chunks_mut(4 * h * w).enumerate() {
        let src = &xs[idx * h * w..(idx + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                plane[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(out)
}

/// Non-overlapping `factor x factor` mean pooling.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    const OP: &str = "avg_pool";
    let (n, c, h, w) = x.dims4(OP)?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(invalid(OP, format!("factor {factor} does not divide {h}x{w}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xs = x.data();
    let inv = 1.0 / (factor * factor) as f64;
    for (idx, plane) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let src = &xs[idx * h * w..(idx + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                plane[oy * ow + ox] = acc * inv;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    const OP: &str = "upsample_nearest";
    let (n, c, h, w) = x.dims4(OP)?;
    if factor == 0 {
        return Err(invalid(OP, "factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xs = x.data();
    for (idx, plane) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let src = &xs[idx * h * w..(idx + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                plane[y * ow + xx] = src[(y / factor) * w + xx / factor];
            }
        }
    }
    Ok(out)
}
