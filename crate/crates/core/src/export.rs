//! 8-bit RGB PNG export.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// `[-1, 1] -> [0, 255]`, rounding half up; out-of-range values clamp.
pub fn to_u8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 127.5 + 0.5).floor().min(255.0) as u8
}

/// Interleaved RGB bytes of sample `n` of a `[N, 3, H, W]` image.
pub fn to_rgb8(img: &Tensor, n: usize) -> Result<(u32, u32, Vec<u8>)> {
    let (batch, c, h, w) = img.dims4("to_rgb8")?;
    if c != 3 || n >= batch {
        return Err(shape_err(
            "to_rgb8",
            format!("sample {n} of {:?} (need 3 channels)", img.shape()),
        ));
    }
    let plane = h * w;
    let base = n * 3 * plane;
    let d = img.data();
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            out.push(to_u8(d[base + ch * plane + p]));
        }
    }
    Ok((w as u32, h as u32, out))
}

pub fn encode_png(img: &Tensor, n: usize) -> Result<Vec<u8>> {
    let (w, h, raw) = to_rgb8(img, n)?;
    let buf = RgbImage::from_raw(w, h, raw).expect("buffer sized from the tensor");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Png(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_png(path: impl AsRef<Path>, img: &Tensor, n: usize) -> Result<()> {
    std::fs::write(path, encode_png(img, n)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_mapping() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        // 127.5 exactly: half rounds up.
        assert_eq!(to_u8(0.0), 128);
        assert_eq!(to_u8(-0.5), 64);
        assert_eq!(to_u8(-2.0), 0);
        assert_eq!(to_u8(7.0), 255);
    }

    #[test]
    fn png_decodes_to_same_pixels() {
        let t = Tensor::from_fn(&[2, 3, 4, 5], |i| ((i % 17) as f64 / 8.0) - 1.0);
        let bytes = encode_png(&t, 1).unwrap();
        let back = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (5, 4));
        assert_eq!(back.into_raw(), to_rgb8(&t, 1).unwrap().2);
        assert_eq!(bytes, encode_png(&t, 1).unwrap());
        assert!(encode_png(&t, 2).is_err());
    }
}
