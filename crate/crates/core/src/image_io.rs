//! Grayscale PNG I/O and bilinear resampling.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loads any image as 8-bit grayscale scaled to `[0, 1]`, shape `[H, W]`.
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Tensor::new([h as usize, w as usize], data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn gray_to_image(t: &Tensor) -> Result<GrayImage> {
    if t.ndim() != 2 {
        return Err(Error::invalid(
            "gray image",
            format!("expected [H, W], got {:?}", t.shape()),
        ));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(t.data()[y as usize * w + x as usize])])
    }))
}

/// Writes `[H, W]` values in `[0, 1]` (clamped) as an 8-bit PNG.
pub fn save_gray(path: &Path, t: &Tensor) -> Result<()> {
    gray_to_image(t)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Source coordinate and blend weights for one output index under
/// half-pixel-centre alignment: `src = (dst + 0.5) * in / out - 0.5`,
/// clamped to the valid range.
fn taps(dst: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) * input as f64 / output as f64 - 0.5).clamp(0.0, (input - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(input - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize of a `[H, W]` map with half-pixel-centre alignment.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if t.ndim() != 2 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "resize",
            format!("cannot resize {:?} to {out_h}x{out_w}", t.shape()),
        ));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
            let bottom = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new([out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hand_case() {
        let m = Tensor::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]);
        let up = resize_bilinear(&m, 4, 4).unwrap();
        for y in 0..4 {
            let row = &up.data()[y * 4..y * 4 + 4];
            for (got, want) in row.iter().zip([0.0, 0.25, 0.75, 1.0]) {
                assert!((got - want).abs() < 1e-12);
            }
        }
        let same = resize_bilinear(&m, 2, 2).unwrap();
        assert_eq!(same, m);
        let c = resize_bilinear(&Tensor::full([3, 2], 0.4), 7, 5).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn png_roundtrip_is_quantised() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let t = Tensor::new([2, 3], vec![0.0, 0.5, 1.0, 0.2, 0.8, 1.4]).unwrap();
        save_gray(&p, &t).unwrap();
        let back = load_gray(&p).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a.clamp(0.0, 1.0) - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert!(load_gray(&dir.path().join("missing.png")).is_err());
    }
}
