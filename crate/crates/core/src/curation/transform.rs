//! Random geometric and photometric augmentation of grayscale images.
//!
//! Semantics follow the widely used Keras `ImageDataGenerator`: each output
//! pixel samples the source at `c + R (t + Sh Z (p − c))` in `(row, col)`
//! coordinates, with bilinear interpolation and a constant fill outside the
//! frame; horizontal flip and brightness scaling follow the affine step.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationParams {
    /// Degrees; rotation is uniform in `±rotation_range`.
    pub rotation_range: f64,
    /// Fraction of the width.
    pub width_shift: f64,
    /// Fraction of the height.
    pub height_shift: f64,
    pub horizontal_flip: bool,
    /// Degrees, as Keras interprets `shear_range`.
    pub shear: f64,
    pub brightness: (f64, f64),
    /// Each axis zooms independently by a factor in `1 ± zoom`.
    pub zoom: f64,
    /// Value used for pixels sampled from outside the frame.
    pub fill_value: f64,
    pub zca_whitening: bool,
    pub zca_epsilon: f64,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        Self {
            rotation_range: 15.0,
            width_shift: 0.2,
            height_shift: 0.1,
            horizontal_flip: true,
            shear: 0.2,
            brightness: (0.7, 1.3),
            zoom: 0.1,
            fill_value: 0.0,
            zca_whitening: true,
            zca_epsilon: 1e-5,
        }
    }
}

impl AugmentationParams {
    /// Settings under which every sampled transform is the identity.
    pub fn identity() -> Self {
        Self {
            rotation_range: 0.0,
            width_shift: 0.0,
            height_shift: 0.0,
            horizontal_flip: false,
            shear: 0.0,
            brightness: (1.0, 1.0),
            zoom: 0.0,
            fill_value: 0.0,
            zca_whitening: false,
            zca_epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_range", self.rotation_range),
            ("width_shift", self.width_shift),
            ("height_shift", self.height_shift),
            ("shear", self.shear),
            ("zoom", self.zoom),
        ];
        if let Some((name, v)) = ranges.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "augmentation {name} must be finite and >= 0, got {v}"
            )));
        }
        let (lo, hi) = self.brightness;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("brightness range ({lo}, {hi}) is invalid")));
        }
        if self.zoom >= 1.0 {
            return Err(Error::Config("zoom must be below 1".into()));
        }
        if !(self.zca_epsilon > 0.0) {
            return Err(Error::Config("zca_epsilon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fill_value) {
            return Err(Error::Config("fill_value must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Every value sampled for one augmented image, in application order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformLog {
    pub rotation_deg: f64,
    /// Pixels, positive moves content up.
    pub shift_rows: f64,
    /// Pixels, positive moves content left.
    pub shift_cols: f64,
    pub shear_deg: f64,
    pub zoom_rows: f64,
    pub zoom_cols: f64,
    pub flip: bool,
    pub brightness: f64,
    pub fill_value: f64,
    /// Steps applied, in order. `zca` is applied when the dataset is loaded.
    pub steps: Vec<String>,
}

impl TransformLog {
    pub fn identity() -> Self {
        sample(
            &AugmentationParams::identity(),
            1,
            &mut crate::rng::stream(0, "identity"),
        )
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws one transform for a `size × size` image. Always consumes the same
/// number of random values, so disabling one field leaves the others intact.
pub fn sample(params: &AugmentationParams, size: usize, rng: &mut Rng) -> TransformLog {
    let s = size as f64;
    let rotation_deg = uniform(rng, -params.rotation_range, params.rotation_range);
    let shift_rows = uniform(rng, -params.height_shift, params.height_shift) * s;
    let shift_cols = uniform(rng, -params.width_shift, params.width_shift) * s;
    let shear_deg = uniform(rng, -params.shear, params.shear);
    let zoom_rows = uniform(rng, 1.0 - params.zoom, 1.0 + params.zoom);
    let zoom_cols = uniform(rng, 1.0 - params.zoom, 1.0 + params.zoom);
    let coin = rng.random::<f64>();
    let brightness = uniform(rng, params.brightness.0, params.brightness.1);
    let mut steps = vec!["affine".to_string(), "flip".into(), "brightness".into()];
    if params.zca_whitening {
        steps.push("zca".into());
    }
    TransformLog {
        rotation_deg,
        shift_rows,
        shift_cols,
        shear_deg,
        zoom_rows,
        zoom_cols,
        flip: params.horizontal_flip && coin < 0.5,
        brightness,
        fill_value: params.fill_value,
        steps,
    }
}

/// Bilinear sample at fractional `(r, c)`; neighbours outside the frame read `fill`.
fn bilinear(data: &[f64], h: usize, w: usize, r: f64, c: f64, fill: f64) -> f64 {
    if r <= -1.0 || c <= -1.0 || r >= h as f64 || c >= w as f64 {
        return fill;
    }
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let px = |rr: f64, cc: f64| {
        if rr < 0.0 || cc < 0.0 || rr >= h as f64 || cc >= w as f64 {
            fill
        } else {
            data[rr as usize * w + cc as usize]
        }
    };
    let mut v = px(r0, c0) * (1.0 - fr) * (1.0 - fc);
    if fc != 0.0 {
        v += px(r0, c0 + 1.0) * (1.0 - fr) * fc;
    }
    if fr != 0.0 {
        v += px(r0 + 1.0, c0) * fr * (1.0 - fc);
        if fc != 0.0 {
            v += px(r0 + 1.0, c0 + 1.0) * fr * fc;
        }
    }
    v
}

/// Applies the affine, flip and brightness steps to an `[H, W]` image in
/// `[0, 1]`. Output stays in `[0, 1]`.
pub fn apply(image: &Tensor, log: &TransformLog) -> Result<Tensor> {
    if image.ndim() != 2 {
        return Err(Error::invalid(
            "augment",
            format!("expected [H, W], got {:?}", image.shape()),
        ));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin_t, cos_t) = log.rotation_deg.to_radians().sin_cos();
    let (sin_s, cos_s) = log.shear_deg.to_radians().sin_cos();
    // Sh · Z
    let a = [[log.zoom_rows, -sin_s * log.zoom_cols], [0.0, cos_s * log.zoom_cols]];
    let src = image.data();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (dr, dc) = (i as f64 - cr, j as f64 - cc);
            let pr = a[0][0] * dr + a[0][1] * dc + log.shift_rows;
            let pc = a[1][0] * dr + a[1][1] * dc + log.shift_cols;
            let r = cr + cos_t * pr - sin_t * pc;
            let c = cc + sin_t * pr + cos_t * pc;
            let jj = if log.flip { w - 1 - j } else { j };
            out[i * w + jj] = bilinear(src, h, w, r, c, log.fill_value);
        }
    }
    for v in &mut out {
        *v = (*v * log.brightness).clamp(0.0, 1.0);
    }
    Tensor::new([h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new(
            [h, w],
            (0..h * w).map(|k| (k as f64 * 0.37).sin() * 0.5 + 0.5).collect(),
        )
        .unwrap()
    }

    fn log_with(f: impl FnOnce(&mut TransformLog)) -> TransformLog {
        let mut l = TransformLog::identity();
        f(&mut l);
        l
    }

    #[test]
    fn identity_reproduces_pixels_exactly() {
        let img = ramp(7, 9);
        let mut rng = stream(1, "t");
        for _ in 0..5 {
            let l = sample(&AugmentationParams::identity(), 9, &mut rng);
            assert_eq!(apply(&img, &l).unwrap(), img);
        }
    }

    #[test]
    fn integer_shift_moves_content() {
        let img = ramp(5, 6);
        let l = log_with(|l| {
            l.shift_rows = 1.0;
            l.shift_cols = -2.0;
        });
        let out = apply(&img, &l).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let (r, c) = (i as isize + 1, j as isize - 2);
                let want = if (0..5).contains(&r) && (0..6).contains(&c) {
                    img.at(&[r as usize, c as usize])
                } else {
                    0.0
                };
                assert!((out.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quarter_turns_and_flip() {
        let img = ramp(5, 5);
        let rot = apply(&img, &log_with(|l| l.rotation_deg = 90.0)).unwrap();
        // src = c + R(p − c) with R = [[0,−1],[1,0]] → src(i, j) = (4 − j, i).
        for i in 0..5 {
            for j in 0..5 {
                assert!((rot.at(&[i, j]) - img.at(&[4 - j, i])).abs() < 1e-9);
            }
        }
        let flip = apply(&img, &log_with(|l| l.flip = true)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(flip.at(&[i, j]), img.at(&[i, 4 - j]));
            }
        }
    }

    #[test]
    fn zoom_and_brightness() {
        let img = Tensor::full([6, 6], 0.6);
        let out = apply(&img, &log_with(|l| l.brightness = 1.5)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.9).abs() < 1e-12));
        let out = apply(&img, &log_with(|l| l.brightness = 2.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
        // Zooming out (factor > 1) samples beyond the frame near the border.
        let out = apply(
            &img,
            &log_with(|l| {
                l.zoom_rows = 1.5;
                l.zoom_cols = 1.5;
            }),
        )
        .unwrap();
        assert_eq!(out.at(&[0, 0]), 0.0);
        assert!((out.at(&[2, 2]) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn samples_stay_in_range_and_are_seeded() {
        let p = AugmentationParams::default();
        let mut a = stream(9, "aug");
        let mut b = stream(9, "aug");
        for _ in 0..200 {
            let l = sample(&p, 64, &mut a);
            assert_eq!(l, sample(&p, 64, &mut b));
            assert!(l.rotation_deg.abs() <= 15.0);
            assert!(l.shift_rows.abs() <= 6.4 && l.shift_cols.abs() <= 12.8);
            assert!(l.shear_deg.abs() <= 0.2);
            assert!((0.9..=1.1).contains(&l.zoom_rows) && (0.9..=1.1).contains(&l.zoom_cols));
            assert!((0.7..=1.3).contains(&l.brightness));
            assert_eq!(l.steps.last().map(String::as_str), Some("zca"));
        }
        assert!(AugmentationParams::default().validate().is_ok());
        let bad = AugmentationParams {
            brightness: (1.2, 0.8),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
