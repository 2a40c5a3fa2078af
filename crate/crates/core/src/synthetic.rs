//! Synthetic fine-grained images: a noisy background carrying one small
//! texture patch whose pattern identifies the class.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const PATCH: usize = 4;

/// Class `c` texture at `(y, x)` inside a `PATCH x PATCH` patch.
pub fn texture(class: usize, y: usize, x: usize) -> bool {
    match class % 4 {
        0 => y % 2 == 0,
        1 => x % 2 == 0,
        2 => (x + y) % 2 == 0,
        _ => (x / 2 + y / 2) % 2 == 0,
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: usize,
    /// Top-left corner of the patch.
    pub patch_at: (usize, usize),
}

/// Background noise level and patch contrast.
const BG_LO: f64 = 0.3;
const BG_HI: f64 = 0.6;
const ON: f64 = 0.95;
const OFF: f64 = 0.05;

fn render(rng: &mut rng::Rng, resolution: usize, class: usize, at: (usize, usize)) -> Tensor {
    let mut data: Vec<f64> = (0..resolution * resolution)
        .map(|_| rng.random_range(BG_LO..BG_HI))
        .collect();
    for y in 0..PATCH {
        for x in 0..PATCH {
            data[(at.0 + y) * resolution + at.1 + x] = if texture(class, y, x) { ON } else { OFF };
        }
    }
    Tensor::new([resolution, resolution], data).expect("image shape")
}

/// `per_class` images of each of `classes` (at most 4) texture classes with
/// the patch at a uniformly random location. Sample `i` depends only on
/// `(seed, i)`.
pub fn texture_patches(classes: usize, per_class: usize, resolution: usize, seed: u64) -> Result<Vec<Sample>> {
    if !(2..=4).contains(&classes) || resolution < PATCH {
        return Err(Error::Config(format!(
            "texture set needs 2..=4 classes and resolution >= {PATCH}, got {classes} and {resolution}"
        )));
    }
    Ok((0..classes * per_class)
        .map(|i| {
            let label = i % classes;
            let mut g = rng::indexed_stream(seed, "synthetic.texture", i as u64);
            let at = (
                g.random_range(0..=resolution - PATCH),
                g.random_range(0..=resolution - PATCH),
            );
            Sample {
                id: format!("tex{i:05}"),
                image: render(&mut g, resolution, label, at),
                label,
                patch_at: at,
            }
        })
        .collect())
}

/// Two classes told apart by where a checker patch sits: class 0 in the top
/// left quarter, class 1 in the bottom right quarter.
pub fn located_patches(per_class: usize, resolution: usize, seed: u64) -> Result<Vec<Sample>> {
    let quarter = resolution / 2;
    if quarter < PATCH {
        return Err(Error::Config(format!(
            "resolution {resolution} too small for located patches"
        )));
    }
    Ok((0..2 * per_class)
        .map(|i| {
            let label = i % 2;
            let mut g = rng::indexed_stream(seed, "synthetic.located", i as u64);
            let base = label * quarter;
            let at = (
                base + g.random_range(0..=quarter - PATCH),
                base + g.random_range(0..=quarter - PATCH),
            );
            Sample {
                id: format!("loc{i:05}"),
                image: render(&mut g, resolution, 2, at),
                label,
                patch_at: at,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_distinct() {
        let grids: Vec<Vec<bool>> = (0..4)
            .map(|c| (0..16).map(|i| texture(c, i / 4, i % 4)).collect())
            .collect();
        for a in 0..4 {
            assert_eq!(grids[a].iter().filter(|&&v| v).count(), 8);
            for b in a + 1..4 {
                assert_ne!(grids[a], grids[b]);
            }
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = texture_patches(4, 5, 16, 9).unwrap();
        let b = texture_patches(4, 5, 16, 9).unwrap();
        assert_eq!(a.len(), 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.label, y.label);
        }
        for c in 0..4 {
            assert_eq!(a.iter().filter(|s| s.label == c).count(), 5);
        }
        let s = &a[2];
        let (py, px) = s.patch_at;
        for y in 0..PATCH {
            for x in 0..PATCH {
                let v = s.image.data()[(py + y) * 16 + px + x];
                assert_eq!(v, if texture(2, y, x) { ON } else { OFF });
            }
        }
    }

    #[test]
    fn located_patches_stay_in_their_quarter() {
        for s in located_patches(10, 16, 1).unwrap() {
            let (y, x) = s.patch_at;
            let lo = s.label * 8;
            assert!(y >= lo && y + PATCH <= lo + 8 && x >= lo && x + PATCH <= lo + 8);
        }
    }
}
