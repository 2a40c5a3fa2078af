//! ZCA whitening in factored form.
//!
//! `W = U diag(1/√(λ+ε)) Uᵀ` over the full eigenbasis of the covariance. Only
//! the `r` eigenvectors with nonzero eigenvalue are stored; the orthogonal
//! complement has eigenvalue 0 and is scaled by `1/√ε`. Applying
//! `W x = U_r ((s − 1/√ε) ⊙ U_rᵀ x) + x/√ε` therefore matches the dense matrix
//! exactly while costing `O(d r)` instead of `O(d²)`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::checkpoint::ArrayFile;
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Zca {
    pub mean: Vec<f64>,
    /// `[d, r]` orthonormal columns, row-major.
    pub basis: Vec<f64>,
    pub rank: usize,
    /// `1/√(λ_i + ε)` for each stored column.
    pub scales: Vec<f64>,
    pub epsilon: f64,
    /// Shape of one image (`[H, W]`).
    pub shape: Vec<usize>,
}

impl Zca {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits on equally shaped images. Rejects fewer than two images and data
    /// with no variance at all.
    pub fn fit(images: &[&Tensor], epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("zca epsilon must be positive, got {epsilon}")));
        }
        if images.len() < 2 {
            return Err(Error::Data(format!(
                "zca needs at least 2 images, got {}",
                images.len()
            )));
        }
        let shape = images[0].shape().to_vec();
        if let Some(bad) = images.iter().find(|t| t.shape() != shape.as_slice()) {
            return Err(Error::Data(format!(
                "zca: image shape {:?} differs from {:?}",
                bad.shape(),
                shape
            )));
        }
        let n = images.len();
        let d = images[0].numel();
        let mut mean = vec![0.0; d];
        for img in images {
            for (m, v) in mean.iter_mut().zip(img.data()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut xc = Vec::with_capacity(n * d);
        for img in images {
            xc.extend(img.data().iter().zip(&mean).map(|(v, m)| v - m));
        }
        if xc.iter().all(|v| *v == 0.0) {
            return Err(Error::Data("zca: all images are identical".into()));
        }
        let x = MatRef::row_major(&xc, n, d);

        let (basis, eigenvalues) = if d <= n {
            let mut cov = vec![0.0; d * d];
            gemm(x.t(), x, 0.0, &mut cov);
            cov.iter_mut().for_each(|v| *v /= n as f64);
            let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
            let keep = kept(eig.eigenvalues.as_slice());
            let mut basis = vec![0.0; d * keep.len()];
            for (j, &i) in keep.iter().enumerate() {
                for r in 0..d {
                    basis[r * keep.len() + j] = eig.eigenvectors[(r, i)];
                }
            }
            (basis, keep.iter().map(|&i| eig.eigenvalues[i]).collect::<Vec<_>>())
        } else {
            // Gram trick: eigenvectors of XXᵀ/n map to those of XᵀX/n via Xᵀ.
            let mut gram = vec![0.0; n * n];
            gemm(x, x.t(), 0.0, &mut gram);
            gram.iter_mut().for_each(|v| *v /= n as f64);
            let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &gram));
            let keep = kept(eig.eigenvalues.as_slice());
            let r = keep.len();
            let mut v = vec![0.0; n * r];
            for (j, &i) in keep.iter().enumerate() {
                let norm = (n as f64 * eig.eigenvalues[i]).sqrt();
                for row in 0..n {
                    v[row * r + j] = eig.eigenvectors[(row, i)] / norm;
                }
            }
            let mut basis = vec![0.0; d * r];
            gemm(x.t(), MatRef::row_major(&v, n, r), 0.0, &mut basis);
            (basis, keep.iter().map(|&i| eig.eigenvalues[i]).collect())
        };
        let scales = eigenvalues.iter().map(|l| 1.0 / (l + epsilon).sqrt()).collect();
        Ok(Self {
            mean,
            rank: eigenvalues.len(),
            basis,
            scales,
            epsilon,
            shape,
        })
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != self.shape.as_slice() {
            return Err(Error::Data(format!(
                "zca fitted on {:?} images, got {:?}",
                self.shape,
                image.shape()
            )));
        }
        let (d, r) = (self.dim(), self.rank);
        let xc: Vec<f64> = image.data().iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        let base = MatRef::row_major(&self.basis, d, r);
        let mut proj = vec![0.0; r];
        gemm(base.t(), MatRef::row_major(&xc, d, 1), 0.0, &mut proj);
        let inv_eps = 1.0 / self.epsilon.sqrt();
        for (p, s) in proj.iter_mut().zip(&self.scales) {
            *p *= s - inv_eps;
        }
        let mut out: Vec<f64> = xc.iter().map(|v| v * inv_eps).collect();
        gemm(base, MatRef::row_major(&proj, r, 1), 1.0, &mut out);
        Tensor::new(self.shape.clone(), out)
    }

    pub fn to_arrays(&self) -> Result<ArrayFile> {
        let mut f = ArrayFile::new();
        let d = self.dim();
        f.push("zca.mean", Tensor::new(self.shape.clone(), self.mean.clone())?)?;
        f.push("zca.basis", Tensor::new([d, self.rank], self.basis.clone())?)?;
        f.push("zca.scales", Tensor::new([self.rank], self.scales.clone())?)?;
        f.push("zca.epsilon", Tensor::scalar(self.epsilon))?;
        Ok(f)
    }

    pub fn from_arrays(f: &ArrayFile) -> Result<Self> {
        let get = |name: &str| {
            f.get(name)
                .ok_or_else(|| Error::Data(format!("whitening file lacks {name}")))
        };
        let mean = get("zca.mean")?;
        let basis = get("zca.basis")?;
        let scales = get("zca.scales")?;
        let epsilon = get("zca.epsilon")?.item();
        let d = mean.numel();
        let rank = scales.numel();
        if basis.shape() != [d, rank] {
            return Err(Error::Data(format!(
                "whitening basis has shape {:?}, expected [{d}, {rank}]",
                basis.shape()
            )));
        }
        Ok(Self {
            mean: mean.data().to_vec(),
            basis: basis.data().to_vec(),
            rank,
            scales: scales.data().to_vec(),
            epsilon,
            shape: mean.shape().to_vec(),
        })
    }
}

fn kept(eigenvalues: &[f64]) -> Vec<usize> {
    let max = eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut idx: Vec<usize> = (0..eigenvalues.len())
        .filter(|&i| eigenvalues[i] > max * RANK_TOL)
        .collect();
    idx.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]).then(a.cmp(&b)));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = rows.len() as f64;
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        (0..d)
            .map(|a| {
                (0..d)
                    .map(|b| rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n)
                    .collect()
            })
            .collect()
    }

    fn whiten_all(z: &Zca, imgs: &[Tensor]) -> Vec<Vec<f64>> {
        imgs.iter().map(|t| z.apply(t).unwrap().into_data()).collect()
    }

    #[test]
    fn diagonal_two_d_case() {
        // Four points with per-axis variance 2 and 0.5, uncorrelated.
        let s2 = 2f64.sqrt();
        let h = 0.5f64.sqrt();
        let pts = [[s2, h], [-s2, h], [s2, -h], [-s2, -h]];
        let imgs: Vec<Tensor> = pts.iter().map(|p| Tensor::new([1, 2], p.to_vec()).unwrap()).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let z = Zca::fit(&refs, 1e-12).unwrap();
        let cov = covariance(&whiten_all(&z, &imgs));
        assert!((cov[0][0] - 1.0).abs() < 1e-9 && (cov[1][1] - 1.0).abs() < 1e-9);
        assert!(cov[0][1].abs() < 1e-12);
        // x scaled by 1/√2, y by √2.
        let w = z.apply(&imgs[0]).unwrap();
        assert!((w.data()[0] - 1.0).abs() < 1e-9 && (w.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn full_rank_data_whitens_to_identity() {
        let mut rng = crate::rng::stream(3, "zca.test");
        let imgs: Vec<Tensor> = (0..60)
            .map(|_| {
                let a: f64 = rng.random();
                let b: f64 = rng.random();
                let data = (0..9)
                    .map(|k| a * k as f64 * 0.1 + b + rng.random::<f64>() * 0.3)
                    .collect();
                Tensor::new([3, 3], data).unwrap()
            })
            .collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let z = Zca::fit(&refs, 1e-14).unwrap();
        let cov = covariance(&whiten_all(&z, &imgs));
        for (a, row) in cov.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-6, "cov[{a}][{b}] = {v}");
            }
        }
    }

    #[test]
    fn gram_path_matches_dense_matrix() {
        // d = 12 > n = 5 takes the Gram branch; compare with an explicit W.
        let mut rng = crate::rng::stream(5, "zca.gram");
        let imgs: Vec<Tensor> = (0..5)
            .map(|_| Tensor::new([3, 4], (0..12).map(|_| rng.random()).collect()).unwrap())
            .collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let eps = 1e-3;
        let z = Zca::fit(&refs, eps).unwrap();
        assert_eq!(z.rank, 4);
        let rows: Vec<Vec<f64>> = imgs.iter().map(|t| t.data().to_vec()).collect();
        let cov = covariance(&rows);
        let eig = SymmetricEigen::new(DMatrix::from_fn(12, 12, |a, b| cov[a][b]));
        let mut w = DMatrix::zeros(12, 12);
        for i in 0..12 {
            let u = eig.eigenvectors.column(i);
            let l = eig.eigenvalues[i].max(0.0);
            w += u * u.transpose() / (l + eps).sqrt();
        }
        let probe = Tensor::new([3, 4], (0..12).map(|k| (k as f64).sin()).collect()).unwrap();
        let xc = nalgebra::DVector::from_iterator(12, probe.data().iter().zip(&z.mean).map(|(v, m)| v - m));
        let want = &w * xc;
        let got = z.apply(&probe).unwrap();
        for (g, e) in got.data().iter().zip(want.iter()) {
            assert!((g - e).abs() < 1e-6 * (1.0 + e.abs()), "{g} vs {e}");
        }
    }

    #[test]
    fn identity_covariance_is_nearly_unchanged() {
        // ±√3 along each axis: zero mean, covariance exactly I.
        let a = 3f64.sqrt();
        let imgs: Vec<Tensor> = (0..3)
            .flat_map(|axis| {
                [-a, a].map(|s| {
                    let mut v = vec![0.0; 3];
                    v[axis] = s;
                    Tensor::new([3], v).unwrap()
                })
            })
            .collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let z = Zca::fit(&refs, 1e-5).unwrap();
        for t in &imgs {
            assert!(z.apply(t).unwrap().max_abs_diff(t) < 1e-5);
        }
    }

    #[test]
    fn rejects_degenerate_input_and_roundtrips() {
        let a = Tensor::full([2, 2], 0.3);
        assert_eq!(
            Zca::fit(&[&a, &a, &a], 1e-5).unwrap_err().kind(),
            crate::ErrorKind::Data
        );
        assert!(Zca::fit(&[&a], 1e-5).is_err());
        let b = Tensor::new([2, 2], vec![0.1, 0.9, 0.4, 0.2]).unwrap();
        let z = Zca::fit(&[&a, &b], 1e-5).unwrap();
        let back = Zca::from_arrays(&ArrayFile::from_bytes(&z.to_arrays().unwrap().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, z);
        assert!(z.apply(&Tensor::zeros([4])).is_err());
    }
}
