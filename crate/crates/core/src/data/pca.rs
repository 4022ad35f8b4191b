//! Principal component projection by power iteration with deflation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const TOLERANCE: f64 = 1e-9;
const MAX_ITERS: usize = 1000;
/// Eigenvalues below this fraction of the leading one count as rank-deficient.
const RANK_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct Pca {
    /// `n × d` projected data.
    pub projected: Tensor,
    /// `d × d_feat`, one unit-norm component per row.
    pub components: Tensor,
    pub mean: Vec<f64>,
    /// Variance captured by each component.
    pub explained_variance: Vec<f64>,
    /// Total variance of the centered input.
    pub total_variance: f64,
}

impl Pca {
    pub fn explained_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| {
                if self.total_variance > 0.0 {
                    v / self.total_variance
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Projects mean-centered rows of `x` onto its top `d` principal
/// components. Each component's sign is chosen so its largest-magnitude
/// loading is positive.
pub fn pca_reduce(x: &Tensor, d: usize) -> Result<Pca> {
    let (n, f) = x.dims2();
    if d == 0 {
        return Err(Error::invalid("target dimension must be positive"));
    }
    if d > n.min(f) {
        return Err(Error::Rank {
            requested: d,
            achievable: n.min(f),
        });
    }
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = x.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let denom = (n.max(2) - 1) as f64;
    let mut cov = centered.transpose().matmul(&centered)?.map(|v| v / denom);
    let total_variance: f64 = (0..f).map(|i| cov.get(i, i)).sum();

    let mut init = rng::stream(0, "pca");
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut explained = Vec::with_capacity(d);
    for k in 0..d {
        let mut u: Vec<f64> = (0..f).map(|_| init.random_range(-1.0..1.0)).collect();
        orthonormalize(&mut u, &components);
        for _ in 0..MAX_ITERS {
            let mut next = matvec(&cov, &u);
            orthonormalize(&mut next, &components);
            // compare up to sign
            let dot: f64 = next.iter().zip(&u).map(|(a, b)| a * b).sum();
            if dot < 0.0 {
                next.iter_mut().for_each(|v| *v = -*v);
            }
            let delta = next.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            u = next;
            if delta < TOLERANCE {
                break;
            }
        }
        let cu = matvec(&cov, &u);
        let lambda: f64 = u.iter().zip(&cu).map(|(a, b)| a * b).sum();
        let lead = explained.first().copied().unwrap_or(lambda);
        if lambda <= RANK_FLOOR * lead.max(f64::MIN_POSITIVE) || lambda <= 0.0 {
            return Err(Error::Rank {
                requested: d,
                achievable: k,
            });
        }
        let pivot = u
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            u.iter_mut().for_each(|v| *v = -*v);
        }
        // deflate
        for i in 0..f {
            for j in 0..f {
                cov.data_mut()[i * f + j] -= lambda * u[i] * u[j];
            }
        }
        explained.push(lambda);
        components.push(u);
    }
    let components = Tensor::from_rows(&components)?;
    let projected = centered.matmul(&components.transpose())?;
    Ok(Pca {
        projected,
        components,
        mean,
        explained_variance: explained,
        total_variance,
    })
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Gram-Schmidt against `basis`, then unit-normalize.
fn orthonormalize(u: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in u.iter_mut().zip(b) {
            *x -= dot * y;
        }
    }
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        u.iter_mut().for_each(|x| *x /= norm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn collinear_points_have_full_ratio_on_first_component() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let pca = pca_reduce(&Tensor::from_rows(&rows).unwrap(), 1).unwrap();
        assert!((pca.explained_ratio()[0] - 1.0).abs() < 1e-12);
        let c = pca.components.row(0);
        // direction (1,2)/√5 with positive dominant loading
        assert!((c[0] - 1.0 / 5f64.sqrt()).abs() < 1e-9 && (c[1] - 2.0 / 5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn rank_deficient_request_is_rejected() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let err = pca_reduce(&Tensor::from_rows(&rows).unwrap(), 2).unwrap_err();
        assert!(matches!(
            err,
            Error::Rank {
                requested: 2,
                achievable: 1
            }
        ));
        let err = pca_reduce(&Tensor::zeros(&[3, 5]), 4).unwrap_err();
        assert!(matches!(err, Error::Rank { achievable: 3, .. }));
    }

    #[test]
    fn isotropic_data_recovers_unit_eigenvalues() {
        let mut rng = rng::stream(11, "test");
        let n = 10_000;
        let data: Vec<f64> = (0..n * 2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::matrix(n, 2, data).unwrap();
        // oracle: sample covariance eigenvalues of a 2×2 matrix in closed form
        let mean = |c: usize| (0..n).map(|i| x.get(i, c)).sum::<f64>() / n as f64;
        let (m0, m1) = (mean(0), mean(1));
        let cov = |a: usize, ma: f64, b: usize, mb: f64| {
            (0..n).map(|i| (x.get(i, a) - ma) * (x.get(i, b) - mb)).sum::<f64>() / (n - 1) as f64
        };
        let (sxx, syy, sxy) = (cov(0, m0, 0, m0), cov(1, m1, 1, m1), cov(0, m0, 1, m1));
        let half_trace = (sxx + syy) / 2.0;
        let disc = (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
        let oracle = [half_trace + disc, half_trace - disc];

        let pca = pca_reduce(&x, 2).unwrap();
        for (ev, want) in pca.explained_variance.iter().zip(oracle) {
            // near-degenerate spectrum: power iteration stops at the iteration cap
            assert!((ev - want).abs() < 1e-4, "{ev} vs {want}");
            assert!((ev - 1.0).abs() < 0.05, "{ev}");
        }
    }

    #[test]
    fn full_dimension_projection_is_an_isometry() {
        let mut rng = rng::stream(5, "test");
        let data: Vec<f64> = (0..40 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::matrix(40, 4, data).unwrap();
        let p = pca_reduce(&x, 4).unwrap().projected;
        for i in 0..40 {
            for j in 0..40 {
                let dx: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                let dp: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                assert!((dx.sqrt() - dp.sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projected_columns_are_orthogonal() {
        let mut rng = rng::stream(9, "test");
        let n = 200;
        // anisotropic data with well-separated spectrum
        let scales = [5.0, 3.0, 2.0, 1.0, 0.5, 0.1];
        let data: Vec<f64> = (0..n)
            .flat_map(|_| {
                scales.map(|s| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s * z
                })
            })
            .collect();
        let x = Tensor::matrix(n, 6, data).unwrap();
        let p = pca_reduce(&x, 4).unwrap().projected;
        for a in 0..4 {
            for b in (a + 1)..4 {
                let dot: f64 = (0..n).map(|i| p.get(i, a) * p.get(i, b)).sum::<f64>() / n as f64;
                assert!(dot.abs() < 1e-6, "{a},{b}: {dot}");
            }
        }
    }
}
