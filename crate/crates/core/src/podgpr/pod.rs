//! Proper orthogonal decomposition by the method of snapshots: eigenanalysis
//! of the M x M Gram matrix instead of an N x N problem, since the snapshot
//! count M is far below the node count N.

use super::linalg::jacobi_eigh;
use super::PodGprError;
use crate::tensor::Tensor;

/// Truncated orthonormal basis of dominant field modes.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    /// Mean field over the snapshots (length N).
    pub mean: Vec<f64>,
    /// Orthonormal mode columns, `[N, r]`.
    pub modes: Tensor,
    /// Singular values of the centered snapshot matrix, non-increasing.
    pub singular_values: Vec<f64>,
    /// Set when the requested mode count exceeded the snapshot rank.
    pub truncated_to_rank: bool,
}

impl PodBasis {
    pub fn num_modes(&self) -> usize {
        self.singular_values.len()
    }

    pub fn field_len(&self) -> usize {
        self.mean.len()
    }

    /// Coefficients of a field in the basis: modes^T (field - mean).
    pub fn project(&self, field: &[f64]) -> Result<Vec<f64>, PodGprError> {
        if field.len() != self.mean.len() {
            return Err(PodGprError::Dim(format!(
                "field has {} entries, basis expects {}",
                field.len(),
                self.mean.len()
            )));
        }
        let (n, r) = (self.mean.len(), self.num_modes());
        let mut coeffs = vec![0.0; r];
        for j in 0..r {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.modes.at(i, j) * (field[i] - self.mean[i]);
            }
            coeffs[j] = acc;
        }
        Ok(coeffs)
    }

    /// mean + modes * coeffs.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Vec<f64>, PodGprError> {
        if coeffs.len() != self.num_modes() {
            return Err(PodGprError::Dim(format!(
                "{} coefficients for a {}-mode basis",
                coeffs.len(),
                self.num_modes()
            )));
        }
        let (n, r) = (self.mean.len(), self.num_modes());
        let mut field = self.mean.clone();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..r {
                acc += self.modes.at(i, j) * coeffs[j];
            }
            field[i] += acc;
        }
        Ok(field)
    }
}

/// Fit a POD basis from a snapshot matrix (`[M, N]`, one snapshot per row),
/// centered internally by the mean field. If `r` exceeds the numerical rank
/// the basis is truncated and flagged.
pub fn fit_pod(snapshots: &Tensor, r: usize) -> Result<PodBasis, PodGprError> {
    if snapshots.rank() != 2 {
        return Err(PodGprError::Dim(format!("snapshots must be [M, N], got {:?}", snapshots.shape())));
    }
    let (m, n) = (snapshots.shape()[0], snapshots.shape()[1]);
    if m == 0 || n == 0 {
        return Err(PodGprError::Dim("empty snapshot matrix".into()));
    }
    if r == 0 || r > m.min(n) {
        return Err(PodGprError::Dim(format!(
            "mode count {r} outside 1..=min(M={m}, N={n})"
        )));
    }
    let mut mean = vec![0.0; n];
    for i in 0..m {
        for (j, v) in snapshots.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    // Centered snapshots and their Gram matrix.
    let centered: Vec<f64> = (0..m)
        .flat_map(|i| {
            snapshots
                .row(i)
                .iter()
                .zip(&mean)
                .map(|(&v, &mu)| v - mu)
                .collect::<Vec<f64>>()
        })
        .collect();
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let mut acc = 0.0;
            for k in 0..n {
                acc += centered[i * n + k] * centered[j * n + k];
            }
            gram[i * m + j] = acc;
            gram[j * m + i] = acc;
        }
    }
    let (eigvals, eigvecs) = jacobi_eigh(&gram, m);
    let floor = eigvals.first().copied().unwrap_or(0.0).max(0.0) * 1e-12;
    let rank = eigvals.iter().take_while(|&&l| l > floor).count();
    let keep = r.min(rank.max(1));
    let truncated = keep < r;

    let mut modes = vec![0.0; n * keep];
    let mut singular_values = Vec::with_capacity(keep);
    for j in 0..keep {
        let sigma = eigvals[j].max(0.0).sqrt();
        singular_values.push(sigma);
        // u_j = Y^T v_j / sigma
        for i in 0..m {
            let w = eigvecs[i * m + j] / sigma;
            if w == 0.0 {
                continue;
            }
            for k in 0..n {
                modes[k * keep + j] += w * centered[i * n + k];
            }
        }
    }
    Ok(PodBasis {
        mean,
        modes: Tensor::new(vec![n, keep], modes).expect("sized"),
        singular_values,
        truncated_to_rank: truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rank2_snapshots(m: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b1: Vec<f64> = (0..n).map(|k| (k as f64 * 0.2).sin()).collect();
        let b2: Vec<f64> = (0..n).map(|k| (k as f64 * 0.05).cos()).collect();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
            data.extend((0..n).map(|k| a * b1[k] + b * b2[k] + 3.0));
        }
        Tensor::new(vec![m, n], data).unwrap()
    }

    #[test]
    fn exact_rank_capture() {
        let snaps = rank2_snapshots(10, 40, 1);
        let basis = fit_pod(&snaps, 2).unwrap();
        assert!(!basis.truncated_to_rank);
        for i in 0..10 {
            let field = snaps.row(i);
            let rec = basis.reconstruct(&basis.project(field).unwrap()).unwrap();
            let err: f64 = field
                .iter()
                .zip(&rec)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err < 1e-10, "snapshot {i} reconstruction error {err}");
        }
    }

    #[test]
    fn over_requesting_modes_truncates_with_flag() {
        let snaps = rank2_snapshots(8, 30, 2);
        let basis = fit_pod(&snaps, 6).unwrap();
        assert!(basis.truncated_to_rank);
        assert!(basis.num_modes() <= 3); // rank 2 plus rounding headroom
    }

    #[test]
    fn modes_orthonormal_and_energy_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..20 * 50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let snaps = Tensor::new(vec![20, 50], data).unwrap();
        let basis = fit_pod(&snaps, 8).unwrap();
        let r = basis.num_modes();
        for a in 0..r {
            for b in 0..r {
                let dot: f64 =
                    (0..50).map(|i| basis.modes.at(i, a) * basis.modes.at(i, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "modes {a},{b}: {dot}");
            }
        }
        for w in basis.singular_values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn projection_identities() {
        let snaps = rank2_snapshots(12, 25, 4);
        let basis = fit_pod(&snaps, 2).unwrap();
        // mean -> zero coefficients
        let zero = basis.project(&basis.mean).unwrap();
        assert!(zero.iter().all(|c| c.abs() < 1e-12));
        // mean + 3 * mode_0 -> (3, 0)
        let field: Vec<f64> =
            (0..25).map(|i| basis.mean[i] + 3.0 * basis.modes.at(i, 0)).collect();
        let coeffs = basis.project(&field).unwrap();
        assert!((coeffs[0] - 3.0).abs() < 1e-10);
        assert!(coeffs[1].abs() < 1e-10);
        // Projection is a contraction around the mean.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let random: Vec<f64> = (0..25).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let rec = basis.reconstruct(&basis.project(&random).unwrap()).unwrap();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        assert!(dist(&random, &rec) <= dist(&random, &basis.mean) + 1e-12);
    }

    #[test]
    fn matches_dense_svd_oracle() {
        // Independent oracle: nalgebra's SVD of the centered snapshot matrix.
        let snaps = rank2_snapshots(15, 30, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Add full-rank noise so all modes are exercised.
        let noisy = Tensor::new(
            vec![15, 30],
            snaps.data().iter().map(|v| v + rng.gen_range(-0.01..0.01)).collect(),
        )
        .unwrap();
        let basis = fit_pod(&noisy, 10).unwrap();
        let mut mean = vec![0.0; 30];
        for i in 0..15 {
            for (j, v) in noisy.row(i).iter().enumerate() {
                mean[j] += v / 15.0;
            }
        }
        let centered = nalgebra::DMatrix::from_fn(15, 30, |i, j| noisy.at(i, j) - mean[j]);
        let svd = centered.svd(false, false);
        let mut oracle: Vec<f64> = svd.singular_values.iter().copied().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        for (k, (got, want)) in basis.singular_values.iter().zip(&oracle).enumerate() {
            let rel = (got - want).abs() / want.max(1e-300);
            assert!(rel < 1e-9, "sigma_{k}: {got} vs {want} (rel {rel})");
        }
    }
}
