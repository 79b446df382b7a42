//! Gaussian-process regression with a Matern-5/2 ARD kernel, shared across
//! all output coefficients; hyperparameters maximize the summed log marginal
//! likelihood by multi-start gradient ascent.

use super::linalg::{chol_logdet, chol_solve, cholesky, forward_solve};
use super::PodGprError;
use crate::tensor::{AdamState, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const SQRT5: f64 = 2.236_067_977_499_79;
pub const MAX_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    /// Noise variance pinned to a value (interpolation regime when tiny).
    Fixed(f64),
    /// Optimize the noise variance, bounded below.
    Optimize { floor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GprConfig {
    pub restarts: usize,
    pub iters: usize,
    pub lr: f64,
    pub noise: NoiseMode,
    pub seed: u64,
}

impl Default for GprConfig {
    fn default() -> Self {
        GprConfig {
            restarts: 5,
            iters: 80,
            lr: 0.08,
            noise: NoiseMode::Optimize { floor: 1e-10 },
            seed: 0,
        }
    }
}

/// Fitted GP with one weight vector per output coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct GprModel {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
    /// Extra diagonal jitter that was needed for positive definiteness.
    pub jitter: f64,
    /// Training inputs, `[M, d]` (standardized by the caller).
    pub x_train: Tensor,
    /// Lower Cholesky factor of K + (noise + jitter) I, row-major `M x M`.
    pub chol: Vec<f64>,
    /// Weight vectors, `[r, M]`: row j solves (K + sigma_n^2 I) a = y_j.
    pub weights: Tensor,
}

impl GprModel {
    /// Matern-5/2 covariance between two (standardized) inputs.
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        matern52(a, b, &self.lengthscales, self.signal_var)
    }

    /// Posterior means for every output plus the (shared) latent variance.
    pub fn predict(&self, x: &[f64]) -> Result<(Vec<f64>, f64), PodGprError> {
        let (m, d) = (self.x_train.shape()[0], self.x_train.shape()[1]);
        if x.len() != d {
            return Err(PodGprError::Dim(format!("input dim {} vs {}", x.len(), d)));
        }
        let kstar: Vec<f64> =
            (0..m).map(|i| self.kernel(x, self.x_train.row(i))).collect();
        let r = self.weights.shape()[0];
        let mut means = vec![0.0; r];
        for j in 0..r {
            means[j] = self.weights.row(j).iter().zip(&kstar).map(|(&w, &k)| w * k).sum();
        }
        let v = forward_solve(&self.chol, m, &kstar);
        let var = (self.signal_var - v.iter().map(|x| x * x).sum::<f64>()).max(0.0);
        Ok((means, var))
    }
}

fn matern52(a: &[f64], b: &[f64], ls: &[f64], s2: f64) -> f64 {
    let mut r2 = 0.0;
    for ((&x, &y), &l) in a.iter().zip(b).zip(ls) {
        let d = (x - y) / l;
        r2 += d * d;
    }
    let r = r2.sqrt();
    s2 * (1.0 + SQRT5 * r + 5.0 * r2 / 3.0) * (-SQRT5 * r).exp()
}

struct LmlState {
    chol: Vec<f64>,
    alphas: Vec<Vec<f64>>,
    kinv: Vec<f64>,
    lml: f64,
    jitter: f64,
}

/// Build K, factor it (with a jitter ladder) and assemble everything the
/// gradient needs.
fn evaluate(
    x: &Tensor,
    ys: &[Vec<f64>],
    ls: &[f64],
    s2: f64,
    noise: f64,
) -> Result<LmlState, PodGprError> {
    let m = x.shape()[0];
    let mut k = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = matern52(x.row(i), x.row(j), ls, s2);
            k[i * m + j] = v;
            k[j * m + i] = v;
        }
    }
    let mut jitter = 0.0f64;
    let chol = loop {
        let mut kd = k.clone();
        for i in 0..m {
            kd[i * m + i] += noise + jitter;
        }
        match cholesky(&kd, m) {
            Some(l) => break l,
            None => {
                jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
                if jitter > MAX_JITTER {
                    return Err(PodGprError::NonPdKernel { jitter: MAX_JITTER });
                }
            }
        }
    };
    let logdet = chol_logdet(&chol, m);
    let mut alphas = Vec::with_capacity(ys.len());
    let mut lml = 0.0;
    for y in ys {
        let alpha = chol_solve(&chol, m, y);
        lml += -0.5 * y.iter().zip(&alpha).map(|(&a, &b)| a * b).sum::<f64>()
            - 0.5 * logdet
            - 0.5 * m as f64 * (2.0 * PI).ln();
        alphas.push(alpha);
    }
    // K^-1 column by column.
    let mut kinv = vec![0.0; m * m];
    let mut e = vec![0.0; m];
    for c in 0..m {
        e[c] = 1.0;
        let col = chol_solve(&chol, m, &e);
        for rr in 0..m {
            kinv[rr * m + c] = col[rr];
        }
        e[c] = 0.0;
    }
    Ok(LmlState { chol, alphas, kinv, lml, jitter })
}

/// Fit shared hyperparameters and per-output weights. `x` is `[M, d]`
/// (standardized inputs), `y` is `[M, r]` (one column per coefficient).
pub fn fit_gpr(x: &Tensor, y: &Tensor, cfg: &GprConfig) -> Result<GprModel, PodGprError> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(PodGprError::Dim(format!(
            "inputs {:?} vs targets {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (m, d) = (x.shape()[0], x.shape()[1]);
    if m < 2 {
        return Err(PodGprError::Dim("need at least 2 training points".into()));
    }
    let r = y.shape()[1];
    let ys: Vec<Vec<f64>> = (0..r)
        .map(|j| (0..m).map(|i| y.at(i, j)).collect())
        .collect();
    let y_var = {
        let total: f64 = ys
            .iter()
            .map(|col| {
                let mean: f64 = col.iter().sum::<f64>() / m as f64;
                col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64
            })
            .sum();
        (total / r as f64).max(1e-12)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..cfg.restarts.max(1) {
        // theta = [log ls_0..d-1, log s2, (log noise)]
        let mut theta: Vec<f64> = (0..d)
            .map(|_| if restart == 0 { 0.0 } else { rng.gen_range(-1.5..1.5) })
            .collect();
        theta.push(y_var.ln());
        let optimize_noise = matches!(cfg.noise, NoiseMode::Optimize { .. });
        if optimize_noise {
            theta.push((y_var * 1e-4).ln());
        }
        let mut params = vec![Tensor::vector(theta)];
        let mut adam = AdamState::new(&params);
        let mut last_lml = f64::NEG_INFINITY;
        for _ in 0..cfg.iters {
            let th = params[0].data().to_vec();
            let (ls, s2, noise) = unpack(&th, d, cfg.noise);
            let state = match evaluate(x, &ys, &ls, s2, noise) {
                Ok(s) => s,
                Err(_) => break,
            };
            last_lml = state.lml;
            let grad = lml_gradient(x, &state, &ls, s2, noise, cfg.noise);
            // Ascent: feed the negated gradient to the minimizer.
            let neg: Tensor = Tensor::vector(grad.iter().map(|g| -g).collect());
            if adam.update(&mut params, &[neg], cfg.lr).is_err() {
                break;
            }
            clamp_theta(params[0].data_mut(), d, cfg.noise);
        }
        let improved = best.as_ref().map_or(true, |(b, _)| last_lml > *b);
        if last_lml.is_finite() && improved {
            best = Some((last_lml, params[0].data().to_vec()));
        }
    }
    let (_, theta) = best.ok_or_else(|| {
        PodGprError::Dim("hyperparameter optimization diverged on every restart".into())
    })?;
    let (ls, s2, noise) = unpack(&theta, d, cfg.noise);
    let state = evaluate(x, &ys, &ls, s2, noise)?;
    let mut weights = Vec::with_capacity(r * m);
    for alpha in &state.alphas {
        weights.extend_from_slice(alpha);
    }
    Ok(GprModel {
        lengthscales: ls,
        signal_var: s2,
        noise_var: noise,
        jitter: state.jitter,
        x_train: x.clone(),
        chol: state.chol,
        weights: Tensor::new(vec![r, m], weights).expect("sized"),
    })
}

fn unpack(theta: &[f64], d: usize, noise: NoiseMode) -> (Vec<f64>, f64, f64) {
    let ls: Vec<f64> = theta[..d].iter().map(|t| t.exp()).collect();
    let s2 = theta[d].exp();
    let n = match noise {
        NoiseMode::Fixed(v) => v,
        NoiseMode::Optimize { floor } => theta[d + 1].exp().max(floor),
    };
    (ls, s2, n)
}

fn clamp_theta(theta: &mut [f64], d: usize, noise: NoiseMode) {
    for t in theta[..d].iter_mut() {
        *t = t.clamp(-6.0, 6.0);
    }
    theta[d] = theta[d].clamp(-12.0, 12.0);
    if let NoiseMode::Optimize { floor } = noise {
        theta[d + 1] = theta[d + 1].clamp(floor.ln(), 2.0);
    }
}

/// d LML / d theta with theta the log-parameters, summed over outputs:
/// 0.5 * [sum_j alpha_j^T dK alpha_j - r * tr(K^-1 dK)].
fn lml_gradient(
    x: &Tensor,
    state: &LmlState,
    ls: &[f64],
    s2: f64,
    noise: f64,
    noise_mode: NoiseMode,
) -> Vec<f64> {
    let m = x.shape()[0];
    let d = x.shape()[1];
    let r = state.alphas.len() as f64;
    let n_theta = d + 1 + usize::from(matches!(noise_mode, NoiseMode::Optimize { .. }));
    let mut grad = vec![0.0; n_theta];

    // Pairwise loop once; accumulate each theta's contribution.
    for i in 0..m {
        for j in i..m {
            let (xi, xj) = (x.row(i), x.row(j));
            let mut r2 = 0.0;
            let mut comp = vec![0.0; d];
            for k in 0..d {
                let dd = (xi[k] - xj[k]) / ls[k];
                comp[k] = dd * dd;
                r2 += dd * dd;
            }
            let rr = r2.sqrt();
            let e = (-SQRT5 * rr).exp();
            let kv = s2 * (1.0 + SQRT5 * rr + 5.0 * r2 / 3.0) * e;
            // dk/dr
            let dk_dr = -s2 * (5.0 * rr / 3.0) * (1.0 + SQRT5 * rr) * e;
            // trace/alpha weights for the (i, j) entry
            let sym = if i == j { 1.0 } else { 2.0 };
            let mut a_term = 0.0;
            for alpha in &state.alphas {
                a_term += alpha[i] * alpha[j];
            }
            let t_term = state.kinv[i * m + j];
            let w = sym * (a_term - r * t_term);

            // log lengthscales: dr/dlog l_k = -comp_k / r
            if rr > 0.0 {
                for k in 0..d {
                    let dkdl = dk_dr * (-comp[k] / rr);
                    grad[k] += 0.5 * w * dkdl;
                }
            }
            // log signal variance: dK = K entrywise
            grad[d] += 0.5 * w * kv;
            // log noise: diagonal only
            if i == j {
                if let NoiseMode::Optimize { .. } = noise_mode {
                    grad[d + 1] += 0.5 * w * noise;
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn kernel_at_zero_distance_is_signal_variance() {
        let model = GprModel {
            lengthscales: vec![0.7, 2.0],
            signal_var: 3.5,
            noise_var: 0.0,
            jitter: 0.0,
            x_train: Tensor::zeros(&[1, 2]),
            chol: vec![1.0],
            weights: Tensor::zeros(&[1, 1]),
        };
        let x = [0.3, -0.4];
        assert!((model.kernel(&x, &x) - 3.5).abs() < 1e-15);
    }

    #[test]
    fn interpolates_training_data_with_tiny_noise() {
        let xs = column(&[-1.2, -0.4, 0.1, 0.8, 1.5]);
        let ys = column(&[0.3, -0.1, 0.4, 0.9, -0.5]);
        let cfg = GprConfig { noise: NoiseMode::Fixed(1e-10), ..Default::default() };
        let model = fit_gpr(&xs, &ys, &cfg).unwrap();
        for i in 0..5 {
            let (mean, _) = model.predict(xs.row(i)).unwrap();
            assert!(
                (mean[0] - ys.at(i, 0)).abs() < 1e-6,
                "point {i}: {} vs {}",
                mean[0],
                ys.at(i, 0)
            );
        }
    }

    #[test]
    fn leave_one_out_on_linear_function() {
        // Targets linear in x; LOO error must stay below 1% of target std.
        let n = 9;
        let xs_all: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        let ys_all: Vec<f64> = xs_all.iter().map(|x| 0.7 * x - 0.2).collect();
        let std = {
            let mean: f64 = ys_all.iter().sum::<f64>() / n as f64;
            (ys_all.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n as f64).sqrt()
        };
        let mut worst: f64 = 0.0;
        for leave in 0..n {
            let xs: Vec<f64> =
                xs_all.iter().enumerate().filter(|(i, _)| *i != leave).map(|(_, &v)| v).collect();
            let ys: Vec<f64> =
                ys_all.iter().enumerate().filter(|(i, _)| *i != leave).map(|(_, &v)| v).collect();
            let cfg = GprConfig {
                noise: NoiseMode::Fixed(1e-10),
                restarts: 3,
                iters: 120,
                ..Default::default()
            };
            let model = fit_gpr(&column(&xs), &column(&ys), &cfg).unwrap();
            let (mean, _) = model.predict(&[xs_all[leave]]).unwrap();
            worst = worst.max((mean[0] - ys_all[leave]).abs());
        }
        assert!(worst < 0.01 * std, "worst LOO error {worst}, std {std}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let xs = Tensor::new(vec![6, 2], (0..12).map(|i| (i as f64 * 0.7).sin()).collect())
            .unwrap();
        let ys = column(&[0.1, -0.5, 0.8, 0.3, -0.2, 0.6]);
        let ycols = vec![ys.data().to_vec()];
        let noise_mode = NoiseMode::Optimize { floor: 1e-12 };
        let theta = vec![0.2, -0.3, 0.5, -6.0];
        let (ls, s2, noise) = unpack(&theta, 2, noise_mode);
        let state = evaluate(&xs, &ycols, &ls, s2, noise).unwrap();
        let grad = lml_gradient(&xs, &state, &ls, s2, noise, noise_mode);
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut tp = theta.clone();
            tp[k] += h;
            let (l1, s1, n1) = unpack(&tp, 2, noise_mode);
            let up = evaluate(&xs, &ycols, &l1, s1, n1).unwrap().lml;
            let mut tm = theta.clone();
            tm[k] -= h;
            let (l2, s2b, n2) = unpack(&tm, 2, noise_mode);
            let down = evaluate(&xs, &ycols, &l2, s2b, n2).unwrap().lml;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (grad[k] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "theta[{k}]: analytic {} vs fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn duplicate_points_with_zero_noise_need_jitter_or_fail() {
        // Two identical rows make K singular; with fixed zero-ish noise the
        // jitter ladder must either rescue it or report non-PD.
        let xs = Tensor::new(vec![3, 1], vec![0.5, 0.5, 1.0]).unwrap();
        let ys = column(&[1.0, 1.0, 2.0]);
        let cfg = GprConfig { noise: NoiseMode::Fixed(0.0), restarts: 1, iters: 1, ..Default::default() };
        match fit_gpr(&xs, &ys, &cfg) {
            Ok(model) => assert!(model.jitter > 0.0 && model.jitter <= MAX_JITTER),
            Err(PodGprError::NonPdKernel { .. }) => {}
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }
}
