//! Central finite-difference oracle for gradients.
//!
//! Only forward evaluations are used, so the oracle is independent of the
//! backward pass it checks.

use super::{Tape, Tensor, TensorError, Var};

/// Evaluate `f` at the given parameter values.
pub fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Central finite differences, one evaluation pair per parameter entry.
pub fn finite_diff_grads<F>(f: &F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut grads = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut g = Tensor::zeros(p.shape());
        for i in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[i] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[i] -= h;
            g.data_mut()[i] = (eval(f, &plus)? - eval(f, &minus)?) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Largest elementwise relative error between autodiff and finite-difference
/// gradients. Entries below `floor` in magnitude are compared on the `floor`
/// scale so that finite-difference noise on near-zero derivatives does not
/// dominate.
pub fn max_rel_err_floor<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    floor: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let fd = finite_diff_grads(&f, params, h)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let ad = tape.grad(loss, &vars)?;

    let mut worst = 0.0f64;
    for (a, b) in ad.iter().zip(&fd) {
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// [`max_rel_err_floor`] with the default near-zero floor of `1e-3`.
pub fn max_rel_err<F>(f: F, params: &[Tensor], h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    max_rel_err_floor(f, params, h, 1e-3)
}
