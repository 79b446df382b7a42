//! Coordinate networks: the shift-modulated multiscale MLP, the
//! hypernetwork producing its modulations, and the residual MLP used by the
//! vanilla baseline and the latent processor.
//!
//! Architecture of the multiscale field: each scale's encoding passes through
//! a *shared* stack of hidden layers `u <- ReLU(W_l u + b_l + phi_l)`; the
//! per-scale outputs are concatenated and mapped by one final linear layer.
//! Modulation vectors `phi_l` are added to every hidden pre-activation; the
//! final concat layer is unmodulated and has no activation.

use crate::encoding::{EncodingError, MultiscaleEncoder};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("conditioning has dim {got}, hypernetwork expects {expected}")]
    ConditioningDim { expected: usize, got: usize },
    #[error("{0} modulation vectors supplied, network has {1} modulated layers")]
    ModulationCount(usize, usize),
    #[error("modulation {index} has width {got}, layer expects {expected}")]
    ModulationWidth { index: usize, expected: usize, got: usize },
    #[error("input has dim {got}, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("network needs at least one hidden layer")]
    NoHiddenLayers,
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Elementwise activation used by hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Silu => tape.silu(x),
        }
    }
}

/// One dense layer; weights are `[out, in]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let limit = scale * (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let w = Tensor::new(
            vec![fan_out, fan_in],
            (0..fan_out * fan_in).map(|_| dist.sample(rng)).collect(),
        )
        .expect("sized by construction");
        Linear { w, b: Tensor::zeros(&[fan_out]) }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

/// Layer variables lifted onto a tape.
pub type LinearVars = Vec<(Var, Var)>;

pub fn lift_linears(tape: &mut Tape, layers: &[Linear], trainable: bool) -> LinearVars {
    layers
        .iter()
        .map(|l| {
            if trainable {
                (tape.var(l.w.clone()), tape.var(l.b.clone()))
            } else {
                (tape.constant(l.w.clone()), tape.constant(l.b.clone()))
            }
        })
        .collect()
}

/// `x @ W^T + b` for a row-batch `x` of shape `[N, in]`.
fn linear_forward(tape: &mut Tape, (w, b): (Var, Var), x: Var) -> Result<Var, TensorError> {
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    tape.add_row(y, b)
}

// ── Neural field ───────────────────────────────────────────────────────

/// Shift-modulated multiscale Fourier-feature MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralField {
    pub encoder: MultiscaleEncoder,
    pub hidden: Vec<Linear>,
    pub output: Linear,
}

impl NeuralField {
    /// Hidden layers are Kaiming-uniform; the final layer starts at 1/10
    /// scale so early predictions sit near the mean field.
    pub fn init(
        encoder: MultiscaleEncoder,
        hidden_widths: &[usize],
        output_dim: usize,
        seed: u64,
    ) -> Result<Self, FieldError> {
        if hidden_widths.is_empty() {
            return Err(FieldError::NoHiddenLayers);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Vec::with_capacity(hidden_widths.len());
        let mut fan_in = encoder.output_width();
        for &h in hidden_widths {
            hidden.push(Linear::init(fan_in, h, 1.0, &mut rng));
            fan_in = h;
        }
        let concat_width = encoder.num_scales() * fan_in;
        let output = Linear::init(concat_width, output_dim, 0.1, &mut rng);
        Ok(NeuralField { encoder, hidden, output })
    }

    pub fn coord_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output.out_dim()
    }

    /// Widths of the modulated (hidden) layers, in order.
    pub fn modulation_widths(&self) -> Vec<usize> {
        self.hidden.iter().map(|l| l.out_dim()).collect()
    }

    /// Flat parameter list: hidden (w, b) pairs, then the output layer.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 2);
        for l in &self.hidden {
            out.push(l.w.clone());
            out.push(l.b.clone());
        }
        out.push(self.output.w.clone());
        out.push(self.output.b.clone());
        out
    }

    pub fn num_params(&self) -> usize {
        2 * self.hidden.len() + 2
    }

    pub fn set_params(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), self.num_params());
        for (i, l) in self.hidden.iter_mut().enumerate() {
            l.w = params[2 * i].clone();
            l.b = params[2 * i + 1].clone();
        }
        self.output.w = params[params.len() - 2].clone();
        self.output.b = params[params.len() - 1].clone();
    }

    /// Validate a modulation list against the hidden stack.
    pub fn check_modulations(&self, phis: &[Tensor]) -> Result<(), FieldError> {
        if phis.len() != self.hidden.len() {
            return Err(FieldError::ModulationCount(phis.len(), self.hidden.len()));
        }
        for (i, (p, l)) in phis.iter().zip(&self.hidden).enumerate() {
            if p.shape() != [l.out_dim()] {
                return Err(FieldError::ModulationWidth {
                    index: i,
                    expected: l.out_dim(),
                    got: p.numel(),
                });
            }
        }
        Ok(())
    }

    /// Field values at a batch of points (`[N, d]` -> `[N, d_u]`).
    ///
    /// Runs the same tape path as training, so values are bitwise identical
    /// to any other evaluation of the same points, batched or not.
    pub fn query_field(&self, points: &Tensor, phis: &[Tensor]) -> Result<Tensor, FieldError> {
        self.check_modulations(phis)?;
        if points.rank() != 2 || points.shape()[1] != self.coord_dim() {
            return Err(FieldError::InputDim {
                expected: self.coord_dim(),
                got: if points.rank() == 2 { points.shape()[1] } else { points.rank() },
            });
        }
        if points.shape()[0] == 0 {
            return Ok(Tensor::zeros(&[0, self.output_dim()]));
        }
        let mut tape = Tape::new();
        let vars = FieldVars::lift(&mut tape, self, false);
        let encodings = encode_to_tape(&mut tape, &self.encoder, points)?;
        let phi_vars: Vec<Var> = phis.iter().map(|p| tape.constant(p.clone())).collect();
        let out = vars.forward(&mut tape, &encodings, Some(&phi_vars))?;
        Ok(tape.value(out).clone())
    }

    /// Single-point forward.
    pub fn forward(&self, x: &[f64], phis: &[Tensor]) -> Result<Vec<f64>, FieldError> {
        let pts = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let out = self.query_field(&pts, phis)?;
        Ok(out.data().to_vec())
    }
}

/// Encode points and insert the per-scale encodings as tape constants.
pub fn encode_to_tape(
    tape: &mut Tape,
    encoder: &MultiscaleEncoder,
    points: &Tensor,
) -> Result<Vec<Var>, FieldError> {
    Ok(encoder.encode_batch(points)?.into_iter().map(|e| tape.constant(e)).collect())
}

/// Tape-lifted neural field.
pub struct FieldVars {
    pub hidden: LinearVars,
    pub output: (Var, Var),
    num_scales: usize,
}

impl FieldVars {
    /// Rebuild the structure from a flat var list in [`NeuralField::params`]
    /// order: hidden (w, b) pairs, then the output layer.
    pub fn from_param_vars(vars: &[Var], num_scales: usize) -> Self {
        debug_assert!(vars.len() >= 4 && vars.len() % 2 == 0);
        FieldVars {
            hidden: vars[..vars.len() - 2].chunks(2).map(|c| (c[0], c[1])).collect(),
            output: (vars[vars.len() - 2], vars[vars.len() - 1]),
            num_scales,
        }
    }

    pub fn lift(tape: &mut Tape, field: &NeuralField, trainable: bool) -> Self {
        let hidden = lift_linears(tape, &field.hidden, trainable);
        let ow = field.output.w.clone();
        let ob = field.output.b.clone();
        let output = if trainable {
            (tape.var(ow), tape.var(ob))
        } else {
            (tape.constant(ow), tape.constant(ob))
        };
        FieldVars { hidden, output, num_scales: field.encoder.num_scales() }
    }

    pub fn all_vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.hidden.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.push(self.output.0);
        v.push(self.output.1);
        v
    }

    /// Shared-stack forward over per-scale encodings (`[N, w]` each).
    /// `phis`, when present, holds one `[h_l]` vector per hidden layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        encodings: &[Var],
        phis: Option<&[Var]>,
    ) -> Result<Var, TensorError> {
        debug_assert_eq!(encodings.len(), self.num_scales);
        let mut scale_outputs = Vec::with_capacity(encodings.len());
        for &enc in encodings {
            let mut h = enc;
            for (l, &(w, b)) in self.hidden.iter().enumerate() {
                let wt = tape.transpose(w)?;
                let pre = tape.matmul(h, wt)?;
                let shift = match phis {
                    Some(p) => tape.add(b, p[l])?,
                    None => b,
                };
                let pre = tape.add_row(pre, shift)?;
                h = tape.relu(pre)?;
            }
            scale_outputs.push(h);
        }
        let joined = if scale_outputs.len() == 1 {
            scale_outputs[0]
        } else {
            tape.concat_cols(&scale_outputs)?
        };
        linear_forward(tape, self.output, joined)
    }
}

// ── Hypernetwork ───────────────────────────────────────────────────────

/// MLP mapping a conditioning vector (latent code or raw parameters) to the
/// concatenated per-layer modulation vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypernetwork {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    mod_widths: Vec<usize>,
}

impl Hypernetwork {
    pub fn init(
        input_dim: usize,
        hidden_dims: &[usize],
        mod_widths: Vec<usize>,
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: usize = mod_widths.iter().sum();
        let mut layers = Vec::with_capacity(hidden_dims.len() + 1);
        let mut fan_in = input_dim;
        for &h in hidden_dims {
            layers.push(Linear::init(fan_in, h, 1.0, &mut rng));
            fan_in = h;
        }
        layers.push(Linear::init(fan_in, total, 0.1, &mut rng));
        Hypernetwork { layers, activation, mod_widths }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn mod_widths(&self) -> &[usize] {
        &self.mod_widths
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect()
    }

    pub fn num_params(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn set_params(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), self.num_params());
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.w = params[2 * i].clone();
            l.b = params[2 * i + 1].clone();
        }
    }

    /// Value-level modulations for a conditioning vector.
    pub fn modulations(&self, conditioning: &[f64]) -> Result<Vec<Tensor>, FieldError> {
        if conditioning.len() != self.input_dim() {
            return Err(FieldError::ConditioningDim {
                expected: self.input_dim(),
                got: conditioning.len(),
            });
        }
        let mut tape = Tape::new();
        let vars = lift_linears(&mut tape, &self.layers, false);
        let cond = tape.constant(Tensor::new(vec![1, conditioning.len()], conditioning.to_vec())?);
        let phis = hypernet_forward(&mut tape, &vars, self.activation, &self.mod_widths, cond)?;
        Ok(phis.into_iter().map(|p| tape.value(p).clone()).collect())
    }
}

/// Tape-level hypernetwork forward: conditioning `[1, d]` -> per-layer
/// modulation vectors `[h_l]`.
pub fn hypernet_forward(
    tape: &mut Tape,
    layers: &LinearVars,
    activation: Activation,
    mod_widths: &[usize],
    cond: Var,
) -> Result<Vec<Var>, TensorError> {
    let mut h = cond;
    for (i, &lv) in layers.iter().enumerate() {
        h = linear_forward(tape, lv, h)?;
        if i + 1 < layers.len() {
            h = activation.apply(tape, h)?;
        }
    }
    let total: usize = mod_widths.iter().sum();
    let flat = tape.reshape(h, &[total])?;
    let mut phis = Vec::with_capacity(mod_widths.len());
    let mut off = 0;
    for &w in mod_widths {
        phis.push(tape.slice1(flat, off, w)?);
        off += w;
    }
    Ok(phis)
}

// ── Residual MLP ───────────────────────────────────────────────────────

/// Plain MLP with residual blocks wherever a layer maps a width to itself.
/// The last layer is linear. Used for the vanilla baseline (ReLU) and the
/// latent processor (SiLU).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl ResidualMlp {
    /// `dims` lists input, hidden and output widths, e.g. `[4,128,128,1]`.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let scale = if i + 2 == dims.len() { 0.1 } else { 1.0 };
            layers.push(Linear::init(dims[i], dims[i + 1], scale, &mut rng));
        }
        ResidualMlp { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect()
    }

    pub fn num_params(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn set_params(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), self.num_params());
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.w = params[2 * i].clone();
            l.b = params[2 * i + 1].clone();
        }
    }

    /// Value-level forward for a row batch `[N, d_in]`.
    pub fn forward_batch(&self, input: &Tensor) -> Result<Tensor, FieldError> {
        if input.rank() != 2 || input.shape()[1] != self.input_dim() {
            return Err(FieldError::InputDim {
                expected: self.input_dim(),
                got: if input.rank() == 2 { input.shape()[1] } else { input.rank() },
            });
        }
        let mut tape = Tape::new();
        let vars = lift_linears(&mut tape, &self.layers, false);
        let x = tape.constant(input.clone());
        let y = residual_forward(&mut tape, &vars, self.activation, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, FieldError> {
        let x = Tensor::new(vec![1, input.len()], input.to_vec())?;
        Ok(self.forward_batch(&x)?.data().to_vec())
    }
}

/// Tape-level residual MLP forward.
pub fn residual_forward(
    tape: &mut Tape,
    layers: &LinearVars,
    activation: Activation,
    input: Var,
) -> Result<Var, TensorError> {
    let mut h = input;
    for (i, &lv) in layers.iter().enumerate() {
        let last = i + 1 == layers.len();
        let y = linear_forward(tape, lv, h)?;
        if last {
            h = y;
        } else {
            let a = activation.apply(tape, y)?;
            let (in_dim, out_dim) = {
                let w = tape.value(lv.0);
                (w.shape()[1], w.shape()[0])
            };
            h = if in_dim == out_dim { tape.add(h, a)? } else { a };
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncoderScale;
    use crate::tensor::gradcheck;

    fn tiny_field(m_scales: usize, seed: u64) -> NeuralField {
        let sigmas: Vec<f64> = (0..m_scales).map(|i| 1.0 + 4.0 * i as f64).collect();
        let enc = MultiscaleEncoder::gaussian(3, 2, &sigmas, seed).unwrap();
        NeuralField::init(enc, &[4, 4], 1, seed + 1).unwrap()
    }

    fn zero_phis(field: &NeuralField) -> Vec<Tensor> {
        field.modulation_widths().iter().map(|&w| Tensor::zeros(&[w])).collect()
    }

    #[test]
    fn zero_weights_output_is_output_bias() {
        let mut f = tiny_field(2, 3);
        let zeroed: Vec<Tensor> = f.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        f.set_params(&zeroed);
        let out = f.forward(&[0.3, -0.8], &zero_phis(&f)).unwrap();
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        // Independent nested-loop evaluation of the same weights.
        let f = tiny_field(2, 17);
        let phis = vec![
            Tensor::vector(vec![0.1, -0.2, 0.3, 0.05]),
            Tensor::vector(vec![-0.4, 0.2, 0.0, 0.6]),
        ];
        let x = [0.37, -0.21];
        let got = f.forward(&x, &phis).unwrap()[0];

        let mut scale_out: Vec<Vec<f64>> = Vec::new();
        for scale in f.encoder.scales() {
            let mut h = scale.encode(&x).unwrap();
            for (l, lin) in f.hidden.iter().enumerate() {
                let mut next = vec![0.0; lin.out_dim()];
                for o in 0..lin.out_dim() {
                    let mut acc = lin.b.data()[o] + phis[l].data()[o];
                    for i in 0..lin.in_dim() {
                        acc += lin.w.at(o, i) * h[i];
                    }
                    next[o] = acc.max(0.0);
                }
                h = next;
            }
            scale_out.push(h);
        }
        let joined: Vec<f64> = scale_out.concat();
        let mut expected = f.output.b.data()[0];
        for (i, v) in joined.iter().enumerate() {
            expected += f.output.w.at(0, i) * v;
        }
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn single_scale_is_plain_fourier_mlp() {
        let f = tiny_field(1, 5);
        let phis = zero_phis(&f);
        let x = [0.1, 0.9];
        let got = f.forward(&x, &phis).unwrap()[0];
        // Hand-rolled single-scale stack.
        let mut h = f.encoder.scales()[0].encode(&x).unwrap();
        for lin in &f.hidden {
            let mut next = vec![0.0; lin.out_dim()];
            for o in 0..lin.out_dim() {
                let mut acc = lin.b.data()[o];
                for i in 0..lin.in_dim() {
                    acc += lin.w.at(o, i) * h[i];
                }
                next[o] = acc.max(0.0);
            }
            h = next;
        }
        let mut expected = f.output.b.data()[0];
        for (i, v) in h.iter().enumerate() {
            expected += f.output.w.at(0, i) * v;
        }
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn query_field_is_pointwise_and_order_preserving() {
        let f = tiny_field(2, 23);
        let phis = zero_phis(&f);
        let pts =
            Tensor::new(vec![5, 2], (0..10).map(|i| (i as f64) * 0.13 - 0.6).collect()).unwrap();
        let batch = f.query_field(&pts, &phis).unwrap();
        for i in 0..5 {
            let single = f.forward(pts.row(i), &phis).unwrap();
            assert_eq!(batch.row(i), &single[..], "row {i} differs");
        }
        // Permuting inputs permutes outputs identically.
        let perm = [3usize, 0, 4, 1, 2];
        let permuted_pts = Tensor::new(
            vec![5, 2],
            perm.iter().flat_map(|&i| pts.row(i).to_vec()).collect(),
        )
        .unwrap();
        let permuted = f.query_field(&permuted_pts, &phis).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            assert_eq!(permuted.row(r), batch.row(i));
        }
    }

    #[test]
    fn empty_query_returns_empty() {
        let f = tiny_field(1, 2);
        let out = f.query_field(&Tensor::zeros(&[0, 2]), &zero_phis(&f)).unwrap();
        assert_eq!(out.shape(), &[0, 1]);
    }

    #[test]
    fn hypernet_zero_input_returns_biases() {
        // Single linear layer: phi(0) = b.
        let mut h = Hypernetwork::init(3, &[], vec![4, 4], Activation::Relu, 9);
        let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        h.layers[0].b = Tensor::vector(bias.clone());
        let phis = h.modulations(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(phis.len(), 2);
        assert_eq!(phis[0].data(), &bias[..4]);
        assert_eq!(phis[1].data(), &bias[4..]);
    }

    #[test]
    fn hypernet_dim_mismatch_is_error() {
        let h = Hypernetwork::init(2, &[8], vec![4], Activation::Relu, 1);
        assert!(matches!(h.modulations(&[1.0]), Err(FieldError::ConditioningDim { .. })));
    }

    #[test]
    fn modulation_width_mismatch_is_error() {
        let f = tiny_field(1, 4);
        let bad = vec![Tensor::zeros(&[4]), Tensor::zeros(&[3])];
        assert!(matches!(
            f.query_field(&Tensor::zeros(&[1, 2]), &bad),
            Err(FieldError::ModulationWidth { index: 1, .. })
        ));
    }

    #[test]
    fn output_affine_in_modulation_on_active_paths() {
        // Push every hidden unit into the linear region; then the output is
        // affine in phi and second differences vanish.
        let mut f = tiny_field(1, 31);
        for l in &mut f.hidden {
            l.b = Tensor::filled(&[l.out_dim()], 10.0);
        }
        let base = zero_phis(&f);
        let delta: Vec<Tensor> =
            base.iter().map(|p| Tensor::filled(p.shape(), 0.01)).collect();
        let shift = |k: f64| -> Vec<Tensor> {
            base.iter()
                .zip(&delta)
                .map(|(b, d)| {
                    Tensor::vector(
                        b.data().iter().zip(d.data()).map(|(&x, &y)| x + k * y).collect(),
                    )
                })
                .collect()
        };
        let x = [0.4, 0.2];
        let y0 = f.forward(&x, &shift(0.0)).unwrap()[0];
        let y1 = f.forward(&x, &shift(1.0)).unwrap()[0];
        let y2 = f.forward(&x, &shift(2.0)).unwrap()[0];
        assert!(((y2 - y1) - (y1 - y0)).abs() < 1e-12);
    }

    #[test]
    fn hidden_weights_shared_across_scales() {
        let f = tiny_field(2, 41);
        // One stored copy per hidden layer regardless of scale count.
        assert_eq!(f.params().len(), 2 * f.hidden.len() + 2);
        // Zeroing the output weights of scale 2's block isolates scale 1;
        // bumping W_1 must still change that block's contribution, because
        // the stack is shared.
        let mut via_scale1 = f.clone();
        for l in &mut via_scale1.hidden {
            l.b = Tensor::filled(&[l.out_dim()], 10.0);
        }
        let h = via_scale1.hidden.last().unwrap().out_dim();
        let mut wout = via_scale1.output.w.clone();
        for c in h..2 * h {
            wout.data_mut()[c] = 0.0;
        }
        via_scale1.output.w = wout.clone();
        let phis = zero_phis(&f);
        let x = [0.3, 0.6];
        let before = via_scale1.forward(&x, &phis).unwrap()[0];
        let mut bumped = via_scale1.clone();
        bumped.hidden[0].w.data_mut()[0] += 0.5;
        let after = bumped.forward(&x, &phis).unwrap()[0];
        assert_ne!(before, after);
    }

    #[test]
    fn residual_blocks_pass_identity_at_zero_weights() {
        let mut m = ResidualMlp::init(&[3, 3, 3, 2], Activation::Relu, 6);
        let zeros: Vec<Tensor> = m.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        m.set_params(&zeros);
        // All-zero layers: residual blocks pass the input through, the final
        // linear layer kills it.
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        // Restore only the final layer to read out the residual stream.
        let mut params = zeros;
        let last_w = params.len() - 2;
        params[last_w] = Tensor::new(vec![2, 3], vec![1., 0., 0., 0., 1., 0.]).unwrap();
        m.set_params(&params);
        let out = m.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![1.0, -2.0]);
    }

    #[test]
    fn residual_mlp_matches_scalar_loop() {
        let m = ResidualMlp::init(&[2, 4, 4, 1], Activation::Silu, 13);
        let x = [0.7, -0.3];
        let got = m.forward(&x).unwrap()[0];

        let silu = |v: f64| v / (1.0 + (-v).exp());
        let mut h: Vec<f64> = x.to_vec();
        for (i, lin) in m.layers.iter().enumerate() {
            let mut y = vec![0.0; lin.out_dim()];
            for o in 0..lin.out_dim() {
                let mut acc = lin.b.data()[o];
                for j in 0..lin.in_dim() {
                    acc += lin.w.at(o, j) * h[j];
                }
                y[o] = acc;
            }
            if i + 1 == m.layers.len() {
                h = y;
            } else {
                let act: Vec<f64> = y.iter().map(|&v| silu(v)).collect();
                h = if lin.in_dim() == lin.out_dim() {
                    h.iter().zip(&act).map(|(&a, &b)| a + b).collect()
                } else {
                    act
                };
            }
        }
        assert!((got - h[0]).abs() < 1e-12);
    }

    #[test]
    fn field_and_hypernet_gradients_match_finite_differences() {
        let field = tiny_field(2, 51);
        let hyper = Hypernetwork::init(3, &[5], field.modulation_widths(), Activation::Relu, 52);
        let z0 = Tensor::vector(vec![0.2, -0.1, 0.4]);
        let pts = Tensor::new(vec![4, 2], (0..8).map(|i| i as f64 * 0.2 - 0.7).collect()).unwrap();
        let target = Tensor::new(vec![4, 1], vec![0.3, -0.5, 0.8, 0.1]).unwrap();

        let n_field = field.num_params();
        let mut params = field.params();
        params.extend(hyper.params());
        params.push(z0);

        let num_scales = field.encoder.num_scales();
        let mod_widths = field.modulation_widths();
        let encodings_data = field.encoder.encode_batch(&pts).unwrap();
        let f = move |t: &mut Tape, p: &[Var]| {
            let fv = FieldVars {
                hidden: p[..n_field - 2].chunks(2).map(|c| (c[0], c[1])).collect(),
                output: (p[n_field - 2], p[n_field - 1]),
                num_scales,
            };
            let hv: LinearVars = p[n_field..p.len() - 1].chunks(2).map(|c| (c[0], c[1])).collect();
            let z = p[p.len() - 1];
            let zrow = t.reshape(z, &[1, 3])?;
            let phis = hypernet_forward(t, &hv, Activation::Relu, &mod_widths, zrow)?;
            let encodings: Vec<Var> =
                encodings_data.iter().map(|e| t.constant(e.clone())).collect();
            let pred = fv.forward(t, &encodings, Some(&phis))?;
            let tgt = t.constant(target.clone());
            t.mse(pred, tgt)
        };
        let max = gradcheck::max_rel_err(f, &params, 1e-5).unwrap();
        assert!(max < 1e-6, "max rel err {max}");
    }

    #[test]
    fn identity_scale_field_runs() {
        let enc = MultiscaleEncoder::new(vec![EncoderScale::Identity { dim: 2 }]).unwrap();
        let f = NeuralField::init(enc, &[4], 1, 0).unwrap();
        let out = f.forward(&[0.5, -0.5], &zero_phis(&f)).unwrap();
        assert_eq!(out.len(), 1);
    }
}
