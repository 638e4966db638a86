//! Fully connected supervised layers with ReLU, dropout and a final batch
//! normalization, plus the optional linear classification head used with the
//! cross-entropy loss.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::sq;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Affine map `x ↦ W x + b` applied to each row of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }

    /// He-style uniform initialization, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = libm::sqrt(6.0 / input.max(1) as f64);
        Self {
            weight: DMatrix::from_fn(output, input, |_, _| rng.random_range(-bound..bound)),
            bias: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("linear input width", self.input_dim(), x.ncols())?;
        let mut z = x * self.weight.transpose();
        for mut row in z.row_iter_mut() {
            row += self.bias.transpose();
        }
        Ok(z)
    }

    /// Returns parameter gradients and the gradient with respect to `x`.
    pub fn backward(&self, x: &DMatrix<f64>, dz: &DMatrix<f64>) -> (Linear, DMatrix<f64>) {
        let grad = Linear {
            weight: dz.tr_mul(x),
            bias: dz.row_sum().transpose(),
        };
        (grad, dz * &self.weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    pub running_mean: DVector<f64>,
    pub running_var: DVector<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: DVector::from_element(width, 1.0),
            beta: DVector::zeros(width),
            running_mean: DVector::zeros(width),
            running_var: DVector::from_element(width, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<Linear>,
    pub bn: Option<BatchNorm>,
    /// Classification head (`C × d_out`), only for the cross-entropy objective.
    pub head: Option<Linear>,
    pub dropout_rate: f64,
}

/// Layer widths and regularization of a [`NetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub dropout_rate: f64,
    pub batch_norm: bool,
    pub head_classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnTrace {
    pub x_hat: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Biased batch variance in train mode, running variance in eval mode.
    pub var: DVector<f64>,
    pub inv_std: DVector<f64>,
}

/// Everything [`NetParams::backward`] needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub mode: Mode,
    /// Input of each layer.
    pub inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of each layer.
    pub pre_activations: Vec<DMatrix<f64>>,
    /// Inverted-dropout scale masks (`0` or `1/(1−p)`) for hidden layers.
    pub masks: Vec<Option<DMatrix<f64>>>,
    pub bn: Option<BnTrace>,
    pub output: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrad {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<Linear>,
    pub bn: Option<BnGrad>,
    pub head: Option<Linear>,
}

impl NetGrads {
    pub fn zeros_like(params: &NetParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            bn: params.bn.as_ref().map(|b| BnGrad {
                gamma: DVector::zeros(b.gamma.len()),
                beta: DVector::zeros(b.beta.len()),
            }),
            head: params
                .head
                .as_ref()
                .map(|h| Linear::zeros(h.input_dim(), h.output_dim())),
        }
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        for l in &self.layers {
            ok &= l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite());
        }
        if let Some(b) = &self.bn {
            ok &= b.gamma.iter().chain(b.beta.iter()).all(|v| v.is_finite());
        }
        if let Some(h) = &self.head {
            ok &= h.weight.iter().chain(h.bias.iter()).all(|v| v.is_finite());
        }
        ok
    }
}

/// Parameter group of a flattened view, used for weight decay selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BatchNorm,
}

impl NetParams {
    pub fn init<R: Rng>(spec: &NetSpec, rng: &mut R) -> Result<Self> {
        if spec.widths.is_empty() || spec.input_dim == 0 || spec.widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "network needs a positive input width and at least one positive layer width".into(),
            ));
        }
        if !(0.0..1.0).contains(&spec.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {}",
                spec.dropout_rate
            )));
        }
        let mut layers = Vec::with_capacity(spec.widths.len());
        let mut prev = spec.input_dim;
        for &w in &spec.widths {
            layers.push(Linear::init(prev, w, rng));
            prev = w;
        }
        let head = spec.head_classes.map(|c| Linear::init(prev, c, rng));
        Ok(Self {
            layers,
            bn: spec.batch_norm.then(|| BatchNorm::new(prev)),
            head,
            dropout_rate: spec.dropout_rate,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    /// Checks that layer widths chain and BN/head widths match.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Consistency("network has no layers".into()));
        }
        for pair in self.layers.windows(2) {
            check_dim("layer chaining", pair[0].output_dim(), pair[1].input_dim())?;
        }
        for l in &self.layers {
            check_dim("bias length", l.output_dim(), l.bias.len())?;
        }
        if let Some(bn) = &self.bn {
            check_dim("batch-norm width", self.output_dim(), bn.gamma.len())?;
            if bn.running_var.iter().any(|&v| v <= 0.0) {
                return Err(Error::Consistency("batch-norm running variance must be positive".into()));
            }
        }
        if let Some(h) = &self.head {
            check_dim("head input width", self.output_dim(), h.input_dim())?;
        }
        Ok(())
    }

    /// Forward pass. Train mode samples dropout masks from `seed` and
    /// normalizes with batch statistics; running statistics are folded in
    /// separately by [`NetParams::absorb_batch_stats`].
    pub fn forward(
        &self,
        batch: &DMatrix<f64>,
        mode: Mode,
        seed: u64,
    ) -> Result<(DMatrix<f64>, ForwardTrace)> {
        self.forward_with(batch, mode, seed, true)
    }

    /// Like [`NetParams::forward`]; with `dropout` off, train mode still
    /// uses batch statistics but keeps every unit.
    pub fn forward_with(
        &self,
        batch: &DMatrix<f64>,
        mode: Mode,
        seed: u64,
        dropout: bool,
    ) -> Result<(DMatrix<f64>, ForwardTrace)> {
        check_dim("network input width", self.input_dim(), batch.ncols())?;
        let n = batch.nrows();
        if mode == Mode::Train && n < 2 {
            return Err(Error::BatchSize(n));
        }
        let mut rng = crate::seeded_rng(seed, 0xd0_70);
        let last = self.layers.len() - 1;
        let keep = 1.0 - self.dropout_rate;

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&x)?;
            let mut a = z.map(|v| v.max(0.0));
            let mask = if dropout && mode == Mode::Train && l < last && self.dropout_rate > 0.0 {
                let m = DMatrix::from_fn(a.nrows(), a.ncols(), |_, _| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                a.component_mul_assign(&m);
                Some(m)
            } else {
                None
            };
            inputs.push(x);
            pre_activations.push(z);
            masks.push(mask);
            x = a;
        }

        let bn = match &self.bn {
            None => None,
            Some(bn) => {
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mean = x.row_mean().transpose();
                        let var = DVector::from_fn(x.ncols(), |j, _| {
                            x.column(j).iter().map(|v| sq(v - mean[j])).sum::<f64>() / n as f64
                        });
                        (mean, var)
                    }
                    Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let inv_std = var.map(|v| 1.0 / libm::sqrt(v + BN_EPSILON));
                let x_hat = DMatrix::from_fn(n, x.ncols(), |i, j| (x[(i, j)] - mean[j]) * inv_std[j]);
                x = DMatrix::from_fn(n, x.ncols(), |i, j| bn.gamma[j] * x_hat[(i, j)] + bn.beta[j]);
                Some(BnTrace {
                    x_hat,
                    mean,
                    var,
                    inv_std,
                })
            }
        };

        let trace = ForwardTrace {
            mode,
            inputs,
            pre_activations,
            masks,
            bn,
            output: x.clone(),
        };
        Ok((x, trace))
    }

    /// Folds the batch statistics of a train-mode trace into the running statistics.
    pub fn absorb_batch_stats(&mut self, trace: &ForwardTrace) {
        if trace.mode != Mode::Train {
            return;
        }
        let (Some(bn), Some(t)) = (self.bn.as_mut(), trace.bn.as_ref()) else {
            return;
        };
        let n = trace.output.nrows() as f64;
        let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        bn.running_mean = &bn.running_mean * BN_MOMENTUM + &t.mean * (1.0 - BN_MOMENTUM);
        bn.running_var = &bn.running_var * BN_MOMENTUM + &t.var * ((1.0 - BN_MOMENTUM) * unbiased);
    }

    /// Exact gradients of the traced forward computation. The head is not
    /// part of the trace; its gradient slot is left zero.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        upstream: &DMatrix<f64>,
    ) -> Result<(NetGrads, DMatrix<f64>)> {
        if trace.inputs.len() != self.layers.len()
            || trace.pre_activations.len() != self.layers.len()
            || trace.bn.is_some() != self.bn.is_some()
        {
            return Err(Error::Consistency("forward trace does not match the network".into()));
        }
        if upstream.shape() != trace.output.shape() {
            return Err(Error::Consistency(format!(
                "upstream gradient is {:?}, network output is {:?}",
                upstream.shape(),
                trace.output.shape()
            )));
        }
        let n = upstream.nrows();
        let mut grads = NetGrads::zeros_like(self);
        let mut da = upstream.clone();

        if let (Some(bn), Some(t)) = (&self.bn, &trace.bn) {
            let width = da.ncols();
            let mut dgamma = DVector::zeros(width);
            let mut dbeta = DVector::zeros(width);
            for j in 0..width {
                for i in 0..n {
                    dgamma[j] += da[(i, j)] * t.x_hat[(i, j)];
                    dbeta[j] += da[(i, j)];
                }
            }
            let dx = match trace.mode {
                Mode::Train => {
                    let nf = n as f64;
                    DMatrix::from_fn(n, width, |i, j| {
                        let dxh = da[(i, j)] * bn.gamma[j];
                        t.inv_std[j] / nf
                            * (nf * dxh - bn.gamma[j] * dbeta[j] - t.x_hat[(i, j)] * bn.gamma[j] * dgamma[j])
                    })
                }
                Mode::Eval => DMatrix::from_fn(n, width, |i, j| da[(i, j)] * bn.gamma[j] * t.inv_std[j]),
            };
            grads.bn = Some(BnGrad {
                gamma: dgamma,
                beta: dbeta,
            });
            da = dx;
        }

        for l in (0..self.layers.len()).rev() {
            if let Some(mask) = &trace.masks[l] {
                da.component_mul_assign(mask);
            }
            let z = &trace.pre_activations[l];
            let dz = DMatrix::from_fn(n, z.ncols(), |i, j| if z[(i, j)] > 0.0 { da[(i, j)] } else { 0.0 });
            let (g, dx) = self.layers[l].backward(&trace.inputs[l], &dz);
            grads.layers[l] = g;
            da = dx;
        }
        Ok((grads, da))
    }

    /// Visits every parameter slice with its gradient and a same-shaped state slice.
    pub fn zip_params_mut(
        &mut self,
        grads: &NetGrads,
        state: &mut NetGrads,
        mut f: impl FnMut(ParamKind, &mut [f64], &[f64], &mut [f64]),
    ) {
        for ((p, g), s) in self.layers.iter_mut().zip(&grads.layers).zip(state.layers.iter_mut()) {
            f(ParamKind::Weight, p.weight.as_mut_slice(), g.weight.as_slice(), s.weight.as_mut_slice());
            f(ParamKind::Bias, p.bias.as_mut_slice(), g.bias.as_slice(), s.bias.as_mut_slice());
        }
        if let (Some(p), Some(g), Some(s)) = (self.bn.as_mut(), grads.bn.as_ref(), state.bn.as_mut()) {
            f(ParamKind::BatchNorm, p.gamma.as_mut_slice(), g.gamma.as_slice(), s.gamma.as_mut_slice());
            f(ParamKind::BatchNorm, p.beta.as_mut_slice(), g.beta.as_slice(), s.beta.as_mut_slice());
        }
        if let (Some(p), Some(g), Some(s)) = (self.head.as_mut(), grads.head.as_ref(), state.head.as_mut()) {
            f(ParamKind::Weight, p.weight.as_mut_slice(), g.weight.as_slice(), s.weight.as_mut_slice());
            f(ParamKind::Bias, p.bias.as_mut_slice(), g.bias.as_slice(), s.bias.as_mut_slice());
        }
    }
}

/// Mean softmax cross-entropy of `logits` (`N × C`) and its gradient.
pub fn cross_entropy_loss(logits: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, DMatrix<f64>)> {
    let n = logits.nrows();
    let c = logits.ncols();
    check_dim("cross-entropy labels", n, labels.len())?;
    if n == 0 {
        return Err(Error::BatchSize(0));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, classes: c });
    }
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(n, c);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.max();
        let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
        loss += lse - row[labels[i]];
        for j in 0..c {
            grad[(i, j)] = libm::exp(row[j] - lse);
        }
        grad[(i, labels[i])] -= 1.0;
    }
    Ok((loss / n as f64, grad / n as f64))
}
