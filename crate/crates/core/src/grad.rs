//! Exact gradients through spike times, a finite-difference oracle and the
//! optimizers that consume them.
//!
//! Window bounds and base thresholds are treated as constants. Within a fixed
//! spiking pattern the closed form `t = A / B` is smooth, so the chain rule
//! below is the exact gradient, not a surrogate.

use thiserror::Error;

use crate::dynamics::{
    network_forward, network_forward_with, softmax_cross_entropy, DynamicsError, Exact, ForwardTrace, LayerRecord,
    SnnLayer, SnnNetwork,
};
use crate::linalg::DenseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("operation requires a constant-alpha layer")]
    Policy,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Loss gradient with respect to every trainable SNN parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// Hidden layers followed by the read-out layer.
    pub weights: Vec<DenseMatrix>,
    /// Threshold shifts of the hidden layers.
    pub shifts: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(net: &SnnNetwork) -> Self {
        let mut weights: Vec<DenseMatrix> = net
            .hidden
            .iter()
            .map(|l| DenseMatrix::zeros(l.outputs(), l.inputs()))
            .collect();
        weights.push(DenseMatrix::zeros(net.output.weights.rows(), net.output.weights.cols()));
        let shifts = net.hidden.iter().map(|l| vec![0.0; l.outputs()]).collect();
        Self { weights, shifts }
    }

    pub fn scale(&mut self, c: f64) {
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(|v| *v *= c);
        }
        for d in &mut self.shifts {
            d.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Same ordering as [`SnnNetwork::params`].
    pub fn as_slices(&self) -> Vec<&[f64]> {
        let depth = self.shifts.len();
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * depth + 1);
        for n in 0..depth {
            out.push(self.weights[n].as_slice());
            out.push(&self.shifts[n]);
        }
        out.push(self.weights[depth].as_slice());
        out
    }

    pub fn as_mut_slices(&mut self) -> Vec<&mut [f64]> {
        let depth = self.shifts.len();
        let (hidden, out) = self.weights.split_at_mut(depth);
        let mut slices: Vec<&mut [f64]> = Vec::with_capacity(2 * depth + 1);
        for (w, d) in hidden.iter_mut().zip(self.shifts.iter_mut()) {
            slices.push(w.as_mut_slice());
            slices.push(d.as_mut_slice());
        }
        slices.push(out[0].as_mut_slice());
        slices
    }

    pub fn is_finite(&self) -> bool {
        self.as_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// `J = M (1/B) W`: sensitivity of a layer's spike times to its input times.
/// Rows of forced or clamped neurons are zero.
pub fn layer_jacobian(record: &LayerRecord, layer: &SnnLayer) -> DenseMatrix {
    let factors: Vec<f64> = (0..layer.outputs())
        .map(|i| if active(record, i) { 1.0 / record.slope[i] } else { 0.0 })
        .collect();
    layer.weights.scale_rows(&factors)
}

fn active(record: &LayerRecord, i: usize) -> bool {
    record.output.mask[i] && !record.output.saturated_low[i]
}

/// Per-sample outcome of [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardInfo {
    pub loss: f64,
    /// `dL/dt^(n)` for every hidden layer `n`, before masking.
    pub dl_dt: Vec<Vec<f64>>,
    pub dl_dv: Vec<f64>,
}

/// Backpropagates one sample and adds its gradient into `grads`.
pub fn backward(trace: &ForwardTrace, net: &SnnNetwork, label: usize, grads: &mut GradientSet) -> BackwardInfo {
    let tau_c = net.tau_c();
    let depth = net.hidden.len();
    let (loss, dl_dv) = softmax_cross_entropy(&trace.potentials, label);

    // Read-out: V_m = [α_m (t_read − ramp) + Σ_j W_mj (t_read − t_j)] / τ_c
    let last = trace.last_spikes();
    let t_read = net.output.t_read;
    let elapsed: Vec<f64> = last.times.iter().map(|t| (t_read - t) / tau_c).collect();
    let gw = &mut grads.weights[depth];
    for (m, &g) in dl_dv.iter().enumerate() {
        if g != 0.0 {
            gw.row_mut(m)
                .iter_mut()
                .zip(&elapsed)
                .for_each(|(acc, e)| *acc += g * e);
        }
    }
    let mut delta: Vec<f64> = net
        .output
        .weights
        .tr_mat_vec(&dl_dv)
        .into_iter()
        .map(|v| -v / tau_c)
        .collect();

    let mut dl_dt = vec![Vec::new(); depth];
    for n in (0..depth).rev() {
        let layer = &net.hidden[n];
        let record = &trace.layers[n];
        let input = trace.layer_input(n);
        let t_min = layer.window.t_min;
        let linear = layer.alpha_policy.is_linearly_mappable();
        // e_i = M_i dL/dt_i / B_i
        let e: Vec<f64> = (0..layer.outputs())
            .map(|i| {
                if active(record, i) {
                    delta[i] / record.slope[i]
                } else {
                    0.0
                }
            })
            .collect();
        let gw = &mut grads.weights[n];
        let gd = &mut grads.shifts[n];
        for (i, &ei) in e.iter().enumerate() {
            if ei == 0.0 {
                continue;
            }
            gd[i] += ei * tau_c;
            // ∂t_i/∂W_ij: (t_j − t_min) when α = 1 − ΣW, else (t_j − t_i) / B_i.
            let offset = if linear { t_min } else { record.output.times[i] };
            let scale = if linear { delta[i] } else { ei };
            gw.row_mut(i)
                .iter_mut()
                .zip(&input.times)
                .for_each(|(acc, tj)| *acc += scale * (tj - offset));
        }
        let next = if n > 0 {
            layer.weights.tr_mat_vec(&e)
        } else {
            Vec::new()
        };
        dl_dt[n] = std::mem::replace(&mut delta, next);
    }
    BackwardInfo { loss, dl_dt, dl_dv }
}

/// Forward plus backward for a labelled batch; returns the mean loss and
/// overwrites `grads` with the mean gradient. Samples are reduced in order.
pub fn batch_gradient(
    net: &SnnNetwork,
    xs: &[&[f64]],
    labels: &[usize],
    grads: &mut GradientSet,
) -> Result<f64, DynamicsError> {
    *grads = GradientSet::zeros_like(net);
    let coeffs = net.coefficients();
    let mut total = 0.0;
    for (x, &label) in xs.iter().zip(labels) {
        let trace = network_forward_with(x, net, &coeffs, &mut Exact)?;
        total += backward(&trace, net, label, grads).loss;
    }
    let k = xs.len().max(1) as f64;
    grads.scale(1.0 / k);
    Ok(total / k)
}

/// Central differences of the loss plus, per parameter, whether the
/// perturbation changed any mask or saturation flag.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffResult {
    pub grads: GradientSet,
    /// Same layout as [`GradientSet::as_slices`].
    pub switching: Vec<Vec<bool>>,
}

fn spike_pattern(trace: &ForwardTrace) -> Vec<(bool, bool)> {
    trace
        .layers
        .iter()
        .flat_map(|l| {
            l.output
                .mask
                .iter()
                .copied()
                .zip(l.output.saturated_low.iter().copied())
        })
        .collect()
}

pub fn sample_loss(net: &SnnNetwork, x: &[f64], label: usize) -> Result<f64, DynamicsError> {
    let trace = network_forward(x, net)?;
    Ok(softmax_cross_entropy(&trace.potentials, label).0)
}

pub fn finite_diff_grad(
    net: &SnnNetwork,
    x: &[f64],
    label: usize,
    eps: f64,
) -> Result<FiniteDiffResult, DynamicsError> {
    let base = spike_pattern(&network_forward(x, net)?);
    let mut grads = GradientSet::zeros_like(net);
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut switching: Vec<Vec<bool>> = sizes.iter().map(|&n| vec![false; n]).collect();
    let mut probe = net.clone();
    for (p, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let original = probe.params()[p][k];
            let mut eval = |value: f64| -> Result<(f64, bool), DynamicsError> {
                probe.params_mut()[p][k] = value;
                let trace = network_forward(x, &probe)?;
                let switched = spike_pattern(&trace) != base;
                Ok((softmax_cross_entropy(&trace.potentials, label).0, switched))
            };
            let (lp, sp) = eval(original + eps)?;
            let (lm, sm) = eval(original - eps)?;
            probe.params_mut()[p][k] = original;
            grads.as_mut_slices()[p][k] = (lp - lm) / (2.0 * eps);
            switching[p][k] = sp || sm;
        }
    }
    Ok(FiniteDiffResult { grads, switching })
}

/// Symmetric relative error with an absolute floor on the denominator.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Elementwise `dw_ij/dW_ij = (B_i − W_ij) / B_i²` of the constant-α map
/// `w = W / B`.
pub fn mapping_derivative(layer: &SnnLayer) -> Result<DenseMatrix, GradError> {
    if layer.alpha_policy.is_linearly_mappable() {
        return Err(GradError::Policy);
    }
    let slope = layer.coefficients().slope;
    Ok(DenseMatrix::from_fn(layer.outputs(), layer.inputs(), |i, j| {
        (slope[i] - layer.weights[(i, j)]) / (slope[i] * slope[i])
    }))
}

/// First-order change of the equivalent ReLU weights after an SNN gradient
/// step: `δw_ij = −η (dw/dW)² dL/dw_ij`.
pub fn predicted_ann_update(layer: &SnnLayer, dl_dw: &DenseMatrix, eta: f64) -> Result<DenseMatrix, GradError> {
    let deriv = mapping_derivative(layer)?;
    if dl_dw.shape() != deriv.shape() {
        return Err(GradError::Shape(format!(
            "gradient {:?} vs layer {:?}",
            dl_dw.shape(),
            deriv.shape()
        )));
    }
    Ok(DenseMatrix::from_fn(deriv.rows(), deriv.cols(), |i, j| {
        let d = deriv[(i, j)];
        -eta * d * d * dl_dw[(i, j)]
    }))
}

/// Gap between the exact and the predicted change of `w_ij` after an SNN
/// gradient step on `W_ij` alone, for a loss that depends on `w_ij` only
/// with slope `dl_dw`. The gap is second order in `eta`.
pub fn first_order_residual(layer: &SnnLayer, i: usize, j: usize, dl_dw: f64, eta: f64) -> Result<f64, GradError> {
    let deriv = mapping_derivative(layer)?[(i, j)];
    let slope = layer.coefficients().slope[i];
    let before = layer.weights[(i, j)] / slope;
    let step = eta * deriv * dl_dw;
    let mut moved = layer.clone();
    moved.weights[(i, j)] -= step;
    let after = moved.weights[(i, j)] / moved.coefficients().slope[i];
    let predicted = -eta * deriv * deriv * dl_dw;
    Ok(((after - before) - predicted).abs())
}

/// `lr0 · 0.9^(it / 5000)`.
pub fn lr_schedule(lr0: f64, it: u64) -> f64 {
    exponential_lr(lr0, 0.9, 5000.0, it)
}

/// `lr0 · rate^(it / every)`.
pub fn exponential_lr(lr0: f64, rate: f64, every: f64, it: u64) -> f64 {
    lr0 * rate.powf(it as f64 / every)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    /// Accumulators shaped like `param_sizes`; empty for SGD.
    pub fn new(kind: OptimizerKind, param_sizes: &[usize]) -> Self {
        let zeros = || match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam { .. } => param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        };
        Self {
            kind,
            first_moment: zeros(),
            second_moment: zeros(),
            step: 0,
        }
    }

    /// Applies one update in place.
    pub fn apply(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient counts differ");
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    sgd_step(p, g, lr);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let m = &mut self.first_moment[k];
                    let v = &mut self.second_moment[k];
                    assert_eq!(p.len(), g.len());
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}
