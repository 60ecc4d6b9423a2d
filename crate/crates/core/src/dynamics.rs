//! Event-level forward pass of a time-to-first-spike network.
//!
//! Every hidden neuron integrates a piecewise-linear potential: each input
//! spike at `t_j` adds `W_ij` to the slope, and an extra ramp of strength
//! `α_i` switches on at the layer's `t_min`. The first threshold crossing
//! therefore has the closed form `t_i = A_i / B_i`, with
//! `A_i = τ_c θ_i + α_i t_min + Σ_j W_ij t_j` and `B_i = α_i + Σ_j W_ij`.
//! Neurons that have not crossed by `t_max` are forced to fire at `t_max`.

use log::debug;
use thiserror::Error;

use crate::linalg::{dot, DenseMatrix, LinalgError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("input {index} = {value} lies outside [0, 1]")]
    Domain { index: usize, value: f64 },
    #[error("layer {layer} neuron {neuron}: slope at threshold {slope} is not positive")]
    InvalidSlope { layer: usize, neuron: usize, slope: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid window [{t_min}, {t_max}]")]
    InvalidWindow { t_min: f64, t_max: f64 },
    #[error("window chain broken at layer {layer}: t_min {t_min} != previous t_max {prev_t_max}")]
    BrokenChain { layer: usize, t_min: f64, prev_t_max: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Converts unit-free activations into time units.
    pub tau_c: f64,
    /// `[input, hidden_1, ..., hidden_N, classes]`
    pub layer_sizes: Vec<usize>,
}

impl NetworkConfig {
    pub fn new(tau_c: f64, layer_sizes: Vec<usize>) -> Result<Self, DynamicsError> {
        if !(tau_c > 0.0 && tau_c.is_finite()) {
            return Err(DynamicsError::Config(format!("tau_c must be positive, got {tau_c}")));
        }
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(DynamicsError::Config(format!(
                "need at least input and output sizes, all nonzero: {layer_sizes:?}"
            )));
        }
        Ok(Self { tau_c, layer_sizes })
    }

    /// The input coding window `[0, τ_c]`.
    pub fn input_window(&self) -> Window {
        Window::new(0.0, self.tau_c)
    }

    pub fn hidden_depth(&self) -> usize {
        self.layer_sizes.len() - 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub t_min: f64,
    pub t_max: f64,
}

impl Window {
    pub fn new(t_min: f64, t_max: f64) -> Self {
        Self { t_min, t_max }
    }

    pub fn width(&self) -> f64 {
        self.t_max - self.t_min
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.t_max > self.t_min && self.t_min.is_finite() && self.t_max.is_finite() {
            Ok(())
        } else {
            Err(DynamicsError::InvalidWindow {
                t_min: self.t_min,
                t_max: self.t_max,
            })
        }
    }

    pub fn shifted(&self, delta: f64) -> Self {
        Self::new(self.t_min + delta, self.t_max + delta)
    }
}

/// How the ramp strength `α` of a layer is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaPolicy {
    /// `α_i = 1 − Σ_j W_ij`, so the slope at threshold is exactly one and the
    /// equivalent ReLU weights equal `W`.
    LinearlyMappable,
    /// Fixed per-neuron ramp strengths, independent of the weights.
    ConstantAlpha(Vec<f64>),
}

impl AlphaPolicy {
    pub fn constant(value: f64, n: usize) -> Self {
        AlphaPolicy::ConstantAlpha(vec![value; n])
    }

    pub fn is_linearly_mappable(&self) -> bool {
        matches!(self, AlphaPolicy::LinearlyMappable)
    }
}

/// Ramp strengths and slopes-at-threshold of one layer, derived from its
/// weights. Cached across a batch because the parameters are frozen there.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCoefficients {
    pub alpha: Vec<f64>,
    pub slope: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnnLayer {
    /// `out × in`
    pub weights: DenseMatrix,
    /// Trainable threshold shift `D`.
    pub shift: Vec<f64>,
    /// Scheduler-owned base threshold `θ̃`.
    pub base_threshold: Vec<f64>,
    pub alpha_policy: AlphaPolicy,
    pub window: Window,
}

impl SnnLayer {
    /// A layer with zero shift and base threshold `B_i · width / τ_c`.
    pub fn new(
        weights: DenseMatrix,
        alpha_policy: AlphaPolicy,
        window: Window,
        tau_c: f64,
    ) -> Result<Self, DynamicsError> {
        let n = weights.rows();
        let mut layer = Self {
            weights,
            shift: vec![0.0; n],
            base_threshold: vec![0.0; n],
            alpha_policy,
            window,
        };
        layer.check_shapes()?;
        let coeffs = layer.coefficients();
        layer.base_threshold = coeffs.slope.iter().map(|b| b * window.width() / tau_c).collect();
        Ok(layer)
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn check_shapes(&self) -> Result<(), DynamicsError> {
        let n = self.outputs();
        if self.shift.len() != n || self.base_threshold.len() != n {
            return Err(DynamicsError::Shape(format!(
                "layer with {n} neurons has {} shifts and {} base thresholds",
                self.shift.len(),
                self.base_threshold.len()
            )));
        }
        if let AlphaPolicy::ConstantAlpha(a) = &self.alpha_policy {
            if a.len() != n {
                return Err(DynamicsError::Shape(format!(
                    "layer with {n} neurons has {} alpha values",
                    a.len()
                )));
            }
        }
        Ok(())
    }

    pub fn coefficients(&self) -> LayerCoefficients {
        let sums = self.weights.row_sums();
        let alpha: Vec<f64> = match &self.alpha_policy {
            AlphaPolicy::LinearlyMappable => sums.iter().map(|s| 1.0 - s).collect(),
            AlphaPolicy::ConstantAlpha(a) => a.clone(),
        };
        let slope = alpha.iter().zip(&sums).map(|(a, s)| a + s).collect();
        LayerCoefficients { alpha, slope }
    }

    /// Full threshold `θ = θ̃ + D`.
    pub fn thresholds(&self) -> Vec<f64> {
        self.base_threshold
            .iter()
            .zip(&self.shift)
            .map(|(b, d)| b + d)
            .collect()
    }
}

/// Non-spiking read-out layer. Each output neuron integrates the last hidden
/// layer's spikes plus a ramp `α_m` switched on at `ramp_start`; the
/// potential is read at `t_read`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayer {
    pub weights: DenseMatrix,
    pub alpha: Vec<f64>,
    /// Ramp onset, the last hidden layer's `t_min`.
    pub ramp_start: f64,
    /// Read-out time, the last hidden layer's `t_max`.
    pub t_read: f64,
}

impl OutputLayer {
    pub fn new(weights: DenseMatrix, window: Window) -> Self {
        let n = weights.rows();
        Self {
            weights,
            alpha: vec![0.0; n],
            ramp_start: window.t_min,
            t_read: window.t_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeVector {
    pub times: Vec<f64>,
    /// True iff the neuron fired strictly before its layer's `t_max`.
    pub mask: Vec<bool>,
    /// True iff the spike would have come before `t_min` and was clamped.
    pub saturated_low: Vec<bool>,
}

impl SpikeVector {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Rebuilds mask and saturation flags from the times alone.
    pub fn from_times(times: Vec<f64>, window: Window) -> Self {
        let mask = times.iter().map(|&t| t < window.t_max).collect();
        let saturated_low = times.iter().map(|&t| t <= window.t_min).collect();
        Self {
            times,
            mask,
            saturated_low,
        }
    }

    pub fn saturated_count(&self) -> usize {
        self.saturated_low.iter().filter(|&&s| s).count()
    }

    pub fn fired_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn min_time(&self) -> f64 {
        self.times.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Closed-form result of one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub output: SpikeVector,
    /// Spike-time numerator `A`.
    pub numerator: Vec<f64>,
    /// Slope at threshold `B`.
    pub slope: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Encoded input spikes.
    pub input: SpikeVector,
    pub layers: Vec<LayerRecord>,
    /// Read-out potentials `V^(N+1)`.
    pub potentials: Vec<f64>,
}

impl ForwardTrace {
    /// Spikes entering hidden layer `n` (0-based).
    pub fn layer_input(&self, n: usize) -> &SpikeVector {
        if n == 0 {
            &self.input
        } else {
            &self.layers[n - 1].output
        }
    }

    /// Spikes entering the read-out layer.
    pub fn last_spikes(&self) -> &SpikeVector {
        self.layer_input(self.layers.len())
    }

    pub fn saturated_low_count(&self) -> usize {
        self.layers.iter().map(|l| l.output.saturated_count()).sum()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.potentials)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnnNetwork {
    pub config: NetworkConfig,
    pub hidden: Vec<SnnLayer>,
    pub output: OutputLayer,
}

impl SnnNetwork {
    /// Network with zero shifts and provisional windows of width `τ_c`;
    /// the scheduler is expected to set the real windows afterwards.
    pub fn from_weights(
        tau_c: f64,
        hidden: Vec<(DenseMatrix, AlphaPolicy)>,
        output: DenseMatrix,
    ) -> Result<Self, DynamicsError> {
        let mut sizes = vec![hidden.first().map_or(output.cols(), |(w, _)| w.cols())];
        sizes.extend(hidden.iter().map(|(w, _)| w.rows()));
        sizes.push(output.rows());
        let config = NetworkConfig::new(tau_c, sizes)?;
        let mut window = config.input_window();
        let mut layers = Vec::with_capacity(hidden.len());
        for (w, policy) in hidden {
            window = window.shifted(tau_c);
            layers.push(SnnLayer::new(w, policy, window, tau_c)?);
        }
        let net = Self {
            config,
            hidden: layers,
            output: OutputLayer::new(output, window),
        };
        net.validate()?;
        Ok(net)
    }

    pub fn tau_c(&self) -> f64 {
        self.config.tau_c
    }

    /// Window of the layer feeding hidden layer `n`; index 0 is the input.
    pub fn window_before(&self, n: usize) -> Window {
        if n == 0 {
            self.config.input_window()
        } else {
            self.hidden[n - 1].window
        }
    }

    /// Window of the last spiking layer (input window for zero depth).
    pub fn last_window(&self) -> Window {
        self.window_before(self.hidden.len())
    }

    /// Classification latency `t_min^(N+1)`.
    pub fn latency(&self) -> f64 {
        self.output.t_read
    }

    pub fn coefficients(&self) -> Vec<LayerCoefficients> {
        self.hidden.iter().map(SnnLayer::coefficients).collect()
    }

    /// Checks shapes, window validity and the chain `t_min^(n) = t_max^(n−1)`.
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let sizes = &self.config.layer_sizes;
        if sizes.len() != self.hidden.len() + 2 {
            return Err(DynamicsError::Shape(format!(
                "config lists {} layers, network has {} hidden + 1 output",
                sizes.len() - 1,
                self.hidden.len()
            )));
        }
        let mut prev = self.config.input_window();
        for (n, layer) in self.hidden.iter().enumerate() {
            layer.check_shapes()?;
            if layer.weights.shape() != (sizes[n + 1], sizes[n]) {
                return Err(DynamicsError::Shape(format!(
                    "hidden layer {n} weights are {:?}, expected {:?}",
                    layer.weights.shape(),
                    (sizes[n + 1], sizes[n])
                )));
            }
            layer.window.validate()?;
            if layer.window.t_min != prev.t_max {
                return Err(DynamicsError::BrokenChain {
                    layer: n,
                    t_min: layer.window.t_min,
                    prev_t_max: prev.t_max,
                });
            }
            prev = layer.window;
        }
        let n_out = sizes.len() - 1;
        if self.output.weights.shape() != (sizes[n_out], sizes[n_out - 1]) || self.output.alpha.len() != sizes[n_out] {
            return Err(DynamicsError::Shape("output layer shape".into()));
        }
        if self.output.ramp_start != prev.t_min || self.output.t_read != prev.t_max {
            return Err(DynamicsError::BrokenChain {
                layer: self.hidden.len(),
                t_min: self.output.ramp_start,
                prev_t_max: prev.t_min,
            });
        }
        Ok(())
    }

    /// Parameter tensors touched by the optimizer, in a fixed order:
    /// `W^(1), D^(1), ..., W^(N), D^(N), W^(N+1)`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.hidden.len() + 1);
        for layer in &mut self.hidden {
            out.push(layer.weights.as_mut_slice());
            out.push(layer.shift.as_mut_slice());
        }
        out.push(self.output.weights.as_mut_slice());
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.hidden.len() + 1);
        for layer in &self.hidden {
            out.push(layer.weights.as_slice());
            out.push(layer.shift.as_slice());
        }
        out.push(self.output.weights.as_slice());
        out
    }
}

/// Encodes intensities in `[0, 1]` as spike times `τ_c (1 − x)`.
pub fn encode_ttfs(x: &[f64], config: &NetworkConfig) -> Result<SpikeVector, DynamicsError> {
    let tau_c = config.tau_c;
    let mut times = Vec::with_capacity(x.len());
    for (index, &value) in x.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(DynamicsError::Domain { index, value });
        }
        times.push(tau_c * (1.0 - value));
    }
    let n = times.len();
    Ok(SpikeVector {
        times,
        mask: vec![true; n],
        saturated_low: vec![false; n],
    })
}

/// Activations `(t_max − t) / τ_c`; forced spikes decode to exactly zero.
pub fn decode_ttfs(spikes: &SpikeVector, t_max: f64, tau_c: f64) -> Vec<f64> {
    spikes
        .times
        .iter()
        .zip(&spikes.mask)
        .map(|(&t, &m)| if m { (t_max - t) / tau_c } else { 0.0 })
        .collect()
}

/// Closed-form spike times of one hidden layer.
pub fn layer_forward(input: &SpikeVector, layer: &SnnLayer, tau_c: f64) -> Result<LayerRecord, DynamicsError> {
    let coeffs = layer.coefficients();
    layer_forward_with(input, layer, &coeffs, tau_c, 0)
}

pub(crate) fn layer_forward_with(
    input: &SpikeVector,
    layer: &SnnLayer,
    coeffs: &LayerCoefficients,
    tau_c: f64,
    layer_index: usize,
) -> Result<LayerRecord, DynamicsError> {
    if input.len() != layer.inputs() {
        return Err(DynamicsError::Shape(format!(
            "layer {layer_index} expects {} inputs, got {}",
            layer.inputs(),
            input.len()
        )));
    }
    let Window { t_min, t_max } = layer.window;
    let relative: Vec<f64> = input.times.iter().map(|t| t - t_min).collect();
    let n = layer.outputs();
    let mut times = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut saturated_low = Vec::with_capacity(n);
    let mut numerator = Vec::with_capacity(n);
    for i in 0..n {
        let b = coeffs.slope[i];
        if b <= 0.0 || !b.is_finite() {
            return Err(DynamicsError::InvalidSlope {
                layer: layer_index,
                neuron: i,
                slope: b,
            });
        }
        let theta = layer.base_threshold[i] + layer.shift[i];
        // A = B t_min + τ_c θ + Σ_j W_ij (t_j − t_min), the same quantity as
        // τ_c θ + α t_min + Σ_j W_ij t_j without the cancellation at large t.
        let rest = tau_c * theta + dot(layer.weights.row(i), &relative);
        let candidate = t_min + rest / b;
        numerator.push(b * t_min + rest);
        if candidate >= t_max {
            times.push(t_max);
            mask.push(false);
            saturated_low.push(false);
        } else if candidate < t_min {
            times.push(t_min);
            mask.push(true);
            saturated_low.push(true);
        } else {
            times.push(candidate);
            mask.push(true);
            saturated_low.push(false);
        }
    }
    Ok(LayerRecord {
        output: SpikeVector {
            times,
            mask,
            saturated_low,
        },
        numerator,
        slope: coeffs.slope.clone(),
    })
}

/// Read-out potentials at `t_read`:
/// `V_m = [α_m (t_read − ramp_start) + Σ_j W_mj (t_read − t_j)] / τ_c`.
pub fn output_potentials(input: &SpikeVector, out: &OutputLayer, tau_c: f64) -> Vec<f64> {
    let elapsed: Vec<f64> = input.times.iter().map(|t| out.t_read - t).collect();
    let ramp = out.t_read - out.ramp_start;
    (0..out.weights.rows())
        .map(|m| (out.alpha[m] * ramp + dot(out.weights.row(m), &elapsed)) / tau_c)
        .collect()
}

/// Hook applied to every layer's spikes (input encoding is layer 0) before
/// they are sent on. Used for hardware perturbations.
pub trait SpikeTransform {
    fn apply(&mut self, layer: usize, window: Window, spikes: &mut SpikeVector);
}

/// Leaves spikes untouched.
pub struct Exact;

impl SpikeTransform for Exact {
    fn apply(&mut self, _: usize, _: Window, _: &mut SpikeVector) {}
}

pub fn network_forward(x: &[f64], net: &SnnNetwork) -> Result<ForwardTrace, DynamicsError> {
    let coeffs = net.coefficients();
    network_forward_with(x, net, &coeffs, &mut Exact)
}

/// Forward pass with precomputed layer coefficients and a spike transform.
pub fn network_forward_with(
    x: &[f64],
    net: &SnnNetwork,
    coeffs: &[LayerCoefficients],
    transform: &mut dyn SpikeTransform,
) -> Result<ForwardTrace, DynamicsError> {
    let tau_c = net.tau_c();
    let mut input = encode_ttfs(x, &net.config)?;
    transform.apply(0, net.config.input_window(), &mut input);
    let mut layers: Vec<LayerRecord> = Vec::with_capacity(net.hidden.len());
    for (n, layer) in net.hidden.iter().enumerate() {
        let prev = if n == 0 { &input } else { &layers[n - 1].output };
        let mut record = layer_forward_with(prev, layer, &coeffs[n], tau_c, n)?;
        let saturated = record.output.saturated_count();
        if saturated > 0 {
            debug!("layer {n}: {saturated} spikes clamped at t_min");
        }
        transform.apply(n + 1, layer.window, &mut record.output);
        layers.push(record);
    }
    let last = layers.last().map_or(&input, |l| &l.output);
    let potentials = output_potentials(last, &net.output, tau_c);
    Ok(ForwardTrace {
        input,
        layers,
        potentials,
    })
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

/// Softmax cross-entropy of the read-out potentials and its gradient.
pub fn softmax_cross_entropy(v: &[f64], label: usize) -> (f64, Vec<f64>) {
    assert!(label < v.len(), "label {label} out of range for {} classes", v.len());
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (v[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Time-stepped reference for one hidden layer.
///
/// Integrates the piecewise-constant slope with explicit Euler from the
/// earliest input spike, with the threshold disabled before `t_min`, and
/// linearly interpolates the first upward crossing.
pub fn integrate_potential_oracle(input: &SpikeVector, layer: &SnnLayer, tau_c: f64, dt: f64) -> SpikeVector {
    assert!(dt > 0.0);
    let Window { t_min, t_max } = layer.window;
    let alpha = layer.coefficients().alpha;
    let thresholds = layer.thresholds();
    let start = input.times.iter().copied().fold(t_min, f64::min);
    let steps = ((t_max - start) / dt).ceil() as usize;

    let mut times = Vec::with_capacity(layer.outputs());
    for i in 0..layer.outputs() {
        let w = layer.weights.row(i);
        let theta = thresholds[i];
        let mut v = 0.0;
        let mut t = start;
        let mut spike = None;
        for _ in 0..steps {
            let mut drive = if t >= t_min { alpha[i] } else { 0.0 };
            for (wij, &tj) in w.iter().zip(&input.times) {
                if t >= tj {
                    drive += wij;
                }
            }
            let t_next = (t + dt).min(t_max);
            let v_next = v + drive * (t_next - t) / tau_c;
            if t_next >= t_min && v_next >= theta {
                let crossing = if v >= theta || v_next == v {
                    t
                } else {
                    t + (theta - v) / (v_next - v) * (t_next - t)
                };
                spike = Some(crossing.max(t_min));
                break;
            }
            v = v_next;
            t = t_next;
            if t >= t_max {
                break;
            }
        }
        times.push(match spike {
            Some(s) if s < t_max => s,
            _ => t_max,
        });
    }
    SpikeVector::from_times(times, layer.window)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, policy: AlphaPolicy, theta: f64) -> SnnLayer {
        SnnLayer {
            weights: DenseMatrix::from_vec(1, 1, vec![w]).unwrap(),
            shift: vec![0.0],
            base_threshold: vec![theta],
            alpha_policy: policy,
            window: Window::new(1.0, 2.0),
        }
    }

    fn input_at(t: f64) -> SpikeVector {
        SpikeVector {
            times: vec![t],
            mask: vec![true],
            saturated_low: vec![false],
        }
    }

    #[test]
    fn encode_examples() {
        let cfg = NetworkConfig::new(1.0, vec![2, 1]).unwrap();
        assert_eq!(encode_ttfs(&[1.0, 0.0], &cfg).unwrap().times, vec![0.0, 1.0]);
        let cfg2 = NetworkConfig::new(2.0, vec![1, 1]).unwrap();
        assert_eq!(encode_ttfs(&[0.25], &cfg2).unwrap().times, vec![1.5]);
        assert!(encode_ttfs(&[0.25], &cfg2).unwrap().mask[0]);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let cfg = NetworkConfig::new(1.0, vec![2, 1]).unwrap();
        assert_eq!(
            encode_ttfs(&[0.5, 1.5], &cfg),
            Err(DynamicsError::Domain { index: 1, value: 1.5 })
        );
        assert!(encode_ttfs(&[-0.1], &cfg).is_err());
    }

    #[test]
    fn decode_boundaries() {
        let s = SpikeVector {
            times: vec![2.0, 1.0, 1.5],
            mask: vec![false, true, true],
            saturated_low: vec![false, true, false],
        };
        assert_eq!(decode_ttfs(&s, 2.0, 1.0), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn layer_forward_worked_examples() {
        // W = 0.5, linearly mappable (α = 0.5), θ = 1, input at 0.5.
        let rec = layer_forward(&input_at(0.5), &single(0.5, AlphaPolicy::LinearlyMappable, 1.0), 1.0).unwrap();
        assert!((rec.output.times[0] - 1.75).abs() < 1e-15);
        assert!(rec.output.mask[0]);
        assert!((rec.slope[0] - 1.0).abs() < 1e-12);

        // Zero weight reaches threshold exactly at t_max: forced.
        let rec = layer_forward(&input_at(0.5), &single(0.0, AlphaPolicy::LinearlyMappable, 1.0), 1.0).unwrap();
        assert_eq!(rec.numerator[0], 2.0);
        assert_eq!(rec.output.times[0], 2.0);
        assert!(!rec.output.mask[0]);

        // Inhibitory weight: candidate 2.5 beyond t_max.
        let rec = layer_forward(&input_at(0.5), &single(-1.0, AlphaPolicy::LinearlyMappable, 1.0), 1.0).unwrap();
        assert!((rec.numerator[0] / rec.slope[0] - 2.5).abs() < 1e-15);
        assert_eq!(rec.output.times[0], 2.0);
        assert!(!rec.output.mask[0]);
    }

    #[test]
    fn early_candidate_is_clamped_and_flagged() {
        let layer = single(0.5, AlphaPolicy::LinearlyMappable, 0.1);
        let rec = layer_forward(&input_at(0.0), &layer, 1.0).unwrap();
        // A = 0.1 + 0.5 + 0 = 0.6 < t_min
        assert_eq!(rec.output.times[0], 1.0);
        assert!(rec.output.saturated_low[0]);
        assert!(rec.output.mask[0]);
    }

    #[test]
    fn nonpositive_slope_is_an_error() {
        let layer = single(-1.0, AlphaPolicy::ConstantAlpha(vec![1.0]), 1.0);
        assert!(matches!(
            layer_forward(&input_at(0.5), &layer, 1.0),
            Err(DynamicsError::InvalidSlope { neuron: 0, .. })
        ));
    }

    #[test]
    fn oracle_matches_worked_example() {
        let layer = single(0.5, AlphaPolicy::LinearlyMappable, 1.0);
        let s = integrate_potential_oracle(&input_at(0.5), &layer, 1.0, 1e-5);
        assert!((s.times[0] - 1.75).abs() <= 2e-5, "{}", s.times[0]);
        let half = integrate_potential_oracle(&input_at(0.5), &layer, 1.0, 5e-6);
        assert!((half.times[0] - 1.75).abs() <= 1e-5);

        let zero = integrate_potential_oracle(
            &input_at(0.5),
            &single(0.0, AlphaPolicy::LinearlyMappable, 1.0),
            1.0,
            1e-4,
        );
        assert_eq!(zero.times[0], 2.0);
        let late = integrate_potential_oracle(
            &input_at(0.5),
            &single(-1.0, AlphaPolicy::LinearlyMappable, 1.0),
            1.0,
            1e-4,
        );
        assert_eq!(late.times[0], 2.0);
        assert!(!late.mask[0]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_and_limit() {
        let (loss, grad) = softmax_cross_entropy(&[0.3; 4], 2);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((grad.iter().sum::<f64>()).abs() < 1e-15);
        let (loss, _) = softmax_cross_entropy(&[0.0, 800.0, 0.0], 1);
        assert!(loss < 1e-300 + f64::EPSILON);
    }

    #[test]
    fn softmax_cross_entropy_finite_differences() {
        let v = [0.3, -1.2, 2.0, 0.7, -0.4];
        let label = 3;
        let (_, grad) = softmax_cross_entropy(&v, label);
        let eps = 1e-6;
        for k in 0..v.len() {
            let mut plus = v;
            let mut minus = v;
            plus[k] += eps;
            minus[k] -= eps;
            let fd = (softmax_cross_entropy(&plus, label).0 - softmax_cross_entropy(&minus, label).0) / (2.0 * eps);
            assert!(
                (fd - grad[k]).abs() / grad[k].abs().max(1e-3) < 1e-6,
                "{k}: {fd} vs {}",
                grad[k]
            );
        }
    }

    #[test]
    fn output_potentials_examples() {
        let out = OutputLayer {
            weights: DenseMatrix::zeros(2, 3),
            alpha: vec![0.5, 2.0],
            ramp_start: 1.0,
            t_read: 3.0,
        };
        let spikes = SpikeVector::from_times(vec![1.5, 2.0, 3.0], Window::new(1.0, 3.0));
        assert_eq!(output_potentials(&spikes, &out, 2.0), vec![0.5, 2.0]);

        let mut out = out;
        out.weights = DenseMatrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![-1.0, 2.0, 0.0]]).unwrap();
        let at_read = SpikeVector::from_times(vec![3.0; 3], Window::new(1.0, 3.0));
        assert_eq!(output_potentials(&at_read, &out, 2.0), vec![0.5, 2.0]);
    }
}
