//! Hardware perturbations and feasibility checks: spike-time jitter, time
//! and weight quantization, latency reduction, and the validity of the
//! linearized double-exponential synapse.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::bridge::{relu_forward, AnnNetwork};
use crate::dynamics::{SnnNetwork, SpikeTransform, SpikeVector, Window};
use crate::scheduler::{set_widths, SchedulerConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("invalid quantization spec: {0}")]
    Spec(String),
    #[error("invalid double-exponential config: tau_1 = {tau_1}, tau_2 = {tau_2}")]
    DoubleExp { tau_1: f64, tau_2: f64 },
}

/// Optional hardware constraints of one experiment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantSpec {
    /// Uniform time grid points per layer window.
    pub time_steps_per_layer: Option<usize>,
    /// Weight bit width `q`.
    pub weight_bits: Option<u32>,
    /// Clip percentiles; defaults depend on `q`, see [`default_clip`].
    pub percentile_clip: Option<(f64, f64)>,
    /// Standard deviation of spike-time noise (time units).
    pub jitter_sd: f64,
    /// Share of ANN activations each window must contain.
    pub latency_percentile: Option<f64>,
}

impl QuantSpec {
    pub fn validate(&self) -> Result<(), ConstraintError> {
        if let Some(steps) = self.time_steps_per_layer {
            if steps < 2 {
                return Err(ConstraintError::Spec(format!("time steps {steps} < 2")));
            }
        }
        if let Some(q) = self.weight_bits {
            if !(2..=31).contains(&q) {
                return Err(ConstraintError::Spec(format!("weight bits {q} outside [2, 31]")));
            }
        }
        if let Some((lo, hi)) = self.percentile_clip {
            if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
                return Err(ConstraintError::Spec(format!("clip percentiles ({lo}, {hi})")));
            }
        }
        if !(self.jitter_sd >= 0.0) {
            return Err(ConstraintError::Spec(format!("jitter sd {}", self.jitter_sd)));
        }
        if let Some(p) = self.latency_percentile {
            if !(p > 0.0 && p <= 100.0) {
                return Err(ConstraintError::Spec(format!("latency percentile {p}")));
            }
        }
        Ok(())
    }

    pub fn clip(&self, bits: u32) -> (f64, f64) {
        self.percentile_clip.unwrap_or_else(|| default_clip(bits))
    }
}

/// 1st/99th percentile clipping, or 4th/96th for 4-bit weights.
pub fn default_clip(bits: u32) -> (f64, f64) {
    if bits == 4 {
        (4.0, 96.0)
    } else {
        (1.0, 99.0)
    }
}

/// Adds `N(0, sd²)` to every spike and clamps into the window. Masks are
/// recomputed; spikes pushed below `t_min` are flagged as saturated.
pub fn add_spike_jitter<R: Rng + ?Sized>(spikes: &SpikeVector, window: Window, sd: f64, rng: &mut R) -> SpikeVector {
    if sd == 0.0 {
        return spikes.clone();
    }
    let normal = Normal::new(0.0, sd).expect("finite standard deviation");
    let mut out = spikes.clone();
    for i in 0..out.len() {
        let raw = out.times[i] + normal.sample(rng);
        out.times[i] = raw.clamp(window.t_min, window.t_max);
        out.mask[i] = out.times[i] < window.t_max;
        out.saturated_low[i] = out.saturated_low[i] || raw < window.t_min;
    }
    out
}

/// Snaps fired spikes to the nearest of `steps` bin centres
/// `t_min + (k + ½) width / steps`. Forced spikes stay at `t_max`, so the
/// error is at most `width / (2 steps)`.
pub fn quantize_times(spikes: &SpikeVector, steps: usize, window: Window) -> SpikeVector {
    assert!(steps >= 2, "need at least two time steps");
    let h = window.width() / steps as f64;
    let mut out = spikes.clone();
    for i in 0..out.len() {
        if !out.mask[i] || out.times[i] >= window.t_max {
            out.times[i] = window.t_max;
            out.mask[i] = false;
            continue;
        }
        let t = out.times[i].max(window.t_min);
        let k = (((t - window.t_min) / h).floor() as usize).min(steps - 1);
        out.times[i] = window.t_min + (k as f64 + 0.5) * h;
    }
    out
}

/// Jitter and time quantization applied to every layer's spikes, the
/// input encoding included. Jitter comes first.
pub struct HardwarePerturbation {
    pub jitter_sd: f64,
    pub time_steps: Option<usize>,
    pub rng: ChaCha8Rng,
}

impl HardwarePerturbation {
    pub fn is_identity(&self) -> bool {
        self.jitter_sd == 0.0 && self.time_steps.is_none()
    }
}

impl SpikeTransform for HardwarePerturbation {
    fn apply(&mut self, _layer: usize, window: Window, spikes: &mut SpikeVector) {
        if self.jitter_sd > 0.0 {
            *spikes = add_spike_jitter(spikes, window, self.jitter_sd, &mut self.rng);
        }
        if let Some(steps) = self.time_steps {
            *spikes = quantize_times(spikes, steps, window);
        }
    }
}

/// Linearly interpolated percentile (`p` in `[0, 100]`) of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty data");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, p)
}

pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Uniform affine grid: code `k ∈ [−2^(q−1), 2^(q−1) − 1]` stands for
/// `lo + scale (k + 2^(q−1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantGrid {
    pub bits: u32,
    pub lo: f64,
    pub scale: f64,
}

impl QuantGrid {
    /// Grid spanning `[lo, hi]`; `None` when the range is empty.
    pub fn new(bits: u32, lo: f64, hi: f64) -> Option<Self> {
        let levels = (1u64 << bits) - 1;
        let scale = (hi - lo) / levels as f64;
        (scale > 0.0).then_some(Self { bits, lo, scale })
    }

    fn half(&self) -> i64 {
        1i64 << (self.bits - 1)
    }

    pub fn code(&self, v: f64) -> i32 {
        let half = self.half();
        let k = ((v - self.lo) / self.scale).round() as i64 - half;
        k.clamp(-half, half - 1) as i32
    }

    pub fn value(&self, code: i32) -> f64 {
        self.lo + self.scale * (code as i64 + self.half()) as f64
    }

    /// Replaces every value by its grid point.
    pub fn project(&self, values: &mut [f64]) {
        for v in values {
            *v = self.value(self.code(*v));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i32>,
    /// `None` for an all-equal tensor, which is passed through unchanged.
    pub grid: Option<QuantGrid>,
    pub passthrough: Vec<f64>,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        match &self.grid {
            Some(g) => self.codes.iter().map(|&k| g.value(k)).collect(),
            None => self.passthrough.clone(),
        }
    }
}

/// Clips to the given percentiles and quantizes onto `2^q` levels.
pub fn quantize_weights(values: &[f64], bits: u32, clip: (f64, f64)) -> QuantizedTensor {
    assert!(bits >= 2, "need at least two bits");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, clip.0);
    let hi = percentile_sorted(&sorted, clip.1);
    match QuantGrid::new(bits, lo, hi) {
        Some(grid) => QuantizedTensor {
            codes: values.iter().map(|&v| grid.code(v)).collect(),
            grid: Some(grid),
            passthrough: Vec::new(),
        },
        None => QuantizedTensor {
            codes: Vec::new(),
            grid: None,
            passthrough: values.to_vec(),
        },
    }
}

/// Per-tensor grids for every weight matrix of a network, hidden layers
/// first, then the read-out.
pub fn weight_grids(net: &SnnNetwork, bits: u32, clip: (f64, f64)) -> Vec<Option<QuantGrid>> {
    net.hidden
        .iter()
        .map(|l| l.weights.as_slice())
        .chain(std::iter::once(net.output.weights.as_slice()))
        .map(|w| quantize_weights(w, bits, clip).grid)
        .collect()
}

/// Projects every weight matrix onto its grid.
pub fn apply_weight_grids(net: &mut SnnNetwork, grids: &[Option<QuantGrid>]) {
    let depth = net.hidden.len();
    for (n, grid) in grids.iter().enumerate() {
        let Some(g) = grid else { continue };
        let w = if n < depth {
            net.hidden[n].weights.as_mut_slice()
        } else {
            net.output.weights.as_mut_slice()
        };
        g.project(w);
    }
}

/// Hidden activations of the ReLU network, one vector per layer holding
/// every neuron's value on every sample.
pub fn activation_samples(ann: &AnnNetwork, xs: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); ann.hidden.len()];
    for x in xs {
        for (n, a) in relu_forward(ann, x).activations.into_iter().enumerate() {
            out[n].extend(a);
        }
    }
    out
}

/// Sets every window width to `τ_c` times the given percentile of that
/// layer's ANN activations; larger activations will be clipped at `t_min`.
/// Layers whose percentile is zero keep their width.
pub fn reduce_latency(
    net: &mut SnnNetwork,
    percentile_value: f64,
    activations: &[Vec<f64>],
    cfg: &SchedulerConfig,
) -> Vec<f64> {
    let tau_c = net.tau_c();
    let widths: Vec<f64> = net
        .hidden
        .iter()
        .zip(activations)
        .map(|(layer, acts)| {
            let p = percentile(acts, percentile_value);
            if p > 0.0 {
                tau_c * p + cfg.width_margin
            } else {
                layer.window.width()
            }
        })
        .collect();
    set_widths(net, &widths);
    widths
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleExpConfig {
    pub tau_1: f64,
    pub tau_2: f64,
}

impl DoubleExpConfig {
    pub fn validate(&self) -> Result<(), ConstraintError> {
        if self.tau_1 > 0.0 && self.tau_2 >= 2.0 * self.tau_1 {
            Ok(())
        } else {
            Err(ConstraintError::DoubleExp {
                tau_1: self.tau_1,
                tau_2: self.tau_2,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoubleExpReport {
    pub pass: bool,
    /// `t_max^(n) − t_min^(n−1)` per hidden layer, then the read-out.
    pub spans: Vec<f64>,
    pub binding_layer: usize,
    pub max_span: f64,
    /// Smallest `τ_1` for which the network passes.
    pub min_tau_1: f64,
}

/// The linear approximation of the double-exponential kernel holds when
/// every layer's integration span is at most `τ_1 / 2`.
pub fn check_double_exp_validity(net: &SnnNetwork, cfg: &DoubleExpConfig) -> Result<DoubleExpReport, ConstraintError> {
    cfg.validate()?;
    let mut spans: Vec<f64> = (0..net.hidden.len())
        .map(|n| net.hidden[n].window.t_max - net.window_before(n).t_min)
        .collect();
    spans.push(net.output.t_read - net.output.ramp_start);
    let (binding_layer, max_span) =
        spans.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (i, s)| if s > best.1 { (i, s) } else { best },
        );
    Ok(DoubleExpReport {
        pass: max_span <= 0.5 * cfg.tau_1,
        spans,
        binding_layer,
        max_span,
        min_tau_1: 2.0 * max_span,
    })
}
