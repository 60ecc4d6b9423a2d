//! Construction and maintenance of the per-layer coding windows.
//!
//! Windows are chained, `t_min^(n+1) = t_max^(n)`, and every base threshold
//! is kept at `θ̃_i = B_i (t_max − t_min) / τ_c`. Under that rule the
//! equivalent ReLU network does not depend on the window widths, so the
//! scheduler can resize windows freely without changing what the network
//! computes, as long as no spike is clamped.

use log::warn;

use crate::dynamics::{
    layer_forward_with, network_forward_with, DynamicsError, Exact, ForwardTrace, SnnNetwork, SpikeVector, Window,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    /// Safety margin on the initial window width.
    pub zeta: f64,
    /// Expansion factor of the adaptive rule.
    pub gamma: f64,
    /// Reference slope; fixed at one.
    pub b0: f64,
    /// Width (time units) given to layers whose calibration potentials are
    /// all non-positive.
    pub min_width: f64,
    /// Absolute slack (time units) added to every computed width so that the
    /// earliest calibration spike is not clamped by rounding.
    pub width_margin: f64,
    /// Relative slack below which the adaptive rule does not fire.
    pub trigger_tolerance: f64,
    /// Whether the adaptive rule runs during training.
    pub adaptive: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            zeta: 0.5,
            gamma: 10.0,
            b0: 1.0,
            min_width: 1e-3,
            width_margin: 1e-9,
            trigger_tolerance: 1e-9,
            adaptive: true,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = self.zeta >= 0.0
            && self.gamma > 1.0
            && self.b0 == 1.0
            && self.min_width > 0.0
            && self.width_margin >= 0.0
            && self.trigger_tolerance >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::Config(format!("invalid scheduler config {self:?}")))
        }
    }
}

/// Batch statistics of one hidden layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerStats {
    /// Earliest spike over neurons and samples, taken before clamping at
    /// `t_min` so that one expansion covers every clamped spike.
    pub min_spike_time: f64,
    /// Largest `V_i(t_min)` over neurons and samples.
    pub max_potential_at_t_min: f64,
}

impl LayerStats {
    fn empty() -> Self {
        Self {
            min_spike_time: f64::INFINITY,
            max_potential_at_t_min: f64::NEG_INFINITY,
        }
    }
}

/// Accumulates per-layer statistics over traces of the same network.
pub fn collect_stats<'a>(net: &SnnNetwork, traces: impl IntoIterator<Item = &'a ForwardTrace>) -> Vec<LayerStats> {
    let tau_c = net.tau_c();
    let mut stats = vec![LayerStats::empty(); net.hidden.len()];
    for trace in traces {
        for (n, (record, layer)) in trace.layers.iter().zip(&net.hidden).enumerate() {
            let s = &mut stats[n];
            let t_min = layer.window.t_min;
            for i in 0..layer.outputs() {
                let b = record.slope[i];
                let candidate = record.numerator[i] / b;
                let theta = layer.base_threshold[i] + layer.shift[i];
                // V(t_min) = θ − B (t − t_min) / τ_c on the linear segment.
                let v = theta - b * (candidate - t_min) / tau_c;
                s.min_spike_time = s.min_spike_time.min(candidate);
                s.max_potential_at_t_min = s.max_potential_at_t_min.max(v);
            }
        }
    }
    stats
}

/// Rebuilds the window chain from the given widths, recomputes base
/// thresholds and keeps the read-out bias `α (t_read − ramp) / τ_c` fixed.
pub fn set_widths(net: &mut SnnNetwork, widths: &[f64]) {
    assert_eq!(widths.len(), net.hidden.len(), "one width per hidden layer");
    let old_read = net.output.t_read - net.output.ramp_start;
    let mut t_min = net.config.tau_c;
    for (layer, &w) in net.hidden.iter_mut().zip(widths) {
        layer.window = Window::new(t_min, t_min + w);
        t_min = layer.window.t_max;
    }
    let last = net.last_window();
    let new_read = last.width();
    if old_read > 0.0 && new_read != old_read {
        let ratio = old_read / new_read;
        net.output.alpha.iter_mut().for_each(|a| *a *= ratio);
    }
    net.output.ramp_start = last.t_min;
    net.output.t_read = last.t_max;
    recompute_base_thresholds(net);
}

/// `θ̃_i = B_i (t_max − t_min) / τ_c` with the current slopes.
pub fn recompute_base_thresholds(net: &mut SnnNetwork) {
    let tau_c = net.tau_c();
    for layer in &mut net.hidden {
        let width = layer.window.width();
        let slope = layer.coefficients().slope;
        layer.base_threshold = slope.iter().map(|b| b * width / tau_c).collect();
    }
}

pub fn widths(net: &SnnNetwork) -> Vec<f64> {
    net.hidden.iter().map(|l| l.window.width()).collect()
}

/// Outcome of [`init_windows_and_thresholds`].
#[derive(Debug, Clone, PartialEq)]
pub struct InitReport {
    pub widths: Vec<f64>,
    /// Layers that fell back to the minimum width.
    pub degenerate_layers: Vec<usize>,
}

/// Sets every window from the calibration batch, layer by layer:
/// `width = τ_c (1 + ζ) max_{μ,i} (V_i(t_min) − D_i) / B_i`.
///
/// With `D = 0` and `B = B0` this is `t_max = t_min + τ_c Ṽ_0 / B0`.
pub fn init_windows_and_thresholds(
    net: &mut SnnNetwork,
    batch: &[&[f64]],
    cfg: &SchedulerConfig,
) -> Result<InitReport, DynamicsError> {
    cfg.validate()?;
    let tau_c = net.tau_c();
    let mut spikes: Vec<SpikeVector> = batch
        .iter()
        .map(|x| crate::dynamics::encode_ttfs(x, &net.config))
        .collect::<Result<_, _>>()?;
    let mut report = InitReport {
        widths: Vec::with_capacity(net.hidden.len()),
        degenerate_layers: Vec::new(),
    };
    let mut widths = widths(net);
    for n in 0..net.hidden.len() {
        let t_min = net.window_before(n).t_max;
        let layer = &net.hidden[n];
        let coeffs = layer.coefficients();
        if let Some((i, &b)) = coeffs.slope.iter().enumerate().find(|(_, &b)| b <= 0.0) {
            return Err(DynamicsError::InvalidSlope {
                layer: n,
                neuron: i,
                slope: b,
            });
        }
        let mut peak = f64::NEG_INFINITY;
        for s in &spikes {
            for i in 0..layer.outputs() {
                let v: f64 = layer
                    .weights
                    .row(i)
                    .iter()
                    .zip(&s.times)
                    .map(|(w, t)| w * (t_min - t))
                    .sum::<f64>()
                    / tau_c;
                peak = peak.max((v - layer.shift[i]) * cfg.b0 / coeffs.slope[i]);
            }
        }
        let width = if peak > 0.0 {
            tau_c * (1.0 + cfg.zeta) * peak / cfg.b0 + cfg.width_margin
        } else {
            warn!("layer {n}: no positive potential at t_min on the calibration batch, using minimum width");
            report.degenerate_layers.push(n);
            cfg.min_width
        };
        widths[n] = width;
        set_widths(net, &widths);
        let layer = &net.hidden[n];
        let coeffs = layer.coefficients();
        spikes = spikes
            .iter()
            .map(|s| layer_forward_with(s, layer, &coeffs, tau_c, n).map(|r| r.output))
            .collect::<Result<_, _>>()?;
        report.widths.push(width);
    }
    Ok(report)
}

/// Expansion of one window from its batch statistics:
/// `Δ = γ (t_max − min t) − (t_max − t_min)` when positive, else zero.
pub fn compute_delta(window: Window, stats: &LayerStats, cfg: &SchedulerConfig) -> f64 {
    let width = window.width();
    let target = cfg.gamma * (window.t_max - stats.min_spike_time);
    if target - width > cfg.trigger_tolerance * width {
        target - width
    } else {
        0.0
    }
}

/// Applies the adaptive rule to every layer. Each `t_max^(n)` grows by its
/// own `Δ_n` and all deeper windows shift with it. Returns the `Δ`s.
pub fn adapt_all(net: &mut SnnNetwork, stats: &[LayerStats], cfg: &SchedulerConfig) -> Vec<f64> {
    let deltas: Vec<f64> = net
        .hidden
        .iter()
        .zip(stats)
        .map(|(l, s)| compute_delta(l.window, s, cfg))
        .collect();
    if deltas.iter().any(|&d| d > 0.0) {
        let new_widths: Vec<f64> = widths(net).iter().zip(&deltas).map(|(w, d)| w + d).collect();
        set_widths(net, &new_widths);
    }
    deltas
}

/// Result of one scheduler application on a batch.
#[derive(Debug, Clone)]
pub struct Adaptation {
    /// Total `Δt_max` per layer.
    pub deltas: Vec<f64>,
    /// Forward passes used.
    pub passes: usize,
    /// Traces of the final network on the batch.
    pub traces: Vec<ForwardTrace>,
}

impl Adaptation {
    pub fn changed(&self) -> bool {
        self.deltas.iter().any(|&d| d > 0.0)
    }
}

/// Alternates forward passes and adaptive updates until a pass leaves
/// every window unchanged. A spike clamped in one layer hides the true
/// activations of the layers after it, so one update is not always enough;
/// each extra pass uncovers at least one more layer.
pub fn adapt_on_batch(
    net: &mut SnnNetwork,
    batch: &[&[f64]],
    cfg: &SchedulerConfig,
) -> Result<Adaptation, DynamicsError> {
    let mut total = vec![0.0; net.hidden.len()];
    let max_passes = net.hidden.len() + 2;
    for passes in 1.. {
        let traces = forward_batch(net, batch)?;
        if passes == max_passes {
            warn!("window adaptation stopped after {max_passes} passes");
            return Ok(Adaptation {
                deltas: total,
                passes,
                traces,
            });
        }
        let stats = collect_stats(net, &traces);
        let deltas = adapt_all(net, &stats, cfg);
        if deltas.iter().all(|&d| d == 0.0) {
            return Ok(Adaptation {
                deltas: total,
                passes,
                traces,
            });
        }
        total.iter_mut().zip(&deltas).for_each(|(t, d)| *t += d);
    }
    unreachable!()
}

pub fn forward_batch(net: &SnnNetwork, batch: &[&[f64]]) -> Result<Vec<ForwardTrace>, DynamicsError> {
    let coeffs = net.coefficients();
    batch
        .iter()
        .map(|x| network_forward_with(x, net, &coeffs, &mut Exact))
        .collect()
}

/// Shrinks every window so that the earliest calibration spike lands just
/// after `t_min`. Layers without any early spike keep their width.
pub fn tighten_for_inference(
    net: &mut SnnNetwork,
    batch: &[&[f64]],
    cfg: &SchedulerConfig,
) -> Result<Vec<f64>, DynamicsError> {
    let traces = forward_batch(net, batch)?;
    let stats = collect_stats(net, &traces);
    let new_widths: Vec<f64> = net
        .hidden
        .iter()
        .zip(&stats)
        .map(|(l, s)| {
            let span = l.window.t_max - s.min_spike_time.max(l.window.t_min);
            let tight = span + cfg.width_margin;
            if span > 0.0 && tight < l.window.width() {
                tight
            } else {
                l.window.width()
            }
        })
        .collect();
    set_widths(net, &new_widths);
    Ok(new_widths)
}

/// Largest deviation of `θ̃` from `B width / τ_c`, relative to its size.
pub fn threshold_inconsistency(net: &SnnNetwork) -> f64 {
    let tau_c = net.tau_c();
    let mut worst = 0.0f64;
    for layer in &net.hidden {
        let slope = layer.coefficients().slope;
        for (th, b) in layer.base_threshold.iter().zip(slope) {
            let expected = b * layer.window.width() / tau_c;
            worst = worst.max((th - expected).abs() / expected.abs().max(1.0));
        }
    }
    worst
}
