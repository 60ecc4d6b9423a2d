//! Random networks and inputs for property tests and experiments.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bridge::{ann_to_snn, AnnNetwork, BridgeError, InitScheme};
use crate::dynamics::{AlphaPolicy, SnnNetwork, Window};
use crate::linalg::DenseMatrix;
use crate::scheduler::{init_windows_and_thresholds, SchedulerConfig};

/// How the ramp strengths of a random network are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    LinearlyMappable,
    /// Same `α` for every neuron.
    Constant(f64),
    /// Per-neuron `α` drawn uniformly from the range.
    RandomConstant(f64, f64),
}

impl PolicyKind {
    pub fn policy<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> AlphaPolicy {
        match *self {
            PolicyKind::LinearlyMappable => AlphaPolicy::LinearlyMappable,
            PolicyKind::Constant(a) => AlphaPolicy::constant(a, n),
            PolicyKind::RandomConstant(lo, hi) => {
                AlphaPolicy::ConstantAlpha((0..n).map(|_| rng.random_range(lo..hi)).collect())
            }
        }
    }
}

pub fn uniform_inputs<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect()
}

pub fn provisional_windows(depth: usize, tau_c: f64) -> Vec<Window> {
    (0..depth)
        .map(|n| Window::new(tau_c * (n + 1) as f64, tau_c * (n + 2) as f64))
        .collect()
}

/// Random ReLU network with biases in `[-bias, bias]`, mapped to an SNN and
/// calibrated on `calibration`.
///
/// Under constant `α` each hidden row of `w` is shifted so that its sum lies
/// in `[-0.5, 0.5]`, which keeps the implied slope `α / (1 − Σ w)` positive.
pub fn random_mapped_network<R: Rng + ?Sized>(
    sizes: &[usize],
    kind: PolicyKind,
    bias: f64,
    tau_c: f64,
    calibration: &[&[f64]],
    cfg: &SchedulerConfig,
    rng: &mut R,
) -> Result<(SnnNetwork, AnnNetwork), BridgeError> {
    let constant = !matches!(kind, PolicyKind::LinearlyMappable);
    let mut ann = AnnNetwork::random(sizes, InitScheme::He, constant, rng);
    for layer in &mut ann.hidden {
        if constant {
            let cols = layer.w.cols() as f64;
            for i in 0..layer.w.rows() {
                let offset = rng.random_range(-0.5..0.5) / cols;
                layer.w.row_mut(i).iter_mut().for_each(|v| *v += offset);
            }
        }
        if bias > 0.0 {
            layer.b.iter_mut().for_each(|b| *b = rng.random_range(-bias..bias));
        }
    }
    let policies: Vec<AlphaPolicy> = ann.hidden.iter().map(|l| kind.policy(l.w.rows(), rng)).collect();
    let windows = provisional_windows(ann.hidden.len(), tau_c);
    let mut snn = ann_to_snn(&ann, &policies, &windows, tau_c)?;
    init_windows_and_thresholds(&mut snn, calibration, cfg)?;
    Ok((snn, ann))
}

/// Square hidden matrix with i.i.d. `N(0, gain² / n)` entries.
pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> DenseMatrix {
    let normal = Normal::new(0.0, gain / (cols as f64).sqrt()).expect("finite standard deviation");
    DenseMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}
