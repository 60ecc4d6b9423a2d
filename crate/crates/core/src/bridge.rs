//! Exact correspondence between TTFS networks and ReLU networks.
//!
//! A hidden neuron with slope-at-threshold `B_i` behaves like a ReLU unit
//! with `w_ij = W_ij / B_i` and `b_i = −θ_i / B_i + (t_max − t_min) / τ_c`,
//! where activations and spike times are related by `x τ_c = t_max − t`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dynamics::{
    decode_ttfs, network_forward, softmax_cross_entropy, AlphaPolicy, DynamicsError, NetworkConfig, OutputLayer,
    SnnLayer, SnnNetwork, Window,
};
use crate::linalg::{dot, DenseMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BridgeError {
    #[error("layer {layer} neuron {neuron}: slope at threshold {slope} is not positive")]
    InvalidSlope { layer: usize, neuron: usize, slope: f64 },
    #[error("layer {layer} neuron {neuron}: row sum {row_sum} of w leaves no positive slope for alpha {alpha}")]
    InfeasibleMapping {
        layer: usize,
        neuron: usize,
        row_sum: f64,
        alpha: f64,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnLayer {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

impl AnnLayer {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            w: DenseMatrix::zeros(outputs, inputs),
            b: vec![0.0; outputs],
        }
    }

    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.w.rows()).map(|i| dot(self.w.row(i), x) + self.b[i]).collect()
    }
}

/// ReLU hidden layers followed by an affine read-out.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnNetwork {
    pub hidden: Vec<AnnLayer>,
    pub output: AnnLayer,
}

/// Weight initialization for freshly built networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// `N(0, 2 / fan_in)`.
    He,
    /// `N(0, gain² / fan_in)`.
    Gaussian { gain: f64 },
}

impl AnnNetwork {
    /// Random weights, zero biases. With `center_rows` every hidden row is
    /// shifted to sum to zero, which makes a constant-α SNN with `α = 1`
    /// start from exactly the same ReLU network.
    pub fn random<R: Rng + ?Sized>(layer_sizes: &[usize], scheme: InitScheme, center_rows: bool, rng: &mut R) -> Self {
        let mut layers: Vec<AnnLayer> = layer_sizes
            .windows(2)
            .enumerate()
            .map(|(n, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let sd = match scheme {
                    InitScheme::He => (2.0 / fan_in as f64).sqrt(),
                    InitScheme::Gaussian { gain } => gain / (fan_in as f64).sqrt(),
                };
                let normal = Normal::new(0.0, sd).expect("finite standard deviation");
                let mut w = DenseMatrix::from_fn(fan_out, fan_in, |_, _| normal.sample(rng));
                let is_hidden = n + 2 < layer_sizes.len();
                if center_rows && is_hidden {
                    for i in 0..fan_out {
                        let row = w.row_mut(i);
                        let mean = row.iter().sum::<f64>() / fan_in as f64;
                        row.iter_mut().for_each(|v| *v -= mean);
                    }
                }
                AnnLayer {
                    w,
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        let output = layers.pop().expect("at least one layer");
        Self { hidden: layers, output }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let first = self.hidden.first().map_or(self.output.w.cols(), |l| l.w.cols());
        let mut sizes = vec![first];
        sizes.extend(self.hidden.iter().map(|l| l.w.rows()));
        sizes.push(self.output.w.rows());
        sizes
    }

    /// Parameter tensors in the order `w^(1), b^(1), ..., w^(N+1), b^(N+1)`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in self.hidden.iter_mut().chain(std::iter::once(&mut self.output)) {
            out.push(layer.w.as_mut_slice());
            out.push(layer.b.as_mut_slice());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnForward {
    /// Post-ReLU activations of every hidden layer.
    pub activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

pub fn relu_forward(ann: &AnnNetwork, x: &[f64]) -> AnnForward {
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(ann.hidden.len());
    for layer in &ann.hidden {
        let input = activations.last().map_or(x, |a| a.as_slice());
        let a = layer.affine(input).into_iter().map(|v| v.max(0.0)).collect();
        activations.push(a);
    }
    let last = activations.last().map_or(x, |a| a.as_slice());
    let logits = ann.output.affine(last);
    AnnForward { activations, logits }
}

/// Loss gradient of a ReLU network, in the same layout as its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnGradients {
    pub layers: Vec<AnnLayer>,
}

impl AnnGradients {
    pub fn zeros_like(ann: &AnnNetwork) -> Self {
        let layers = ann
            .hidden
            .iter()
            .chain(std::iter::once(&ann.output))
            .map(|l| AnnLayer::zeros(l.w.rows(), l.w.cols()))
            .collect();
        Self { layers }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.w.as_mut_slice().iter_mut().for_each(|v| *v *= c);
            l.b.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn as_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(&l.b);
        }
        out
    }
}

/// Backpropagation through the ReLU network for one sample, accumulated
/// into `grads`. Returns the loss.
pub fn ann_backward(ann: &AnnNetwork, x: &[f64], label: usize, grads: &mut AnnGradients) -> f64 {
    let fwd = relu_forward(ann, x);
    let (loss, mut delta) = softmax_cross_entropy(&fwd.logits, label);
    let depth = ann.hidden.len();
    for n in (0..=depth).rev() {
        let layer = if n == depth { &ann.output } else { &ann.hidden[n] };
        let input = if n == 0 { x } else { fwd.activations[n - 1].as_slice() };
        let g = &mut grads.layers[n];
        for (i, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                g.w.row_mut(i).iter_mut().zip(input).for_each(|(gw, xi)| *gw += d * xi);
            }
            g.b[i] += d;
        }
        if n > 0 {
            let mut next = layer.w.tr_mat_vec(&delta);
            // Zero activations are exactly the forced (mask 0) neurons.
            for (v, a) in next.iter_mut().zip(&fwd.activations[n - 1]) {
                if *a <= 0.0 {
                    *v = 0.0;
                }
            }
            delta = next;
        }
    }
    loss
}

/// Slope of the potential at threshold crossing, `B_i = α_i + Σ_k W_ik`.
pub fn slope_at_threshold(layer: &SnnLayer) -> Vec<f64> {
    layer.coefficients().slope
}

/// Equivalent ReLU network of an SNN.
pub fn snn_to_ann(net: &SnnNetwork) -> Result<AnnNetwork, BridgeError> {
    let tau_c = net.tau_c();
    let mut hidden = Vec::with_capacity(net.hidden.len());
    for (n, layer) in net.hidden.iter().enumerate() {
        let slope = slope_at_threshold(layer);
        if let Some((i, &b)) = slope.iter().enumerate().find(|(_, &b)| b <= 0.0) {
            return Err(BridgeError::InvalidSlope {
                layer: n,
                neuron: i,
                slope: b,
            });
        }
        let width = layer.window.width() / tau_c;
        let theta = layer.thresholds();
        let w = if layer.alpha_policy.is_linearly_mappable() {
            // B = 1 exactly; keep w bitwise equal to W.
            layer.weights.clone()
        } else {
            let inv: Vec<f64> = slope.iter().map(|b| 1.0 / b).collect();
            layer.weights.scale_rows(&inv)
        };
        let b = theta.iter().zip(&slope).map(|(th, bi)| -th / bi + width).collect();
        hidden.push(AnnLayer { w, b });
    }
    let read_width = (net.output.t_read - net.output.ramp_start) / tau_c;
    let output = AnnLayer {
        w: net.output.weights.clone(),
        b: net.output.alpha.iter().map(|a| a * read_width).collect(),
    };
    Ok(AnnNetwork { hidden, output })
}

/// SNN realizing a ReLU network on the given windows.
///
/// `windows[n]` is hidden layer `n`'s coding window; the chain must start at
/// `τ_c`. Base thresholds are set to `B_i · width / τ_c` and the ANN bias is
/// absorbed into the shift `D`.
pub fn ann_to_snn(
    ann: &AnnNetwork,
    policies: &[AlphaPolicy],
    windows: &[Window],
    tau_c: f64,
) -> Result<SnnNetwork, BridgeError> {
    let depth = ann.hidden.len();
    if policies.len() != depth || windows.len() != depth {
        return Err(BridgeError::Shape(format!(
            "{depth} hidden layers, {} policies, {} windows",
            policies.len(),
            windows.len()
        )));
    }
    let config = NetworkConfig::new(tau_c, ann.layer_sizes())?;
    let mut hidden = Vec::with_capacity(depth);
    for (n, ((layer, policy), &window)) in ann.hidden.iter().zip(policies).zip(windows).enumerate() {
        let width = window.width() / tau_c;
        let rows = layer.w.rows();
        let (weights, slope) = match policy {
            AlphaPolicy::LinearlyMappable => (layer.w.clone(), vec![1.0; rows]),
            AlphaPolicy::ConstantAlpha(alpha) => {
                if alpha.len() != rows {
                    return Err(BridgeError::Shape(format!(
                        "layer {n}: {} alpha values for {rows} neurons",
                        alpha.len()
                    )));
                }
                let mut slope = Vec::with_capacity(rows);
                for (i, (&a, s)) in alpha.iter().zip(layer.w.row_sums()).enumerate() {
                    let b = a / (1.0 - s);
                    if !(b > 0.0 && b.is_finite()) {
                        return Err(BridgeError::InfeasibleMapping {
                            layer: n,
                            neuron: i,
                            row_sum: s,
                            alpha: a,
                        });
                    }
                    slope.push(b);
                }
                (layer.w.scale_rows(&slope), slope)
            }
        };
        let base_threshold: Vec<f64> = slope.iter().map(|b| b * width).collect();
        let shift = slope.iter().zip(&layer.b).map(|(b, bias)| -b * bias).collect();
        hidden.push(SnnLayer {
            weights,
            shift,
            base_threshold,
            alpha_policy: policy.clone(),
            window,
        });
    }
    let last = windows.last().copied().unwrap_or_else(|| config.input_window());
    let mut output = OutputLayer::new(ann.output.w.clone(), last);
    let read_width = last.width() / tau_c;
    output.alpha = ann.output.b.iter().map(|b| b / read_width).collect();
    let net = SnnNetwork { config, hidden, output };
    net.validate()?;
    Ok(net)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// Per hidden layer, max over the batch of `|x τ_c − (t_max − t)|`.
    pub layer_max_diff: Vec<f64>,
    pub logit_max_diff: f64,
    pub loss_max_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl EquivalenceReport {
    pub fn worst(&self) -> f64 {
        self.layer_max_diff
            .iter()
            .copied()
            .chain([self.logit_max_diff, self.loss_max_diff])
            .fold(0.0, f64::max)
    }
}

/// Runs both networks on a batch and compares them layer by layer.
pub fn check_equivalence(
    snn: &SnnNetwork,
    ann: &AnnNetwork,
    xs: &[Vec<f64>],
    labels: &[usize],
    tol: f64,
) -> Result<EquivalenceReport, BridgeError> {
    if ann.layer_sizes() != snn.config.layer_sizes {
        return Err(BridgeError::Shape(format!(
            "ANN sizes {:?} vs SNN sizes {:?}",
            ann.layer_sizes(),
            snn.config.layer_sizes
        )));
    }
    if xs.len() != labels.len() {
        return Err(BridgeError::Shape(format!(
            "{} inputs but {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let tau_c = snn.tau_c();
    let mut layer_max_diff = vec![0.0f64; snn.hidden.len()];
    let mut logit_max_diff = 0.0f64;
    let mut loss_max_diff = 0.0f64;
    for (x, &label) in xs.iter().zip(labels) {
        let trace = network_forward(x, snn)?;
        let reference = relu_forward(ann, x);
        for (n, (record, act)) in trace.layers.iter().zip(&reference.activations).enumerate() {
            let t_max = snn.hidden[n].window.t_max;
            for (&t, &a) in record.output.times.iter().zip(act) {
                let d = (a * tau_c - (t_max - t)).abs();
                layer_max_diff[n] = layer_max_diff[n].max(d);
            }
        }
        for (v, z) in trace.potentials.iter().zip(&reference.logits) {
            logit_max_diff = logit_max_diff.max((v - z).abs());
        }
        let l_snn = softmax_cross_entropy(&trace.potentials, label).0;
        let l_ann = softmax_cross_entropy(&reference.logits, label).0;
        loss_max_diff = loss_max_diff.max((l_snn - l_ann).abs());
    }
    let pass = layer_max_diff
        .iter()
        .chain([&logit_max_diff, &loss_max_diff])
        .all(|&d| d < tol);
    Ok(EquivalenceReport {
        layer_max_diff,
        logit_max_diff,
        loss_max_diff,
        tolerance: tol,
        pass,
    })
}

/// Decoded hidden activations of an SNN, for side-by-side comparisons.
pub fn decoded_activations(snn: &SnnNetwork, x: &[f64]) -> Result<Vec<Vec<f64>>, BridgeError> {
    let trace = network_forward(x, snn)?;
    Ok(trace
        .layers
        .iter()
        .zip(&snn.hidden)
        .map(|(rec, layer)| decode_ttfs(&rec.output, layer.window.t_max, snn.tau_c()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_layer(w: f64, policy: AlphaPolicy, theta: f64) -> SnnLayer {
        SnnLayer {
            weights: DenseMatrix::from_vec(1, 1, vec![w]).unwrap(),
            shift: vec![0.0],
            base_threshold: vec![theta],
            alpha_policy: policy,
            window: Window::new(1.0, 2.0),
        }
    }

    fn chained_windows(depth: usize, tau_c: f64, width: f64) -> Vec<Window> {
        (0..depth)
            .map(|n| Window::new(tau_c + n as f64 * width, tau_c + (n + 1) as f64 * width))
            .collect()
    }

    #[test]
    fn slope_examples() {
        let lm = SnnLayer {
            weights: DenseMatrix::from_rows(&[vec![0.3, -2.0, 0.9], vec![5.0, 1.0, -0.25]]).unwrap(),
            shift: vec![0.0; 2],
            base_threshold: vec![1.0; 2],
            alpha_policy: AlphaPolicy::LinearlyMappable,
            window: Window::new(1.0, 2.0),
        };
        for b in slope_at_threshold(&lm) {
            assert!((b - 1.0).abs() < 1e-12);
        }
        let c = SnnLayer {
            weights: DenseMatrix::from_rows(&[vec![0.1, 0.2], vec![-0.5, -0.5]]).unwrap(),
            alpha_policy: AlphaPolicy::constant(1.0, 2),
            ..lm
        };
        let b = slope_at_threshold(&c);
        assert!((b[0] - 1.3).abs() < 1e-15);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn constant_alpha_mapping_example() {
        // α = 1 with W = 1 gives B = 2.
        let layer = one_layer(1.0, AlphaPolicy::ConstantAlpha(vec![1.0]), 1.0);
        let net = SnnNetwork {
            config: NetworkConfig::new(1.0, vec![1, 1, 1]).unwrap(),
            hidden: vec![layer],
            output: OutputLayer::new(DenseMatrix::zeros(1, 1), Window::new(1.0, 2.0)),
        };
        let ann = snn_to_ann(&net).unwrap();
        assert_eq!(ann.hidden[0].w[(0, 0)], 0.5);
        assert_eq!(ann.hidden[0].b[0], 0.5);
    }

    #[test]
    fn invalid_slope_is_rejected() {
        let layer = one_layer(-1.0, AlphaPolicy::ConstantAlpha(vec![1.0]), 1.0);
        let net = SnnNetwork {
            config: NetworkConfig::new(1.0, vec![1, 1, 1]).unwrap(),
            hidden: vec![layer],
            output: OutputLayer::new(DenseMatrix::zeros(1, 1), Window::new(1.0, 2.0)),
        };
        assert!(matches!(snn_to_ann(&net), Err(BridgeError::InvalidSlope { .. })));
    }

    #[test]
    fn null_layer_maps_to_width_threshold() {
        let ann = AnnNetwork {
            hidden: vec![AnnLayer::zeros(2, 3)],
            output: AnnLayer::zeros(2, 2),
        };
        let snn = ann_to_snn(&ann, &[AlphaPolicy::LinearlyMappable], &[Window::new(1.0, 3.5)], 1.0).unwrap();
        assert!(snn.hidden[0].weights.as_slice().iter().all(|&w| w == 0.0));
        assert_eq!(snn.hidden[0].thresholds(), vec![2.5, 2.5]);
    }

    #[test]
    fn infeasible_constant_alpha_mapping() {
        let ann = AnnNetwork {
            hidden: vec![AnnLayer {
                w: DenseMatrix::from_rows(&[vec![0.7, 0.4]]).unwrap(),
                b: vec![0.0],
            }],
            output: AnnLayer::zeros(1, 1),
        };
        let err = ann_to_snn(&ann, &[AlphaPolicy::constant(1.0, 1)], &[Window::new(1.0, 2.0)], 1.0);
        assert!(matches!(err, Err(BridgeError::InfeasibleMapping { neuron: 0, .. })));
    }

    #[test]
    fn relu_forward_examples() {
        let ann = AnnNetwork {
            hidden: vec![AnnLayer {
                w: DenseMatrix::identity(3),
                b: vec![0.0; 3],
            }],
            output: AnnLayer::zeros(2, 3),
        };
        let x = [0.2, 0.0, 0.9];
        let f = relu_forward(&ann, &x);
        assert_eq!(f.activations[0], x.to_vec());
        assert_eq!(f.logits, vec![0.0, 0.0]);
    }

    #[test]
    fn random_network_roundtrip_and_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sizes = [6, 5, 4, 3];
        let mut ann = AnnNetwork::random(&sizes, InitScheme::He, false, &mut rng);
        for l in ann.hidden.iter_mut().chain(std::iter::once(&mut ann.output)) {
            l.b.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.3));
        }
        let windows = chained_windows(2, 1.0, 8.0);
        let snn = ann_to_snn(
            &ann,
            &[AlphaPolicy::LinearlyMappable, AlphaPolicy::LinearlyMappable],
            &windows,
            1.0,
        )
        .unwrap();
        let back = snn_to_ann(&snn).unwrap();
        for (a, b) in ann.hidden.iter().zip(&back.hidden) {
            assert_eq!(a.w, b.w);
            for (x, y) in a.b.iter().zip(&b.b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let xs: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..6).map(|_| rng.random::<f64>()).collect())
            .collect();
        let labels: Vec<usize> = (0..100).map(|i| i % 3).collect();
        let report = check_equivalence(&snn, &ann, &xs, &labels, 1e-9).unwrap();
        assert!(report.pass, "{report:?}");

        let mut bumped = ann.clone();
        bumped.hidden[1].w[(0, 0)] += 0.1;
        let report = check_equivalence(&snn, &bumped, &xs, &labels, 1e-9).unwrap();
        assert!(!report.pass);
        assert!(report.layer_max_diff[0] < 1e-9);
        assert!(report.layer_max_diff[1] > 1e-9);
    }

    #[test]
    fn ann_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ann = AnnNetwork::random(&[4, 5, 3], InitScheme::He, false, &mut rng);
        ann.hidden[0].b = vec![0.1, -0.05, 0.2, 0.0, 0.3];
        let x = [0.3, 0.9, 0.1, 0.6];
        let mut g = AnnGradients::zeros_like(&ann);
        ann_backward(&ann, &x, 1, &mut g);
        let loss = |a: &AnnNetwork| softmax_cross_entropy(&relu_forward(a, &x).logits, 1).0;
        let eps = 1e-6;
        for li in 0..2 {
            for k in 0..g.layers[li].w.as_slice().len() {
                let mut p = ann.clone();
                let mut m = ann.clone();
                p.params_mut()[2 * li][k] += eps;
                m.params_mut()[2 * li][k] -= eps;
                let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
                let an = g.layers[li].w.as_slice()[k];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{li}/{k}: {fd} vs {an}");
            }
        }
    }
}
