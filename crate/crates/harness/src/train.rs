//! Training loop shared by every mode: scheduler adaptation, exact
//! backward pass, optional hardware constraints and an optional reference
//! ReLU network trained on the same batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use ttfs_core::bridge::{ann_backward, relu_forward, snn_to_ann, AnnGradients, AnnNetwork, BridgeError};
use ttfs_core::constraints::{apply_weight_grids, HardwarePerturbation, QuantGrid};
use ttfs_core::diagnostics::{weight_cosine_similarity, DiagnosticsError, TrajectoryReport, TrajectoryStep};
use ttfs_core::dynamics::{argmax, network_forward_with, softmax_cross_entropy, DynamicsError, Exact, SnnNetwork};
use ttfs_core::grad::{backward, exponential_lr, GradientSet, OptimizerKind, OptimizerState};
use ttfs_core::scheduler::{adapt_on_batch, forward_batch, SchedulerConfig};

use crate::dataset::Dataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("non-finite gradient at step {step}")]
    NonFinite { step: u64 },
}

/// `lr0 · rate^(step / every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub rate: f64,
    pub every: f64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        exponential_lr(self.lr0, self.rate, self.every, step)
    }
}

/// Reference ReLU network trained with the same optimizer on the same data.
pub struct ReferenceTrack {
    pub ann: AnnNetwork,
    pub optimizer: OptimizerState,
    pub trajectory: TrajectoryReport,
}

pub struct Trainer {
    pub net: SnnNetwork,
    pub optimizer: OptimizerState,
    pub scheduler: SchedulerConfig,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub shuffle: bool,
    /// Data order.
    pub rng: ChaCha8Rng,
    /// Jitter and time quantization, used in training and evaluation.
    pub perturbation: Option<HardwarePerturbation>,
    /// Fixed weight grids for quantization-aware training.
    pub grids: Option<Vec<Option<QuantGrid>>>,
    pub reference: Option<ReferenceTrack>,
    pub step: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub deltas: Vec<f64>,
    pub saturated: usize,
    pub capped: bool,
    pub loss_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochStats {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Summed window expansions per layer.
    pub deltas: Vec<f64>,
    pub saturated_events: usize,
    pub capped_adaptations: usize,
    pub max_loss_gap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub saturated_events: usize,
}

impl Trainer {
    pub fn new(
        net: SnnNetwork,
        optimizer: OptimizerKind,
        scheduler: SchedulerConfig,
        lr: LrSchedule,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        Self {
            net,
            optimizer: OptimizerState::new(optimizer, &sizes),
            scheduler,
            lr,
            batch_size,
            shuffle: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            perturbation: None,
            grids: None,
            reference: None,
            step: 0,
            epoch: 0,
        }
    }

    /// Starts a reference ReLU network from the SNN's current equivalent.
    pub fn track_reference(&mut self) -> Result<(), TrainError> {
        let ann = snn_to_ann(&self.net)?;
        let sizes: Vec<usize> = {
            let mut a = ann.clone();
            a.params_mut().iter().map(|p| p.len()).collect()
        };
        self.reference = Some(ReferenceTrack {
            optimizer: OptimizerState::new(self.optimizer.kind, &sizes),
            ann,
            trajectory: TrajectoryReport::default(),
        });
        Ok(())
    }

    /// The network evaluated by the forward pass: weights projected on the
    /// grids when quantization-aware training is on.
    pub fn deployed(&self) -> SnnNetwork {
        let mut net = self.net.clone();
        if let Some(grids) = &self.grids {
            apply_weight_grids(&mut net, grids);
        }
        net
    }

    /// One optimizer step on a batch.
    pub fn train_step(&mut self, xs: &[&[f64]], labels: &[usize]) -> Result<StepStats, TrainError> {
        let lr = self.lr.at(self.step);
        // Straight-through: forward and backward at the projected weights,
        // the update lands on the float weights.
        let float_weights = self.grids.as_ref().map(|grids| {
            let saved: Vec<Vec<f64>> = weight_tensors(&self.net).iter().map(|w| w.to_vec()).collect();
            apply_weight_grids(&mut self.net, grids);
            saved
        });
        let (traces, deltas, capped) = if self.scheduler.adaptive {
            let adaptation = adapt_on_batch(&mut self.net, xs, &self.scheduler)?;
            let capped = adaptation.passes > self.net.hidden.len() + 1;
            (adaptation.traces, adaptation.deltas, capped)
        } else {
            (forward_batch(&self.net, xs)?, vec![0.0; self.net.hidden.len()], false)
        };
        let traces = match self.perturbation.as_mut() {
            Some(p) if !p.is_identity() => {
                let coeffs = self.net.coefficients();
                xs.iter()
                    .map(|x| network_forward_with(x, &self.net, &coeffs, p))
                    .collect::<Result<Vec<_>, _>>()?
            }
            _ => traces,
        };

        let k = xs.len() as f64;
        let mut grads = GradientSet::zeros_like(&self.net);
        let mut stats = StepStats {
            deltas,
            capped,
            ..StepStats::default()
        };
        let mut losses = Vec::with_capacity(xs.len());
        for (trace, &label) in traces.iter().zip(labels) {
            let info = backward(trace, &self.net, label, &mut grads);
            losses.push(info.loss);
            stats.loss += info.loss / k;
            stats.correct += usize::from(trace.predicted_class() == label);
            stats.saturated += trace.saturated_low_count();
        }
        grads.scale(1.0 / k);

        if let Some(saved) = float_weights {
            for (w, s) in weight_tensors_mut(&mut self.net).into_iter().zip(saved) {
                w.copy_from_slice(&s);
            }
        }
        if !grads.is_finite() {
            return Err(TrainError::NonFinite { step: self.step });
        }
        self.optimizer.apply(self.net.params_mut(), grads.as_slices(), lr);

        if let Some(track) = self.reference.as_mut() {
            let mut h = AnnGradients::zeros_like(&track.ann);
            let mut ann_loss = 0.0;
            let mut ann_correct = 0;
            let mut gap = 0.0f64;
            for ((x, &label), snn_loss) in xs.iter().zip(labels).zip(&losses) {
                let loss = ann_backward(&track.ann, x, label, &mut h);
                gap = gap.max((loss - snn_loss).abs());
                ann_loss += loss / k;
                ann_correct += usize::from(argmax(&relu_forward(&track.ann, x).logits) == label);
            }
            h.scale(1.0 / k);
            // The SNN read-out bias is tied to its window and not trained.
            if let Some(out) = h.layers.last_mut() {
                out.b.iter_mut().for_each(|b| *b = 0.0);
            }
            track.optimizer.apply(track.ann.params_mut(), h.as_slices(), lr);
            stats.loss_gap = Some(gap);
            track.trajectory.steps.push(TrajectoryStep {
                step: self.step,
                snn_loss: stats.loss,
                ann_loss,
                snn_accuracy: stats.correct as f64 / k,
                ann_accuracy: ann_correct as f64 / k,
                cosine: weight_cosine_similarity(&self.net, &track.ann)?,
            });
        }
        self.step += 1;
        Ok(stats)
    }

    /// One pass over `data` in batches; the order is reshuffled every epoch
    /// when `shuffle` is set. The trailing partial batch is used as well.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochStats, TrainError> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        if self.shuffle {
            order.shuffle(&mut self.rng);
        }
        let depth = self.net.hidden.len();
        let mut out = EpochStats {
            deltas: vec![0.0; depth],
            ..EpochStats::default()
        };
        let mut correct = 0;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(self.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| data.images[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            out.lr = self.lr.at(self.step);
            let s = self.train_step(&xs, &labels)?;
            loss_sum += s.loss * chunk.len() as f64;
            correct += s.correct;
            out.saturated_events += s.saturated;
            out.capped_adaptations += usize::from(s.capped);
            out.deltas.iter_mut().zip(&s.deltas).for_each(|(a, d)| *a += d);
            if let Some(g) = s.loss_gap {
                out.max_loss_gap = Some(out.max_loss_gap.unwrap_or(0.0).max(g));
            }
        }
        self.epoch += 1;
        out.epoch = self.epoch;
        out.step = self.step;
        let n = data.len().max(1) as f64;
        out.train_loss = loss_sum / n;
        out.train_accuracy = correct as f64 / n;
        Ok(out)
    }

    /// Test accuracy of the deployed network, under the configured
    /// perturbations.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<Evaluation, TrainError> {
        let net = self.deployed();
        match self.perturbation.as_mut() {
            Some(p) if !p.is_identity() => evaluate(&net, data, p),
            _ => evaluate(&net, data, &mut Exact),
        }
    }
}

/// Accuracy and mean loss of an SNN on a dataset.
pub fn evaluate(
    net: &SnnNetwork,
    data: &Dataset,
    transform: &mut dyn ttfs_core::dynamics::SpikeTransform,
) -> Result<Evaluation, TrainError> {
    let coeffs = net.coefficients();
    let mut correct = 0;
    let mut loss = 0.0;
    let mut saturated = 0;
    for (x, &label) in data.images.iter().zip(&data.labels) {
        let trace = network_forward_with(x, net, &coeffs, transform)?;
        correct += usize::from(trace.predicted_class() == label);
        loss += softmax_cross_entropy(&trace.potentials, label).0;
        saturated += trace.saturated_low_count();
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
        saturated_events: saturated,
    })
}

pub fn ann_accuracy(ann: &AnnNetwork, data: &Dataset) -> f64 {
    let correct = data
        .images
        .iter()
        .zip(&data.labels)
        .filter(|(x, &l)| argmax(&relu_forward(ann, x).logits) == l)
        .count();
    correct as f64 / data.len().max(1) as f64
}

fn weight_tensors(net: &SnnNetwork) -> Vec<&[f64]> {
    net.hidden
        .iter()
        .map(|l| l.weights.as_slice())
        .chain(std::iter::once(net.output.weights.as_slice()))
        .collect()
}

fn weight_tensors_mut(net: &mut SnnNetwork) -> Vec<&mut [f64]> {
    net.hidden
        .iter_mut()
        .map(|l| l.weights.as_mut_slice())
        .chain(std::iter::once(net.output.weights.as_mut_slice()))
        .collect()
}
