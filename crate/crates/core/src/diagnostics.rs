//! Jacobian spectra, gradient-norm depth profiles and weight-trajectory
//! reports.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::bridge::AnnNetwork;
use crate::dynamics::{network_forward, DynamicsError, SnnNetwork};
use crate::grad::layer_jacobian;
use crate::linalg::{dot, eig_spectrum, norm2, ComplexSpectrum, DenseMatrix, LinalgError};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpectrum {
    pub spectrum: ComplexSpectrum,
    pub spectral_radius: f64,
    pub fraction_outside_unit_circle: f64,
}

impl LayerSpectrum {
    pub fn of(m: &DenseMatrix) -> Result<Self, LinalgError> {
        let spectrum = eig_spectrum(m)?;
        Ok(Self {
            spectral_radius: spectrum.spectral_radius(),
            fraction_outside_unit_circle: spectrum.fraction_outside_unit_circle(),
            spectrum,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// `None` for non-square layers, which have no meaningful spectrum.
    pub layers: Vec<Option<LayerSpectrum>>,
    pub notes: Vec<String>,
}

impl SpectrumReport {
    pub fn of_matrices(mats: &[DenseMatrix]) -> Result<Self, LinalgError> {
        let mut layers = Vec::with_capacity(mats.len());
        let mut notes = Vec::new();
        for (n, m) in mats.iter().enumerate() {
            if m.is_square() {
                layers.push(Some(LayerSpectrum::of(m)?));
            } else {
                notes.push(format!("layer {n}: {}x{} is not square, skipped", m.rows(), m.cols()));
                layers.push(None);
            }
        }
        Ok(Self { layers, notes })
    }

    pub fn max_spectral_radius(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .map(|l| l.spectral_radius)
            .fold(0.0, f64::max)
    }
}

/// `(1/B) W` for every hidden layer.
pub fn scaled_weights(net: &SnnNetwork) -> Vec<DenseMatrix> {
    net.hidden
        .iter()
        .map(|l| {
            let inv: Vec<f64> = l.coefficients().slope.iter().map(|b| 1.0 / b).collect();
            l.weights.scale_rows(&inv)
        })
        .collect()
}

/// Spectra of the layer Jacobians `(1/B) W`. With `mask_input`, the masked
/// Jacobians `M (1/B) W` of that sample's forward pass are used instead.
pub fn jacobian_spectrum_report(
    net: &SnnNetwork,
    mask_input: Option<&[f64]>,
) -> Result<SpectrumReport, DiagnosticsError> {
    let mats = match mask_input {
        None => scaled_weights(net),
        Some(x) => {
            let trace = network_forward(x, net)?;
            trace
                .layers
                .iter()
                .zip(&net.hidden)
                .map(|(r, l)| layer_jacobian(r, l))
                .collect()
        }
    };
    Ok(SpectrumReport::of_matrices(&mats)?)
}

/// Spectra of the ReLU network's hidden weight matrices.
pub fn ann_spectrum_report(ann: &AnnNetwork) -> Result<SpectrumReport, LinalgError> {
    let mats: Vec<DenseMatrix> = ann.hidden.iter().map(|l| l.w.clone()).collect();
    SpectrumReport::of_matrices(&mats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientNormProfile {
    /// `‖dL/dt^(n)‖` per hidden layer, shallowest first.
    pub norms: Vec<f64>,
    /// Geometric mean of `‖g^(n−1)‖ / ‖g^(n)‖`: above one means the
    /// gradient grows while travelling towards the input.
    pub growth: f64,
}

impl GradientNormProfile {
    pub fn from_norms(norms: Vec<f64>) -> Self {
        let growth = if norms.len() < 2 {
            1.0
        } else {
            let mut log_sum = 0.0;
            for pair in norms.windows(2) {
                log_sum += (pair[0] / pair[1]).ln();
            }
            (log_sum / (norms.len() - 1) as f64).exp()
        };
        Self { norms, growth }
    }
}

/// Norm profile of one backward pass.
pub fn gradient_norm_profile(dl_dt: &[Vec<f64>]) -> GradientNormProfile {
    GradientNormProfile::from_norms(dl_dt.iter().map(|g| norm2(g)).collect())
}

/// Profile averaged over samples: mean norm per layer.
pub fn mean_gradient_norm_profile(samples: &[Vec<Vec<f64>>]) -> GradientNormProfile {
    let depth = samples.first().map_or(0, |s| s.len());
    let k = samples.len().max(1) as f64;
    let norms = (0..depth)
        .map(|n| samples.iter().map(|s| norm2(&s[n])).sum::<f64>() / k)
        .collect();
    GradientNormProfile::from_norms(norms)
}

/// Propagates a random unit vector backwards through the unmasked layer
/// Jacobians `(1/B) W`. Needs no forward pass, so it also works for
/// networks whose slopes make spike times undefined.
pub fn jacobian_chain_profile<R: Rng + ?Sized>(net: &SnnNetwork, rng: &mut R) -> GradientNormProfile {
    let mats = scaled_weights(net);
    let depth = mats.len();
    if depth == 0 {
        return GradientNormProfile::from_norms(Vec::new());
    }
    let mut v: Vec<f64> = (0..mats[depth - 1].rows())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let scale = norm2(&v);
    v.iter_mut().for_each(|x| *x /= scale);
    let mut norms = vec![0.0; depth];
    norms[depth - 1] = 1.0;
    for n in (1..depth).rev() {
        v = mats[n].tr_mat_vec(&v);
        norms[n - 1] = norm2(&v);
    }
    GradientNormProfile::from_norms(norms)
}

/// Cosine of two flattened tensors; two zero tensors count as aligned.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm2(a), norm2(b));
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
    }
}

/// Per-layer cosine between the SNN's mapped weights `W/B` and the ReLU
/// network's `w`, hidden layers then the read-out.
pub fn weight_cosine_similarity(snn: &SnnNetwork, ann: &AnnNetwork) -> Result<Vec<f64>, DiagnosticsError> {
    if snn.hidden.len() != ann.hidden.len() {
        return Err(DiagnosticsError::Shape(format!(
            "{} SNN layers vs {} ANN layers",
            snn.hidden.len(),
            ann.hidden.len()
        )));
    }
    let mut out = Vec::with_capacity(snn.hidden.len() + 1);
    for (mapped, reference) in scaled_weights(snn).iter().zip(&ann.hidden) {
        if mapped.shape() != reference.w.shape() {
            return Err(DiagnosticsError::Shape("layer shapes differ".into()));
        }
        out.push(cosine(mapped.as_slice(), reference.w.as_slice()));
    }
    out.push(cosine(snn.output.weights.as_slice(), ann.output.w.as_slice()));
    Ok(out)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// One logged step of a lock-step SNN / ReLU training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryStep {
    pub step: u64,
    pub snn_loss: f64,
    pub ann_loss: f64,
    pub snn_accuracy: f64,
    pub ann_accuracy: f64,
    /// Hidden layers then the read-out.
    pub cosine: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryReport {
    pub steps: Vec<TrajectoryStep>,
}

#[derive(Debug, Serialize)]
struct TrajectoryRow {
    step: u64,
    layer: usize,
    cosine: f64,
    snn_loss: f64,
    ann_loss: f64,
    snn_accuracy: f64,
    ann_accuracy: f64,
}

#[derive(Debug, Serialize)]
pub struct TrajectorySummary {
    pub steps: usize,
    pub max_loss_gap: f64,
    pub final_cosine: Vec<f64>,
    pub final_mean_cosine: f64,
    pub min_cosine: f64,
}

impl TrajectoryReport {
    pub fn max_loss_gap(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| (s.snn_loss - s.ann_loss).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_cosine(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| s.cosine.iter().copied())
            .fold(1.0, f64::min)
    }

    pub fn final_cosine(&self) -> Vec<f64> {
        self.steps.last().map_or_else(Vec::new, |s| s.cosine.clone())
    }

    pub fn summary(&self) -> TrajectorySummary {
        let final_cosine = self.final_cosine();
        TrajectorySummary {
            steps: self.steps.len(),
            max_loss_gap: self.max_loss_gap(),
            final_mean_cosine: mean(&final_cosine),
            final_cosine,
            min_cosine: self.min_cosine(),
        }
    }

    /// Columns: `step,layer,cosine,snn_loss,ann_loss,snn_accuracy,ann_accuracy`,
    /// one row per layer per step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DiagnosticsError> {
        let mut writer = csv::Writer::from_writer(out);
        for s in &self.steps {
            for (layer, &cosine) in s.cosine.iter().enumerate() {
                writer.serialize(TrajectoryRow {
                    step: s.step,
                    layer,
                    cosine,
                    snn_loss: s.snn_loss,
                    ann_loss: s.ann_loss,
                    snn_accuracy: s.snn_accuracy,
                    ann_accuracy: s.ann_accuracy,
                })?;
            }
        }
        writer.flush()?;
        Ok(())
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<(), DiagnosticsError> {
        self.write_csv(std::fs::File::create(csv_path)?)?;
        std::fs::write(json_path, serde_json::to_string_pretty(&self.summary())?)?;
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct SpectrumRow {
    layer: usize,
    spectral_radius: f64,
    fraction_outside_unit_circle: f64,
    eigenvalues: usize,
}

impl SpectrumReport {
    /// Columns: `layer,spectral_radius,fraction_outside_unit_circle,eigenvalues`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DiagnosticsError> {
        let mut writer = csv::Writer::from_writer(out);
        for (layer, s) in self.layers.iter().enumerate() {
            if let Some(s) = s {
                writer.serialize(SpectrumRow {
                    layer,
                    spectral_radius: s.spectral_radius,
                    fraction_outside_unit_circle: s.fraction_outside_unit_circle,
                    eigenvalues: s.spectrum.len(),
                })?;
            }
        }
        writer.flush()?;
        Ok(())
    }

    /// Every eigenvalue as `layer,re,im,modulus`.
    pub fn write_eigenvalues_csv<W: Write>(&self, out: W) -> Result<(), DiagnosticsError> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["layer", "re", "im", "modulus"])?;
        for (layer, s) in self.layers.iter().enumerate() {
            for e in s.iter().flat_map(|s| s.spectrum.values.iter()) {
                writer.write_record([
                    layer.to_string(),
                    e.re.to_string(),
                    e.im.to_string(),
                    e.modulus().to_string(),
                ])?;
            }
        }
        writer.flush()?;
        Ok(())
    }
}
