//! `run_experiment`: wires data, configuration, training and reporting for
//! the four modes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;
use ttfs_core::bridge::{
    ann_to_snn, check_equivalence, snn_to_ann, AnnNetwork, BridgeError, EquivalenceReport, InitScheme,
};
use ttfs_core::constraints::{activation_samples, reduce_latency, weight_grids, HardwarePerturbation};
use ttfs_core::diagnostics::{
    jacobian_chain_profile, jacobian_spectrum_report, mean_gradient_norm_profile, DiagnosticsError, GradientNormProfile,
};
use ttfs_core::dynamics::{network_forward, AlphaPolicy, DynamicsError, SnnNetwork};
use ttfs_core::grad::{backward, GradientSet};
use ttfs_core::sample::provisional_windows;
use ttfs_core::scheduler::{init_windows_and_thresholds, widths};

use crate::checkpoint::{
    load_ann_checkpoint, load_checkpoint, save_ann_checkpoint, save_checkpoint, CheckpointError, TrainingState,
};
use crate::config::{ConfigError, DataSource, ExperimentConfig, Mode};
use crate::dataset::{load_mnist, Dataset, DatasetError, Split, SyntheticTask};
use crate::metrics::{EpochRow, MetricsWriter};
use crate::train::{ann_accuracy, LrSchedule, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("metrics: {0}")]
    Csv(#[from] csv::Error),
    #[error("summary: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Data(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<DataSplits, RunError> {
    let d = &cfg.data;
    let (mut train, mut test) = match d.source {
        DataSource::Idx => (load_mnist(&d.dir, Split::Train)?, load_mnist(&d.dir, Split::Test)?),
        DataSource::Synthetic => {
            let task = SyntheticTask {
                features: d.synthetic_features,
                classes: d.synthetic_classes,
                noise: d.synthetic_noise,
                seed: cfg.training.seed,
            };
            let seed = cfg.training.seed.wrapping_mul(2).wrapping_add(1);
            (
                task.sample(d.synthetic_train, Split::Train, seed),
                task.sample(d.synthetic_test, Split::Test, seed.wrapping_add(1)),
            )
        }
    };
    if let Some(n) = d.train_limit {
        train = train.truncated(n);
    }
    if let Some(n) = d.test_limit {
        test = test.truncated(n);
    }
    if train.is_empty() || test.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    if train.features() != test.features() {
        return Err(RunError::Data(format!(
            "train has {} features, test {}",
            train.features(),
            test.features()
        )));
    }
    let classes = train.classes.max(test.classes);
    train.classes = classes;
    test.classes = classes;
    Ok(DataSplits { train, test })
}

fn layer_sizes(cfg: &ExperimentConfig, data: &DataSplits) -> Vec<usize> {
    let mut sizes = vec![data.train.features()];
    sizes.extend(&cfg.network.hidden);
    sizes.push(data.train.classes);
    sizes
}

fn policies(cfg: &ExperimentConfig, ann: &AnnNetwork) -> Vec<AlphaPolicy> {
    ann.hidden
        .iter()
        .map(|l| cfg.network.alpha_policy.policy(l.w.rows()))
        .collect()
}

/// Random ReLU network of the configured architecture.
pub fn init_ann(cfg: &ExperimentConfig, sizes: &[usize], rng: &mut ChaCha8Rng) -> AnnNetwork {
    let mut ann = AnnNetwork::random(sizes, InitScheme::He, cfg.network.center_rows, rng);
    let bias = cfg.network.init_bias;
    if bias > 0.0 {
        for layer in &mut ann.hidden {
            layer.b.iter_mut().for_each(|b| *b = rng.random_range(-bias..bias));
        }
    }
    ann
}

/// Maps a ReLU network to an SNN and initialises its windows on the first
/// calibration samples of `calibration`.
pub fn convert(cfg: &ExperimentConfig, ann: &AnnNetwork, calibration: &Dataset) -> Result<SnnNetwork, RunError> {
    let tau_c = cfg.network.tau_c;
    let mut net = ann_to_snn(
        ann,
        &policies(cfg, ann),
        &provisional_windows(ann.hidden.len(), tau_c),
        tau_c,
    )?;
    let n = cfg.scheduler.calibration_samples.min(calibration.len());
    let report = init_windows_and_thresholds(&mut net, &calibration.refs()[..n], &cfg.scheduler.scheduler_config())?;
    if !report.degenerate_layers.is_empty() {
        log::warn!(
            "layers {:?} never fired on the calibration batch",
            report.degenerate_layers
        );
    }
    Ok(net)
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub epochs: u64,
    pub steps: u64,
    pub snn_test_accuracy: Option<f64>,
    /// Accuracy of the ReLU network equivalent to the final SNN.
    pub ann_test_accuracy: Option<f64>,
    /// Accuracy of the independently trained reference ReLU network.
    pub reference_test_accuracy: Option<f64>,
    /// SNN accuracy after constraints are applied, before fine-tuning.
    pub constrained_accuracy_before_finetune: Option<f64>,
    pub max_loss_gap: Option<f64>,
    pub final_cosine: Option<Vec<f64>>,
    pub equivalence: Option<EquivalenceSummary>,
    pub spectral_radius: Option<Vec<Option<f64>>>,
    pub gradient_profile: Option<GradientNormProfile>,
    pub chain_profile: Option<GradientNormProfile>,
    pub latency: Option<f64>,
    pub widths: Option<Vec<f64>>,
    pub checkpoint: Option<PathBuf>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceSummary {
    pub pass: bool,
    pub tolerance: f64,
    pub worst: f64,
    pub layer_max_diff: Vec<f64>,
    pub logit_max_diff: f64,
    pub loss_max_diff: f64,
}

impl From<&EquivalenceReport> for EquivalenceSummary {
    fn from(r: &EquivalenceReport) -> Self {
        Self {
            pass: r.pass,
            tolerance: r.tolerance,
            worst: r.worst(),
            layer_max_diff: r.layer_max_diff.clone(),
            logit_max_diff: r.logit_max_diff,
            loss_max_diff: r.loss_max_diff,
        }
    }
}

/// Runs every configured trial. With more than one trial each writes into
/// `trial-<k>` under the output directory and uses seed `seed + k`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>, RunError> {
    cfg.validate()?;
    let trials = cfg.training.trials;
    let mut out = Vec::with_capacity(trials);
    for k in 0..trials {
        let mut trial = cfg.clone();
        if trials > 1 {
            trial.training.seed = cfg.training.seed + k as u64;
            trial.output.dir = cfg.output.dir.join(format!("trial-{k}"));
        }
        out.push(run_single(&trial)?);
    }
    if trials > 1 {
        let path = cfg.output.dir.join("trials.json");
        fs::write(&path, serde_json::to_vec_pretty(&out)?).map_err(io_err(&path))?;
    }
    Ok(out)
}

pub fn run_single(cfg: &ExperimentConfig) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let started = Instant::now();
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;
    let data = load_data(cfg)?;
    info!(
        "{:?}: {} train / {} test samples, {} features, {} classes",
        cfg.mode,
        data.train.len(),
        data.test.len(),
        data.train.features(),
        data.train.classes
    );
    let mut summary = match cfg.mode {
        Mode::Train => run_train(cfg, &data)?,
        Mode::Finetune => run_finetune(cfg, &data)?,
        Mode::Convert => run_convert(cfg, &data)?,
        Mode::Diagnose => run_diagnose(cfg, &data)?,
    };
    summary.mode = format!("{:?}", cfg.mode).to_lowercase();
    summary.seed = cfg.training.seed;
    summary.wall_time_s = started.elapsed().as_secs_f64();
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(io_err(&path))?;
    Ok(summary)
}

fn new_trainer(cfg: &ExperimentConfig, net: SnnNetwork, lr0: f64) -> Trainer {
    let t = &cfg.training;
    let mut trainer = Trainer::new(
        net,
        cfg.optimizer(),
        cfg.scheduler.scheduler_config(),
        LrSchedule {
            lr0,
            rate: t.lr_decay_rate,
            every: t.lr_decay_every,
        },
        t.batch_size,
        t.seed,
    );
    trainer.shuffle = t.shuffle;
    trainer
}

/// Trains for the configured epochs, logging one metrics row per epoch plus
/// a row for the starting point, and saves the final checkpoint.
fn train_loop(cfg: &ExperimentConfig, trainer: &mut Trainer, data: &DataSplits) -> Result<RunSummary, RunError> {
    let dir = &cfg.output.dir;
    let mut metrics = MetricsWriter::create(&dir.join("metrics.csv"), trainer.net.hidden.len())?;
    let start = trainer.evaluate(&data.test)?;
    metrics.append(&EpochRow::start(
        trainer,
        start,
        ann_accuracy(&snn_to_ann(&trainer.deployed())?, &data.test),
    ))?;
    for _ in 0..cfg.training.epochs {
        let stats = trainer.train_epoch(&data.train)?;
        let eval = trainer.evaluate(&data.test)?;
        let ann_acc = ann_accuracy(&snn_to_ann(&trainer.deployed())?, &data.test);
        info!(
            "epoch {}: loss {:.4}, train {:.4}, test {:.4}, ReLU {:.4}",
            stats.epoch, stats.train_loss, stats.train_accuracy, eval.accuracy, ann_acc
        );
        metrics.append(&EpochRow::after_epoch(trainer, &stats, eval, ann_acc))?;
    }
    if let Some(grids) = trainer.grids.clone() {
        ttfs_core::constraints::apply_weight_grids(&mut trainer.net, &grids);
    }
    let final_eval = trainer.evaluate(&data.test)?;
    let mapped = snn_to_ann(&trainer.net)?;
    let ckpt = dir.join("final.ckpt");
    let state = TrainingState {
        optimizer: Some(trainer.optimizer.clone()),
        rng: Some(trainer.rng.clone()),
        epoch: trainer.epoch,
        step: trainer.step,
    };
    save_checkpoint(&trainer.net, &state, &ckpt)?;
    let mut summary = RunSummary {
        epochs: trainer.epoch,
        steps: trainer.step,
        snn_test_accuracy: Some(final_eval.accuracy),
        ann_test_accuracy: Some(ann_accuracy(&mapped, &data.test)),
        latency: Some(trainer.net.latency()),
        widths: Some(widths(&trainer.net)),
        checkpoint: Some(ckpt),
        ..RunSummary::default()
    };
    if let Some(track) = &trainer.reference {
        summary.reference_test_accuracy = Some(ann_accuracy(&track.ann, &data.test));
        summary.max_loss_gap = Some(track.trajectory.max_loss_gap());
        summary.final_cosine = Some(track.trajectory.final_cosine());
        track
            .trajectory
            .save(&dir.join("trajectory.csv"), &dir.join("trajectory.json"))?;
        save_ann_checkpoint(&track.ann, &dir.join("reference_ann.ckpt"))?;
    }
    Ok(summary)
}

fn run_train(cfg: &ExperimentConfig, data: &DataSplits) -> Result<RunSummary, RunError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let ann = init_ann(cfg, &layer_sizes(cfg, data), &mut rng);
    let net = convert(cfg, &ann, &data.train)?;
    let mut trainer = new_trainer(cfg, net, cfg.training.lr0);
    if cfg.training.reference_ann {
        trainer.track_reference()?;
    }
    train_loop(cfg, &mut trainer, data)
}

/// Network to start from: an SNN checkpoint, else a converted ReLU
/// checkpoint, else a fresh random network.
fn starting_network(cfg: &ExperimentConfig, data: &DataSplits) -> Result<SnnNetwork, RunError> {
    if let Some(path) = &cfg.load.checkpoint {
        return Ok(load_checkpoint(path)?.0);
    }
    let ann = match &cfg.load.ann {
        Some(path) => load_ann_checkpoint(path)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
            init_ann(cfg, &layer_sizes(cfg, data), &mut rng)
        }
    };
    convert(cfg, &ann, &data.train)
}

/// Applies the configured constraints to a trainer: latency reduction,
/// weight grids, jitter and time quantization. Latency reduction switches
/// the adaptive window rule off, since widening would undo it.
pub fn apply_constraints(cfg: &ExperimentConfig, trainer: &mut Trainer, calibration: &Dataset) -> Result<(), RunError> {
    let c = &cfg.constraints;
    let spec = c.quant_spec();
    // Time quantization needs a fixed grid; without an explicit percentile
    // the windows hold 99% of the activations.
    let percentile = c.latency_percentile.or(c.time_steps_per_layer.map(|_| 99.0));
    if let Some(p) = percentile {
        let n = cfg.scheduler.calibration_samples.min(calibration.len());
        let acts = activation_samples(&snn_to_ann(&trainer.net)?, &calibration.refs()[..n]);
        let w = reduce_latency(&mut trainer.net, p, &acts, &trainer.scheduler);
        info!(
            "windows set to the {p}th activation percentile, latency {:.4} (widths {w:?})",
            trainer.net.latency()
        );
        trainer.scheduler.adaptive = false;
    }
    if let Some(bits) = c.weight_bits {
        trainer.grids = Some(weight_grids(&trainer.net, bits, spec.clip(bits)));
    }
    if c.jitter_sd > 0.0 || c.time_steps_per_layer.is_some() {
        trainer.perturbation = Some(HardwarePerturbation {
            jitter_sd: c.jitter_sd,
            time_steps: c.time_steps_per_layer,
            rng: ChaCha8Rng::seed_from_u64(cfg.training.seed ^ 0x6a69_7474_6572),
        });
    }
    Ok(())
}

fn run_finetune(cfg: &ExperimentConfig, data: &DataSplits) -> Result<RunSummary, RunError> {
    let net = starting_network(cfg, data)?;
    let mut trainer = new_trainer(cfg, net, cfg.training.lr0 * cfg.load.finetune_lr_scale);
    apply_constraints(cfg, &mut trainer, &data.train)?;
    let before = trainer.evaluate(&data.test)?.accuracy;
    info!("constrained accuracy before fine-tuning: {before:.4}");
    if cfg.training.reference_ann {
        trainer.track_reference()?;
    }
    let mut summary = train_loop(cfg, &mut trainer, data)?;
    summary.constrained_accuracy_before_finetune = Some(before);
    Ok(summary)
}

fn run_convert(cfg: &ExperimentConfig, data: &DataSplits) -> Result<RunSummary, RunError> {
    let ann = match &cfg.load.ann {
        Some(path) => load_ann_checkpoint(path)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
            init_ann(cfg, &layer_sizes(cfg, data), &mut rng)
        }
    };
    let net = convert(cfg, &ann, &data.train)?;
    let report = check_equivalence(
        &net,
        &ann,
        &data.test.images,
        &data.test.labels,
        cfg.diagnose.equivalence_tolerance,
    )?;
    let eq = EquivalenceSummary::from(&report);
    let path = cfg.output.dir.join("equivalence.json");
    fs::write(&path, serde_json::to_vec_pretty(&eq)?).map_err(io_err(&path))?;
    info!(
        "equivalence {} (worst {:.3e})",
        if eq.pass { "pass" } else { "FAIL" },
        eq.worst
    );
    let ckpt = cfg.output.dir.join("converted.ckpt");
    save_checkpoint(&net, &TrainingState::default(), &ckpt)?;
    let eval = crate::train::evaluate(&net, &data.test, &mut ttfs_core::dynamics::Exact)?;
    Ok(RunSummary {
        snn_test_accuracy: Some(eval.accuracy),
        ann_test_accuracy: Some(ann_accuracy(&ann, &data.test)),
        equivalence: Some(eq),
        latency: Some(net.latency()),
        widths: Some(widths(&net)),
        checkpoint: Some(ckpt),
        ..RunSummary::default()
    })
}

fn run_diagnose(cfg: &ExperimentConfig, data: &DataSplits) -> Result<RunSummary, RunError> {
    let dir = &cfg.output.dir;
    let net = starting_network(cfg, data)?;
    let write_csv = |name: &str, f: &dyn Fn(fs::File) -> Result<(), DiagnosticsError>| -> Result<(), RunError> {
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        Ok(f(file)?)
    };

    let spectrum = jacobian_spectrum_report(&net, None)?;
    write_csv("spectrum.csv", &|f| spectrum.write_csv(f))?;
    write_csv("eigenvalues.csv", &|f| spectrum.write_eigenvalues_csv(f))?;
    for (k, x) in data.test.images.iter().take(cfg.diagnose.masked_samples).enumerate() {
        let masked = jacobian_spectrum_report(&net, Some(x))?;
        write_csv(&format!("masked_spectrum_{k}.csv"), &|f| masked.write_csv(f))?;
    }

    let mut samples = Vec::new();
    for (x, &label) in data
        .train
        .images
        .iter()
        .zip(&data.train.labels)
        .take(cfg.diagnose.gradient_samples)
    {
        let trace = network_forward(x, &net)?;
        let mut g = GradientSet::zeros_like(&net);
        samples.push(backward(&trace, &net, label, &mut g).dl_dt);
    }
    let gradient_profile = mean_gradient_norm_profile(&samples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let chain_profile = jacobian_chain_profile(&net, &mut rng);
    let path = dir.join("gradient_profile.json");
    let profiles = serde_json::json!({ "backward": gradient_profile, "jacobian_chain": chain_profile });
    fs::write(&path, serde_json::to_vec_pretty(&profiles)?).map_err(io_err(&path))?;

    let mut trainer = new_trainer(cfg, net, cfg.training.lr0);
    trainer.track_reference()?;
    let (mut cursor, n) = (0, data.train.len());
    for _ in 0..cfg.diagnose.trajectory_steps {
        let idx: Vec<usize> = (0..cfg.training.batch_size).map(|k| (cursor + k) % n).collect();
        cursor = (cursor + cfg.training.batch_size) % n;
        let xs: Vec<&[f64]> = idx.iter().map(|&i| data.train.images[i].as_slice()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
        trainer.train_step(&xs, &labels)?;
    }
    let track = trainer.reference.as_ref().expect("reference track started");
    track
        .trajectory
        .save(&dir.join("trajectory.csv"), &dir.join("trajectory.json"))?;

    Ok(RunSummary {
        steps: trainer.step,
        spectral_radius: Some(
            spectrum
                .layers
                .iter()
                .map(|l| l.as_ref().map(|s| s.spectral_radius))
                .collect(),
        ),
        gradient_profile: Some(gradient_profile),
        chain_profile: Some(chain_profile),
        max_loss_gap: Some(track.trajectory.max_loss_gap()),
        final_cosine: Some(track.trajectory.final_cosine()),
        latency: Some(trainer.net.latency()),
        widths: Some(widths(&trainer.net)),
        ..RunSummary::default()
    })
}
