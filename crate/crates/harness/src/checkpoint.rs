//! Versioned little-endian checkpoints with a SHA-256 trailer.
//!
//! Layout: `b"TTFSCKPT"`, `u32` version, `u8` kind (1 SNN, 2 ReLU network),
//! the payload, then the SHA-256 of every preceding byte. Floats are stored
//! as raw `f64` bits so a reload is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;
use ttfs_core::bridge::{AnnLayer, AnnNetwork};
use ttfs_core::dynamics::{AlphaPolicy, NetworkConfig, OutputLayer, SnnLayer, SnnNetwork, Window};
use ttfs_core::grad::{OptimizerKind, OptimizerState};
use ttfs_core::linalg::DenseMatrix;

pub const MAGIC: &[u8; 8] = b"TTFSCKPT";
pub const VERSION: u32 = 1;
const KIND_SNN: u8 = 1;
const KIND_ANN: u8 = 2;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, this build reads version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("checksum mismatch, the file is corrupt")]
    Checksum,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint holds a {found} network, expected {expected}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("invalid checkpoint contents: {0}")]
    Invalid(String),
}

/// Everything besides the network needed to resume training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingState {
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<ChaCha8Rng>,
    pub epoch: u64,
    pub step: u64,
}

#[derive(Default)]
struct Encoder(Vec<u8>);

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_bits().to_le_bytes());
    }
    fn vec(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn matrix(&mut self, m: &DenseMatrix) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        m.as_slice().iter().for_each(|&x| self.f64(x));
    }
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn vec(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(CheckpointError::Truncated);
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn matrix(&mut self) -> Result<DenseMatrix, CheckpointError> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or(CheckpointError::Truncated)?;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(CheckpointError::Truncated);
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<_, _>>()?;
        DenseMatrix::from_vec(rows, cols, data).map_err(|e| CheckpointError::Invalid(e.to_string()))
    }
}

fn kind_name(kind: u8) -> &'static str {
    match kind {
        KIND_SNN => "spiking",
        KIND_ANN => "ReLU",
        _ => "unknown",
    }
}

fn seal(kind: u8, payload: Encoder) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.0.len() + 13 + DIGEST_LEN);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.push(kind);
    out.extend(payload.0);
    let digest = Sha256::digest(&out);
    out.extend(digest);
    out
}

/// Verifies framing and checksum and returns a decoder over the payload.
fn open(bytes: &[u8], expected: u8) -> Result<Decoder<'_>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 13 + DIGEST_LEN {
        return Err(CheckpointError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    if body[12] != expected {
        return Err(CheckpointError::WrongKind {
            expected: kind_name(expected),
            found: kind_name(body[12]),
        });
    }
    Ok(Decoder { bytes: body, pos: 13 })
}

pub fn encode_snn(net: &SnnNetwork, state: &TrainingState) -> Vec<u8> {
    let mut e = Encoder::default();
    e.f64(net.config.tau_c);
    e.u32(net.config.layer_sizes.len() as u32);
    net.config.layer_sizes.iter().for_each(|&s| e.u64(s as u64));
    for layer in &net.hidden {
        match &layer.alpha_policy {
            AlphaPolicy::LinearlyMappable => e.u8(0),
            AlphaPolicy::ConstantAlpha(alpha) => {
                e.u8(1);
                e.vec(alpha);
            }
        }
        e.matrix(&layer.weights);
        e.vec(&layer.shift);
        e.vec(&layer.base_threshold);
        e.f64(layer.window.t_min);
        e.f64(layer.window.t_max);
    }
    e.matrix(&net.output.weights);
    e.vec(&net.output.alpha);
    e.f64(net.output.ramp_start);
    e.f64(net.output.t_read);

    match &state.optimizer {
        None => e.u8(0),
        Some(opt) => {
            e.u8(1);
            match opt.kind {
                OptimizerKind::Sgd => e.u8(0),
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    e.u8(1);
                    e.f64(beta1);
                    e.f64(beta2);
                    e.f64(eps);
                }
            }
            e.u64(opt.step);
            e.u32(opt.first_moment.len() as u32);
            opt.first_moment.iter().for_each(|m| e.vec(m));
            opt.second_moment.iter().for_each(|m| e.vec(m));
        }
    }
    match &state.rng {
        None => e.u8(0),
        Some(rng) => {
            e.u8(1);
            e.0.extend(rng.get_seed());
            e.u64(rng.get_stream());
            e.0.extend(rng.get_word_pos().to_le_bytes());
        }
    }
    e.u64(state.epoch);
    e.u64(state.step);
    seal(KIND_SNN, e)
}

pub fn decode_snn(bytes: &[u8]) -> Result<(SnnNetwork, TrainingState), CheckpointError> {
    let mut d = open(bytes, KIND_SNN)?;
    let tau_c = d.f64()?;
    let count = d.u32()? as usize;
    let sizes = (0..count)
        .map(|_| d.u64().map(|s| s as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let config = NetworkConfig::new(tau_c, sizes).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let depth = config.hidden_depth();
    let mut hidden = Vec::with_capacity(depth);
    for _ in 0..depth {
        let alpha_policy = match d.u8()? {
            0 => AlphaPolicy::LinearlyMappable,
            1 => AlphaPolicy::ConstantAlpha(d.vec()?),
            t => return Err(CheckpointError::Invalid(format!("alpha policy tag {t}"))),
        };
        let weights = d.matrix()?;
        let shift = d.vec()?;
        let base_threshold = d.vec()?;
        let window = Window::new(d.f64()?, d.f64()?);
        hidden.push(SnnLayer {
            weights,
            shift,
            base_threshold,
            alpha_policy,
            window,
        });
    }
    let output = OutputLayer {
        weights: d.matrix()?,
        alpha: d.vec()?,
        ramp_start: d.f64()?,
        t_read: d.f64()?,
    };
    let net = SnnNetwork { config, hidden, output };
    net.validate().map_err(|e| CheckpointError::Invalid(e.to_string()))?;

    let optimizer = match d.u8()? {
        0 => None,
        1 => {
            let kind = match d.u8()? {
                0 => OptimizerKind::Sgd,
                1 => OptimizerKind::Adam {
                    beta1: d.f64()?,
                    beta2: d.f64()?,
                    eps: d.f64()?,
                },
                t => return Err(CheckpointError::Invalid(format!("optimizer tag {t}"))),
            };
            let step = d.u64()?;
            let n = d.u32()? as usize;
            let first_moment = (0..n).map(|_| d.vec()).collect::<Result<_, _>>()?;
            let second_moment = (0..n).map(|_| d.vec()).collect::<Result<_, _>>()?;
            Some(OptimizerState {
                kind,
                first_moment,
                second_moment,
                step,
            })
        }
        t => return Err(CheckpointError::Invalid(format!("optimizer flag {t}"))),
    };
    let rng = match d.u8()? {
        0 => None,
        1 => {
            let mut rng = ChaCha8Rng::from_seed(d.array()?);
            rng.set_stream(d.u64()?);
            rng.set_word_pos(u128::from_le_bytes(d.array()?));
            Some(rng)
        }
        t => return Err(CheckpointError::Invalid(format!("rng flag {t}"))),
    };
    let epoch = d.u64()?;
    let step = d.u64()?;
    if d.pos != d.bytes.len() {
        return Err(CheckpointError::Invalid("trailing bytes".into()));
    }
    Ok((
        net,
        TrainingState {
            optimizer,
            rng,
            epoch,
            step,
        },
    ))
}

pub fn encode_ann(ann: &AnnNetwork) -> Vec<u8> {
    let mut e = Encoder::default();
    e.u32(ann.hidden.len() as u32);
    for layer in ann.hidden.iter().chain(std::iter::once(&ann.output)) {
        e.matrix(&layer.w);
        e.vec(&layer.b);
    }
    seal(KIND_ANN, e)
}

pub fn decode_ann(bytes: &[u8]) -> Result<AnnNetwork, CheckpointError> {
    let mut d = open(bytes, KIND_ANN)?;
    let depth = d.u32()? as usize;
    let mut layers = Vec::with_capacity(depth + 1);
    for _ in 0..=depth {
        let w = d.matrix()?;
        let b = d.vec()?;
        if b.len() != w.rows() {
            return Err(CheckpointError::Invalid("bias length differs from rows".into()));
        }
        layers.push(AnnLayer { w, b });
    }
    for pair in layers.windows(2) {
        if pair[0].w.rows() != pair[1].w.cols() {
            return Err(CheckpointError::Invalid("layer shapes do not chain".into()));
        }
    }
    if d.pos != d.bytes.len() {
        return Err(CheckpointError::Invalid("trailing bytes".into()));
    }
    let output = layers.pop().expect("at least the read-out");
    Ok(AnnNetwork { hidden: layers, output })
}

fn read(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn save_checkpoint(net: &SnnNetwork, state: &TrainingState, path: &Path) -> Result<(), CheckpointError> {
    write(path, &encode_snn(net, state))
}

pub fn load_checkpoint(path: &Path) -> Result<(SnnNetwork, TrainingState), CheckpointError> {
    decode_snn(&read(path)?)
}

pub fn save_ann_checkpoint(ann: &AnnNetwork, path: &Path) -> Result<(), CheckpointError> {
    write(path, &encode_ann(ann))
}

pub fn load_ann_checkpoint(path: &Path) -> Result<AnnNetwork, CheckpointError> {
    decode_ann(&read(path)?)
}
