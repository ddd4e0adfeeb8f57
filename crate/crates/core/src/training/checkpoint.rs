use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::numerics::io::{load_tensor, save_tensor};
use crate::numerics::Tensor;

use super::optim::Adam;
use super::schedule::TrainConfig;
use super::trainer::Progress;

pub const CHECKPOINT_FORMAT: &str = "dlct-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string; it exceeds the JSON integer range.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex(&rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical JSON form of a model configuration.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex(&Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub progress: Progress,
    pub adam_steps: u64,
    pub rng: RngState,
    pub params: Vec<String>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore,
    pub adam: Adam,
}

fn write_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes parameters and optimizer moments as DLT1 files, one per named
/// parameter, plus `manifest.json`.
pub fn save_checkpoint(dir: &Path, manifest: &CheckpointManifest, params: &ParamStore, adam: &Adam) -> Result<()> {
    for sub in ["params", "adam_m", "adam_v"] {
        write_dir(&dir.join(sub))?;
    }
    for (i, name) in params.names().iter().enumerate() {
        let file = format!("{name}.dlt");
        save_tensor(&dir.join("params").join(&file), &params.tensors()[i])?;
        save_tensor(&dir.join("adam_m").join(&file), &adam.m[i])?;
        save_tensor(&dir.join("adam_v").join(&file), &adam.v[i])?;
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// A checkpoint directory, following a pointer file such as
/// `checkpoints/latest` that names a sibling directory.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if !path.is_file() {
        return Ok(path.to_path_buf());
    }
    let name = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = name.trim();
    if name.is_empty() || name.contains(['/', '\\']) {
        return Err(Error::parse(path, "checkpoint pointer must name a sibling directory"));
    }
    Ok(path.parent().unwrap_or(Path::new(".")).join(name))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let dir = &resolve_checkpoint(dir)?;
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(Error::parse(&path, format!("unsupported checkpoint {} v{}", m.format, m.version)));
    }
    if config_hash(&m.model) != m.config_hash {
        return Err(Error::Checkpoint(format!("{}: stored config does not match its hash", path.display())));
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let dir = &resolve_checkpoint(dir)?;
    let manifest = read_manifest(dir)?;
    let load = |sub: &str, name: &str| -> Result<Tensor> {
        let path = dir.join(sub).join(format!("{name}.dlt"));
        load_tensor(&path).map_err(|e| Error::parse(&path, e))
    };
    let mut params = ParamStore::default();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for name in &manifest.params {
        params.add(name.clone(), load("params", name)?);
        m.push(load("adam_m", name)?);
        v.push(load("adam_v", name)?);
    }
    let t = &manifest.train;
    let adam = Adam { beta1: t.beta1, beta2: t.beta2, eps: t.eps, t: manifest.adam_steps, m, v };
    Ok(Checkpoint { manifest, params, adam })
}

/// Loads a checkpoint meant for `expected`, rejecting any other configuration.
pub fn load_checkpoint_for(dir: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let c = load_checkpoint(dir)?;
    if c.manifest.config_hash != config_hash(expected) {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint config hash {} differs from requested {}",
            dir.display(),
            &c.manifest.config_hash[..12],
            &config_hash(expected)[..12]
        )));
    }
    Ok(c)
}
