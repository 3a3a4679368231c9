//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `MOCKPT01`, a little-endian `u64` header length,
//! a JSON header, then every tensor as row-major little-endian `f32` in header
//! order. Native weights are stored under `query.`, momentum weights under
//! `key.`.

use crate::autodiff::ParamSet;
use crate::encoder::{Encoder, EncoderArch, EncoderError, MomentumState};
use crate::pretrain::{PretrainConfig, PretrainOutput};
use crate::tensor::Matrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"MOCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint is inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since the word position is 128-bit.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, CheckpointError> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| CheckpointError::Corrupt(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| CheckpointError::Corrupt("rng seed must be 32 bytes".into()))?;
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| CheckpointError::Corrupt(format!("rng word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: PretrainConfig,
    config_hash: String,
    joints: usize,
    steps: usize,
    alpha: f64,
    rng: RngState,
    view_rng: RngState,
    tensors: Vec<TensorEntry>,
}

/// A trained encoder pair with everything needed to resume or reuse it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: PretrainConfig,
    pub arch: EncoderArch,
    pub state: MomentumState,
    pub rng: RngState,
    pub view_rng: RngState,
}

/// SHA-256 over the compact JSON form of a serializable config.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

impl Checkpoint {
    pub fn from_output(config: &PretrainConfig, out: &PretrainOutput) -> Self {
        Self {
            config: config.clone(),
            arch: out.arch.clone(),
            state: out.state.clone(),
            rng: RngState::capture(&out.rng),
            view_rng: RngState::capture(&out.view_rng),
        }
    }

    /// The native encoder.
    pub fn encoder(&self) -> Encoder {
        Encoder {
            arch: self.arch.clone(),
            params: self.state.theta_q.clone(),
        }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let mut tensors = Vec::new();
        for (prefix, set) in [("query.", &self.state.theta_q), ("key.", &self.state.theta_k)] {
            for (name, m) in set.iter() {
                tensors.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: [m.rows(), m.cols()],
                });
            }
        }
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash(),
            joints: self.arch.joints,
            steps: self.arch.steps,
            alpha: self.state.alpha,
            rng: self.rng.clone(),
            view_rng: self.view_rng.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for set in [&self.state.theta_q, &self.state.theta_k] {
            for m in set.values() {
                buf.clear();
                buf.extend(m.as_slice().iter().flat_map(|&v| (v as f32).to_le_bytes()));
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.config_hash != config_hash(&header.config) {
            return Err(CheckpointError::Corrupt("config hash does not match config".into()));
        }
        let mut enc_cfg = header.config.encoder.clone();
        enc_cfg.max_frames = enc_cfg.max_frames.max(header.config.augmentation.n_ds);
        let arch = EncoderArch::new(enc_cfg, header.joints, header.steps)?;
        let template = arch.init_params(&mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        let n = template.len();
        if header.tensors.len() != 2 * n {
            return Err(CheckpointError::Corrupt(format!("expected {} tensors, found {}", 2 * n, header.tensors.len())));
        }
        let mut sets = [template.clone(), template];
        for (k, entry) in header.tensors.iter().enumerate() {
            let (set, idx) = (&mut sets[k / n], k % n);
            let prefix = if k < n { "query." } else { "key." };
            let id = crate::autodiff::ParamId(idx);
            let expected = format!("{prefix}{}", set.name(id));
            let shape = set.get(id).shape();
            if entry.name != expected || entry.shape != [shape.0, shape.1] {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {k}: expected {expected} {shape:?}, found {} {:?}",
                    entry.name, entry.shape
                )));
            }
            let mut bytes = vec![0u8; 4 * shape.0 * shape.1];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            *set.get_mut(id) = Matrix::from_vec(shape.0, shape.1, data);
        }
        let [theta_q, theta_k]: [ParamSet; 2] = sets;
        let mut state = MomentumState::new(theta_q, header.alpha)?;
        state.theta_k = theta_k;
        Ok(Self {
            config: header.config,
            arch,
            state,
            rng: header.rng,
            view_rng: header.view_rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut config = PretrainConfig::default();
        config.encoder = EncoderConfig {
            embed_dim: 8,
            heads: 2,
            spatial_layers: 1,
            temporal_layers: 1,
            feature_dim: 4,
            ffn_mult: 1,
            max_frames: 8,
        };
        config.augmentation.n_ds = 8;
        let arch = EncoderArch::new(config.encoder.clone(), 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = MomentumState::new(arch.init_params(&mut rng), 0.99).unwrap();
        state.theta_k = arch.init_params(&mut rng);
        rng.next_u64();
        Checkpoint {
            config,
            arch,
            state,
            rng: RngState::capture(&rng),
            view_rng: RngState::capture(&ChaCha8Rng::seed_from_u64(9)),
        }
    }

    #[test]
    fn round_trip_preserves_weights_to_f32_precision() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.rng, ck.rng);
        for (a, b) in [(&ck.state.theta_q, &back.state.theta_q), (&ck.state.theta_k, &back.state.theta_k)] {
            for (x, y) in a.values().iter().zip(b.values()) {
                for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
                    assert_eq!(*u as f32, *v as f32);
                }
            }
        }
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.next_u32();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore().unwrap();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn rejects_foreign_and_tampered_files() {
        assert!(matches!(Checkpoint::read(&b"NOTACKPT........"[..]), Err(CheckpointError::BadMagic)));
        let ck = sample();
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf).into_owned();
        let pos = text.find("\"tau\":0.07").unwrap();
        buf[pos + 9] = b'8';
        assert!(matches!(Checkpoint::read(buf.as_slice()), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = PretrainConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.schedule.seed = 1;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
