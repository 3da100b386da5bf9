use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Architecture, Mlp, PolicyError};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "cofine-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Checkpoint<S> {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub architecture: Architecture,
    pub params: Mlp<S>,
    #[serde(default)]
    pub optimizer: Option<Adam<S>>,
    #[serde(default)]
    pub rng: Option<RngState>,
    /// Epoch the checkpoint was taken at, 0 for an untrained model.
    #[serde(default)]
    pub epoch: usize,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(params: Mlp<S>, optimizer: Option<Adam<S>>, rng: Option<RngState>, epoch: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            scalar: S::NAME.to_string(),
            architecture: params.architecture.clone(),
            params,
            optimizer,
            rng,
            epoch,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Loads and validates a checkpoint. With `expected`, the stored
    /// architecture must match it exactly.
    pub fn load(path: impl AsRef<Path>, expected: Option<&Architecture>) -> Result<Self, PolicyError> {
        Self::from_json(&fs::read(path)?, expected)
    }

    pub fn from_json(bytes: &[u8], expected: Option<&Architecture>) -> Result<Self, PolicyError> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
            scalar: String,
            architecture: Architecture,
        }
        let header: Header = serde_json::from_slice(bytes)?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(PolicyError::UnsupportedVersion {
                format: header.format,
                version: header.version,
            });
        }
        if header.scalar != S::NAME {
            return Err(PolicyError::ScalarMismatch {
                expected: S::NAME.to_string(),
                found: header.scalar,
            });
        }
        if let Some(arch) = expected {
            if *arch != header.architecture {
                return Err(PolicyError::ArchitectureMismatch {
                    expected: Box::new(arch.clone()),
                    found: Box::new(header.architecture),
                });
            }
        }
        let ckpt: Checkpoint<S> = serde_json::from_slice(bytes)?;
        if ckpt.params.architecture != ckpt.architecture || !shapes_match(&ckpt.params) {
            return Err(PolicyError::ArchitectureMismatch {
                expected: Box::new(ckpt.architecture.clone()),
                found: Box::new(ckpt.params.architecture.clone()),
            });
        }
        Ok(ckpt)
    }
}

fn shapes_match<S: Scalar>(m: &Mlp<S>) -> bool {
    let mut widths = vec![m.architecture.input_dim];
    widths.extend(&m.architecture.hidden);
    widths.push(m.architecture.outputs);
    m.layers.len() + 1 == widths.len()
        && m.layers.iter().zip(widths.windows(2)).all(|(l, w)| {
            l.inputs == w[0]
                && l.outputs == w[1]
                && l.weights.len() == w[0] * w[1]
                && l.bias.len() == w[1]
        })
}
