//! Independent soft actor-critic with one policy and one twin-Q pair shared
//! by every atom-agent.
//!
//! Networks are plain two-hidden-layer ReLU MLPs with hand-written
//! backpropagation ([`nn`]). The policy is a tanh-squashed Gaussian; the
//! temperature is learned through its logarithm. Training ([`Trainer`])
//! alternates one step of every environment with one gradient update.

pub mod agent;
pub mod buffer;
pub mod checkpoint;
pub mod nn;
pub mod trainer;

pub use agent::{ActMode, Batch, Sac, SacHyper, UpdateStats, ACTION_DIM, LOG_STD_MAX, LOG_STD_MIN};
pub use buffer::{ReplayBuffer, Transition};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use nn::{Adam, Mlp, Real};
pub use trainer::{EpisodeStat, LogRow, StructureSource, Trainer, TrainerConfig, LOG_HEADER};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crystal::{CrystalError, Vec3};
use crate::env::{EnvConfig, EnvError, MacsPolicy, RunningNormalizer};

#[derive(Debug, Error)]
pub enum SacError {
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("environment incompatible with policy: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Trained policy as an optimizer: normalizes with frozen statistics and
/// acts on every agent at once.
#[derive(Debug, Clone)]
pub struct SacPolicy {
    actor: Mlp<f32>,
    normalizer: RunningNormalizer,
    normalize: bool,
    mode: ActMode,
    rng: ChaCha8Rng,
}

impl SacPolicy {
    pub fn new(agent: &Sac<f32>, normalizer: &RunningNormalizer, normalize: bool, mode: ActMode) -> Self {
        let mut normalizer = normalizer.clone();
        normalizer.frozen = true;
        Self { actor: agent.actor.clone(), normalizer, normalize, mode, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// Deterministic policy from a checkpoint, refusing environments whose
    /// observation layout differs from the one it was trained on.
    pub fn from_checkpoint(ckpt: &Checkpoint, env: &EnvConfig) -> Result<Self, SacError> {
        let trained = &ckpt.env;
        if env.obs_dim() != ckpt.agent.obs_dim() {
            return Err(SacError::Incompatible(format!(
                "observation length {} (k = {}, {}) but the policy expects {} (k = {}, {})",
                env.obs_dim(),
                env.k,
                env.feature_variant,
                ckpt.agent.obs_dim(),
                trained.k,
                trained.feature_variant
            )));
        }
        if env.feature_variant != trained.feature_variant || env.k != trained.k {
            return Err(SacError::Incompatible(format!(
                "features {} with k = {} but the policy was trained on {} with k = {}",
                env.feature_variant, env.k, trained.feature_variant, trained.k
            )));
        }
        if env.normalize_obs != trained.normalize_obs {
            return Err(SacError::Incompatible("observation normalization setting differs".into()));
        }
        Ok(Self::new(&ckpt.agent, &ckpt.normalizer, trained.normalize_obs, ActMode::Mean))
    }

    pub fn with_sampling(mut self, seed: u64) -> Self {
        self.mode = ActMode::Sample;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn actions(&mut self, obs: &[Vec<f64>]) -> Vec<Vec3> {
        let rows: Vec<&[f64]> = obs.iter().map(|o| o.as_slice()).collect();
        let x = trainer::prepare::<f32>(&self.normalizer, self.normalize, &rows);
        let out = self.actor.forward(&x, rows.len());
        let xi: Vec<f64> = match self.mode {
            ActMode::Mean => vec![0.0; rows.len() * ACTION_DIM],
            ActMode::Sample => agent::standard_normal(&mut self.rng, rows.len() * ACTION_DIM),
        };
        out.chunks_exact(2 * ACTION_DIM)
            .enumerate()
            .map(|(b, row)| {
                let a = |j: usize| {
                    let ls = (row[ACTION_DIM + j] as f64).clamp(LOG_STD_MIN, LOG_STD_MAX);
                    agent::squash(row[j] as f64 + ls.exp() * xi[b * ACTION_DIM + j])
                };
                Vec3::new(a(0), a(1), a(2))
            })
            .collect()
    }
}

impl MacsPolicy for SacPolicy {
    fn act(&mut self, obs: &[Vec<f64>]) -> Vec<Vec3> {
        self.actions(obs)
    }
}
