//! Checkpoint files: one JSON header line followed by little-endian `f32`
//! parameter blocks in the order the header lists them.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::{Sac, ACTION_DIM};
use super::nn::{param_count, Mlp};
use super::trainer::TrainerConfig;
use super::SacError;
use crate::env::{EnvConfig, RunningNormalizer};

pub const CHECKPOINT_FORMAT: &str = "periopt-sac-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed as lowercase hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position in decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, SacError> {
        use rand::SeedableRng;
        let bad = || SacError::Corrupt("invalid RNG state".into());
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    obs_dim: usize,
    hidden: Vec<usize>,
    twin_q: bool,
    log_alpha: f64,
    env: EnvConfig,
    trainer: TrainerConfig,
    normalizer: RunningNormalizer,
    rng: RngState,
    rounds: u64,
    episodes: usize,
    blocks: Vec<Block>,
}

/// Everything needed to run or inspect a trained policy.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub normalizer: RunningNormalizer,
    pub rng: RngState,
    pub rounds: u64,
    pub episodes: usize,
    pub agent: Sac<f32>,
}

fn sizes(obs_dim: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    std::iter::once(obs_dim).chain(hidden.iter().copied()).chain(std::iter::once(out)).collect()
}

impl Checkpoint {
    fn nets(&self) -> Vec<(String, &Mlp<f32>)> {
        let mut v = vec![("actor".to_string(), &self.agent.actor)];
        for (i, c) in self.agent.critics.iter().enumerate() {
            v.push((format!("critic{i}"), c));
        }
        for (i, t) in self.agent.targets.iter().enumerate() {
            v.push((format!("target{i}"), t));
        }
        v
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let nets = self.nets();
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            obs_dim: self.agent.obs_dim(),
            hidden: self.agent.hidden().to_vec(),
            twin_q: self.agent.critics.len() == 2,
            log_alpha: self.agent.log_alpha as f64,
            env: self.env.clone(),
            trainer: self.trainer.clone(),
            normalizer: self.normalizer.clone(),
            rng: self.rng.clone(),
            rounds: self.rounds,
            episodes: self.episodes,
            blocks: nets.iter().map(|(name, n)| Block { name: name.clone(), len: n.params.len() }).collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for (_, n) in nets {
            for p in &n.params {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SacError> {
        let nl = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| SacError::Corrupt("missing header".into()))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| SacError::Corrupt(format!("header: {e}")))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(SacError::Corrupt("not a checkpoint file".into()));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != CHECKPOINT_VERSION as u64 {
            return Err(SacError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let h: Header = serde_json::from_value(value).map_err(|e| SacError::Corrupt(format!("header: {e}")))?;
        let n_critics = if h.twin_q { 2 } else { 1 };
        let actor_sizes = sizes(h.obs_dim, &h.hidden, 2 * ACTION_DIM);
        let critic_sizes = sizes(h.obs_dim + ACTION_DIM, &h.hidden, 1);
        let mut expected = vec![("actor".to_string(), param_count(&actor_sizes))];
        for prefix in ["critic", "target"] {
            for i in 0..n_critics {
                expected.push((format!("{prefix}{i}"), param_count(&critic_sizes)));
            }
        }
        let declared: Vec<(String, usize)> = h.blocks.iter().map(|b| (b.name.clone(), b.len)).collect();
        if declared != expected {
            return Err(SacError::Shape(format!("parameter blocks {declared:?} do not match layout {expected:?}")));
        }
        let body = &bytes[nl + 1..];
        let total: usize = expected.iter().map(|(_, n)| n).sum();
        if body.len() != 4 * total {
            return Err(SacError::Corrupt(format!("expected {} parameter bytes, found {}", 4 * total, body.len())));
        }
        let mut floats = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut take = |n: usize| -> Result<Vec<f32>, SacError> {
            let v: Vec<f32> = floats.by_ref().take(n).collect();
            if v.iter().all(|x| x.is_finite()) {
                Ok(v)
            } else {
                Err(SacError::Corrupt("non-finite parameter".into()))
            }
        };
        let actor = Mlp::from_params(&actor_sizes, take(expected[0].1)?).expect("length checked");
        let mut critics = vec![];
        for _ in 0..n_critics {
            critics.push(Mlp::from_params(&critic_sizes, take(expected[1].1)?).expect("length checked"));
        }
        let mut targets = vec![];
        for _ in 0..n_critics {
            targets.push(Mlp::from_params(&critic_sizes, take(expected[1].1)?).expect("length checked"));
        }
        if h.normalizer.dim() != h.obs_dim || h.env.obs_dim() != h.obs_dim {
            return Err(SacError::Shape("normalizer or environment does not match the network input".into()));
        }
        let agent = Sac::from_parts(h.obs_dim, actor, critics, targets, h.log_alpha as f32, h.trainer.hyper());
        Ok(Self {
            env: h.env,
            trainer: h.trainer,
            normalizer: h.normalizer,
            rng: h.rng,
            rounds: h.rounds,
            episodes: h.episodes,
            agent,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SacError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SacError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies this checkpoint's weights into `agent`, which must have the
    /// same input size, widths and critic count.
    pub fn load_into(&self, agent: &mut Sac<f32>) -> Result<(), SacError> {
        if agent.obs_dim() != self.agent.obs_dim()
            || agent.hidden() != self.agent.hidden()
            || agent.critics.len() != self.agent.critics.len()
        {
            return Err(SacError::Shape(format!(
                "checkpoint has input {} widths {:?} ({} critics); agent has input {} widths {:?} ({} critics)",
                self.agent.obs_dim(),
                self.agent.hidden(),
                self.agent.critics.len(),
                agent.obs_dim(),
                agent.hidden(),
                agent.critics.len()
            )));
        }
        agent.actor = self.agent.actor.clone();
        agent.critics = self.agent.critics.clone();
        agent.targets = self.agent.targets.clone();
        agent.log_alpha = self.agent.log_alpha;
        Ok(())
    }
}
