//! Collection/learning loop over several environments sharing one agent.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::{ActMode, Batch, Sac, SacHyper, UpdateStats, ACTION_DIM};
use super::buffer::{ReplayBuffer, Transition};
use super::checkpoint::{Checkpoint, RngState};
use super::nn::Real;
use super::SacError;
use crate::crystal::{random_structure, CrystalError, RandomStructureRequest, SpeciesTable, Structure, Vec3};
use crate::env::{EnvConfig, MacsEnv, RunningNormalizer};
use crate::potential::Calculator;

/// Random training structures drawn at the start of every episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureSource {
    /// Atom count per species symbol.
    pub composition: BTreeMap<String, usize>,
    pub volume_per_atom: f64,
    pub min_dist: f64,
}

impl Default for StructureSource {
    fn default() -> Self {
        Self { composition: BTreeMap::from([("Ar".to_string(), 8)]), volume_per_atom: 50.0, min_dist: 3.0 }
    }
}

impl StructureSource {
    pub fn single(symbol: &str, n: usize, volume_per_atom: f64, min_dist: f64) -> Self {
        Self { composition: BTreeMap::from([(symbol.to_string(), n)]), volume_per_atom, min_dist }
    }

    pub fn n_atoms(&self) -> usize {
        self.composition.values().sum()
    }

    pub fn request(&self, table: &SpeciesTable) -> Result<RandomStructureRequest, CrystalError> {
        let comp = self
            .composition
            .iter()
            .map(|(sym, n)| {
                table.get(sym).cloned().map(|s| (s, *n)).ok_or_else(|| CrystalError::UnknownSpecies(sym.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RandomStructureRequest::new(comp, self.volume_per_atom * self.n_atoms() as f64, self.min_dist))
    }

    pub fn generate(&self, table: &SpeciesTable, seed: u64) -> Result<Structure, CrystalError> {
        random_structure(&self.request(table)?, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub target_entropy: f64,
    pub tau: f64,
    /// Polyak averaging every this many gradient updates.
    pub target_update_interval: u64,
    pub initial_alpha: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_lr: f64,
    /// Transitions collected before the first gradient update.
    pub warmup_samples: usize,
    pub buffer_capacity: usize,
    pub twin_q: bool,
    pub num_envs: usize,
    /// Collection rounds (one step of every environment plus one update).
    pub total_rounds: u64,
    /// Stop once this many episodes have finished.
    pub max_episodes: Option<usize>,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub log_interval: u64,
    /// Episodes averaged in each log line.
    pub log_window: usize,
    pub checkpoint_interval: Option<u64>,
    pub structures: StructureSource,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let h = SacHyper::default();
        Self {
            gamma: h.gamma,
            batch_size: 8192,
            target_entropy: h.target_entropy,
            tau: h.tau,
            target_update_interval: h.target_update_interval,
            initial_alpha: h.initial_alpha,
            actor_lr: h.actor_lr,
            critic_lr: h.critic_lr,
            entropy_lr: h.entropy_lr,
            warmup_samples: 500,
            buffer_capacity: 10_000_000,
            twin_q: h.twin_q,
            num_envs: 40,
            total_rounds: 80_000,
            max_episodes: None,
            hidden: vec![256, 256],
            seed: 0,
            log_interval: 100,
            log_window: 20,
            checkpoint_interval: None,
            structures: StructureSource::default(),
        }
    }
}

impl TrainerConfig {
    /// Single-machine setting: 8-atom argon cells, 2 environments, batch 256,
    /// buffer 1e5, at most 800 episodes, initial temperature 0.01.
    pub fn desk() -> Self {
        Self {
            batch_size: 256,
            buffer_capacity: 100_000,
            num_envs: 2,
            initial_alpha: 0.01,
            total_rounds: 200_000,
            max_episodes: Some(800),
            log_interval: 500,
            ..Default::default()
        }
    }

    pub fn hyper(&self) -> SacHyper {
        SacHyper {
            gamma: self.gamma,
            tau: self.tau,
            target_update_interval: self.target_update_interval,
            target_entropy: self.target_entropy,
            initial_alpha: self.initial_alpha,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            entropy_lr: self.entropy_lr,
            twin_q: self.twin_q,
        }
    }

    pub fn validate(&self) -> Result<(), SacError> {
        let bad = |m: &str| Err(SacError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.num_envs == 0 || self.log_window == 0 {
            return bad("batch_size, buffer_capacity, num_envs and log_window must be positive");
        }
        if self.target_update_interval == 0 || self.log_interval == 0 {
            return bad("intervals must be positive");
        }
        if !(self.initial_alpha > 0.0) {
            return bad("initial_alpha must be positive");
        }
        if [self.actor_lr, self.critic_lr, self.entropy_lr].iter().any(|lr| !(*lr > 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.structures.n_atoms() == 0 {
            return bad("training structures need atoms");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SacError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SacError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub env: usize,
    pub length: usize,
    /// Sum over steps of the mean per-agent reward.
    pub reward: f64,
    pub success: bool,
    /// Ended by a calculator failure.
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub round: u64,
    pub env_steps: u64,
    pub episodes: usize,
    pub mean_ep_reward: f64,
    pub mean_ep_len: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub alpha: f64,
}

pub const LOG_HEADER: &str = "round,env_steps,episodes,mean_ep_reward,mean_ep_len,actor_loss,critic_loss,alpha";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.env_steps,
            self.episodes,
            self.mean_ep_reward,
            self.mean_ep_len,
            self.actor_loss,
            self.critic_loss,
            self.alpha
        )
    }
}

struct Running {
    obs: Vec<Vec<f64>>,
    reward: f64,
}

/// Maps per-agent observations to the agent's input precision.
pub(crate) fn prepare<R: Real>(norm: &RunningNormalizer, normalize: bool, rows: &[&[f64]]) -> Vec<R> {
    let mut out = Vec::with_capacity(rows.len() * rows.first().map_or(0, |r| r.len()));
    for r in rows {
        if normalize {
            out.extend(norm.normalize(r).into_iter().map(R::of));
        } else {
            out.extend(r.iter().map(|x| R::of(*x)));
        }
    }
    out
}

pub struct Trainer<C> {
    cfg: TrainerConfig,
    env_cfg: EnvConfig,
    table: SpeciesTable,
    envs: Vec<MacsEnv<C>>,
    running: Vec<Option<Running>>,
    agent: Sac<f32>,
    buffer: ReplayBuffer,
    normalizer: RunningNormalizer,
    rng: ChaCha8Rng,
    episodes: Vec<EpisodeStat>,
    log: Vec<LogRow>,
    rounds: u64,
    env_steps: u64,
    last: Option<UpdateStats>,
}

impl<C: Calculator> Trainer<C> {
    /// One environment is built per calculator; their count must equal
    /// `cfg.num_envs`.
    pub fn new(cfg: TrainerConfig, env_cfg: EnvConfig, table: SpeciesTable, calcs: Vec<C>) -> Result<Self, SacError> {
        cfg.validate()?;
        env_cfg.validate()?;
        if calcs.len() != cfg.num_envs {
            return Err(SacError::Config(format!("{} calculators for {} environments", calcs.len(), cfg.num_envs)));
        }
        cfg.structures.request(&table)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let obs_dim = env_cfg.obs_dim();
        let agent = Sac::new(obs_dim, &cfg.hidden, cfg.hyper(), &mut rng);
        let envs = calcs.into_iter().map(|c| MacsEnv::new(env_cfg.clone(), c)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            running: (0..envs.len()).map(|_| None).collect(),
            envs,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, obs_dim),
            normalizer: RunningNormalizer::new(obs_dim),
            agent,
            rng,
            episodes: vec![],
            log: vec![],
            rounds: 0,
            env_steps: 0,
            last: None,
            cfg,
            env_cfg,
            table,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn agent(&self) -> &Sac<f32> {
        &self.agent
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn normalizer(&self) -> &RunningNormalizer {
        &self.normalizer
    }

    pub fn episodes(&self) -> &[EpisodeStat] {
        &self.episodes
    }

    pub fn log_rows(&self) -> &[LogRow] {
        &self.log
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    fn finished(&self) -> bool {
        self.rounds >= self.cfg.total_rounds || self.cfg.max_episodes.is_some_and(|m| self.episodes.len() >= m)
    }

    fn start_episode(&mut self, e: usize) -> Result<(), SacError> {
        for _ in 0..100 {
            let seed: u64 = self.rng.random();
            let s = match self.cfg.structures.generate(&self.table, seed) {
                Ok(s) => s,
                Err(err @ CrystalError::PackingInfeasible { .. }) => {
                    warn!("env {e}: skipping training structure (seed {seed}): {err}");
                    continue;
                }
                Err(err) => return Err(err.into()),
            };
            match self.envs[e].reset(s) {
                Ok(out) if out.done => continue,
                Ok(out) => {
                    if self.env_cfg.normalize_obs {
                        self.normalizer.update(&out.obs);
                    }
                    self.running[e] = Some(Running { obs: out.obs, reward: 0.0 });
                    return Ok(());
                }
                Err(err) => warn!("env {e}: discarding training structure (seed {seed}): {err}"),
            }
        }
        Err(SacError::Config("could not start a training episode in 100 attempts".into()))
    }

    fn sample_batch(&mut self) -> Batch<f32> {
        let n = self.cfg.batch_size;
        let idx = self.buffer.sample_indices(&mut self.rng, n);
        let d = self.buffer.obs_dim();
        let mut obs = Vec::with_capacity(n * d);
        let mut next_obs = Vec::with_capacity(n * d);
        let mut actions = Vec::with_capacity(n * ACTION_DIM);
        let mut rewards = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        let normalize = self.env_cfg.normalize_obs;
        let widen = |src: &[f32], dst: &mut Vec<f32>| {
            let x: Vec<f64> = src.iter().map(|v| *v as f64).collect();
            dst.extend(prepare::<f32>(&self.normalizer, normalize, &[&x]));
        };
        for i in idx {
            let (o, a, no, r, done) = self.buffer.raw(i);
            widen(o, &mut obs);
            widen(no, &mut next_obs);
            actions.extend_from_slice(a);
            rewards.push(r);
            dones.push(if done { 1.0 } else { 0.0 });
        }
        Batch { size: n, obs, actions, rewards, next_obs, dones }
    }

    /// One step of every environment followed by at most one update.
    pub fn round(&mut self) -> Result<Option<UpdateStats>, SacError> {
        for e in 0..self.envs.len() {
            if self.running[e].is_none() {
                self.start_episode(e)?;
            }
            let run = self.running[e].as_ref().expect("episode started");
            let rows: Vec<&[f64]> = run.obs.iter().map(|o| o.as_slice()).collect();
            let x = prepare::<f32>(&self.normalizer, self.env_cfg.normalize_obs, &rows);
            let acts = self.agent.act(&x, rows.len(), ActMode::Sample, &mut self.rng)?;
            let u: Vec<Vec3> = acts.chunks_exact(3).map(|a| Vec3::new(a[0] as f64, a[1] as f64, a[2] as f64)).collect();
            let out = self.envs[e].step(&u)?;
            self.env_steps += 1;
            let run = self.running[e].as_mut().expect("episode started");
            if let Some(msg) = &out.failure {
                warn!("env {e}: episode dropped after calculator failure: {msg}");
                self.episodes.push(EpisodeStat {
                    env: e,
                    length: self.envs[e].t(),
                    reward: run.reward,
                    success: false,
                    failed: true,
                });
                self.running[e] = None;
                continue;
            }
            let success = out.done_reason == Some(crate::env::DoneReason::Success);
            for (i, r) in out.rewards.iter().enumerate() {
                let a = &acts[i * 3..i * 3 + 3];
                self.buffer.push(&Transition {
                    obs: run.obs[i].clone(),
                    action: [a[0] as f64, a[1] as f64, a[2] as f64],
                    reward: *r,
                    next_obs: out.obs[i].clone(),
                    done: success,
                });
            }
            run.reward += out.rewards.iter().sum::<f64>() / out.rewards.len() as f64;
            if self.env_cfg.normalize_obs {
                self.normalizer.update(&out.obs);
            }
            if out.done {
                self.episodes.push(EpisodeStat {
                    env: e,
                    length: self.envs[e].t(),
                    reward: run.reward,
                    success,
                    failed: false,
                });
                self.running[e] = None;
            } else {
                run.obs = out.obs;
            }
        }
        self.rounds += 1;
        if self.buffer.len() >= self.cfg.warmup_samples.max(1) {
            let batch = self.sample_batch();
            let stats = self.agent.update(&batch, &mut self.rng)?;
            self.last = Some(stats);
            Ok(Some(stats))
        } else {
            Ok(None)
        }
    }

    fn log_row(&self) -> LogRow {
        let w = &self.episodes[self.episodes.len().saturating_sub(self.cfg.log_window)..];
        let n = w.len().max(1) as f64;
        let last = self.last.unwrap_or_default();
        LogRow {
            round: self.rounds,
            env_steps: self.env_steps,
            episodes: self.episodes.len(),
            mean_ep_reward: if w.is_empty() { f64::NAN } else { w.iter().map(|e| e.reward).sum::<f64>() / n },
            mean_ep_len: if w.is_empty() { f64::NAN } else { w.iter().map(|e| e.length as f64).sum::<f64>() / n },
            actor_loss: last.actor_loss,
            critic_loss: last.critic_loss,
            alpha: self.agent.alpha(),
        }
    }

    /// Trains until the round or episode budget is spent. Log rows go to
    /// `log` as CSV; periodic checkpoints go to `checkpoint_dir`.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>, checkpoint_dir: Option<&Path>) -> Result<(), SacError> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{LOG_HEADER}")?;
        }
        while !self.finished() {
            self.round()?;
            if self.rounds % self.cfg.log_interval == 0 || self.finished() {
                let row = self.log_row();
                info!(
                    "round {} episodes {} mean length {:.1} reward {:.3} alpha {:.4}",
                    row.round, row.episodes, row.mean_ep_len, row.mean_ep_reward, row.alpha
                );
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", row.csv())?;
                }
                self.log.push(row);
            }
            if let (Some(dir), Some(every)) = (checkpoint_dir, self.cfg.checkpoint_interval) {
                if every > 0 && self.rounds % every == 0 {
                    self.checkpoint().save(&dir.join(format!("checkpoint_{:08}.ckpt", self.rounds)))?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            env: self.env_cfg.clone(),
            trainer: self.cfg.clone(),
            normalizer: self.normalizer.clone(),
            rng: RngState::of(&self.rng),
            rounds: self.rounds,
            episodes: self.episodes.len(),
            agent: self.agent.clone(),
        }
    }
}
