//! Per-atom multi-agent relaxation environment.
//!
//! Every atom is an agent. It observes its own features, those of its `k`
//! nearest periodic neighbors, the neighbor distances and relative vectors,
//! and acts with a 3-vector in `[-1, 1]^3` that becomes its displacement.
//! Gradients are `g = -force`; features, action scales and rewards use the
//! scaled gradient, while termination uses the raw forces.

mod episode;
mod normalize;

pub use episode::{relax_macs, DoneReason, MacsEnv, MacsPolicy, ResetOutcome, StepOutcome};
pub use normalize::RunningNormalizer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::{k_nearest, CrystalError, Structure, Vec3};
use crate::potential::CalcError;

/// Gradient norms are clamped here before taking logarithms.
pub const LOG_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("invalid action for agent {agent}: {msg}")]
    InvalidAction { agent: usize, msg: String },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("no active episode")]
    NotRunning,
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error(transparent)]
    Calc(#[from] CalcError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum FeatureVariant {
    #[default]
    Full,
    Feat6,
    Feat7,
    Feat8,
    Feat9,
}

impl FeatureVariant {
    /// Scalars per atom feature vector.
    pub fn feature_len(self) -> usize {
        match self {
            FeatureVariant::Full => 12,
            FeatureVariant::Feat6 => 5,
            FeatureVariant::Feat7 => 6,
            FeatureVariant::Feat8 | FeatureVariant::Feat9 => 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum RewardVariant {
    #[default]
    Base,
    Penalty,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum ActionVariant {
    /// `d = c * u` with `c = min(|g|, c_max)`.
    #[default]
    Scaled,
    /// `d = a_max * u`.
    Direct,
}

macro_rules! upper_enum_str {
    ($t:ty { $($v:ident => $s:literal),* }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(<$t>::$v => $s),* })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s.to_ascii_uppercase().as_str() {
                    $($s => Ok(<$t>::$v),)*
                    _ => Err(format!("unknown variant '{s}'")),
                }
            }
        }
    };
}

upper_enum_str!(FeatureVariant { Full => "FULL", Feat6 => "FEAT6", Feat7 => "FEAT7", Feat8 => "FEAT8", Feat9 => "FEAT9" });
upper_enum_str!(RewardVariant { Base => "BASE", Penalty => "PENALTY", Shared => "SHARED" });
upper_enum_str!(ActionVariant { Scaled => "SCALED", Direct => "DIRECT" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub k: usize,
    pub g_max: f64,
    pub c_max: f64,
    pub fmax: f64,
    pub max_steps: usize,
    pub feature_variant: FeatureVariant,
    pub reward_variant: RewardVariant,
    pub action_variant: ActionVariant,
    /// Displacement bound of the DIRECT action variant, Å.
    pub a_max: f64,
    pub penalty: f64,
    pub normalize_obs: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            k: 12,
            g_max: 5.0,
            c_max: 0.4,
            fmax: 0.05,
            max_steps: 1000,
            feature_variant: FeatureVariant::Full,
            reward_variant: RewardVariant::Base,
            action_variant: ActionVariant::Scaled,
            a_max: 0.1,
            penalty: -0.05,
            normalize_obs: true,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.g_max > 0.0 && self.g_max.is_finite()) {
            return bad("g_max must be positive");
        }
        if !(self.c_max > 0.0 && self.c_max.is_finite()) {
            return bad("c_max must be positive");
        }
        if !(self.fmax > 0.0 && self.fmax.is_finite()) {
            return bad("fmax must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if !(self.a_max > 0.0 && self.a_max.is_finite()) {
            return bad("a_max must be positive");
        }
        if !(self.penalty <= 0.0) {
            return bad("penalty must not be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, EnvError> {
        let cfg: Self = toml::from_str(text).map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Flattened observation length.
    pub fn obs_dim(&self) -> usize {
        self.feature_variant.feature_len() * (self.k + 1) + 4 * self.k
    }
}

/// Caps the infinity norm at `g_max`, keeping the direction.
pub fn scale_gradient(g0: &Vec3, g_max: f64) -> Vec3 {
    let inf = g0.amax();
    if inf < g_max {
        *g0
    } else {
        // the product can round one ulp past the cap
        (g0 * (g_max / inf)).map(|x| x.clamp(-g_max, g_max))
    }
}

/// `min(|g|, c_max)`.
pub fn action_scale(g: &Vec3, c_max: f64) -> f64 {
    g.norm().min(c_max)
}

fn log_norm(g: &Vec3) -> f64 {
    g.norm().max(LOG_NORM_FLOOR).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentFeature {
    pub r: f64,
    pub c: f64,
    pub log_gnorm: f64,
    pub g: Vec3,
    pub d_prev: Vec3,
    pub dg: Vec3,
}

impl AgentFeature {
    pub fn write(&self, variant: FeatureVariant, out: &mut Vec<f64>) {
        let v3 = |out: &mut Vec<f64>, v: &Vec3| out.extend_from_slice(&[v.x, v.y, v.z]);
        match variant {
            FeatureVariant::Full => {
                out.extend_from_slice(&[self.r, self.c, self.log_gnorm]);
                v3(out, &self.g);
                v3(out, &self.d_prev);
                v3(out, &self.dg);
            }
            FeatureVariant::Feat6 => {
                out.extend_from_slice(&[self.r, self.c]);
                v3(out, &self.d_prev);
            }
            FeatureVariant::Feat7 => {
                out.extend_from_slice(&[self.r, self.c, self.log_gnorm]);
                v3(out, &self.g);
            }
            FeatureVariant::Feat8 => {
                out.extend_from_slice(&[self.r, self.c, self.log_gnorm]);
                v3(out, &self.g);
                v3(out, &self.dg);
            }
            FeatureVariant::Feat9 => {
                out.extend_from_slice(&[self.r, self.c, self.log_gnorm]);
                v3(out, &self.g);
                v3(out, &self.d_prev);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub own: AgentFeature,
    pub neighbor_feats: Vec<AgentFeature>,
    pub neighbor_dists: Vec<f64>,
    pub neighbor_relvecs: Vec<Vec3>,
}

impl AgentObservation {
    /// Own features, neighbor features, distances, then relative vectors.
    pub fn flatten(&self, variant: FeatureVariant) -> Vec<f64> {
        let k = self.neighbor_feats.len();
        let mut out = Vec::with_capacity(variant.feature_len() * (k + 1) + 4 * k);
        self.own.write(variant, &mut out);
        for f in &self.neighbor_feats {
            f.write(variant, &mut out);
        }
        out.extend_from_slice(&self.neighbor_dists);
        for r in &self.neighbor_relvecs {
            out.extend_from_slice(&[r.x, r.y, r.z]);
        }
        out
    }
}

/// Per-agent history carried between steps. Zero at the start of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub d_prev: Vec<Vec3>,
    pub g_prev: Vec<Vec3>,
    pub started: bool,
}

impl History {
    pub fn new(n: usize) -> Self {
        Self { d_prev: vec![Vec3::zeros(); n], g_prev: vec![Vec3::zeros(); n], started: false }
    }
}

/// Per-atom features from scaled gradients and history.
pub fn agent_features(s: &Structure, g_scaled: &[Vec3], hist: &History, cfg: &EnvConfig) -> Vec<AgentFeature> {
    (0..s.n_atoms())
        .map(|i| {
            let g = g_scaled[i];
            AgentFeature {
                r: s.species_of(i).covalent_radius,
                c: action_scale(&g, cfg.c_max),
                log_gnorm: log_norm(&g),
                g,
                d_prev: hist.d_prev[i],
                dg: if hist.started { g - hist.g_prev[i] } else { Vec3::zeros() },
            }
        })
        .collect()
}

pub fn build_observations(
    s: &Structure,
    g_scaled: &[Vec3],
    hist: &History,
    cfg: &EnvConfig,
) -> Result<Vec<AgentObservation>, EnvError> {
    let feats = agent_features(s, g_scaled, hist, cfg);
    let nl = k_nearest(s, cfg.k)?;
    Ok(nl
        .iter()
        .enumerate()
        .map(|(i, list)| AgentObservation {
            own: feats[i],
            neighbor_feats: list.iter().map(|e| feats[e.atom]).collect(),
            neighbor_dists: list.iter().map(|e| e.dist).collect(),
            neighbor_relvecs: list.iter().map(|e| e.rel_vec).collect(),
        })
        .collect())
}

/// Displacements for actions `u` given the scaled gradients.
pub fn displacements(u: &[Vec3], g_scaled: &[Vec3], cfg: &EnvConfig) -> Result<Vec<Vec3>, EnvError> {
    if u.len() != g_scaled.len() {
        return Err(EnvError::ActionCount { expected: g_scaled.len(), got: u.len() });
    }
    u.iter()
        .zip(g_scaled)
        .enumerate()
        .map(|(agent, (ui, gi))| {
            if !ui.iter().all(|x| x.is_finite()) {
                return Err(EnvError::InvalidAction { agent, msg: "non-finite component".into() });
            }
            if ui.amax() > 1.0 {
                return Err(EnvError::InvalidAction { agent, msg: format!("component outside [-1, 1]: {ui:?}") });
            }
            let scale = match cfg.action_variant {
                ActionVariant::Scaled => action_scale(gi, cfg.c_max),
                ActionVariant::Direct => cfg.a_max,
            };
            Ok(ui * scale)
        })
        .collect()
}

/// Moves every atom by its action; positions may leave the cell.
pub fn apply_actions(s: &Structure, u: &[Vec3], g_scaled: &[Vec3], cfg: &EnvConfig) -> Result<Structure, EnvError> {
    let d = displacements(u, g_scaled, cfg)?;
    Ok(s.displaced(&d)?)
}

pub fn compute_rewards(g_t: &[Vec3], g_next: &[Vec3], cfg: &EnvConfig) -> Vec<f64> {
    let base: Vec<f64> = g_t.iter().zip(g_next).map(|(a, b)| log_norm(a) - log_norm(b)).collect();
    match cfg.reward_variant {
        RewardVariant::Base => base,
        RewardVariant::Penalty => base.iter().map(|r| r + cfg.penalty).collect(),
        RewardVariant::Shared => {
            let mean = base.iter().sum::<f64>() / base.len().max(1) as f64;
            base.iter().map(|r| r + mean).collect()
        }
    }
}
