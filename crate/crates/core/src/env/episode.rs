use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{build_observations, compute_rewards, displacements, scale_gradient, EnvConfig, EnvError, History};
use crate::crystal::{Structure, StructureRecord, Vec3};
use crate::optimizers::{Method, RelaxationReport, TerminationPolicy};
use crate::potential::Calculator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DoneReason {
    Success,
    Truncated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResetOutcome {
    /// Raw (unnormalized) flat observations, one per agent.
    pub obs: Vec<Vec<f64>>,
    /// Already converged: the episode has no steps.
    pub done: bool,
    pub energy: f64,
    pub fmax: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
    pub energy: f64,
    /// Largest unscaled per-atom force norm.
    pub fmax: f64,
    /// Set when the calculator failed; the episode then ends as truncated.
    pub failure: Option<String>,
}

struct State {
    s: Structure,
    g_scaled: Vec<Vec3>,
    obs: Vec<Vec<f64>>,
    t: usize,
    done: bool,
    energy: f64,
    fmax: f64,
}

/// One relaxation episode at a time over a fixed calculator.
pub struct MacsEnv<C> {
    cfg: EnvConfig,
    calc: C,
    state: Option<State>,
    energy_calls: usize,
}

impl<C: Calculator> MacsEnv<C> {
    pub fn new(cfg: EnvConfig, calc: C) -> Result<Self, EnvError> {
        cfg.validate()?;
        Ok(Self { cfg, calc, state: None, energy_calls: 0 })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn calculator(&self) -> &C {
        &self.calc
    }

    pub fn structure(&self) -> Option<&Structure> {
        self.state.as_ref().map(|s| &s.s)
    }

    /// Steps taken in the current episode.
    pub fn t(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.t)
    }

    pub fn is_done(&self) -> bool {
        self.state.as_ref().is_none_or(|s| s.done)
    }

    pub fn scaled_gradients(&self) -> Option<&[Vec3]> {
        self.state.as_ref().map(|s| s.g_scaled.as_slice())
    }

    /// Calculator calls since construction.
    pub fn energy_calls(&self) -> usize {
        self.energy_calls
    }

    fn observe(&self, s: &Structure, g_scaled: &[Vec3], hist: &History) -> Result<Vec<Vec<f64>>, EnvError> {
        let obs = build_observations(s, g_scaled, hist, &self.cfg)?;
        Ok(obs.iter().map(|o| o.flatten(self.cfg.feature_variant)).collect())
    }

    fn gradients(&self, forces: &[Vec3]) -> Vec<Vec3> {
        forces.iter().map(|f| scale_gradient(&-f, self.cfg.g_max)).collect()
    }

    pub fn reset(&mut self, s: Structure) -> Result<ResetOutcome, EnvError> {
        self.state = None;
        self.energy_calls += 1;
        let r = self.calc.evaluate(&s)?;
        let g_scaled = self.gradients(&r.forces);
        let hist = History::new(s.n_atoms());
        let obs = self.observe(&s, &g_scaled, &hist)?;
        let fmax = r.fmax();
        let done = fmax <= self.cfg.fmax;
        let out = ResetOutcome { obs: obs.clone(), done, energy: r.energy, fmax };
        self.state = Some(State { s, g_scaled, obs, t: 0, done, energy: r.energy, fmax });
        Ok(out)
    }

    pub fn step(&mut self, u: &[Vec3]) -> Result<StepOutcome, EnvError> {
        let st = self.state.as_ref().ok_or(EnvError::NotRunning)?;
        if st.done {
            return Err(EnvError::NotRunning);
        }
        let d = displacements(u, &st.g_scaled, &self.cfg)?;
        let next = st.s.displaced(&d)?;
        self.energy_calls += 1;
        let r = match self.calc.evaluate(&next) {
            Ok(r) => r,
            Err(e) => {
                let st = self.state.as_mut().expect("checked above");
                st.done = true;
                return Ok(StepOutcome {
                    obs: st.obs.clone(),
                    rewards: vec![0.0; d.len()],
                    done: true,
                    done_reason: Some(DoneReason::Truncated),
                    energy: st.energy,
                    fmax: st.fmax,
                    failure: Some(e.to_string()),
                });
            }
        };
        let g_next = self.gradients(&r.forces);
        let rewards = compute_rewards(&st.g_scaled, &g_next, &self.cfg);
        let hist = History { d_prev: d, g_prev: st.g_scaled.clone(), started: true };
        let obs = self.observe(&next, &g_next, &hist)?;
        let t = st.t + 1;
        let fmax = r.fmax();
        let done_reason = if fmax <= self.cfg.fmax {
            Some(DoneReason::Success)
        } else if t >= self.cfg.max_steps {
            Some(DoneReason::Truncated)
        } else {
            None
        };
        let done = done_reason.is_some();
        self.state =
            Some(State { s: next, g_scaled: g_next, obs: obs.clone(), t, done, energy: r.energy, fmax });
        Ok(StepOutcome { obs, rewards, done, done_reason, energy: r.energy, fmax, failure: None })
    }
}

/// Maps raw per-agent observations to per-agent actions in `[-1, 1]^3`.
pub trait MacsPolicy {
    fn act(&mut self, obs: &[Vec<f64>]) -> Vec<Vec3>;
}

impl<F: FnMut(&[Vec<f64>]) -> Vec<Vec3>> MacsPolicy for F {
    fn act(&mut self, obs: &[Vec<f64>]) -> Vec<Vec3> {
        self(obs)
    }
}

/// Relaxes `s` by rolling out `policy`; the termination policy overrides
/// the config's `fmax` and `max_steps`.
pub fn relax_macs(
    s: &Structure,
    policy: &mut dyn MacsPolicy,
    cfg: &EnvConfig,
    calc: &dyn Calculator,
    tp: &TerminationPolicy,
) -> Result<RelaxationReport, EnvError> {
    let t0 = Instant::now();
    let cfg = EnvConfig { fmax: tp.fmax, max_steps: tp.max_steps, ..cfg.clone() };
    let mut env = MacsEnv::new(cfg, calc)?;
    let mut report = RelaxationReport {
        method: Method::Macs,
        success: false,
        steps: 0,
        energy_calls: 0,
        wall_time: 0.0,
        energy_trace: vec![],
        final_energy: f64::NAN,
        final_fmax: f64::NAN,
        final_structure: StructureRecord::from(s),
        failure: None,
    };
    let finish = |mut r: RelaxationReport, env: &MacsEnv<&dyn Calculator>| {
        r.energy_calls = env.energy_calls();
        r.steps = env.t();
        if let Some(st) = env.structure() {
            r.final_structure = StructureRecord::from(st);
        }
        r.wall_time = t0.elapsed().as_secs_f64();
        r
    };
    let first = match env.reset(s.clone()) {
        Ok(o) => o,
        Err(e) => {
            report.failure = Some(e.to_string());
            return Ok(finish(report, &env));
        }
    };
    report.energy_trace.push(first.energy);
    report.final_energy = first.energy;
    report.final_fmax = first.fmax;
    if first.done {
        report.success = true;
        return Ok(finish(report, &env));
    }
    let mut obs = first.obs;
    loop {
        let u = policy.act(&obs);
        let out = match env.step(&u) {
            Ok(o) => o,
            Err(e) => {
                report.failure = Some(e.to_string());
                break;
            }
        };
        if let Some(msg) = out.failure {
            report.failure = Some(msg);
            break;
        }
        report.energy_trace.push(out.energy);
        report.final_energy = out.energy;
        report.final_fmax = out.fmax;
        match out.done_reason {
            Some(DoneReason::Success) => {
                report.success = true;
                break;
            }
            Some(DoneReason::Truncated) => {
                report.failure = Some(format!("not converged within {} steps", tp.max_steps));
                break;
            }
            None => obs = out.obs,
        }
    }
    Ok(finish(report, &env))
}
