//! Relaxation of atomic positions inside a fixed cell.
//!
//! Every method runs through the same loop: evaluate, stop if the largest
//! per-atom force is at most `fmax`, otherwise commit one step. A step is one
//! committed displacement; line-search trials cost energy calls but are not
//! steps. The cell is never modified.

pub mod linesearch;
mod methods;

pub use methods::{
    cap_per_atom, max_atom_norm, Bfgs, BfgsLineSearch, ConjugateGradient, EvalFn, Fire, MdMin, StepOutput, Stepper,
    DEFAULT_MAX_STEP,
};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::{Structure, StructureRecord};
use crate::potential::{CalcError, Calculator};

/// FIRE steps before the hybrid method switches to BFGSLS.
pub const HYBRID_FIRE_STEPS: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "BFGS")]
    Bfgs,
    #[serde(rename = "BFGSLS")]
    BfgsLs,
    #[serde(rename = "FIRE")]
    Fire,
    #[serde(rename = "MDMin")]
    MdMin,
    #[serde(rename = "CG")]
    Cg,
    #[serde(rename = "FIRE+BFGSLS")]
    FireBfgsLs,
    #[serde(rename = "MACS")]
    Macs,
}

impl Method {
    pub const CLASSICAL: [Method; 6] =
        [Method::Bfgs, Method::Fire, Method::MdMin, Method::BfgsLs, Method::FireBfgsLs, Method::Cg];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bfgs => "BFGS",
            Method::BfgsLs => "BFGSLS",
            Method::Fire => "FIRE",
            Method::MdMin => "MDMin",
            Method::Cg => "CG",
            Method::FireBfgsLs => "FIRE+BFGSLS",
            Method::Macs => "MACS",
        }
    }

    /// One energy call per step.
    pub fn is_fixed_step(self) -> bool {
        matches!(self, Method::Bfgs | Method::Fire | Method::MdMin | Method::Macs)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| !matches!(c, '_' | '-' | '+')).collect::<String>().to_lowercase();
        Ok(match key.as_str() {
            "bfgs" => Method::Bfgs,
            "bfgsls" => Method::BfgsLs,
            "fire" => Method::Fire,
            "mdmin" => Method::MdMin,
            "cg" => Method::Cg,
            "firebfgsls" => Method::FireBfgsLs,
            "macs" => Method::Macs,
            _ => return Err(format!("unknown method '{s}'")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminationPolicy {
    pub fmax: f64,
    pub max_steps: usize,
}

impl Default for TerminationPolicy {
    fn default() -> Self {
        Self { fmax: 0.05, max_steps: 1000 }
    }
}

impl TerminationPolicy {
    pub fn new(fmax: f64, max_steps: usize) -> Result<Self, RelaxError> {
        let tp = Self { fmax, max_steps };
        tp.validate()?;
        Ok(tp)
    }

    pub fn validate(&self) -> Result<(), RelaxError> {
        if !(self.fmax > 0.0 && self.fmax.is_finite()) || self.max_steps == 0 {
            return Err(RelaxError::InvalidPolicy(format!("fmax={} max_steps={}", self.fmax, self.max_steps)));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RelaxError {
    #[error("invalid termination policy: {0}")]
    InvalidPolicy(String),
    #[error("MACS relaxation needs a trained policy")]
    PolicyRequired,
}

/// Failure inside a single step.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error(transparent)]
    Calc(#[from] CalcError),
    #[error("non-finite displacement")]
    NonFinite,
    #[error("line search failed: {0}")]
    LineSearch(String),
}

/// Energy and flat forces at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub energy: f64,
    pub forces: Vec<f64>,
}

impl Evaluation {
    pub fn fmax(&self) -> f64 {
        max_atom_norm(&self.forces)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxationReport {
    pub method: Method,
    pub success: bool,
    pub steps: usize,
    pub energy_calls: usize,
    /// Seconds, monotonic clock around the whole run.
    pub wall_time: f64,
    /// Energy after every step, starting with the initial structure.
    pub energy_trace: Vec<f64>,
    pub final_energy: f64,
    pub final_fmax: f64,
    pub final_structure: StructureRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RelaxationReport {
    /// Rebuilds the final structure using the species of `input`.
    pub fn final_structure_like(&self, input: &Structure) -> Structure {
        input.with_positions_flat(&self.final_structure.positions).expect("report matches input")
    }

    /// Same report with the wall time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self { wall_time: 0.0, ..self.clone() }
    }
}

/// Counts energy calls and maps flat coordinates onto structures.
pub struct Evaluator<'a> {
    base: &'a Structure,
    calc: &'a dyn Calculator,
    calls: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(base: &'a Structure, calc: &'a dyn Calculator) -> Self {
        Self { base, calc, calls: 0 }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn evaluate(&mut self, x: &[f64]) -> Result<Evaluation, StepError> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(StepError::NonFinite);
        }
        let s = self.base.with_positions_flat(x).map_err(|_| StepError::NonFinite)?;
        self.calls += 1;
        let r = self.calc.evaluate(&s)?;
        Ok(Evaluation { energy: r.energy, forces: r.forces_flat() })
    }
}

/// Mutable state of a relaxation shared between phases.
struct Run<'a> {
    ev: Evaluator<'a>,
    x: Vec<f64>,
    cur: Evaluation,
    steps: usize,
    trace: Vec<f64>,
}

enum PhaseEnd {
    Converged,
    Budget,
    Failed(String),
}

impl Run<'_> {
    fn phase(&mut self, stepper: &mut dyn Stepper, fmax: f64, budget: usize) -> PhaseEnd {
        let start = self.steps;
        loop {
            if self.cur.fmax() <= fmax {
                return PhaseEnd::Converged;
            }
            if self.steps - start >= budget {
                return PhaseEnd::Budget;
            }
            let ev = &mut self.ev;
            let mut f = |x: &[f64]| ev.evaluate(x);
            let out = match stepper.step(&self.x, &self.cur, &mut f) {
                Ok(o) => o,
                Err(e) => return PhaseEnd::Failed(e.to_string()),
            };
            let next = match out.eval {
                Some(e) => e,
                None => match self.ev.evaluate(&out.x) {
                    Ok(e) => e,
                    Err(e) => return PhaseEnd::Failed(e.to_string()),
                },
            };
            self.x = out.x;
            self.cur = next;
            self.steps += 1;
            self.trace.push(self.cur.energy);
        }
    }
}

fn stepper_for(method: Method) -> Box<dyn Stepper> {
    match method {
        Method::Bfgs => Box::new(Bfgs::default()),
        Method::BfgsLs => Box::new(BfgsLineSearch::default()),
        Method::Fire => Box::new(Fire::default()),
        Method::MdMin => Box::new(MdMin::default()),
        Method::Cg => Box::new(ConjugateGradient::default()),
        Method::FireBfgsLs | Method::Macs => unreachable!("not a single-phase method"),
    }
}

/// Relaxes `s` with a classical method.
pub fn relax(s: &Structure, method: Method, calc: &dyn Calculator, tp: &TerminationPolicy) -> Result<RelaxationReport, RelaxError> {
    tp.validate()?;
    let phases: Vec<(Method, usize)> = match method {
        Method::Macs => return Err(RelaxError::PolicyRequired),
        Method::FireBfgsLs => {
            let fire = HYBRID_FIRE_STEPS.min(tp.max_steps);
            vec![(Method::Fire, fire), (Method::BfgsLs, tp.max_steps - fire)]
        }
        m => vec![(m, tp.max_steps)],
    };
    Ok(run_phases(s, method, &phases, calc, tp))
}

/// FIRE for up to 250 steps, then BFGSLS with the remaining budget.
pub fn relax_hybrid(s: &Structure, calc: &dyn Calculator, tp: &TerminationPolicy) -> Result<RelaxationReport, RelaxError> {
    relax(s, Method::FireBfgsLs, calc, tp)
}

fn run_phases(
    s: &Structure,
    method: Method,
    phases: &[(Method, usize)],
    calc: &dyn Calculator,
    tp: &TerminationPolicy,
) -> RelaxationReport {
    let t0 = Instant::now();
    let x0 = s.positions_flat();
    let mut ev = Evaluator::new(s, calc);
    let first = ev.evaluate(&x0);
    let report = |run: Option<Run>, x: Vec<f64>, failure: Option<String>, success: bool, ev_calls: usize| {
        let (steps, trace, energy, fmax) = match &run {
            Some(r) => (r.steps, r.trace.clone(), r.cur.energy, r.cur.fmax()),
            None => (0, vec![], f64::NAN, f64::NAN),
        };
        RelaxationReport {
            method,
            success,
            steps,
            energy_calls: ev_calls,
            wall_time: t0.elapsed().as_secs_f64(),
            energy_trace: trace,
            final_energy: energy,
            final_fmax: fmax,
            final_structure: StructureRecord::from(&s.with_positions_flat(&x).expect("finite positions")),
            failure,
        }
    };
    let cur = match first {
        Ok(e) => e,
        Err(e) => {
            let calls = ev.calls();
            return report(None, x0, Some(e.to_string()), false, calls);
        }
    };
    let mut run = Run { ev, x: x0, trace: vec![cur.energy], cur, steps: 0 };
    let mut end = PhaseEnd::Budget;
    for &(m, budget) in phases {
        if budget == 0 && run.cur.fmax() > tp.fmax {
            continue;
        }
        end = run.phase(stepper_for(m).as_mut(), tp.fmax, budget);
        if !matches!(end, PhaseEnd::Budget) {
            break;
        }
    }
    let (success, failure) = match end {
        PhaseEnd::Converged => (true, None),
        PhaseEnd::Budget => (false, Some(format!("not converged within {} steps", tp.max_steps))),
        PhaseEnd::Failed(msg) => (false, Some(msg)),
    };
    let calls = run.ev.calls();
    let x = run.x.clone();
    report(Some(run), x, failure, success, calls)
}
