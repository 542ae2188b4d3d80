//! Energy/force calculators.
//!
//! Units are eV for energies and eV/Å for forces throughout. The energy is
//! the total per unit cell.

mod lj;

pub use lj::{lorentz_berthelot, pair_derivative, pair_energy, LennardJones, DEFAULT_CUTOFF_FACTOR};

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::crystal::{Structure, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalcError {
    #[error("atomic overlap: atoms {i} and {j} are {dist:.3e} Å apart")]
    AtomicOverlap { i: usize, j: usize, dist: f64 },
    #[error("calculator returned non-finite values")]
    NonFinite,
    #[error("calculator returned {got} forces for {expected} atoms")]
    ShapeMismatch { expected: usize, got: usize },
    /// Failures of an external calculator process.
    #[error("external calculator: {0}")]
    External(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalcResult {
    pub energy: f64,
    pub forces: Vec<Vec3>,
}

impl CalcResult {
    /// Largest per-atom force norm.
    pub fn fmax(&self) -> f64 {
        self.forces.iter().map(|f| f.norm()).fold(0.0, f64::max)
    }

    pub fn forces_flat(&self) -> Vec<f64> {
        self.forces.iter().flat_map(|f| [f.x, f.y, f.z]).collect()
    }

    pub(crate) fn check(self, n_atoms: usize) -> Result<Self, CalcError> {
        if self.forces.len() != n_atoms {
            return Err(CalcError::ShapeMismatch { expected: n_atoms, got: self.forces.len() });
        }
        if !self.energy.is_finite() || self.forces.iter().any(|f| !f.iter().all(|x| x.is_finite())) {
            return Err(CalcError::NonFinite);
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CalculatorStats {
    pub total_calls: u64,
}

/// Anything that can produce energies and forces for a structure.
pub trait Calculator: Send + Sync {
    fn evaluate(&self, s: &Structure) -> Result<CalcResult, CalcError>;
    fn stats(&self) -> CalculatorStats;
}

impl<T: Calculator + ?Sized> Calculator for &T {
    fn evaluate(&self, s: &Structure) -> Result<CalcResult, CalcError> {
        (**self).evaluate(s)
    }
    fn stats(&self) -> CalculatorStats {
        (**self).stats()
    }
}

impl<T: Calculator + ?Sized> Calculator for Box<T> {
    fn evaluate(&self, s: &Structure) -> Result<CalcResult, CalcError> {
        (**self).evaluate(s)
    }
    fn stats(&self) -> CalculatorStats {
        (**self).stats()
    }
}

impl<T: Calculator + ?Sized> Calculator for std::sync::Arc<T> {
    fn evaluate(&self, s: &Structure) -> Result<CalcResult, CalcError> {
        (**self).evaluate(s)
    }
    fn stats(&self) -> CalculatorStats {
        (**self).stats()
    }
}

/// Monotone call counter shared by calculator implementations.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn stats(&self) -> CalculatorStats {
        CalculatorStats { total_calls: self.0.load(Ordering::Relaxed) }
    }
}

/// Wraps a calculator and counts only the calls made through this wrapper.
pub struct Counted<C> {
    inner: C,
    calls: CallCounter,
}

impl<C: Calculator> Counted<C> {
    pub fn new(inner: C) -> Self {
        Self { inner, calls: CallCounter::default() }
    }

    pub fn calls(&self) -> u64 {
        self.calls.stats().total_calls
    }
}

impl<C: Calculator> Calculator for Counted<C> {
    fn evaluate(&self, s: &Structure) -> Result<CalcResult, CalcError> {
        self.calls.bump();
        self.inner.evaluate(s)
    }
    fn stats(&self) -> CalculatorStats {
        self.calls.stats()
    }
}
