//! Force-shifted Lennard-Jones lattice sums.
//!
//! `V_fs(r) = V(r) - V(rc) - (r - rc) V'(rc)` for `r < rc`, zero beyond, with
//! `V(r) = 4 eps [(sigma/r)^12 - (sigma/r)^6]`. Value and first derivative
//! both vanish at the cutoff, so forces are continuous.

use crate::crystal::{for_each_image_within, Structure, Vec3};

use super::{CalcError, CalcResult, Calculator, CalculatorStats, CallCounter};

/// Default cutoff in units of the largest sigma present in a structure.
pub const DEFAULT_CUTOFF_FACTOR: f64 = 2.5;

/// Atoms closer than this are treated as overlapping.
const OVERLAP_DIST: f64 = 1e-6;

fn lj(r: f64, sigma: f64, epsilon: f64) -> f64 {
    let x6 = (sigma / r).powi(6);
    4.0 * epsilon * (x6 * x6 - x6)
}

fn lj_deriv(r: f64, sigma: f64, epsilon: f64) -> f64 {
    let x6 = (sigma / r).powi(6);
    -24.0 * epsilon / r * (2.0 * x6 * x6 - x6)
}

/// Force-shifted pair energy in eV.
pub fn pair_energy(r: f64, sigma: f64, epsilon: f64, cutoff: f64) -> f64 {
    if r >= cutoff {
        return 0.0;
    }
    lj(r, sigma, epsilon) - lj(cutoff, sigma, epsilon) - (r - cutoff) * lj_deriv(cutoff, sigma, epsilon)
}

/// dV_fs/dr in eV/Å.
pub fn pair_derivative(r: f64, sigma: f64, epsilon: f64, cutoff: f64) -> f64 {
    if r >= cutoff {
        return 0.0;
    }
    lj_deriv(r, sigma, epsilon) - lj_deriv(cutoff, sigma, epsilon)
}

/// Cross-species (sigma, epsilon).
pub fn lorentz_berthelot(s1: f64, e1: f64, s2: f64, e2: f64) -> (f64, f64) {
    (0.5 * (s1 + s2), (e1 * e2).sqrt())
}

#[derive(Debug, Default)]
pub struct LennardJones {
    cutoff: Option<f64>,
    calls: CallCounter,
}

// precomputed shift terms for one species pair
#[derive(Clone, Copy)]
struct PairParams {
    sigma: f64,
    epsilon: f64,
    v_c: f64,
    dv_c: f64,
}

impl PairParams {
    fn new(sigma: f64, epsilon: f64, rc: f64) -> Self {
        Self { sigma, epsilon, v_c: lj(rc, sigma, epsilon), dv_c: lj_deriv(rc, sigma, epsilon) }
    }

    #[inline]
    fn energy_and_deriv(&self, r: f64, rc: f64) -> (f64, f64) {
        let x6 = (self.sigma / r).powi(6);
        let x12 = x6 * x6;
        let v = 4.0 * self.epsilon * (x12 - x6);
        let dv = -24.0 * self.epsilon / r * (2.0 * x12 - x6);
        (v - self.v_c - (r - rc) * self.dv_c, dv - self.dv_c)
    }
}

impl LennardJones {
    /// Cutoff of `2.5 * max sigma` among the species present.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_cutoff(cutoff: f64) -> Self {
        Self { cutoff: Some(cutoff), calls: CallCounter::default() }
    }

    pub fn cutoff_for(&self, s: &Structure) -> f64 {
        self.cutoff.unwrap_or_else(|| {
            DEFAULT_CUTOFF_FACTOR * s.species().iter().map(|sp| sp.lj_sigma).fold(0.0, f64::max)
        })
    }

    fn compute(&self, s: &Structure) -> Result<CalcResult, CalcError> {
        let rc = self.cutoff_for(s);
        let species = s.species();
        let ns = species.len();
        let mut table = Vec::with_capacity(ns * ns);
        for a in species {
            for b in species {
                let (sig, eps) = lorentz_berthelot(a.lj_sigma, a.lj_epsilon, b.lj_sigma, b.lj_epsilon);
                table.push(PairParams::new(sig, eps, rc));
            }
        }

        let lattice = s.lattice();
        let frac = s.wrapped_frac_positions();
        let kinds = s.species_index();
        let n = frac.len();
        let mut energy = 0.0;
        let mut forces = vec![Vec3::zeros(); n];
        let mut overlap = None;

        for i in 0..n {
            let mut fi = Vec3::zeros();
            let mut ei = 0.0;
            for j in 0..n {
                let pp = table[kinds[i] * ns + kinds[j]];
                let df = frac[j] - frac[i];
                for_each_image_within(lattice, &df, rc, |offset, rel, r| {
                    if i == j && offset == [0, 0, 0] {
                        return;
                    }
                    if r < OVERLAP_DIST {
                        overlap.get_or_insert(CalcError::AtomicOverlap { i, j, dist: r });
                        return;
                    }
                    let (v, dv) = pp.energy_and_deriv(r, rc);
                    // every unordered pair is visited twice
                    ei += 0.5 * v;
                    fi += rel * (dv / r);
                });
            }
            energy += ei;
            forces[i] = fi;
        }
        if let Some(e) = overlap {
            return Err(e);
        }
        CalcResult { energy, forces }.check(n)
    }
}

impl Calculator for LennardJones {
    fn evaluate(&self, s: &Structure) -> Result<CalcResult, CalcError> {
        self.calls.bump();
        self.compute(s)
    }

    fn stats(&self) -> CalculatorStats {
        self.calls.stats()
    }
}
