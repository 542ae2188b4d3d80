//! Strong-Wolfe line search (bracketing followed by zoom with safeguarded
//! cubic interpolation).

use super::{Evaluation, StepError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WolfeParams {
    pub c1: f64,
    pub c2: f64,
    pub max_evals: usize,
}

impl Default for WolfeParams {
    fn default() -> Self {
        Self { c1: 1e-4, c2: 0.9, max_evals: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub alpha: f64,
    pub phi: f64,
    pub dphi: f64,
    pub eval: Evaluation,
}

#[derive(Debug)]
pub enum LineSearchOutcome {
    /// Point satisfying both strong Wolfe conditions.
    Converged(Trial),
    /// Evaluation budget exhausted or no progress possible; carries the
    /// lowest trial that decreased the objective, if any.
    Failed { best: Option<Trial>, evals: usize },
}

struct Search<'a, F> {
    phi_at: &'a mut F,
    phi0: f64,
    dphi0: f64,
    p: WolfeParams,
    evals: usize,
    best: Option<Trial>,
}

impl<F> Search<'_, F>
where
    F: FnMut(f64) -> Result<(f64, f64, Evaluation), StepError>,
{
    fn trial(&mut self, alpha: f64) -> Result<Trial, StepError> {
        let (phi, dphi, eval) = (self.phi_at)(alpha)?;
        self.evals += 1;
        let t = Trial { alpha, phi, dphi, eval };
        if phi < self.phi0 && self.best.as_ref().is_none_or(|b| phi < b.phi) {
            self.best = Some(t.clone());
        }
        Ok(t)
    }

    fn armijo(&self, alpha: f64, phi: f64) -> bool {
        phi <= self.phi0 + self.p.c1 * alpha * self.dphi0
    }

    fn curvature(&self, dphi: f64) -> bool {
        dphi.abs() <= -self.p.c2 * self.dphi0
    }

    fn fail(&mut self) -> LineSearchOutcome {
        LineSearchOutcome::Failed { best: self.best.take(), evals: self.evals }
    }

    fn zoom(
        &mut self,
        (mut a_lo, mut phi_lo, mut dphi_lo): (f64, f64, f64),
        (mut a_hi, mut phi_hi, mut dphi_hi): (f64, f64, f64),
    ) -> Result<LineSearchOutcome, StepError> {
        loop {
            if self.evals >= self.p.max_evals {
                return Ok(self.fail());
            }
            let (lo, hi) = (a_lo.min(a_hi), a_lo.max(a_hi));
            let width = hi - lo;
            if width <= f64::EPSILON * hi.max(1.0) {
                return Ok(self.fail());
            }
            let a = cubic_min(a_lo, phi_lo, dphi_lo, a_hi, phi_hi, dphi_hi)
                .filter(|a| *a >= lo + 0.1 * width && *a <= hi - 0.1 * width)
                .unwrap_or(0.5 * (lo + hi));
            let t = self.trial(a)?;
            let (phi, dphi) = (t.phi, t.dphi);
            if !self.armijo(a, phi) || phi >= phi_lo {
                (a_hi, phi_hi, dphi_hi) = (a, phi, dphi);
            } else {
                if self.curvature(dphi) {
                    return Ok(LineSearchOutcome::Converged(t));
                }
                if dphi * (a_hi - a_lo) >= 0.0 {
                    (a_hi, phi_hi, dphi_hi) = (a_lo, phi_lo, dphi_lo);
                }
                (a_lo, phi_lo, dphi_lo) = (a, phi, dphi);
            }
        }
    }
}

/// Minimizer of the cubic interpolating two points with slopes.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let x = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    x.is_finite().then_some(x)
}

/// Searches `alpha` in `(0, alpha_max]` starting from `alpha0`.
///
/// `phi_at(alpha)` returns the objective, its directional derivative and the
/// underlying evaluation. `dphi0` must be negative.
pub fn strong_wolfe<F>(
    phi_at: &mut F,
    phi0: f64,
    dphi0: f64,
    alpha0: f64,
    alpha_max: f64,
    params: WolfeParams,
) -> Result<LineSearchOutcome, StepError>
where
    F: FnMut(f64) -> Result<(f64, f64, Evaluation), StepError>,
{
    debug_assert!(dphi0 < 0.0);
    let mut s = Search { phi_at, phi0, dphi0, p: params, evals: 0, best: None };
    let (mut a_prev, mut phi_prev, mut dphi_prev) = (0.0, phi0, dphi0);
    let mut a = alpha0.min(alpha_max);
    let mut first = true;
    loop {
        if s.evals >= s.p.max_evals {
            return Ok(s.fail());
        }
        let t = s.trial(a)?;
        let (phi, dphi) = (t.phi, t.dphi);
        if !s.armijo(a, phi) || (!first && phi >= phi_prev) {
            return s.zoom((a_prev, phi_prev, dphi_prev), (a, phi, dphi));
        }
        if s.curvature(dphi) {
            return Ok(LineSearchOutcome::Converged(t));
        }
        if dphi >= 0.0 {
            return s.zoom((a, phi, dphi), (a_prev, phi_prev, dphi_prev));
        }
        if a >= alpha_max {
            return Ok(s.fail());
        }
        (a_prev, phi_prev, dphi_prev) = (a, phi, dphi);
        a = (2.0 * a).min(alpha_max);
        first = false;
    }
}
