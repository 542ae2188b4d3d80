//! The classical optimizers, each as a stepper over flat 3N coordinate
//! vectors. Forces are negative energy gradients.

use nalgebra::{DMatrix, DVector};

use super::linesearch::{strong_wolfe, LineSearchOutcome, Trial, WolfeParams};
use super::{Evaluation, StepError};

/// Per-atom displacement cap in Å shared by BFGS, BFGSLS, FIRE and MDMin.
pub const DEFAULT_MAX_STEP: f64 = 0.2;

/// Result of one committed step: the new coordinates and, when the method
/// already evaluated them, their energy and forces.
pub struct StepOutput {
    pub x: Vec<f64>,
    pub eval: Option<Evaluation>,
}

pub type EvalFn<'a> = dyn FnMut(&[f64]) -> Result<Evaluation, StepError> + 'a;

pub trait Stepper {
    fn step(&mut self, x: &[f64], cur: &Evaluation, eval: &mut EvalFn<'_>) -> Result<StepOutput, StepError>;
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Largest per-atom norm of a flat 3N vector.
pub fn max_atom_norm(v: &[f64]) -> f64 {
    v.chunks_exact(3).map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()).fold(0.0, f64::max)
}

/// Uniformly rescales `dr` so that no atom moves more than `max_step`.
pub fn cap_per_atom(dr: &mut [f64], max_step: f64) {
    let m = max_atom_norm(dr);
    if m > max_step {
        let k = max_step / m;
        dr.iter_mut().for_each(|d| *d *= k);
    }
}

fn add(x: &[f64], dr: &[f64]) -> Vec<f64> {
    x.iter().zip(dr).map(|(a, b)| a + b).collect()
}

fn fixed(x: &[f64], dr: &[f64]) -> Result<StepOutput, StepError> {
    if dr.iter().any(|d| !d.is_finite()) {
        return Err(StepError::NonFinite);
    }
    Ok(StepOutput { x: add(x, dr), eval: None })
}

/// Quasi-Newton with a Hessian model, no line search.
#[derive(Debug, Clone)]
pub struct Bfgs {
    pub max_step: f64,
    pub alpha: f64,
    h: Option<DMatrix<f64>>,
    prev: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for Bfgs {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_STEP, 70.0)
    }
}

impl Bfgs {
    pub fn new(max_step: f64, alpha: f64) -> Self {
        Self { max_step, alpha, h: None, prev: None }
    }

    fn update(h: &mut DMatrix<f64>, x: &[f64], f: &[f64], x0: &[f64], f0: &[f64]) {
        let dr = DVector::from_iterator(x.len(), x.iter().zip(x0).map(|(a, b)| a - b));
        if dr.amax() < 1e-7 {
            return;
        }
        let df = DVector::from_iterator(f.len(), f.iter().zip(f0).map(|(a, b)| a - b));
        let a = dr.dot(&df);
        let dg = &*h * &dr;
        let b = dr.dot(&dg);
        if a == 0.0 || b == 0.0 {
            return;
        }
        *h -= &df * df.transpose() / a + &dg * dg.transpose() / b;
    }

    /// Displacement for the current point, updating the Hessian model.
    pub fn displacement(&mut self, x: &[f64], f: &[f64]) -> Vec<f64> {
        let n = x.len();
        let h = self.h.get_or_insert_with(|| DMatrix::identity(n, n) * self.alpha);
        if let Some((x0, f0)) = &self.prev {
            Self::update(h, x, f, x0, f0);
        }
        let eig = h.clone().symmetric_eigen();
        let fv = DVector::from_column_slice(f);
        let proj = eig.eigenvectors.transpose() * fv;
        let scaled = proj.zip_map(&eig.eigenvalues, |p, w| p / w.abs());
        let mut dr: Vec<f64> = (eig.eigenvectors * scaled).iter().copied().collect();
        cap_per_atom(&mut dr, self.max_step);
        self.prev = Some((x.to_vec(), f.to_vec()));
        dr
    }
}

impl Stepper for Bfgs {
    fn step(&mut self, x: &[f64], cur: &Evaluation, _: &mut EvalFn<'_>) -> Result<StepOutput, StepError> {
        let dr = self.displacement(x, &cur.forces);
        fixed(x, &dr)
    }
}

/// Fast inertial relaxation engine with unit masses.
#[derive(Debug, Clone)]
pub struct Fire {
    pub max_step: f64,
    pub dt_max: f64,
    pub n_min: usize,
    pub f_inc: f64,
    pub f_dec: f64,
    pub a_start: f64,
    pub f_a: f64,
    dt: f64,
    a: f64,
    n_pos: usize,
    v: Option<Vec<f64>>,
}

impl Default for Fire {
    fn default() -> Self {
        Self {
            max_step: DEFAULT_MAX_STEP,
            dt_max: 1.0,
            n_min: 5,
            f_inc: 1.1,
            f_dec: 0.5,
            a_start: 0.1,
            f_a: 0.99,
            dt: 0.1,
            a: 0.1,
            n_pos: 0,
            v: None,
        }
    }
}

impl Fire {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn displacement(&mut self, f: &[f64]) -> Vec<f64> {
        let v = match self.v.take() {
            None => vec![0.0; f.len()],
            Some(mut v) => {
                let vf = dot(&v, f);
                if vf > 0.0 {
                    let (vn, fn_) = (norm(&v), norm(f));
                    for (vi, fi) in v.iter_mut().zip(f) {
                        *vi = (1.0 - self.a) * *vi + self.a * fi / fn_ * vn;
                    }
                    if self.n_pos > self.n_min {
                        self.dt = (self.dt * self.f_inc).min(self.dt_max);
                        self.a *= self.f_a;
                    }
                    self.n_pos += 1;
                } else {
                    v.iter_mut().for_each(|x| *x = 0.0);
                    self.a = self.a_start;
                    self.dt *= self.f_dec;
                    self.n_pos = 0;
                }
                v
            }
        };
        let v: Vec<f64> = v.iter().zip(f).map(|(vi, fi)| vi + self.dt * fi).collect();
        let mut dr: Vec<f64> = v.iter().map(|vi| self.dt * vi).collect();
        cap_per_atom(&mut dr, self.max_step);
        self.v = Some(v);
        dr
    }
}

impl Stepper for Fire {
    fn step(&mut self, x: &[f64], cur: &Evaluation, _: &mut EvalFn<'_>) -> Result<StepOutput, StepError> {
        let dr = self.displacement(&cur.forces);
        fixed(x, &dr)
    }
}

/// Velocity Verlet with unit masses that keeps only the velocity component
/// along the force, and drops it entirely when it points uphill.
#[derive(Debug, Clone)]
pub struct MdMin {
    pub dt: f64,
    pub max_step: f64,
    v: Option<Vec<f64>>,
    f0: Vec<f64>,
}

impl Default for MdMin {
    fn default() -> Self {
        Self { dt: 0.2, max_step: DEFAULT_MAX_STEP, v: None, f0: Vec::new() }
    }
}

impl MdMin {
    pub fn velocity(&self) -> Option<&[f64]> {
        self.v.as_deref()
    }

    pub fn displacement(&mut self, f: &[f64]) -> Vec<f64> {
        let v = match self.v.take() {
            None => vec![0.0; f.len()],
            Some(mut v) => {
                for ((vi, fi), f0i) in v.iter_mut().zip(f).zip(&self.f0) {
                    *vi += 0.5 * self.dt * (fi + f0i);
                }
                let vf = dot(&v, f);
                let ff = dot(f, f);
                if vf < 0.0 || ff == 0.0 {
                    v.iter_mut().for_each(|x| *x = 0.0);
                } else {
                    for (vi, fi) in v.iter_mut().zip(f) {
                        *vi = vf * fi / ff;
                    }
                }
                v
            }
        };
        self.f0 = f.to_vec();
        let mut dr: Vec<f64> = v.iter().zip(f).map(|(vi, fi)| self.dt * vi + 0.5 * self.dt * self.dt * fi).collect();
        cap_per_atom(&mut dr, self.max_step);
        self.v = Some(v);
        dr
    }
}

impl Stepper for MdMin {
    fn step(&mut self, x: &[f64], cur: &Evaluation, _: &mut EvalFn<'_>) -> Result<StepOutput, StepError> {
        let dr = self.displacement(&cur.forces);
        fixed(x, &dr)
    }
}

/// Runs the line search along `p` from `x`, returning the accepted trial or
/// the lowest decreasing one.
fn search_along(
    x: &[f64],
    cur: &Evaluation,
    p: &[f64],
    alpha0: f64,
    alpha_max: f64,
    params: WolfeParams,
    eval: &mut EvalFn<'_>,
) -> Result<(Option<Trial>, bool), StepError> {
    let dphi0 = -dot(&cur.forces, p);
    let mut phi_at = |a: f64| {
        let xa: Vec<f64> = x.iter().zip(p).map(|(xi, pi)| xi + a * pi).collect();
        let e = eval(&xa)?;
        Ok((e.energy, -dot(&e.forces, p), e))
    };
    Ok(match strong_wolfe(&mut phi_at, cur.energy, dphi0, alpha0, alpha_max, params)? {
        LineSearchOutcome::Converged(t) => (Some(t), true),
        LineSearchOutcome::Failed { best, .. } => (best, false),
    })
}

fn along(x: &[f64], p: &[f64], alpha: f64) -> Vec<f64> {
    x.iter().zip(p).map(|(xi, pi)| xi + alpha * pi).collect()
}

/// BFGS on the inverse Hessian with a strong-Wolfe line search.
#[derive(Debug, Clone)]
pub struct BfgsLineSearch {
    pub max_step: f64,
    pub alpha: f64,
    pub wolfe: WolfeParams,
    h_inv: Option<DMatrix<f64>>,
    prev: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for BfgsLineSearch {
    fn default() -> Self {
        Self { max_step: DEFAULT_MAX_STEP, alpha: 70.0, wolfe: WolfeParams::default(), h_inv: None, prev: None }
    }
}

impl BfgsLineSearch {
    fn reset(&mut self, n: usize) {
        self.h_inv = Some(DMatrix::identity(n, n) / self.alpha);
    }

    fn update(&mut self, x: &[f64], g: &[f64]) {
        let Some((x0, g0)) = &self.prev else { return };
        let n = x.len();
        let s = DVector::from_iterator(n, x.iter().zip(x0).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, g.iter().zip(g0).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy <= 1e-12 {
            return;
        }
        let h = self.h_inv.as_mut().expect("initialized");
        let rho = 1.0 / sy;
        let hy = &*h * &y;
        let yhy = y.dot(&hy);
        // H+ = H - rho (s hy^T + hy s^T) + (rho^2 y.Hy + rho) s s^T
        h.ger(-rho, &s, &hy, 1.0);
        h.ger(-rho, &hy, &s, 1.0);
        h.ger(rho * rho * yhy + rho, &s, &s, 1.0);
    }
}

impl Stepper for BfgsLineSearch {
    fn step(&mut self, x: &[f64], cur: &Evaluation, eval: &mut EvalFn<'_>) -> Result<StepOutput, StepError> {
        let n = x.len();
        let g: Vec<f64> = cur.forces.iter().map(|f| -f).collect();
        if self.h_inv.is_none() {
            self.reset(n);
        } else {
            self.update(x, &g);
        }
        let mut fresh = false;
        loop {
            let h = self.h_inv.as_ref().expect("initialized");
            let mut p: Vec<f64> = (-(h * DVector::from_column_slice(&g))).iter().copied().collect();
            if dot(&p, &g) >= 0.0 || p.iter().any(|v| !v.is_finite()) {
                self.reset(n);
                p = g.iter().map(|v| -v / self.alpha).collect();
                fresh = true;
            }
            let pmax = max_atom_norm(&p);
            if pmax == 0.0 {
                return Err(StepError::LineSearch("zero search direction".into()));
            }
            let alpha_max = self.max_step / pmax;
            let (best, _) = search_along(x, cur, &p, 1.0_f64.min(alpha_max), alpha_max, self.wolfe, eval)?;
            match best {
                Some(t) => {
                    self.prev = Some((x.to_vec(), g));
                    return Ok(StepOutput { x: along(x, &p, t.alpha), eval: Some(t.eval) });
                }
                None if !fresh => {
                    self.reset(n);
                    fresh = true;
                }
                None => return Err(StepError::LineSearch("no decrease along steepest descent".into())),
            }
        }
    }
}

/// Nonlinear conjugate gradients, Polak-Ribière with nonnegative beta.
#[derive(Debug, Clone)]
pub struct ConjugateGradient {
    pub wolfe: WolfeParams,
    p: Vec<f64>,
    g: Vec<f64>,
    old_old_energy: f64,
    iter: usize,
}

impl Default for ConjugateGradient {
    fn default() -> Self {
        Self {
            wolfe: WolfeParams { c1: 1e-4, c2: 0.4, max_evals: 10 },
            p: Vec::new(),
            g: Vec::new(),
            old_old_energy: f64::NAN,
            iter: 0,
        }
    }
}

impl Stepper for ConjugateGradient {
    fn step(&mut self, x: &[f64], cur: &Evaluation, eval: &mut EvalFn<'_>) -> Result<StepOutput, StepError> {
        let n = x.len();
        let g: Vec<f64> = cur.forces.iter().map(|f| -f).collect();
        let gnorm = norm(&g);
        let restart_due = self.iter > 0 && self.iter % n == 0;
        if self.iter == 0 {
            self.old_old_energy = cur.energy + 0.5 * gnorm;
        }
        if self.iter == 0 || restart_due || self.p.len() != n {
            self.p = g.iter().map(|v| -v).collect();
        } else {
            let beta = (dot(&g, &g) - dot(&g, &self.g)) / dot(&self.g, &self.g);
            let beta = if beta.is_finite() { beta.max(0.0) } else { 0.0 };
            for (pi, gi) in self.p.iter_mut().zip(&g) {
                *pi = -gi + beta * *pi;
            }
        }
        let mut dphi0 = dot(&g, &self.p);
        if dphi0 >= 0.0 {
            self.p = g.iter().map(|v| -v).collect();
            dphi0 = -gnorm * gnorm;
        }
        let guess = 1.01 * 2.0 * (cur.energy - self.old_old_energy) / dphi0;
        let alpha0 = if guess.is_finite() && guess > 0.0 { guess.min(1.0) } else { 1.0 };
        let (best, ok) = search_along(x, cur, &self.p, alpha0, f64::INFINITY, self.wolfe, eval)?;
        let t = best.ok_or_else(|| StepError::LineSearch("no decrease along search direction".into()))?;
        let x_new = along(x, &self.p, t.alpha);
        self.old_old_energy = cur.energy;
        self.g = g;
        self.iter += 1;
        if !ok {
            // next direction restarts from steepest descent
            self.iter = 0;
            self.old_old_energy = cur.energy + 0.5 * gnorm;
        }
        Ok(StepOutput { x: x_new, eval: Some(t.eval) })
    }
}
