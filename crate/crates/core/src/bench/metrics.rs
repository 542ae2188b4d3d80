use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::optimizers::RelaxationReport;

pub const METRICS_HEADER: &str = "method,T_mean,T_se,N_mean,N_se,C_mean,C_se,P_F";
pub const TRACES_HEADER: &str = "method,step,mean_energy,n_runs";
pub const HISTOGRAM_HEADER: &str = "method,bin,lower,upper,count";

/// Summary of one method on one test set. Means and standard errors are over
/// successful runs; `p_f` is the failure percentage over all runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub runs: usize,
    pub successes: usize,
    /// `None` when timing is disabled.
    pub t_mean: Option<f64>,
    pub t_se: Option<f64>,
    pub n_mean: f64,
    pub n_se: f64,
    pub c_mean: f64,
    pub c_se: f64,
    pub p_f: f64,
}

/// Mean and standard error (sample standard deviation over √n). Both are NaN
/// for an empty sample; the error is NaN for a single value.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn num(x: f64, prec: usize) -> String {
    if x.is_finite() {
        format!("{x:.prec$}")
    } else {
        "NA".into()
    }
}

impl MetricsRow {
    pub fn from_reports(method: &str, reports: &[RelaxationReport], timing: bool) -> Self {
        let ok: Vec<&RelaxationReport> = reports.iter().filter(|r| r.success).collect();
        let col = |f: &dyn Fn(&RelaxationReport) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<_>>();
        let (t_mean, t_se) = mean_se(&col(&|r| r.wall_time));
        let (n_mean, n_se) = mean_se(&col(&|r| r.steps as f64));
        let (c_mean, c_se) = mean_se(&col(&|r| r.energy_calls as f64));
        let p_f = if reports.is_empty() {
            f64::NAN
        } else {
            100.0 * (reports.len() - ok.len()) as f64 / reports.len() as f64
        };
        Self {
            method: method.to_string(),
            runs: reports.len(),
            successes: ok.len(),
            t_mean: timing.then_some(t_mean),
            t_se: timing.then_some(t_se),
            n_mean,
            n_se,
            c_mean,
            c_se,
            p_f,
        }
    }

    /// One CSV line matching [`METRICS_HEADER`], without a trailing newline.
    pub fn csv(&self) -> String {
        let t = |x: Option<f64>| x.map_or_else(|| "NA".into(), |v| num(v, 6));
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            t(self.t_mean),
            t(self.t_se),
            num(self.n_mean, 3),
            num(self.n_se, 3),
            num(self.c_mean, 3),
            num(self.c_se, 3),
            num(self.p_f, 2)
        )
    }
}

/// Mean energy per step over the successful runs of each method. A run that
/// converged early contributes its final energy to every later step. Methods
/// without a successful run are left out with a warning.
pub fn energy_traces(methods: &[(String, Vec<RelaxationReport>)]) -> String {
    let mut out = format!("{TRACES_HEADER}\n");
    for (name, reports) in methods {
        let ok: Vec<&[f64]> =
            reports.iter().filter(|r| r.success && !r.energy_trace.is_empty()).map(|r| r.energy_trace.as_slice()).collect();
        if ok.is_empty() {
            log::warn!("{name}: no successful runs, trace omitted");
            continue;
        }
        let len = ok.iter().map(|t| t.len()).max().unwrap_or(0);
        for step in 0..len {
            let sum: f64 = ok.iter().map(|t| t[step.min(t.len() - 1)]).sum();
            let _ = writeln!(out, "{name},{step},{},{}", sum / ok.len() as f64, ok.len());
        }
    }
    out
}

/// Histogram of final energies of successful runs, on bins shared by all
/// methods and spanning the observed range.
pub fn minima_histogram(methods: &[(String, Vec<RelaxationReport>)], bins: usize) -> String {
    let bins = bins.max(1);
    let finals = |rs: &[RelaxationReport]| {
        rs.iter().filter(|r| r.success && r.final_energy.is_finite()).map(|r| r.final_energy).collect::<Vec<_>>()
    };
    let all: Vec<f64> = methods.iter().flat_map(|(_, rs)| finals(rs)).collect();
    let mut out = format!("{HISTOGRAM_HEADER}\n");
    if all.is_empty() {
        return out;
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    for (name, rs) in methods {
        let mut counts = vec![0usize; bins];
        for e in finals(rs) {
            let b = if width > 0.0 { (((e - lo) / width) as usize).min(bins - 1) } else { 0 };
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let lower = lo + width * b as f64;
            let upper = if b + 1 == bins { hi } else { lo + width * (b + 1) as f64 };
            let _ = writeln!(out, "{name},{b},{lower},{upper},{c}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_error_of_small_samples() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert!(mean_se(&[]).0.is_nan());
        let (m1, se1) = mean_se(&[7.0]);
        assert_eq!(m1, 7.0);
        assert!(se1.is_nan());
    }

    #[test]
    fn missing_values_print_as_na() {
        assert_eq!(num(f64::NAN, 3), "NA");
        assert_eq!(num(1.0 / 3.0, 3), "0.333");
    }
}
