use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::{MetricsRow, METRICS_HEADER};
use super::{load_set, BenchError, Manifest};
use crate::crystal::{SpeciesTable, Structure};
use crate::env::{relax_macs, EnvConfig};
use crate::extcalc::CalculatorSpec;
use crate::optimizers::{relax, Method, RelaxationReport, TerminationPolicy};
use crate::sac::{Checkpoint, SacPolicy};

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub out_dir: PathBuf,
    /// Record wall times; off makes every output byte-reproducible.
    pub timing: bool,
    /// Worker threads, each with its own calculator.
    pub jobs: usize,
    /// Replaces the methods listed in the manifest.
    pub methods: Option<Vec<Method>>,
    /// Replaces the calculator listed in the manifest.
    pub calculator: Option<CalculatorSpec>,
}

impl BenchOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into(), timing: true, jobs: 1, methods: None, calculator: None }
    }
}

#[derive(Debug, Clone)]
pub struct SetResult {
    pub label: String,
    pub rows: Vec<MetricsRow>,
    /// Reports per method, in manifest order.
    pub reports: Vec<(String, Vec<RelaxationReport>)>,
}

fn report_dir(out: &Path, label: &str, method: &str) -> PathBuf {
    out.join("reports").join(label).join(method)
}

struct Job<'a> {
    method: Method,
    calc: &'a CalculatorSpec,
    tp: &'a TerminationPolicy,
    policy: Option<&'a (SacPolicy, EnvConfig)>,
}

impl Job<'_> {
    fn run_all(&self, structures: &[Structure], jobs: usize) -> Result<Vec<RelaxationReport>, BenchError> {
        let jobs = jobs.clamp(1, structures.len().max(1));
        if jobs == 1 {
            return self.run_stride(structures, 0, 1).map(|v| v.into_iter().map(|(_, r)| r).collect());
        }
        let parts: Vec<Result<Vec<(usize, RelaxationReport)>, BenchError>> = std::thread::scope(|scope| {
            let handles: Vec<_> =
                (0..jobs).map(|w| scope.spawn(move || self.run_stride(structures, w, jobs))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut slots: Vec<Option<RelaxationReport>> = vec![None; structures.len()];
        for part in parts {
            for (i, r) in part? {
                slots[i] = Some(r);
            }
        }
        Ok(slots.into_iter().map(|r| r.expect("every structure relaxed")).collect())
    }

    fn run_stride(&self, structures: &[Structure], first: usize, stride: usize) -> Result<Vec<(usize, RelaxationReport)>, BenchError> {
        let calc = self.calc.build()?;
        let mut policy = self.policy.map(|(p, cfg)| (p.clone(), cfg));
        let mut out = vec![];
        for i in (first..structures.len()).step_by(stride) {
            let s = &structures[i];
            let r = match (&mut policy, self.method) {
                (Some((p, cfg)), Method::Macs) => relax_macs(s, p, cfg, calc.as_ref(), self.tp)?,
                _ => relax(s, self.method, calc.as_ref(), self.tp)?,
            };
            out.push((i, r));
        }
        Ok(out)
    }
}

/// Relaxes every structure of the test set in `testset` with every method,
/// writing per-run JSON reports and one metrics CSV per size set.
pub fn run_bench(
    testset: &Path,
    table: &SpeciesTable,
    checkpoint: Option<&Checkpoint>,
    opts: &BenchOptions,
) -> Result<Vec<SetResult>, BenchError> {
    let manifest = Manifest::load(testset)?;
    let spec = &manifest.spec;
    let methods = opts.methods.clone().unwrap_or_else(|| spec.methods.clone());
    let calc = match &opts.calculator {
        Some(c) => c.clone(),
        None => spec.calculator.parse().map_err(BenchError::Spec)?,
    };
    let policy = match (methods.contains(&Method::Macs), checkpoint) {
        (true, None) => return Err(BenchError::MissingCheckpoint),
        (true, Some(ck)) => Some((SacPolicy::from_checkpoint(ck, &ck.env)?, ck.env.clone())),
        (false, _) => None,
    };
    let mut results = vec![];
    for set in &manifest.sets {
        let structures = load_set(testset, set, table)?;
        let mut rows = vec![];
        let mut reports = vec![];
        for &method in &methods {
            let job = Job { method, calc: &calc, tp: &spec.termination, policy: policy.as_ref() };
            let mut rs = job.run_all(&structures, opts.jobs)?;
            if !opts.timing {
                rs = rs.iter().map(RelaxationReport::without_timing).collect();
            }
            let dir = report_dir(&opts.out_dir, &set.label, method.name());
            fs::create_dir_all(&dir)?;
            for (i, r) in rs.iter().enumerate() {
                fs::write(dir.join(format!("{i:04}.json")), serde_json::to_string(r)? + "\n")?;
            }
            let row = MetricsRow::from_reports(method.name(), &rs, opts.timing);
            log::info!("{} {}: {}", set.label, method, row.csv());
            rows.push(row);
            reports.push((method.name().to_string(), rs));
        }
        let mut csv = format!("{METRICS_HEADER}\n");
        for r in &rows {
            csv.push_str(&r.csv());
            csv.push('\n');
        }
        fs::write(opts.out_dir.join(format!("metrics_{}.csv", set.label)), csv)?;
        results.push(SetResult { label: set.label.clone(), rows, reports });
    }
    Ok(results)
}

/// Reads back the reports written by [`run_bench`] for one set and method.
pub fn load_reports(out_dir: &Path, label: &str, method: &str) -> Result<Vec<RelaxationReport>, BenchError> {
    let dir = report_dir(out_dir, label, method);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files.iter().map(|p| Ok(serde_json::from_slice(&fs::read(p)?)?)).collect()
}
