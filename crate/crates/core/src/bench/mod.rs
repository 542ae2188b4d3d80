//! Benchmarks: reproducible test sets, relaxation runs over every method,
//! summary metrics and plot-ready CSV.
//!
//! A test set directory looks like
//!
//! ```text
//! manifest.json
//! n8/0000.xyz
//! n8/0001.xyz
//! n12/0000.xyz
//! ```
//!
//! and a benchmark output directory holds one `metrics_<label>.csv` per size
//! plus `reports/<label>/<method>/<index>.json`.

mod metrics;
mod run;

pub use metrics::{energy_traces, minima_histogram, MetricsRow, HISTOGRAM_HEADER, METRICS_HEADER, TRACES_HEADER};
pub use run::{load_reports, run_bench, BenchOptions, SetResult};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::{random_structure, CrystalError, RandomStructureRequest, SpeciesTable, Structure};
use crate::env::EnvError;
use crate::extcalc::BridgeError;
use crate::optimizers::{Method, RelaxError, TerminationPolicy};
use crate::sac::SacError;
use crate::xyz::{read_xyz, write_xyz, XyzError};

pub const MANIFEST_FORMAT: &str = "periopt-testset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark spec: {0}")]
    Spec(String),
    #[error("MACS requires a policy checkpoint")]
    MissingCheckpoint,
    #[error("test set: {0}")]
    TestSet(String),
    #[error("{path}: {source}")]
    Xyz { path: PathBuf, source: XyzError },
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error(transparent)]
    Relax(#[from] RelaxError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Calculator(#[from] BridgeError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    /// Atom count per species at the base size K.
    pub composition: BTreeMap<String, usize>,
    /// Set sizes as multiples of K; every scaled count must be an integer.
    pub size_factors: Vec<f64>,
    pub volume_per_atom: f64,
    pub min_dist: f64,
    /// Structures per size.
    pub set_size: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// `lj` or `cmd:<command>`.
    pub calculator: String,
    pub termination: TerminationPolicy,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            composition: BTreeMap::from([("Ar".to_string(), 8)]),
            size_factors: vec![1.0, 1.5, 2.0],
            volume_per_atom: 50.0,
            min_dist: 3.0,
            set_size: 300,
            methods: Method::CLASSICAL.to_vec(),
            seed: 0,
            calculator: "lj".into(),
            termination: TerminationPolicy::default(),
        }
    }
}

impl BenchmarkSpec {
    /// Argon, 8/12/16 atoms, 50 structures each.
    pub fn desk() -> Self {
        Self { set_size: 50, ..Default::default() }
    }

    /// Argon, 8/12/16 atoms, 300 structures each.
    pub fn full_scale() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Spec(m));
        if self.set_size == 0 {
            return bad("set_size must be at least 1".into());
        }
        if self.composition.is_empty() || self.composition.values().all(|n| *n == 0) {
            return bad("composition is empty".into());
        }
        if self.size_factors.is_empty() {
            return bad("no sizes given".into());
        }
        if !(self.volume_per_atom > 0.0 && self.min_dist > 0.0) {
            return bad("volume_per_atom and min_dist must be positive".into());
        }
        if self.methods.is_empty() {
            return bad("no methods given".into());
        }
        self.calculator.parse::<crate::extcalc::CalculatorSpec>().map_err(BenchError::Spec)?;
        self.termination.validate()?;
        for f in &self.size_factors {
            self.scaled(*f)?;
        }
        Ok(())
    }

    /// Composition at `factor` times the base size.
    pub fn scaled(&self, factor: f64) -> Result<BTreeMap<String, usize>, BenchError> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(BenchError::Spec(format!("size factor {factor} must be positive")));
        }
        self.composition
            .iter()
            .map(|(sym, n)| {
                let x = *n as f64 * factor;
                if (x - x.round()).abs() > 1e-9 {
                    Err(BenchError::Spec(format!("{n} {sym} times {factor} is not a whole number")))
                } else {
                    Ok((sym.clone(), x.round() as usize))
                }
            })
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let spec: Self = toml::from_str(text).map_err(|e| BenchError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

/// Seed of structure `index` in size set `set`.
pub fn structure_seed(base: u64, set: usize, index: usize) -> u64 {
    let mut z = base ^ ((set as u64) << 40) ^ index as u64;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the test set directory.
    pub file: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSet {
    pub label: String,
    pub n_atoms: usize,
    pub composition: BTreeMap<String, usize>,
    pub structures: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: BenchmarkSpec,
    pub sets: Vec<ManifestSet>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, BenchError> {
        let m: Self = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(BenchError::TestSet(format!("unsupported manifest {} v{}", m.format, m.version)));
        }
        Ok(m)
    }
}

/// Draws attempted per structure before a packing failure is reported.
pub const PACKING_REDRAWS: u64 = 100;

/// First structure that packs among seeds derived from `seed`, with the seed
/// that produced it.
pub fn draw_structure(req: &RandomStructureRequest, seed: u64) -> Result<(u64, Structure), CrystalError> {
    let mut last = None;
    for attempt in 0..PACKING_REDRAWS {
        let s_seed = if attempt == 0 { seed } else { structure_seed(seed, 0, attempt as usize) };
        match random_structure(req, s_seed) {
            Ok(s) => return Ok((s_seed, s)),
            Err(e @ CrystalError::PackingInfeasible { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one draw"))
}

/// Writes `set_size` random structures per size plus `manifest.json` into
/// `dir`, which is created if needed. A seed whose placement jams is replaced
/// by a derived one; the manifest records the seed actually used.
pub fn gen_testset(spec: &BenchmarkSpec, table: &SpeciesTable, dir: &Path) -> Result<Manifest, BenchError> {
    spec.validate()?;
    let mut sets = vec![];
    for (si, factor) in spec.size_factors.iter().enumerate() {
        let comp = spec.scaled(*factor)?;
        let n_atoms: usize = comp.values().sum();
        let label = format!("n{n_atoms}");
        if sets.iter().any(|s: &ManifestSet| s.label == label) {
            return Err(BenchError::Spec(format!("two sizes give {n_atoms} atoms")));
        }
        let species = comp
            .iter()
            .map(|(sym, n)| table.get(sym).cloned().map(|s| (s, *n)).ok_or(CrystalError::UnknownSpecies(sym.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let req = RandomStructureRequest::new(species, spec.volume_per_atom * n_atoms as f64, spec.min_dist);
        fs::create_dir_all(dir.join(&label))?;
        let mut structures = vec![];
        for i in 0..spec.set_size {
            let (seed, s) = draw_structure(&req, structure_seed(spec.seed, si, i))?;
            let file = format!("{label}/{i:04}.xyz");
            fs::write(dir.join(&file), write_xyz(&s, &[("seed", seed.to_string())]))?;
            structures.push(ManifestEntry { file, seed });
        }
        sets.push(ManifestSet { label, n_atoms, composition: comp, structures });
    }
    let manifest =
        Manifest { format: MANIFEST_FORMAT.into(), version: MANIFEST_VERSION, spec: spec.clone(), sets };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Structures of one size set, in manifest order.
pub fn load_set(dir: &Path, set: &ManifestSet, table: &SpeciesTable) -> Result<Vec<Structure>, BenchError> {
    set.structures
        .iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let (s, _) = read_xyz(&fs::read_to_string(&path)?, table).map_err(|source| BenchError::Xyz { path, source })?;
            if s.n_atoms() != set.n_atoms {
                return Err(BenchError::TestSet(format!("{} has {} atoms, expected {}", e.file, s.n_atoms(), set.n_atoms)));
            }
            Ok(s)
        })
        .collect()
}
