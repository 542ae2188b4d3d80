use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CrystalError;

/// A chemical species with the length/energy scales used by the built-in
/// pair potential and the covalent radius fed to the learned optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Species {
    pub symbol: String,
    /// Å
    pub covalent_radius: f64,
    /// Å
    pub lj_sigma: f64,
    /// eV
    pub lj_epsilon: f64,
}

impl Species {
    pub fn new(symbol: impl Into<String>, covalent_radius: f64, lj_sigma: f64, lj_epsilon: f64) -> Self {
        Self { symbol: symbol.into(), covalent_radius, lj_sigma, lj_epsilon }
    }

    pub fn validate(&self) -> Result<(), CrystalError> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if self.symbol.is_empty() || self.symbol.chars().any(char::is_whitespace) {
            return Err(CrystalError::InvalidStructure(format!("bad species symbol '{}'", self.symbol)));
        }
        if !(ok(self.covalent_radius) && ok(self.lj_sigma) && ok(self.lj_epsilon)) {
            return Err(CrystalError::InvalidStructure(format!(
                "species '{}' needs positive covalent_radius, sigma and epsilon",
                self.symbol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    sigma: f64,
    epsilon: f64,
    covalent_radius: f64,
}

/// Symbol -> species lookup.
///
/// The parameter file is TOML with one table per symbol:
///
/// ```toml
/// [Ar]
/// sigma = 3.4
/// epsilon = 0.0104
/// covalent_radius = 1.06
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesTable {
    entries: Vec<Species>,
}

impl Default for SpeciesTable {
    /// Argon plus two synthetic species used for multi-species tests.
    fn default() -> Self {
        Self {
            entries: vec![
                Species::new("Ar", 1.06, 3.4, 0.0104),
                Species::new("Xa", 1.20, 2.5, 0.20),
                Species::new("Xb", 1.50, 3.0, 0.10),
            ],
        }
    }
}

impl SpeciesTable {
    pub fn new(entries: Vec<Species>) -> Result<Self, CrystalError> {
        for (i, e) in entries.iter().enumerate() {
            e.validate()?;
            if entries[..i].iter().any(|o| o.symbol == e.symbol) {
                return Err(CrystalError::InvalidRequest(format!("duplicate species '{}'", e.symbol)));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, symbol: &str) -> Option<&Species> {
        self.entries.iter().find(|s| s.symbol == symbol)
    }

    pub fn entries(&self) -> &[Species] {
        &self.entries
    }

    pub fn parse_toml(text: &str) -> Result<Self, CrystalError> {
        let raw: BTreeMap<String, ParamEntry> =
            toml::from_str(text).map_err(|e| CrystalError::InvalidRequest(format!("parameter file: {e}")))?;
        Self::new(
            raw.into_iter()
                .map(|(sym, p)| Species::new(sym, p.covalent_radius, p.sigma, p.epsilon))
                .collect(),
        )
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for s in &self.entries {
            out.push_str(&format!(
                "[{}]\nsigma = {:?}\nepsilon = {:?}\ncovalent_radius = {:?}\n\n",
                s.symbol, s.lj_sigma, s.lj_epsilon, s.covalent_radius
            ));
        }
        out
    }
}
