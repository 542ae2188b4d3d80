//! Periodic structures: unit cell, species, atom positions and the geometry
//! queries built on top of them.
//!
//! Positions are always stored in Cartesian Å. Fractional coordinates are
//! derived on demand and never stored, so positions may drift outside the
//! cell during an optimization without any loss of correctness.

mod generate;
mod neighbors;
mod species;

pub use generate::{random_structure, random_structure_with_rng, RandomStructureRequest};
pub use neighbors::{for_each_image_within, k_nearest, min_periodic_distance, NeighborEntry, NeighborList};
pub use species::{Species, SpeciesTable};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Smallest admissible cell volume in Å³.
pub const MIN_CELL_VOLUME: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrystalError {
    #[error("degenerate lattice: determinant {0:.3e} (must exceed {MIN_CELL_VOLUME:e})")]
    DegenerateLattice(f64),
    #[error("invalid structure: {0}")]
    InvalidStructure(String),
    #[error("unknown species '{0}'")]
    UnknownSpecies(String),
    #[error("packing infeasible: could not place atom {atom} of {total} after {attempts} attempts")]
    PackingInfeasible { atom: usize, total: usize, attempts: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Unit cell given by three lattice vectors stored as matrix rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    matrix: Matrix3<f64>,
    // inverse of matrix^T, maps Cartesian to fractional coordinates
    cart_to_frac: Matrix3<f64>,
}

impl Lattice {
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self, CrystalError> {
        let matrix = Matrix3::from_fn(|r, c| rows[r][c]);
        let det = matrix.determinant();
        if !det.is_finite() || det <= MIN_CELL_VOLUME {
            return Err(CrystalError::DegenerateLattice(det));
        }
        let cart_to_frac = matrix
            .transpose()
            .try_inverse()
            .ok_or(CrystalError::DegenerateLattice(det))?;
        Ok(Self { matrix, cart_to_frac })
    }

    pub fn cubic(a: f64) -> Result<Self, CrystalError> {
        Self::new([[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]])
    }

    /// Builds a cell from edge lengths (Å) and angles (degrees) with `a`
    /// along x and `b` in the xy plane.
    pub fn from_parameters(a: f64, b: f64, c: f64, alpha: f64, beta: f64, gamma: f64) -> Result<Self, CrystalError> {
        let (ca, cb, cg) = (alpha.to_radians().cos(), beta.to_radians().cos(), gamma.to_radians().cos());
        let sg = gamma.to_radians().sin();
        let cx = cb;
        let cy = (ca - cb * cg) / sg;
        let cz2 = 1.0 - cx * cx - cy * cy;
        if !(cz2 > 0.0) {
            return Err(CrystalError::DegenerateLattice(0.0));
        }
        Self::new([
            [a, 0.0, 0.0],
            [b * cg, b * sg, 0.0],
            [c * cx, c * cy, c * cz2.sqrt()],
        ])
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
    }

    /// Row-major flattening, the order used by extended XYZ and the wire protocol.
    pub fn to_flat(&self) -> [f64; 9] {
        let r = self.rows();
        [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]]
    }

    pub fn from_flat(v: &[f64]) -> Result<Self, CrystalError> {
        if v.len() != 9 {
            return Err(CrystalError::InvalidStructure(format!("lattice needs 9 numbers, got {}", v.len())));
        }
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn vector(&self, i: usize) -> Vec3 {
        self.matrix.row(i).transpose()
    }

    pub fn volume(&self) -> f64 {
        self.matrix.determinant()
    }

    pub fn to_frac(&self, cart: &Vec3) -> Vec3 {
        self.cart_to_frac * cart
    }

    pub fn to_cart(&self, frac: &Vec3) -> Vec3 {
        self.matrix.transpose() * frac
    }

    /// Cartesian translation for an integer image offset.
    pub fn offset_vector(&self, n: [i32; 3]) -> Vec3 {
        self.to_cart(&Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64))
    }

    /// Distances between opposite faces of the cell, one per lattice direction.
    pub fn plane_spacings(&self) -> [f64; 3] {
        // rows of cart_to_frac are the reciprocal vectors b_i with b_i . a_j = delta_ij
        let mut h = [0.0; 3];
        for (i, hi) in h.iter_mut().enumerate() {
            *hi = 1.0 / self.cart_to_frac.row(i).norm();
        }
        h
    }

    pub fn min_plane_spacing(&self) -> f64 {
        self.plane_spacings().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, CrystalError> {
        let r = self.rows();
        Self::new(r.map(|row| row.map(|x| x * factor)))
    }
}

/// Atoms in a periodic cell.
///
/// `species` is the table of distinct species present; `species_index[i]`
/// points into it for atom `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    lattice: Lattice,
    species: Vec<Species>,
    species_index: Vec<usize>,
    positions: Vec<Vec3>,
}

impl Structure {
    pub fn new(
        lattice: Lattice,
        species: Vec<Species>,
        species_index: Vec<usize>,
        positions: Vec<Vec3>,
    ) -> Result<Self, CrystalError> {
        if positions.is_empty() {
            return Err(CrystalError::InvalidStructure("structure has no atoms".into()));
        }
        if positions.len() != species_index.len() {
            return Err(CrystalError::InvalidStructure(format!(
                "{} positions but {} species indices",
                positions.len(),
                species_index.len()
            )));
        }
        if let Some(&bad) = species_index.iter().find(|&&s| s >= species.len()) {
            return Err(CrystalError::InvalidStructure(format!("species index {bad} out of range")));
        }
        if positions.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(CrystalError::InvalidStructure("non-finite coordinate".into()));
        }
        for sp in &species {
            sp.validate()?;
        }
        Ok(Self { lattice, species, species_index, positions })
    }

    /// Builds a structure from per-atom symbols, resolving them in `table`.
    pub fn from_symbols(
        lattice: Lattice,
        symbols: &[impl AsRef<str>],
        positions: Vec<Vec3>,
        table: &SpeciesTable,
    ) -> Result<Self, CrystalError> {
        let mut species: Vec<Species> = Vec::new();
        let mut index = Vec::with_capacity(symbols.len());
        for sym in symbols {
            let sym = sym.as_ref();
            let pos = match species.iter().position(|s| s.symbol == sym) {
                Some(p) => p,
                None => {
                    let sp = table.get(sym).ok_or_else(|| CrystalError::UnknownSpecies(sym.to_string()))?;
                    species.push(sp.clone());
                    species.len() - 1
                }
            };
            index.push(pos);
        }
        Self::new(lattice, species, index, positions)
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn species(&self) -> &[Species] {
        &self.species
    }

    pub fn species_index(&self) -> &[usize] {
        &self.species_index
    }

    pub fn species_of(&self, atom: usize) -> &Species {
        &self.species[self.species_index[atom]]
    }

    pub fn symbols(&self) -> Vec<&str> {
        self.species_index.iter().map(|&i| self.species[i].symbol.as_str()).collect()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    pub fn positions_flat(&self) -> Vec<f64> {
        self.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    /// Copy of this structure with new positions; lattice and species are kept.
    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<Self, CrystalError> {
        if positions.len() != self.n_atoms() {
            return Err(CrystalError::InvalidStructure(format!(
                "expected {} positions, got {}",
                self.n_atoms(),
                positions.len()
            )));
        }
        if positions.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(CrystalError::InvalidStructure("non-finite coordinate".into()));
        }
        Ok(Self { positions, ..self.clone() })
    }

    pub fn with_positions_flat(&self, flat: &[f64]) -> Result<Self, CrystalError> {
        if flat.len() != 3 * self.n_atoms() {
            return Err(CrystalError::InvalidStructure(format!(
                "expected {} coordinates, got {}",
                3 * self.n_atoms(),
                flat.len()
            )));
        }
        self.with_positions(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }

    /// Displaces every atom by the matching vector in `disp`.
    pub fn displaced(&self, disp: &[Vec3]) -> Result<Self, CrystalError> {
        if disp.len() != self.n_atoms() {
            return Err(CrystalError::InvalidStructure("displacement length mismatch".into()));
        }
        self.with_positions(self.positions.iter().zip(disp).map(|(p, d)| p + d).collect())
    }

    pub fn frac_positions(&self) -> Vec<Vec3> {
        self.positions.iter().map(|p| self.lattice.to_frac(p)).collect()
    }

    /// Fractional coordinates reduced to [0, 1).
    pub fn wrapped_frac_positions(&self) -> Vec<Vec3> {
        self.positions.iter().map(|p| wrap_frac(self.lattice.to_frac(p))).collect()
    }
}

pub(crate) fn wrap_frac(f: Vec3) -> Vec3 {
    f.map(|x| {
        let w = x - x.floor();
        // x.floor() can round w up to exactly 1.0 for tiny negative x
        if w >= 1.0 {
            0.0
        } else {
            w
        }
    })
}

/// Translates every atom into the home cell (fractional coordinates in [0,1)).
pub fn wrap_into_cell(s: &Structure) -> Structure {
    let lattice = s.lattice();
    let positions = s
        .positions
        .iter()
        .map(|p| {
            let f = lattice.to_frac(p);
            let shift = f.map(|x| x.floor());
            let wrapped = p - lattice.to_cart(&shift);
            // guard against round-off leaving the result just outside [0,1)
            let fw = lattice.to_frac(&wrapped);
            if fw.iter().all(|&x| (0.0..1.0).contains(&x)) {
                wrapped
            } else {
                lattice.to_cart(&wrap_frac(fw))
            }
        })
        .collect();
    Structure { positions, ..s.clone() }
}

/// Serializable form used in reports and checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StructureRecord {
    pub lattice: Vec<f64>,
    pub symbols: Vec<String>,
    pub positions: Vec<f64>,
}

impl From<&Structure> for StructureRecord {
    fn from(s: &Structure) -> Self {
        Self {
            lattice: s.lattice().to_flat().to_vec(),
            symbols: s.symbols().into_iter().map(String::from).collect(),
            positions: s.positions_flat(),
        }
    }
}

impl StructureRecord {
    pub fn to_structure(&self, table: &SpeciesTable) -> Result<Structure, CrystalError> {
        let lattice = Lattice::from_flat(&self.lattice)?;
        if self.positions.len() != 3 * self.symbols.len() {
            return Err(CrystalError::InvalidStructure("positions/symbols length mismatch".into()));
        }
        let pos = self.positions.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        Structure::from_symbols(lattice, &self.symbols, pos, table)
    }
}
