//! Pseudo-random periodic structures with a hard minimum-distance constraint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{min_periodic_distance, CrystalError, Lattice, Species, Structure, Vec3};

#[derive(Debug, Clone)]
pub struct RandomStructureRequest {
    /// Species and how many atoms of each, placed in this order.
    pub composition: Vec<(Species, usize)>,
    /// Nominal cell volume in Å³; the drawn volume is uniform within ±5 %.
    pub target_volume: f64,
    /// Minimum distance between any two periodic images (Å).
    pub min_dist: f64,
    pub max_attempts_per_atom: usize,
    pub max_cell_attempts: usize,
}

impl RandomStructureRequest {
    pub fn new(composition: Vec<(Species, usize)>, target_volume: f64, min_dist: f64) -> Self {
        Self { composition, target_volume, min_dist, max_attempts_per_atom: 5000, max_cell_attempts: 1000 }
    }

    pub fn total_atoms(&self) -> usize {
        self.composition.iter().map(|(_, n)| n).sum()
    }
}

pub fn random_structure(req: &RandomStructureRequest, seed: u64) -> Result<Structure, CrystalError> {
    random_structure_with_rng(req, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_structure_with_rng<R: Rng + ?Sized>(
    req: &RandomStructureRequest,
    rng: &mut R,
) -> Result<Structure, CrystalError> {
    let total = req.total_atoms();
    if total == 0 {
        return Err(CrystalError::InvalidRequest("no atoms requested".into()));
    }
    if !(req.target_volume > 0.0 && req.target_volume.is_finite()) {
        return Err(CrystalError::InvalidRequest("target volume must be positive".into()));
    }
    if !(req.min_dist > 0.0 && req.min_dist.is_finite()) {
        return Err(CrystalError::InvalidRequest("minimum distance must be positive".into()));
    }

    let mut species = Vec::new();
    let mut species_index = Vec::with_capacity(total);
    for (sp, count) in &req.composition {
        if *count == 0 {
            continue;
        }
        let idx = match species.iter().position(|s: &Species| s.symbol == sp.symbol) {
            Some(i) => i,
            None => {
                species.push(sp.clone());
                species.len() - 1
            }
        };
        species_index.extend(std::iter::repeat_n(idx, *count));
    }

    let lattice = random_lattice(req, rng)?;
    // grows one atom at a time; the candidate is always the last atom
    let mut partial = Structure::new(lattice.clone(), species.clone(), vec![species_index[0]], vec![Vec3::zeros()])?;
    partial.positions.clear();
    partial.species_index.clear();

    for atom in 0..total {
        partial.species_index.push(species_index[atom]);
        let mut placed = false;
        for _ in 0..req.max_attempts_per_atom {
            let f = Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
            partial.positions.push(lattice.to_cart(&f));
            if (0..atom).all(|j| min_periodic_distance(&partial, atom, j) >= req.min_dist) {
                placed = true;
                break;
            }
            partial.positions.pop();
        }
        if !placed {
            return Err(CrystalError::PackingInfeasible { atom, total, attempts: req.max_attempts_per_atom });
        }
    }
    let positions = partial.positions;
    Structure::new(lattice, species, species_index, positions)
}

/// Edge lengths uniform in [0.7, 1.3] x the cubic edge, angles uniform in
/// [60, 120] degrees, then rescaled to a volume uniform in ±5 % of target.
fn random_lattice<R: Rng + ?Sized>(req: &RandomStructureRequest, rng: &mut R) -> Result<Lattice, CrystalError> {
    let volume = req.target_volume * rng.random_range(0.95..=1.05);
    let edge = req.target_volume.cbrt();
    for _ in 0..req.max_cell_attempts {
        let len = [0; 3].map(|_| edge * rng.random_range(0.7..=1.3));
        let ang = [0; 3].map(|_| rng.random_range(60.0..=120.0));
        let Ok(raw) = Lattice::from_parameters(len[0], len[1], len[2], ang[0], ang[1], ang[2]) else {
            continue;
        };
        let Ok(lattice) = raw.scaled((volume / raw.volume()).cbrt()) else {
            continue;
        };
        // self-images must respect the distance constraint too
        if lattice.min_plane_spacing() >= req.min_dist && shortest_lattice_vector(&lattice) >= req.min_dist {
            return Ok(lattice);
        }
    }
    Err(CrystalError::InvalidRequest(format!(
        "no admissible cell after {} attempts (volume {:.3} too small for min_dist {})",
        req.max_cell_attempts, req.target_volume, req.min_dist
    )))
}

fn shortest_lattice_vector(lattice: &Lattice) -> f64 {
    let probe = Structure::new(
        lattice.clone(),
        vec![Species::new("X", 1.0, 1.0, 1.0)],
        vec![0],
        vec![Vec3::zeros()],
    )
    .expect("single-atom probe is valid");
    min_periodic_distance(&probe, 0, 0)
}
