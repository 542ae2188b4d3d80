//! Nearest periodic images.
//!
//! All searches run over integer image offsets grouped into Chebyshev shells
//! (`max |n_a| == s`). Relative vectors are built from fractional
//! coordinates wrapped into [0,1), so `|df_a| < 1` and any image in shell `s`
//! lies at least `(s - 1) * h_min` away, where `h_min` is the smallest
//! distance between opposite cell faces. The search stops once that bound
//! exceeds the distance it still has to beat, which stays correct for small
//! and strongly skewed cells where the minimum-image convention breaks down.

use std::cmp::Ordering;

use super::{CrystalError, Structure, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEntry {
    pub atom: usize,
    /// Vector from the central atom to this neighbor image (Å).
    pub rel_vec: Vec3,
    pub dist: f64,
}

/// The `k` nearest periodic images of every atom, ordered by increasing
/// distance. Exact ties are broken by image offset and then atom index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    k: usize,
    entries: Vec<Vec<NeighborEntry>>,
}

impl NeighborList {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_atoms(&self) -> usize {
        self.entries.len()
    }

    pub fn neighbors(&self, atom: usize) -> &[NeighborEntry] {
        &self.entries[atom]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[NeighborEntry]> {
        self.entries.iter().map(Vec::as_slice)
    }
}

fn shell_offsets(s: i32) -> impl Iterator<Item = [i32; 3]> {
    (-s..=s).flat_map(move |a| {
        (-s..=s).flat_map(move |b| {
            (-s..=s).filter_map(move |c| (a.abs().max(b.abs()).max(c.abs()) == s).then_some([a, b, c]))
        })
    })
}

struct Candidate {
    dist: f64,
    offset: [i32; 3],
    atom: usize,
    rel: Vec3,
}

fn cmp_candidates(a: &Candidate, b: &Candidate) -> Ordering {
    a.dist
        .total_cmp(&b.dist)
        .then_with(|| a.offset.cmp(&b.offset))
        .then_with(|| a.atom.cmp(&b.atom))
}

pub fn k_nearest(s: &Structure, k: usize) -> Result<NeighborList, CrystalError> {
    if k == 0 {
        return Err(CrystalError::InvalidRequest("k must be at least 1".into()));
    }
    let lattice = s.lattice();
    let h_min = lattice.min_plane_spacing();
    if !(h_min > 0.0) || !h_min.is_finite() {
        return Err(CrystalError::DegenerateLattice(lattice.volume()));
    }
    let frac = s.wrapped_frac_positions();
    let n = frac.len();

    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let mut best: Vec<Candidate> = Vec::with_capacity(k + 27 * n);
        for shell in 0.. {
            if best.len() >= k && (shell as f64 - 1.0) * h_min > best[k - 1].dist {
                break;
            }
            for offset in shell_offsets(shell) {
                let nf = Vec3::new(offset[0] as f64, offset[1] as f64, offset[2] as f64);
                for (j, fj) in frac.iter().enumerate() {
                    if j == i && shell == 0 {
                        continue;
                    }
                    let rel = lattice.to_cart(&(fj - frac[i] + nf));
                    best.push(Candidate { dist: rel.norm(), offset, atom: j, rel });
                }
            }
            best.sort_by(cmp_candidates);
            best.truncate(k);
        }
        entries.push(best.into_iter().map(|c| NeighborEntry { atom: c.atom, rel_vec: c.rel, dist: c.dist }).collect());
    }
    Ok(NeighborList { k, entries })
}

/// Minimum distance between atom `i` and any periodic image of atom `j`.
/// For `i == j` the zero offset is excluded, giving the shortest lattice vector.
pub fn min_periodic_distance(s: &Structure, i: usize, j: usize) -> f64 {
    let lattice = s.lattice();
    let h_min = lattice.min_plane_spacing();
    let fi = super::wrap_frac(lattice.to_frac(&s.positions()[i]));
    let fj = super::wrap_frac(lattice.to_frac(&s.positions()[j]));
    let df = fj - fi;
    let mut best = f64::INFINITY;
    for shell in 0.. {
        if (shell as f64 - 1.0) * h_min > best {
            break;
        }
        for offset in shell_offsets(shell) {
            if i == j && shell == 0 {
                continue;
            }
            let nf = Vec3::new(offset[0] as f64, offset[1] as f64, offset[2] as f64);
            best = best.min(lattice.to_cart(&(df + nf)).norm());
        }
    }
    best
}

/// Calls `f(rel_vec, dist)` for every image `df + n` (fractional) closer
/// than `cutoff`, where `df` is a fractional difference vector. The zero
/// offset is included; callers handling self-pairs must skip it themselves
/// via the reported offset.
pub fn for_each_image_within(
    lattice: &super::Lattice,
    df: &Vec3,
    cutoff: f64,
    mut f: impl FnMut([i32; 3], Vec3, f64),
) {
    let h = lattice.plane_spacings();
    let mut lo = [0i32; 3];
    let mut hi = [0i32; 3];
    for a in 0..3 {
        let reach = cutoff / h[a];
        lo[a] = (-reach - df[a]).ceil() as i32;
        hi[a] = (reach - df[a]).floor() as i32;
    }
    let c2 = cutoff * cutoff;
    for n0 in lo[0]..=hi[0] {
        for n1 in lo[1]..=hi[1] {
            for n2 in lo[2]..=hi[2] {
                let rel = lattice.to_cart(&(df + Vec3::new(n0 as f64, n1 as f64, n2 as f64)));
                let d2 = rel.norm_squared();
                if d2 < c2 {
                    f([n0, n1, n2], rel, d2.sqrt());
                }
            }
        }
    }
}
