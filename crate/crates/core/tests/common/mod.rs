//! Brute-force oracles shared by the integration tests. They deliberately
//! work on plain arrays and unwrapped coordinates so they share no code path
//! with the library's shell search.
#![allow(dead_code)]

use periopt::crystal::{Lattice, SpeciesTable, Structure, Vec3};
use rand::Rng;

pub fn random_cell<R: Rng>(rng: &mut R) -> Lattice {
    loop {
        let a = rng.random_range(2.0..6.0);
        let b = rng.random_range(2.0..6.0);
        let c = rng.random_range(2.0..6.0);
        let al = rng.random_range(55.0..125.0);
        let be = rng.random_range(55.0..125.0);
        let ga = rng.random_range(55.0..125.0);
        if let Ok(l) = Lattice::from_parameters(a, b, c, al, be, ga) {
            if l.volume() > 2.0 {
                return l;
            }
        }
    }
}

/// Random atoms, deliberately scattered over neighboring cells.
pub fn random_atoms<R: Rng>(rng: &mut R, lattice: Lattice, n: usize) -> Structure {
    let symbols: Vec<&str> = (0..n).map(|i| ["Ar", "Xa", "Xb"][i % 3]).collect();
    let pos = (0..n)
        .map(|_| {
            let f = Vec3::new(rng.random_range(-1.5..2.5), rng.random_range(-1.5..2.5), rng.random_range(-1.5..2.5));
            lattice.to_cart(&f)
        })
        .collect();
    Structure::from_symbols(lattice, &symbols, pos, &SpeciesTable::default()).unwrap()
}

fn rows(l: &Lattice) -> [[f64; 3]; 3] {
    l.rows()
}

fn image(p: [f64; 3], r: &[[f64; 3]; 3], n: [i32; 3]) -> [f64; 3] {
    let mut out = p;
    for (a, &na) in n.iter().enumerate() {
        for c in 0..3 {
            out[c] += na as f64 * r[a][c];
        }
    }
    out
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// All images of all atoms with `|n_a| <= m`, as (dist, atom, rel), sorted by dist.
pub fn enumerate_images(s: &Structure, i: usize, m: i32) -> Vec<(f64, usize, [f64; 3])> {
    let r = rows(s.lattice());
    let pi = s.positions()[i];
    let mut out = Vec::new();
    for n0 in -m..=m {
        for n1 in -m..=m {
            for n2 in -m..=m {
                for (j, pj) in s.positions().iter().enumerate() {
                    if j == i && [n0, n1, n2] == [0, 0, 0] {
                        continue;
                    }
                    let q = image([pj.x, pj.y, pj.z], &r, [n0, n1, n2]);
                    let rel = [q[0] - pi.x, q[1] - pi.y, q[2] - pi.z];
                    out.push((norm(rel), j, rel));
                }
            }
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn face_spacing_min(l: &Lattice) -> f64 {
    let r = rows(l);
    let cross = |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let v = l.volume();
    [norm(cross(r[1], r[2])), norm(cross(r[2], r[0])), norm(cross(r[0], r[1]))]
        .into_iter()
        .map(|area| v / area)
        .fold(f64::INFINITY, f64::min)
}

fn max_frac_spread(s: &Structure) -> f64 {
    let f = s.frac_positions();
    let mut m: f64 = 0.0;
    for a in &f {
        for b in &f {
            m = m.max((a - b).amax());
        }
    }
    m
}

/// k nearest images by growing a full supercell scan until the k-th distance
/// is provably inside the scanned region. Entries past the k-th that tie
/// with it are kept so callers can handle boundary ties.
pub fn brute_knn(s: &Structure, i: usize, k: usize) -> Vec<(f64, usize, [f64; 3])> {
    let h = face_spacing_min(s.lattice());
    let spread = max_frac_spread(s);
    let mut m = 1;
    loop {
        let all = enumerate_images(s, i, m);
        if all.len() >= k {
            let kth = all[k - 1].0;
            // any image outside the scan is at least (m + 1 - spread) * h away
            if (m as f64 + 1.0 - spread) * h > kth + 1e-9 {
                return all.into_iter().take_while(|e| e.0 <= kth + 1e-9).collect();
            }
        }
        m += 1;
    }
}

pub fn brute_min_dist(s: &Structure, i: usize, j: usize, m: i32) -> f64 {
    let r = rows(s.lattice());
    let pi = s.positions()[i];
    let pj = s.positions()[j];
    let mut best = f64::INFINITY;
    for n0 in -m..=m {
        for n1 in -m..=m {
            for n2 in -m..=m {
                if i == j && [n0, n1, n2] == [0, 0, 0] {
                    continue;
                }
                let q = image([pj.x, pj.y, pj.z], &r, [n0, n1, n2]);
                best = best.min(norm([q[0] - pi.x, q[1] - pi.y, q[2] - pi.z]));
            }
        }
    }
    best
}

/// Direct force-shifted LJ lattice sum over an explicit (2m+1)^3 image block.
pub fn brute_lj_energy(s: &Structure, rc: f64, m: i32) -> f64 {
    let r = rows(s.lattice());
    let n = s.n_atoms();
    let lj = |r: f64, sg: f64, ep: f64| 4.0 * ep * ((sg / r).powi(12) - (sg / r).powi(6));
    let dlj = |r: f64, sg: f64, ep: f64| -24.0 * ep / r * (2.0 * (sg / r).powi(12) - (sg / r).powi(6));
    let mut e = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (s.species_of(i), s.species_of(j));
            let sg = 0.5 * (a.lj_sigma + b.lj_sigma);
            let ep = (a.lj_epsilon * b.lj_epsilon).sqrt();
            let pi = s.positions()[i];
            let pj = s.positions()[j];
            for n0 in -m..=m {
                for n1 in -m..=m {
                    for n2 in -m..=m {
                        if i == j && [n0, n1, n2] == [0, 0, 0] {
                            continue;
                        }
                        let q = image([pj.x, pj.y, pj.z], &r, [n0, n1, n2]);
                        let d = norm([q[0] - pi.x, q[1] - pi.y, q[2] - pi.z]);
                        if d < rc {
                            e += 0.5 * (lj(d, sg, ep) - lj(rc, sg, ep) - (d - rc) * dlj(rc, sg, ep));
                        }
                    }
                }
            }
        }
    }
    e
}

/// Conventional 4-atom FCC cell.
pub fn fcc(symbol: &str, a: f64, reps: usize) -> Structure {
    let basis = [[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]];
    let mut pos = Vec::new();
    for x in 0..reps {
        for y in 0..reps {
            for z in 0..reps {
                for b in basis {
                    pos.push(Vec3::new((x as f64 + b[0]) * a, (y as f64 + b[1]) * a, (z as f64 + b[2]) * a));
                }
            }
        }
    }
    let l = Lattice::cubic(a * reps as f64).unwrap();
    let syms = vec![symbol; pos.len()];
    Structure::from_symbols(l, &syms, pos, &SpeciesTable::default()).unwrap()
}
