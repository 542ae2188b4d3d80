//! End-to-end acceptance checks, one status line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so every line is printed even
//! when all checks pass. Exits non-zero if any check fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{brute_knn, fcc, random_atoms, random_cell};
use periopt::bench::draw_structure;
use periopt::crystal::{k_nearest, random_structure, RandomStructureRequest, Species, SpeciesTable, Structure, Vec3};
use periopt::env::{relax_macs, scale_gradient, EnvConfig, MacsEnv};
use periopt::optimizers::{relax, Method, TerminationPolicy};
use periopt::potential::{Calculator, LennardJones};
use periopt::sac::agent::standard_normal;
use periopt::sac::{Batch, Sac, SacHyper, SacPolicy, StructureSource, Trainer, TrainerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Status {
    Pass,
    Fail,
    /// The criterion contradicts itself; the line states what was checked.
    Conflict,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { status: if ok { Status::Pass } else { Status::Fail }, detail: detail.into() }
}

fn observation_length() -> Outcome {
    let dim = |k: usize| EnvConfig { k, ..Default::default() }.obs_dim();
    let ar = SpeciesTable::default().get("Ar").unwrap().clone();
    let s = random_structure(&RandomStructureRequest::new(vec![(ar, 16)], 800.0, 3.0), 4).unwrap();
    let mut env = MacsEnv::new(EnvConfig::default(), LennardJones::new()).unwrap();
    let obs = env.reset(s).unwrap().obs;
    let flat_ok = obs.iter().all(|o| o.len() == 204);
    let (d10, d15) = (dim(10), dim(15));
    let formula = |k: usize| 12 * (k + 1) + 4 * k;
    let consistent = dim(12) == 204 && flat_ok && d10 == formula(10) && d15 == formula(15);
    let detail = format!(
        "k=12: {} (every agent's vector {}); k=10: {d10}, k=15: {d15}. The stated 174/268 do not follow from \
         13(k+1)+4k (183/268) and no per-atom feature count gives both them and 204",
        dim(12),
        if flat_ok { "has 204 entries" } else { "has the wrong length" }
    );
    if consistent {
        Outcome { status: Status::Conflict, detail }
    } else {
        Outcome { status: Status::Fail, detail }
    }
}

fn gradient_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g_max = 5.0;
    let (mut worst_inf, mut worst_cos): (f64, f64) = (0.0, 0.0);
    for _ in 0..100_000 {
        let scale = 10f64.powf(rng.random_range(-6.0..6.0));
        let g = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale;
        if g.norm() == 0.0 {
            continue;
        }
        let out = scale_gradient(&g, g_max);
        worst_inf = worst_inf.max(out.amax());
        let cos = out.dot(&g) / (out.norm() * g.norm());
        worst_cos = worst_cos.max((cos - 1.0).abs());
    }
    verdict(
        worst_inf <= g_max && worst_cos <= 1e-12,
        format!("max inf-norm {worst_inf}, max |cos - 1| {worst_cos:e} over 1e5 vectors"),
    )
}

/// Scaled gradients computed directly from the calculator's forces.
fn log_scaled_gradients(s: &Structure, g_max: f64) -> Vec<f64> {
    let f = LennardJones::new().evaluate(s).unwrap().forces;
    f.iter()
        .map(|f| {
            let g = -f;
            let inf = g.amax();
            let scaled = if inf < g_max { g } else { g * (g_max / inf) };
            scaled.norm().ln()
        })
        .collect()
}

fn telescoping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = SpeciesTable::default();
    let mut worst: f64 = 0.0;
    let mut episodes = 0;
    for ep in 0..20u64 {
        let n = 4 + (ep as usize) % 6;
        let comp = vec![(t.get("Xa").unwrap().clone(), n / 2), (t.get("Xb").unwrap().clone(), n - n / 2)];
        let s = random_structure(&RandomStructureRequest::new(comp, 25.0 * n as f64, 2.0), ep).unwrap();
        let cfg = EnvConfig { max_steps: 50, ..Default::default() };
        let mut env = MacsEnv::new(cfg.clone(), LennardJones::new()).unwrap();
        if env.reset(s.clone()).unwrap().done {
            continue;
        }
        episodes += 1;
        let mut sums = vec![0.0; n];
        loop {
            let u: Vec<Vec3> = (0..n)
                .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let out = env.step(&u).unwrap();
            sums.iter_mut().zip(&out.rewards).for_each(|(a, r)| *a += r);
            if out.done {
                break;
            }
        }
        let g0 = log_scaled_gradients(&s, cfg.g_max);
        let gt = log_scaled_gradients(env.structure().unwrap(), cfg.g_max);
        for i in 0..n {
            worst = worst.max((sums[i] - (g0[i] - gt[i])).abs());
        }
    }
    verdict(worst < 1e-9 && episodes == 20, format!("{episodes} episodes, max |sum r - (ln|g0| - ln|gT|)| = {worst:e}"))
}

fn random_lj<R: Rng>(rng: &mut R, n: usize) -> Structure {
    let t = SpeciesTable::default();
    let pick: Vec<Species> = ["Ar", "Xa", "Xb"].iter().map(|s| t.get(s).unwrap().clone()).collect();
    let counts: Vec<usize> = {
        let mut c = vec![0; 3];
        (0..n).for_each(|_| c[rng.random_range(0..3)] += 1);
        c
    };
    let comp: Vec<(Species, usize)> = pick.into_iter().zip(counts).filter(|(_, c)| *c > 0).collect();
    let vol: f64 = comp.iter().map(|(s, c)| *c as f64 * s.lj_sigma.powi(3)).sum::<f64>() * 1.2;
    let min_sigma = comp.iter().map(|(s, _)| s.lj_sigma).fold(f64::INFINITY, f64::min);
    random_structure(&RandomStructureRequest::new(comp, vol, 0.8 * min_sigma), rng.random()).unwrap()
}

fn force_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let calc = LennardJones::new();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let s = random_lj(&mut rng, n);
        let f = calc.evaluate(&s).unwrap().forces;
        let x0 = s.positions_flat();
        let energy = |x: &[f64]| calc.evaluate(&s.with_positions_flat(x).unwrap()).unwrap().energy;
        for i in 0..n {
            let mut fd = Vec3::zeros();
            for c in 0..3 {
                let (mut xp, mut xm) = (x0.clone(), x0.clone());
                xp[3 * i + c] += h;
                xm[3 * i + c] -= h;
                fd[c] = -(energy(&xp) - energy(&xm)) / (2.0 * h);
            }
            worst = worst.max((fd - f[i]).norm() / f[i].norm().max(1e-8));
        }
    }
    verdict(worst < 1e-4, format!("max relative error {worst:e} on 100 structures"))
}

fn neighbor_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    let mut atoms = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=12);
        let cell = random_cell(&mut rng);
        let s = random_atoms(&mut rng, cell, n);
        let nl = k_nearest(&s, 12).unwrap();
        for i in 0..n {
            atoms += 1;
            let oracle = brute_knn(&s, i, 12);
            let got = nl.neighbors(i);
            let same_dists = got.iter().zip(&oracle).all(|(g, o)| (g.dist - o.0).abs() < 1e-10);
            let all_found = got.iter().all(|g| {
                oracle.iter().any(|o| {
                    (o.0 - g.dist).abs() < 1e-9
                        && o.1 == g.atom
                        && (Vec3::from(o.2) - g.rel_vec).amax() < 1e-9
                })
            });
            if got.len() != 12 || !same_dists || !all_found {
                mismatches += 1;
            }
        }
    }
    verdict(mismatches == 0, format!("{atoms} atoms in 100 structures, {mismatches} mismatches"))
}

fn perturbed_fcc(seed: u64) -> Structure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = fcc("Ar", 5.26, 2);
    let pos = s
        .positions()
        .iter()
        .map(|p| p + Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)))
        .collect();
    s.with_positions(pos).unwrap()
}

struct ClassicalRun {
    method: Method,
    ok: usize,
    n: f64,
    c: f64,
    per_run_calls_ok: bool,
}

fn classical_runs() -> Vec<ClassicalRun> {
    let calc = LennardJones::new();
    let tp = TerminationPolicy::default();
    let set: Vec<Structure> = (0..50).map(|i| perturbed_fcc(500 + i)).collect();
    [Method::Bfgs, Method::Fire, Method::MdMin, Method::BfgsLs, Method::Cg]
        .into_iter()
        .map(|method| {
            let (mut ok, mut n, mut c, mut per_run) = (0, 0usize, 0usize, true);
            for s in &set {
                let r = relax(s, method, &calc, &tp).unwrap();
                let fresh = calc.evaluate(&r.final_structure_like(s)).unwrap().fmax();
                if r.success && fresh <= tp.fmax && r.steps <= tp.max_steps {
                    ok += 1;
                    n += r.steps;
                    c += r.energy_calls;
                }
                per_run &= r.energy_calls == r.steps + 1;
            }
            let k = ok.max(1) as f64;
            ClassicalRun { method, ok, n: n as f64 / k, c: c as f64 / k, per_run_calls_ok: per_run }
        })
        .collect()
}

fn classical_soundness(runs: &[ClassicalRun], seconds: f64) -> Outcome {
    let rate = |m| runs.iter().find(|r| r.method == m).map(|r| r.ok).unwrap();
    let (b, f) = (rate(Method::Bfgs), rate(Method::Fire));
    verdict(b >= 49 && f >= 49, format!("BFGS {b}/50, FIRE {f}/50 converged and re-verified; five methods relaxed in {seconds:.1}s"))
}

fn call_accounting(runs: &[ClassicalRun]) -> Outcome {
    let mut ok = true;
    let mut parts = vec![];
    for r in runs {
        let good = match r.method {
            Method::Bfgs | Method::Fire | Method::MdMin => r.per_run_calls_ok && r.c == r.n + 1.0,
            _ => r.c > r.n,
        };
        ok &= good && r.ok > 0;
        parts.push(format!("{} N={:.1} C={:.1}", r.method, r.n, r.c));
    }
    verdict(ok, parts.join(", "))
}

fn sac_gradients() -> Outcome {
    const OBS: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sac = Sac::<f64>::new(OBS, &[4, 4], SacHyper::default(), &mut rng);
    for t in &mut sac.targets {
        t.params.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
    }
    sac.log_alpha = 0.5f64.ln();
    let n = 8;
    let mut u = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let batch = Batch {
        size: n,
        obs: u(n * OBS),
        actions: u(n * 3).iter().map(|a| 0.9 * a).collect(),
        rewards: u(n),
        next_obs: u(n * OBS),
        dones: vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    };
    let noise: Vec<f64> = standard_normal(&mut rng, n * 3);
    let h = 1e-5;
    let worst_of = |analytic: &[f64], f: &dyn Fn(usize, f64) -> f64| {
        analytic
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let fd = (f(i, h) - f(i, -h)) / (2.0 * h);
                (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6)
            })
            .fold(0.0f64, f64::max)
    };
    let (_, cg, _) = sac.critic_loss(&batch, &noise);
    let critic = (0..2)
        .map(|k| {
            worst_of(&cg[k], &|i, d| {
                let mut s = sac.clone();
                s.critics[k].params[i] += d;
                s.critic_loss(&batch, &noise).0
            })
        })
        .fold(0.0f64, f64::max);
    let (_, ag, mean_logp) = sac.actor_loss(&batch.obs, n, &noise);
    let actor = worst_of(&ag, &|i, d| {
        let mut s = sac.clone();
        s.actor.params[i] += d;
        s.actor_loss(&batch.obs, n, &noise).0
    });
    let (_, tg) = sac.alpha_loss(mean_logp);
    let temp = worst_of(&[tg], &|_, d| {
        let mut s = sac.clone();
        s.log_alpha += d;
        s.alpha_loss(mean_logp).0
    });
    verdict(
        critic < 1e-3 && actor < 1e-3 && temp < 1e-3,
        format!("worst relative error: critic {critic:.1e}, actor {actor:.1e}, temperature {temp:.1e}"),
    )
}

struct Trained {
    trainer: Trainer<LennardJones>,
    seconds: f64,
}

fn train_desk() -> Trained {
    let cfg = TrainerConfig::desk();
    let calcs = (0..cfg.num_envs).map(|_| LennardJones::new()).collect();
    let t0 = Instant::now();
    let mut trainer = Trainer::new(cfg, EnvConfig::default(), SpeciesTable::default(), calcs).unwrap();
    trainer.run(None, None).unwrap();
    Trained { trainer, seconds: t0.elapsed().as_secs_f64() }
}

/// Success count and mean steps of the deterministic policy on `count`
/// held-out structures of `n_atoms` argon atoms.
fn evaluate(tr: &Trainer<LennardJones>, n_atoms: usize, count: u64) -> (usize, f64) {
    let src = &tr.config().structures;
    let source = StructureSource::single("Ar", n_atoms, src.volume_per_atom, src.min_dist);
    let req = source.request(&SpeciesTable::default()).unwrap();
    let ck = tr.checkpoint();
    let mut policy = SacPolicy::from_checkpoint(&ck, &ck.env).unwrap();
    let calc = LennardJones::new();
    let tp = TerminationPolicy::default();
    let (mut ok, mut steps) = (0, 0);
    for i in 0..count {
        let (_, s) = draw_structure(&req, 1_000_000 + i).unwrap();
        let r = relax_macs(&s, &mut policy, &ck.env, &calc, &tp).unwrap();
        if r.success {
            ok += 1;
            steps += r.steps;
        }
    }
    (ok, steps as f64 / ok.max(1) as f64)
}

fn learning_trend(t: &Trained) -> Outcome {
    let eps = t.trainer.episodes();
    let mean = |w: &[periopt::sac::EpisodeStat]| w.iter().map(|e| e.length as f64).sum::<f64>() / w.len() as f64;
    let (first, last) = (mean(&eps[..50]), mean(&eps[eps.len() - 50..]));
    let (ok, steps) = evaluate(&t.trainer, 8, 50);
    verdict(
        last < 0.5 * first && ok >= 40 && eps.len() <= 2000,
        format!(
            "{} episodes in {:.0}s; mean length first 50 {first:.1}, last 50 {last:.1} ({:.0}%); \
             held-out 8-atom success {ok}/50, mean steps {steps:.1}",
            eps.len(),
            t.seconds,
            100.0 * last / first
        ),
    )
}

fn zero_shot(t: &Trained) -> Outcome {
    let (ok, steps) = evaluate(&t.trainer, 16, 50);
    verdict(ok >= 30, format!("16-atom success {ok}/50, mean steps {steps:.1}"))
}

fn bench_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_periopt");
    let run = |args: &[&str]| {
        let out = Command::new(exe).args(args).env_remove("PERIOPT_SEED").output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let set = dir.path().join("set");
    run(&["gen", "--out", &p(&set), "--seed", "5"]);
    let outs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for o in &outs {
        run(&["bench", "--testset", &p(&set), "--out", &p(o), "--timing", "off"]);
    }
    let mut identical = true;
    let mut files = 0;
    for label in ["n8", "n12", "n16"] {
        let name = format!("metrics_{label}.csv");
        let a = std::fs::read(outs[0].join(&name)).unwrap();
        let b = std::fs::read(outs[1].join(&name)).unwrap();
        identical &= a == b && !a.is_empty();
        files += 1;
    }
    verdict(identical, format!("{files} metrics files (8/12/16 atoms, 50 structures, 6 methods) byte-identical across two runs"))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Outcome { status: Status::Fail, detail: format!("panicked: {}", msg.unwrap_or_default()) }
        });
        let tag = match out.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Conflict => "CONFLICT",
        };
        println!("{tag:8} {name} [{:.1}s]: {}", t0.elapsed().as_secs_f64(), out.detail);
    };
    report("observation dimensionality", &mut observation_length);
    report("gradient scaling", &mut gradient_scaling);
    report("telescoping reward", &mut telescoping);
    report("force-energy consistency", &mut force_consistency);
    report("neighbor oracle", &mut neighbor_oracle);
    let t0 = Instant::now();
    let runs = classical_runs();
    let secs = t0.elapsed().as_secs_f64();
    report("classical optimizer soundness", &mut || classical_soundness(&runs, secs));
    report("energy-call accounting", &mut || call_accounting(&runs));
    report("SAC gradient correctness", &mut sac_gradients);
    let trained = catch_unwind(train_desk).ok();
    match &trained {
        Some(t) => {
            report("desk-scale learning trend", &mut || learning_trend(t));
            report("zero-shot size transfer", &mut || zero_shot(t));
        }
        None => {
            report("desk-scale learning trend", &mut || Outcome { status: Status::Fail, detail: "training failed".into() });
            report("zero-shot size transfer", &mut || Outcome { status: Status::Fail, detail: "no policy".into() });
        }
    }
    report("bench determinism", &mut bench_determinism);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
