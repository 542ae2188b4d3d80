use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn periopt(args: &[&str]) -> Output {
    periopt_env(args, &[])
}

fn periopt_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_periopt"));
    cmd.args(args).env_remove("PERIOPT_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SPEC: &str = r#"
composition = { Ar = 4 }
size_factors = [1.0, 1.5]
set_size = 4
methods = ["BFGS", "FIRE", "CG"]
seed = 3
"#;

const TINY_TRAIN: &str = r#"
batch_size = 32
warmup_samples = 100
buffer_capacity = 5000
num_envs = 2
total_rounds = 150
hidden = [16, 16]
initial_alpha = 0.01
log_interval = 50
checkpoint_interval = 100

[structures]
composition = { Ar = 4 }
volume_per_atom = 50.0
min_dist = 3.0
"#;

#[test]
fn gen_is_reproducible_and_honours_the_seed_variable() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let text = ok(periopt(&["gen", "--config", p(&spec), "--out", p(&a)]));
    assert!(text.contains("n4: 4 structures of 4 atoms"));
    assert!(text.contains("n6: 4 structures of 6 atoms"));
    ok(periopt(&["gen", "--config", p(&spec), "--out", p(&b)]));
    ok(periopt_env(&["gen", "--config", p(&spec), "--out", p(&c)], &[("PERIOPT_SEED", "99")]));
    let read = |d: &Path| fs::read(d.join("n4/0000.xyz")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(c.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec"]["seed"], 99);

    let bad = periopt_env(&["gen", "--config", p(&spec), "--out", p(&c)], &[("PERIOPT_SEED", "x")]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("PERIOPT_SEED"));
}

#[test]
fn relax_writes_report_and_structure() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let set = dir.path().join("set");
    ok(periopt(&["gen", "--config", p(&spec), "--out", p(&set)]));
    let input = set.join("n6/0001.xyz");
    let (report, output) = (dir.path().join("r.json"), dir.path().join("out.xyz"));
    let text = ok(periopt(&[
        "relax",
        p(&input),
        "--method",
        "fire",
        "--report",
        p(&report),
        "--output",
        p(&output),
    ]));
    assert!(text.starts_with("FIRE success=true"), "{text}");
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["method"], "FIRE");
    assert!(r["final_fmax"].as_f64().unwrap() <= 0.05);
    assert_eq!(fs::read_to_string(&output).unwrap().lines().count(), 2 + 6);

    let macs = periopt(&["relax", p(&input), "--method", "MACS"]);
    assert!(!macs.status.success());
    assert!(String::from_utf8_lossy(&macs.stderr).contains("--checkpoint"));
    assert!(!periopt(&["relax", p(&input), "--method", "newton"]).status.success());
    assert!(!periopt(&["relax", p(&input), "--calculator", "dft"]).status.success());
}

#[test]
fn bench_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let set = dir.path().join("set");
    ok(periopt(&["gen", "--config", p(&spec), "--out", p(&set)]));
    let (o1, o2) = (dir.path().join("o1"), dir.path().join("o2"));
    let t1 = ok(periopt(&["bench", "--testset", p(&set), "--out", p(&o1), "--timing", "off"]));
    let t2 = ok(periopt(&["bench", "--testset", p(&set), "--out", p(&o2), "--timing", "off", "--jobs", "2"]));
    assert_eq!(t1, t2);
    for label in ["n4", "n6"] {
        let name = format!("metrics_{label}.csv");
        let csv = fs::read_to_string(o1.join(&name)).unwrap();
        assert_eq!(csv, fs::read_to_string(o2.join(&name)).unwrap());
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("NA")));
    }

    let timed = dir.path().join("timed");
    ok(periopt(&["bench", "--testset", p(&set), "--out", p(&timed), "--methods", "BFGS"]));
    let csv = fs::read_to_string(timed.join("metrics_n4.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "BFGS");
    assert!(row[1].parse::<f64>().unwrap() > 0.0);

    let macs = periopt(&["bench", "--testset", p(&set), "--out", p(&timed), "--methods", "FIRE,MACS"]);
    assert!(!macs.status.success());
    assert!(String::from_utf8_lossy(&macs.stderr).contains("checkpoint"));

    ok(periopt(&["traces", "--results", p(&o1), "--bins", "4"]));
    let traces = fs::read_to_string(o1.join("traces_n4.csv")).unwrap();
    assert_eq!(traces.lines().next().unwrap(), "method,step,mean_energy,n_runs");
    assert!(traces.lines().any(|l| l.starts_with("CG,0,")));
    let hist = fs::read_to_string(o1.join("minima_n6.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 3 * 4);
}

#[test]
fn train_eval_and_relax_with_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, TINY_TRAIN).unwrap();
    let run = dir.path().join("run");
    let text = ok(periopt(&["train", "--config", p(&cfg), "--out", p(&run)]));
    assert!(text.contains("150 rounds"), "{text}");
    let ck = run.join("final.ckpt");
    assert!(ck.exists());
    assert!(run.join("checkpoints/checkpoint_00000100.ckpt").exists());
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);

    let eval = ok(periopt(&["eval", "--checkpoint", p(&ck), "--atoms", "6", "--count", "2", "--max-steps", "50"]));
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(lines[0], "set,method,T_mean,T_se,N_mean,N_se,C_mean,C_se,P_F");
    assert!(lines[1].starts_with("n6,MACS,"));

    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC.replace("[\"BFGS\", \"FIRE\", \"CG\"]", "[\"FIRE\", \"MACS\"]")).unwrap();
    let set = dir.path().join("set");
    ok(periopt(&["gen", "--config", p(&spec), "--out", p(&set)]));
    let out = dir.path().join("bench");
    let bench = ok(periopt(&["bench", "--testset", p(&set), "--out", p(&out), "--checkpoint", p(&ck), "--timing", "off"]));
    assert!(bench.lines().any(|l| l.starts_with("MACS,NA,NA,")), "{bench}");

    let relax = ok(periopt(&[
        "relax",
        p(&set.join("n4/0000.xyz")),
        "--method",
        "macs",
        "--checkpoint",
        p(&ck),
        "--max-steps",
        "20",
    ]));
    assert!(relax.starts_with("MACS success="));

    let env9 = dir.path().join("env.toml");
    fs::write(&env9, "feature_variant = \"FEAT9\"\n").unwrap();
    let run9 = dir.path().join("run9");
    ok(periopt(&["train", "--config", p(&cfg), "--env", p(&env9), "--out", p(&run9), "--rounds", "3"]));
    let ck9 = run9.join("final.ckpt");
    let r9 = ok(periopt(&["eval", "--checkpoint", p(&ck9), "--count", "1", "--max-steps", "5"]));
    assert!(r9.contains("n4,MACS"));
}
