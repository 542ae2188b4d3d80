use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use periopt::bench::{
    draw_structure, energy_traces, gen_testset, load_reports, load_set, minima_histogram, run_bench, BenchOptions,
    BenchmarkSpec, Manifest, MetricsRow, METRICS_HEADER,
};
use periopt::crystal::SpeciesTable;
use periopt::env::{relax_macs, EnvConfig};
use periopt::extcalc::CalculatorSpec;
use periopt::optimizers::{relax, Method, RelaxationReport, TerminationPolicy};
use periopt::sac::{Checkpoint, SacPolicy, StructureSource, Trainer, TrainerConfig};
use periopt::xyz::{read_xyz, write_xyz};

const SEED_VAR: &str = "PERIOPT_SEED";

#[derive(Parser)]
#[command(name = "periopt", version, about = "Geometry optimization of periodic crystals")]
struct Cli {
    /// Species table (TOML) replacing the built-in one.
    #[arg(long, global = true)]
    species: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a reproducible test set.
    Gen(GenArgs),
    /// Relax one structure.
    Relax(RelaxArgs),
    /// Train a policy.
    Train(TrainArgs),
    /// Evaluate a trained policy.
    Eval(EvalArgs),
    /// Run every method over a test set.
    Bench(BenchArgs),
    /// Mean energy traces and minima histograms from benchmark reports.
    Traces(TracesArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// Benchmark spec (TOML); the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    set_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct RelaxArgs {
    /// Extended XYZ input.
    input: PathBuf,
    #[arg(long, default_value = "BFGS")]
    method: Method,
    /// Policy checkpoint, required for MACS.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    fmax: f64,
    #[arg(long, default_value_t = 1000)]
    max_steps: usize,
    /// `lj` or `cmd:<command>`.
    #[arg(long, default_value = "lj")]
    calculator: CalculatorSpec,
    /// Write the full report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the final structure as extended XYZ.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Trainer config (TOML); the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment config (TOML); defaults when omitted.
    #[arg(long)]
    env: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "lj")]
    calculator: CalculatorSpec,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on every set of this test set.
    #[arg(long, conflicts_with_all = ["atoms", "count"])]
    testset: Option<PathBuf>,
    /// Generate structures of the training species with this many atoms.
    #[arg(long)]
    atoms: Option<usize>,
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// First seed of the generated structures.
    #[arg(long, default_value_t = 1_000_000)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    fmax: f64,
    #[arg(long, default_value_t = 1000)]
    max_steps: usize,
    #[arg(long, default_value = "lj")]
    calculator: CalculatorSpec,
    /// Write the metrics rows as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long)]
    testset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated methods replacing those of the test set.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_enum, default_value = "on")]
    timing: Toggle,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Replaces the calculator of the test set.
    #[arg(long)]
    calculator: Option<CalculatorSpec>,
}

#[derive(clap::Args)]
struct TracesArgs {
    /// Benchmark output directory.
    #[arg(long)]
    results: PathBuf,
    /// Size sets to process; all when omitted.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_VAR}='{v}' is not an unsigned integer"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{SEED_VAR}: {e}"),
    }
}

fn pick_seed(flag: Option<u64>, config: u64) -> Result<u64> {
    Ok(flag.or(seed_override()?).unwrap_or(config))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen(args: GenArgs, table: &SpeciesTable) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => BenchmarkSpec::from_toml(&read_text(p)?)?,
        None => BenchmarkSpec::desk(),
    };
    spec.seed = pick_seed(args.seed, spec.seed)?;
    if let Some(n) = args.set_size {
        spec.set_size = n;
    }
    let m = gen_testset(&spec, table, &args.out)?;
    for s in &m.sets {
        println!("{}: {} structures of {} atoms", s.label, s.structures.len(), s.n_atoms);
    }
    Ok(())
}

fn print_report(r: &RelaxationReport) {
    println!(
        "{} success={} steps={} calls={} energy={} fmax={} time={:.3}s",
        r.method, r.success, r.steps, r.energy_calls, r.final_energy, r.final_fmax, r.wall_time
    );
    if let Some(f) = &r.failure {
        println!("failure: {f}");
    }
}

fn relax_cmd(args: RelaxArgs, table: &SpeciesTable) -> Result<()> {
    let (s, _) = read_xyz(&read_text(&args.input)?, table).with_context(|| format!("parsing {}", args.input.display()))?;
    let tp = TerminationPolicy::new(args.fmax, args.max_steps)?;
    let calc = args.calculator.build()?;
    let report = if args.method == Method::Macs {
        let Some(path) = &args.checkpoint else { bail!("MACS requires --checkpoint") };
        let ck = load_checkpoint(path)?;
        let mut policy = SacPolicy::from_checkpoint(&ck, &ck.env)?;
        relax_macs(&s, &mut policy, &ck.env, calc.as_ref(), &tp)?
    } else {
        relax(&s, args.method, calc.as_ref(), &tp)?
    };
    print_report(&report);
    if let Some(p) = &args.report {
        fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if let Some(p) = &args.output {
        let out = report.final_structure_like(&s);
        fs::write(p, write_xyz(&out, &[("energy", report.final_energy.to_string())]))?;
    }
    Ok(())
}

fn train(args: TrainArgs, table: &SpeciesTable) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => TrainerConfig::from_toml(&read_text(p)?)?,
        None => TrainerConfig::desk(),
    };
    cfg.seed = pick_seed(args.seed, cfg.seed)?;
    if let Some(r) = args.rounds {
        cfg.total_rounds = r;
    }
    if let Some(e) = args.episodes {
        cfg.max_episodes = Some(e);
    }
    let env = match &args.env {
        Some(p) => EnvConfig::from_toml(&read_text(p)?)?,
        None => EnvConfig::default(),
    };
    let calcs = (0..cfg.num_envs).map(|_| args.calculator.build()).collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("trainer.toml"), cfg.to_toml())?;
    fs::write(args.out.join("env.toml"), env.to_toml())?;
    let ck_dir = args.out.join("checkpoints");
    if cfg.checkpoint_interval.is_some() {
        fs::create_dir_all(&ck_dir)?;
    }
    let mut trainer = Trainer::new(cfg, env, table.clone(), calcs)?;
    let mut log = fs::File::create(args.out.join("train_log.csv"))?;
    trainer.run(Some(&mut log), Some(&ck_dir))?;
    log.flush()?;
    let final_path = args.out.join("final.ckpt");
    trainer.checkpoint().save(&final_path)?;
    let eps = trainer.episodes();
    let window = eps.len().min(50);
    let mean = |w: &[periopt::sac::EpisodeStat]| w.iter().map(|e| e.length as f64).sum::<f64>() / w.len().max(1) as f64;
    println!(
        "{} rounds, {} episodes; mean length first {window}: {:.1}, last {window}: {:.1}",
        trainer.rounds(),
        eps.len(),
        mean(&eps[..window]),
        mean(&eps[eps.len() - window..])
    );
    println!("checkpoint: {}", final_path.display());
    Ok(())
}

fn eval(args: EvalArgs, table: &SpeciesTable) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let tp = TerminationPolicy::new(args.fmax, args.max_steps)?;
    let calc = args.calculator.build()?;
    let mut sets: Vec<(String, Vec<periopt::crystal::Structure>)> = vec![];
    if let Some(dir) = &args.testset {
        let m = Manifest::load(dir)?;
        for set in &m.sets {
            sets.push((set.label.clone(), load_set(dir, set, table)?));
        }
    } else {
        let src = &ck.trainer.structures;
        let n = args.atoms.unwrap_or_else(|| src.n_atoms());
        let source = match src.composition.len() {
            1 => {
                let sym = src.composition.keys().next().expect("one species");
                StructureSource::single(sym, n, src.volume_per_atom, src.min_dist)
            }
            _ if n == src.n_atoms() => src.clone(),
            _ => bail!("--atoms needs a single-species training set; use --testset instead"),
        };
        let req = source.request(table)?;
        let structures = (0..args.count as u64)
            .map(|i| draw_structure(&req, args.seed + i).map(|(_, s)| s))
            .collect::<Result<Vec<_>, _>>()?;
        sets.push((format!("n{n}"), structures));
    }
    let mut rows = BTreeMap::new();
    println!("set,{METRICS_HEADER}");
    for (label, structures) in &sets {
        let mut policy = SacPolicy::from_checkpoint(&ck, &ck.env)?;
        let reports = structures
            .iter()
            .map(|s| relax_macs(s, &mut policy, &ck.env, calc.as_ref(), &tp))
            .collect::<Result<Vec<_>, _>>()?;
        let row = MetricsRow::from_reports("MACS", &reports, true);
        println!("{label},{}", row.csv());
        rows.insert(label.clone(), row);
    }
    if let Some(p) = &args.out {
        fs::write(p, serde_json::to_string_pretty(&rows)? + "\n")?;
    }
    Ok(())
}

fn bench(args: BenchArgs, table: &SpeciesTable) -> Result<()> {
    let ck = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let opts = BenchOptions {
        timing: matches!(args.timing, Toggle::On),
        jobs: args.jobs,
        methods: args.methods,
        calculator: args.calculator,
        ..BenchOptions::new(&args.out)
    };
    fs::create_dir_all(&args.out)?;
    for set in run_bench(&args.testset, table, ck.as_ref(), &opts)? {
        println!("# {}", set.label);
        println!("{METRICS_HEADER}");
        for r in &set.rows {
            println!("{}", r.csv());
        }
    }
    Ok(())
}

fn traces(args: TracesArgs) -> Result<()> {
    let reports_dir = args.results.join("reports");
    let mut labels: Vec<String> = match args.labels {
        Some(l) => l,
        None => fs::read_dir(&reports_dir)
            .with_context(|| format!("reading {}", reports_dir.display()))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect(),
    };
    labels.sort();
    for label in labels {
        let mut names: Vec<String> = match &args.methods {
            Some(m) => m.iter().map(|m| m.name().to_string()).collect(),
            None => fs::read_dir(reports_dir.join(&label))?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect(),
        };
        names.sort();
        let runs = names
            .into_iter()
            .map(|m| load_reports(&args.results, &label, &m).map(|r| (m, r)))
            .collect::<Result<Vec<_>, _>>()?;
        let tpath = args.results.join(format!("traces_{label}.csv"));
        let hpath = args.results.join(format!("minima_{label}.csv"));
        fs::write(&tpath, energy_traces(&runs))?;
        fs::write(&hpath, minima_histogram(&runs, args.bins))?;
        println!("{}\n{}", tpath.display(), hpath.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let table = match &cli.species {
        Some(p) => SpeciesTable::parse_toml(&read_text(p)?)?,
        None => SpeciesTable::default(),
    };
    match cli.cmd {
        Cmd::Gen(a) => gen(a, &table),
        Cmd::Relax(a) => relax_cmd(a, &table),
        Cmd::Train(a) => train(a, &table),
        Cmd::Eval(a) => eval(a, &table),
        Cmd::Bench(a) => bench(a, &table),
        Cmd::Traces(a) => traces(a),
    }
}
