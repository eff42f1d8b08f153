use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use tnn_core::gating::Utilization;
use tnn_core::rng::derived;
use tnn_core::trainer::{train_controller, train_datapath, train_gate_policy};
use tnn_core::Tensor;
use tnn_harness::bench::{bench, bench_table};
use tnn_harness::checkpoint::{Checkpoint, Metadata, ModelDescriptor};
use tnn_harness::config::Config;
use tnn_harness::data::{generate, load_dataset, save_dataset, DataSpec, Dataset, SPEC_KEYS};
use tnn_harness::eval::{curve_csv, eval_controller, eval_curve, eval_policy_curve, parse_grid, ExecMode};
use tnn_harness::experiment::{controller, gate_policy, train_config, ModelConfig, RUN_KEYS};
use tnn_harness::manifest::Manifest;

#[derive(Parser, Debug)]
#[command(name = "tnn", version, about = "Train and evaluate throttleable neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tiered dataset.
    GenData(GenData),
    /// Phase 1: train the data path.
    TrainDatapath(TrainDatapath),
    /// Phase 2: train a gate policy against a frozen data path.
    TrainGates(TrainPhase2),
    /// Phase 2: train the utilization controller against a frozen data path.
    TrainController(TrainPhase2),
    /// Accuracy, MAC ratio and latency at fixed utilizations, as CSV.
    EvalCurve(EvalCurve),
    /// Score a controller against every fixed utilization and the upper bound.
    EvalController(EvalController),
    /// Time forward passes at several utilizations.
    Bench(Bench),
    /// Describe a checkpoint.
    Inspect(Inspect),
    /// Repeat a recorded run from its manifest, writing to a new output.
    Rerun(Rerun),
}

#[derive(Args, Debug)]
struct GenData {
    /// Dataset spec (`data.*` keys); defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainDatapath {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides `data.dir`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainPhase2 {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained data-path checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalCurve {
    #[arg(long)]
    model: PathBuf,
    /// Gate-policy checkpoint; gates are then drawn per input from it.
    #[arg(long)]
    gates: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "0.1:1.0:0.1")]
    grid: String,
    /// masked, sliced or sliced-nopropagate.
    #[arg(long, default_value = "masked")]
    mode: String,
    /// Timed passes per point (at least 3).
    #[arg(long, default_value_t = 3)]
    passes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalController {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    controller: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Bench {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "sliced")]
    mode: String,
    #[arg(long, default_value = "0.1:1.0:0.1")]
    grid: String,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Random inputs per timed pass.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Inspect {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct Rerun {
    #[arg(long)]
    manifest: PathBuf,
    /// Replaces the recorded output path.
    #[arg(long)]
    out: PathBuf,
}

/// What a subcommand was invoked with, kept for its manifest.
struct Invocation {
    name: String,
    args: Vec<String>,
    /// Config recorded by an earlier run; used instead of re-reading files.
    config: Option<Config>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let inv = Invocation {
        name: argv.get(1).cloned().unwrap_or_default(),
        args: argv.iter().skip(2).cloned().collect(),
        config: None,
    };
    match dispatch(cli.command, inv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command, inv: Invocation) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, inv),
        Command::TrainDatapath(a) => train_datapath_cmd(a, inv),
        Command::TrainGates(a) => train_phase2(a, inv, Phase2::Gates),
        Command::TrainController(a) => train_phase2(a, inv, Phase2::Controller),
        Command::EvalCurve(a) => eval_curve_cmd(a, inv),
        Command::EvalController(a) => eval_controller_cmd(a, inv),
        Command::Bench(a) => bench_cmd(a),
        Command::Inspect(a) => inspect(a),
        Command::Rerun(a) => rerun(a),
    }
}

fn read_config(path: Option<&Path>, recorded: Option<Config>, allowed: &[&str]) -> Result<Config> {
    let cfg = match (recorded, path) {
        (Some(c), _) => c,
        (None, Some(p)) => Config::load(p)?,
        (None, None) => Config::default(),
    };
    cfg.check_keys(allowed)?;
    Ok(cfg)
}

fn finish(inv: &Invocation, cfg: Option<&Config>, seed: u64, outputs: &[&Path], manifest_at: &Path) -> Result<()> {
    let mut m = Manifest::new(&inv.name, &inv.args, cfg, seed);
    for o in outputs {
        m.add_output(o)?;
    }
    m.write(manifest_at)
}

fn data_dir(flag: Option<&Path>, cfg: Option<&Config>, meta: Option<&Metadata>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.get_str("data.dir")).map(PathBuf::from))
        .or_else(|| meta.and_then(|m| m.extra.get("data.dir")).map(PathBuf::from))
        .context("no dataset: pass --data or set data.dir")
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn metadata(cfg: &Config, seed: u64, data: &Path) -> Metadata {
    let mut meta = Metadata {
        seed,
        config_hash: cfg.hash(),
        ..Default::default()
    };
    meta.extra.insert("data.dir".into(), data.display().to_string());
    meta
}

fn gen_data(a: GenData, inv: Invocation) -> Result<()> {
    let cfg = read_config(a.spec.as_deref(), inv.config.clone(), SPEC_KEYS)?;
    let spec = DataSpec::from_config(&cfg)?;
    let ds = generate(&spec, a.seed)?;
    save_dataset(&a.out, &ds)?;
    let files: Vec<PathBuf> = ["index.txt", "train.bin", "val.bin"]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    finish(&inv, Some(&cfg), a.seed, &refs, &a.out.join("manifest.json"))?;
    println!(
        "wrote {} train and {} validation samples to {}",
        ds.train.len(),
        ds.val.len(),
        a.out.display()
    );
    Ok(())
}

fn train_datapath_cmd(a: TrainDatapath, inv: Invocation) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref(), inv.config.clone(), RUN_KEYS)?;
    if let Some(s) = a.seed {
        cfg.set("train.seed", s);
    }
    let dir = data_dir(a.data.as_deref(), Some(&cfg), None)?;
    let ds = load_data(&dir)?;
    let tc = train_config(&cfg)?;
    let model = ModelConfig::from_config(&cfg)?;
    let mut net = model.build(ds.train.sample_shape(), ds.classes, tc.seed)?;
    let history = train_datapath(&mut net, &ds.train, &tc)?;
    Checkpoint::of_network(&net, metadata(&cfg, tc.seed, &dir)).save(&a.out)?;
    finish(&inv, Some(&cfg), tc.seed, &[&a.out], &Manifest::path_for(&a.out))?;
    if let Some(last) = history.last() {
        println!(
            "trained {} epochs: loss {:.4}, train accuracy {:.4}; wrote {}",
            history.len(),
            last.loss,
            last.accuracy,
            a.out.display()
        );
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Phase2 {
    Gates,
    Controller,
}

fn train_phase2(a: TrainPhase2, inv: Invocation, which: Phase2) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref(), inv.config.clone(), RUN_KEYS)?;
    if let Some(s) = a.seed {
        cfg.set("train.seed", s);
    }
    let ck = load_checkpoint(&a.model)?;
    let net = ck.datapath()?;
    let dir = data_dir(a.data.as_deref(), Some(&cfg), Some(&ck.meta))?;
    let ds = load_data(&dir)?;
    let tc = train_config(&cfg)?;
    let meta = metadata(&cfg, tc.seed, &dir);
    match which {
        Phase2::Gates => {
            let mut policy = gate_policy(&cfg, &net, tc.seed)?;
            let h = train_gate_policy(&net, &mut policy, &ds.train, &tc)?;
            Checkpoint::of_gate_policy(&policy, meta).save(&a.out)?;
            if let Some(r) = h.last() {
                println!(
                    "gate policy: task {:.4} penalty {:.4} complexity {:.3}; wrote {}",
                    r.task_loss,
                    r.penalty,
                    r.mean_complexity,
                    a.out.display()
                );
            }
        }
        Phase2::Controller => {
            let mut policy = controller(&cfg, &net, tc.seed)?;
            let h = train_controller(&net, &mut policy, &ds.train, &tc)?;
            Checkpoint::of_controller(&policy, meta).save(&a.out)?;
            if let Some(r) = h.last() {
                println!(
                    "controller: reward {:.4} mean u {:.3} accuracy {:.4}; wrote {}",
                    r.mean_reward,
                    r.mean_u,
                    r.accuracy,
                    a.out.display()
                );
            }
        }
    }
    finish(&inv, Some(&cfg), tc.seed, &[&a.out], &Manifest::path_for(&a.out))
}

fn eval_curve_cmd(a: EvalCurve, inv: Invocation) -> Result<()> {
    let grid = parse_grid(&a.grid).map_err(anyhow::Error::msg)?;
    let mode: ExecMode = a.mode.parse().map_err(anyhow::Error::msg)?;
    let ck = load_checkpoint(&a.model)?;
    let net = ck.datapath()?;
    let ds = load_data(&data_dir(a.data.as_deref(), None, Some(&ck.meta))?)?;
    let points = match &a.gates {
        None => eval_curve(&net, &ds.val, &grid, mode, a.passes, a.seed)?,
        Some(p) => {
            if mode != ExecMode::Masked {
                bail!("learned gates differ per input and only run in masked mode");
            }
            let policy = load_checkpoint(p)?.gate_policy()?;
            eval_policy_curve(&net, &policy, &ds.val, &grid, a.passes, a.seed)?
        }
    };
    fs::write(&a.out, curve_csv(&points)).with_context(|| format!("writing {}", a.out.display()))?;
    finish(&inv, None, a.seed, &[&a.out], &Manifest::path_for(&a.out))?;
    print!("{}", curve_csv(&points));
    Ok(())
}

fn eval_controller_cmd(a: EvalController, inv: Invocation) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let net = ck.datapath()?;
    let policy = load_checkpoint(&a.controller)?.controller()?;
    let ds = load_data(&data_dir(a.data.as_deref(), None, Some(&ck.meta))?)?;
    let r = eval_controller(&net, &policy, &ds.val, a.seed)?;
    let fixed: Vec<serde_json::Value> = r
        .fixed
        .iter()
        .map(|f| serde_json::json!({"u": f.u, "accuracy": f.accuracy, "total_utilization": f.total_utilization}))
        .collect();
    let report = serde_json::json!({
        "accuracy": r.accuracy,
        "mean_u": r.mean_u,
        "total_utilization": r.total_utilization,
        "histogram": r.histogram,
        "upper_bound": {"accuracy": r.upper_bound_accuracy, "total_utilization": r.upper_bound_total},
        "fixed": fixed,
    });
    fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", a.out.display()))?;
    finish(&inv, None, a.seed, &[&a.out], &Manifest::path_for(&a.out))?;
    println!(
        "controller accuracy {:.4} at mean u {:.3}; upper bound {:.4}; histogram {:?}",
        r.accuracy, r.mean_u, r.upper_bound_accuracy, r.histogram
    );
    Ok(())
}

fn bench_cmd(a: Bench) -> Result<()> {
    let grid = parse_grid(&a.grid).map_err(anyhow::Error::msg)?;
    let mode: ExecMode = a.mode.parse().map_err(anyhow::Error::msg)?;
    let net = load_checkpoint(&a.model)?.datapath()?;
    let mut shape = vec![a.batch.max(1)];
    shape.extend_from_slice(net.input_shape());
    let mut rng = derived(a.seed, 0);
    let x = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let table = bench_table(&bench(&net, &x, &grid, mode, a.runs)?);
    if let Some(out) = &a.out {
        fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{table}");
    Ok(())
}

fn inspect(a: Inspect) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let net = ck.network()?;
    println!("kind: {}", ck.model.kind());
    println!("format version: {}", ck.version);
    println!("seed: {}", ck.meta.seed);
    println!("config hash: {}", ck.meta.config_hash);
    for (k, v) in &ck.meta.extra {
        println!("{k}: {v}");
    }
    println!("input shape: {:?}", net.input_shape());
    println!("tensors: {}", ck.tensors.len());
    println!("parameters: {}", net.num_params());
    if let ModelDescriptor::Datapath { .. } = ck.model {
        println!("gated modules: {:?}", net.module_sizes());
        let gates = net.draw_gates(Utilization::new(1.0)?, &mut derived(0, 0))?;
        println!("MACs at u=1: {}", net.mac_count(&gates, false)?.active);
    }
    Ok(())
}

fn rerun(a: Rerun) -> Result<()> {
    let m = Manifest::read(&a.manifest)?;
    let mut args = m.args.clone();
    match args.iter().position(|s| s == "--out") {
        Some(i) if i + 1 < args.len() => args[i + 1] = a.out.display().to_string(),
        _ => match args.iter().position(|s| s.starts_with("--out=")) {
            Some(i) => args[i] = format!("--out={}", a.out.display()),
            None => bail!("manifest records no --out argument"),
        },
    }
    let mut argv = vec!["tnn".to_string(), m.command.clone()];
    argv.extend(args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| anyhow::anyhow!("recorded arguments no longer parse: {e}"))?;
    if matches!(cli.command, Command::Rerun(_)) {
        bail!("a rerun manifest cannot be rerun");
    }
    let config = if m.config.is_empty() { None } else { Some(m.config()?) };
    dispatch(
        cli.command,
        Invocation {
            name: m.command,
            args,
            config,
        },
    )
}
