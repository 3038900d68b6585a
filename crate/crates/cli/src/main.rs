//! `conveyor`: dataset generation, policy evaluation, conditioning sweeps,
//! dataset mixing and statistics for the conveyor dispatching simulator.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use conveyor_core::dataset::{
    dataset_stats, manifest_path, mix_datasets, read_dataset, write_dataset,
};
use conveyor_core::dt::{load_weights, save_weights, DtConfig, SelectionMode, TargetReturn};
use conveyor_core::harness::{
    evaluate, gen_data, resolve_target, sweep_conditioning, EvalSummary, PolicySpec, SweepSpec,
};
use conveyor_core::policies::HeuristicKind;
use conveyor_core::stats::FiveNumber;
use conveyor_core::{DtModelF32, ExperimentConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "conveyor", version, about = "Conveyor dispatching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record episodes of a policy into a trajectory dataset.
    GenData(GenDataArgs),
    /// Evaluate a policy over episodes and seeds.
    Eval(EvalArgs),
    /// Evaluate a decision transformer at several target returns.
    Sweep(SweepArgs),
    /// Sample trajectories from several datasets into one.
    Mix(MixArgs),
    /// Summarize a dataset.
    Stats(StatsArgs),
    /// Write a seed-initialized decision-transformer weight file.
    InitWeights(InitWeightsArgs),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let config = match &self.config {
            Some(p) => {
                ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct PolicyArgs {
    /// random, low, medium, high, sll or dt.
    #[arg(long)]
    policy: String,
    /// Weight files for `dt`: one shared file or one per incoming point.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<PathBuf>,
    /// Target return for `dt`: an integer or `auto-median:<heuristic>`.
    #[arg(long)]
    target_return: Option<TargetReturn>,
    /// Sample `dt` actions at this temperature instead of acting greedily.
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Dataset file; the manifest goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Per-run CSV; the manifest goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', required = true)]
    weights: Vec<PathBuf>,
    /// Base return: an integer or `auto-median:<heuristic>`.
    #[arg(long)]
    target_return: TargetReturn,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = SweepSpec::DEFAULT_OFFSETS)]
    offsets: Vec<i64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    /// Source datasets.
    #[arg(long, value_delimiter = ',', required = true)]
    inputs: Vec<PathBuf>,
    /// Episodes sampled from each source.
    #[arg(long)]
    per_source: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Optional CSV of the summaries.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InitWeightsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 20)]
    context_k: usize,
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
    #[arg(long, default_value_t = 3)]
    n_layers: usize,
    #[arg(long, default_value_t = 1)]
    n_heads: usize,
    #[arg(long)]
    out: PathBuf,
}

fn selection_mode(temperature: Option<f64>) -> SelectionMode {
    match temperature {
        Some(t) => SelectionMode::Sample { temperature: t },
        None => SelectionMode::Greedy,
    }
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Arc<DtModelF32>>> {
    if paths.is_empty() {
        bail!("policy dt needs --weights");
    }
    paths
        .iter()
        .map(|p| Ok(Arc::new(load_weights(p)?)))
        .collect()
}

/// Builds the policy to run, resolving an `auto-median` target with the
/// same episode and seed counts as the run itself.
fn policy_spec(
    args: &PolicyArgs,
    config: &ExperimentConfig,
    n_episodes: usize,
    n_seeds: usize,
    seed: u64,
) -> Result<(PolicySpec, Option<i64>)> {
    if args.policy != "dt" {
        if !args.weights.is_empty() || args.target_return.is_some() || args.temperature.is_some() {
            bail!("--weights, --target-return and --temperature only apply to --policy dt");
        }
        let kind: HeuristicKind = args.policy.parse()?;
        return Ok((PolicySpec::Heuristic(kind), None));
    }
    let models = load_models(&args.weights)?;
    let Some(target) = args.target_return else {
        bail!("policy dt needs --target-return");
    };
    let target_return = resolve_target(target, config, n_episodes, n_seeds, seed)?;
    let spec = PolicySpec::Dt {
        models,
        target_return,
        mode: selection_mode(args.temperature),
    };
    Ok((spec, Some(target_return)))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn five(f: &FiveNumber) -> [String; 5] {
    f.as_array().map(|v| v.to_string())
}

fn print_summary(s: &EvalSummary) {
    let f = &s.throughput;
    println!(
        "{}: {} runs, throughput min {} q1 {} median {} q3 {} max {}",
        s.policy,
        s.runs.len(),
        f.min,
        f.q1,
        f.median,
        f.q3,
        f.max
    );
}

fn gen_data_cmd(args: GenDataArgs) -> Result<()> {
    let config = args.common.load()?;
    let (spec, target) = policy_spec(&args.policy, &config, args.episodes, 1, args.common.seed)?;
    let data = gen_data(&spec, &config, args.episodes, args.common.seed)?;
    write_dataset(&data, &args.out)?;
    println!(
        "{}: {} trajectories, {} transitions -> {}",
        spec.name(),
        data.manifest.counts.n_trajectories,
        data.manifest.counts.n_transitions,
        args.out.display()
    );
    if let Some(t) = target {
        println!("target return {t}");
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let config = args.common.load()?;
    let seed = args.common.seed;
    let (spec, target) = policy_spec(&args.policy, &config, args.episodes, args.seeds, seed)?;
    let summary = evaluate(&spec, &config, args.episodes, args.seeds, seed)?;

    let mut w = csv::Writer::from_path(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let n_agents = config.sim.n_incoming;
    let mut header: Vec<String> = [
        "seed",
        "episode",
        "throughput",
        "storage_receipts",
        "outgoing_deliveries",
    ]
    .map(String::from)
    .to_vec();
    header.extend((0..n_agents).map(|i| format!("events_{i}")));
    w.write_record(&header)?;
    for r in &summary.runs {
        let mut row = vec![
            r.seed.to_string(),
            r.episode.to_string(),
            r.throughput.to_string(),
            r.storage_receipts.to_string(),
            r.outgoing_deliveries.to_string(),
        ];
        row.extend(r.events_per_agent.iter().map(u64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;

    write_json(
        &manifest_path(&args.out),
        &json!({
            "command": "eval",
            "config_hash": config.hash(),
            "config": config,
            "policy": spec.name(),
            "weights": args.policy.weights,
            "target_return": target,
            "episodes": args.episodes,
            "seeds": args.seeds,
            "base_seed": seed,
            "throughput": summary.throughput,
            "per_seed_medians": summary.per_seed_medians,
            "median_events_per_agent": summary.median_events_per_agent,
        }),
    )?;
    print_summary(&summary);
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Result<()> {
    let config = args.common.load()?;
    let seed = args.common.seed;
    let base_return = resolve_target(args.target_return, &config, args.episodes, args.seeds, seed)?;
    let spec = SweepSpec {
        models: load_models(&args.weights)?,
        mode: selection_mode(args.temperature),
        base_return,
        offsets: args.offsets,
        n_episodes: args.episodes,
        n_seeds: args.seeds,
    };
    let points = sweep_conditioning(&spec, &config, seed)?;

    let mut w = csv::Writer::from_path(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    w.write_record([
        "offset",
        "target_return",
        "min",
        "q1",
        "median",
        "q3",
        "max",
        "runs",
    ])?;
    for p in &points {
        let mut row = vec![p.offset.to_string(), p.target_return.to_string()];
        row.extend(five(&p.summary.throughput));
        row.push(p.summary.runs.len().to_string());
        w.write_record(&row)?;
        println!(
            "target {} (offset {:+}): median {}",
            p.target_return, p.offset, p.summary.throughput.median
        );
    }
    w.flush()?;

    write_json(
        &manifest_path(&args.out),
        &json!({
            "command": "sweep",
            "config_hash": config.hash(),
            "config": config,
            "weights": args.weights,
            "base_return": base_return,
            "offsets": spec.offsets,
            "episodes": args.episodes,
            "seeds": args.seeds,
            "base_seed": seed,
        }),
    )
}

fn mix_cmd(args: MixArgs) -> Result<()> {
    let sources = args
        .inputs
        .iter()
        .map(|p| read_dataset(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = sources.iter().collect();
    let mixed = mix_datasets(&refs, args.per_source, args.seed)?;
    write_dataset(&mixed, &args.out)?;
    println!(
        "{} sources x {} episodes: {} trajectories -> {}",
        sources.len(),
        args.per_source,
        mixed.manifest.counts.n_trajectories,
        args.out.display()
    );
    Ok(())
}

fn stats_cmd(args: StatsArgs) -> Result<()> {
    let data =
        read_dataset(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let stats = dataset_stats(&data)?;
    let src = data.source();
    println!(
        "{} ({} episodes, config {}): {} trajectories, {} transitions",
        src.policy, src.n_episodes, src.config_hash, stats.n_trajectories, stats.n_transitions
    );
    let mut rows: Vec<(String, FiveNumber)> = vec![
        ("return".into(), stats.returns),
        ("events".into(), stats.event_counts),
    ];
    for (i, f) in stats.per_agent_event_counts.iter().enumerate() {
        if let Some(f) = f {
            rows.push((format!("events_agent_{i}"), *f));
        }
    }
    for (name, f) in &rows {
        println!(
            "  {name}: min {} q1 {} median {} q3 {} max {}",
            f.min, f.q1, f.median, f.q3, f.max
        );
    }
    println!("  actions: {:?}", stats.action_histogram);

    if let Some(out) = &args.out {
        let mut w =
            csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
        w.write_record(["metric", "min", "q1", "median", "q3", "max"])?;
        for (name, f) in &rows {
            let mut row = vec![name.clone()];
            row.extend(five(f));
            w.write_record(&row)?;
        }
        w.flush()?;
        write_json(
            &manifest_path(out),
            &json!({
                "command": "stats",
                "config_hash": src.config_hash,
                "data": args.data,
                "stats": stats,
            }),
        )?;
    }
    Ok(())
}

fn init_weights_cmd(args: InitWeightsArgs) -> Result<()> {
    let config = args.common.load()?;
    let sim = &config.sim;
    let dt = DtConfig {
        context_k: args.context_k,
        embed_dim: args.embed_dim,
        n_layers: args.n_layers,
        n_heads: args.n_heads,
        state_dim: 2 * sim.n_storage + sim.n_junctions,
        n_actions: sim.n_storage,
        ..DtConfig::default()
    };
    let model = DtModelF32::init(dt, args.common.seed)?;
    save_weights(&model, &args.out)?;
    println!(
        "{} parameters -> {}",
        model.n_parameters(),
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Mix(a) => mix_cmd(a),
        Command::Stats(a) => stats_cmd(a),
        Command::InitWeights(a) => init_weights_cmd(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
