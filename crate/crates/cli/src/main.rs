use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use comet::checkpoint::Checkpoint;
use comet::engine::{
    pretrain_for_scenario, pretrain_source, run_experiment, PretrainOutcome, Variant,
};
use comet::report::{
    run_sweep, run_sweep_pretrained, to_json_bytes, write_atomic, SweepAxis, SweepPlan,
};
use comet::scenario::{builtin_scenario, load_scenario, ScenarioConfig};
use comet::selftest::run_selftest;
use comet::stream::{parse_dataset_csv, SourceDataset};
use comet::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "comet",
    version,
    about = "Online source-free universal domain adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train source models and write one checkpoint per seed.
    Pretrain(PretrainArgs),
    /// Adapt over the target stream and write a summary and a per-batch log.
    Run(RunArgs),
    /// Evaluate the frozen source model on the target stream.
    Baseline(BaselineArgs),
    /// Run every (variant, value, seed) point of one sweep axis.
    Sweep(SweepArgs),
    /// Gradient checks and loss oracles.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Scenario file, or the name of a built-in scenario (`ref_opda`).
    #[arg(long, default_value = "ref_opda")]
    scenario: String,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Teacher EMA momentum.
    #[arg(long)]
    alpha: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Entropy loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Inference rejection threshold.
    #[arg(long)]
    delta: Option<f64>,
    /// Pseudo-label known threshold.
    #[arg(long)]
    delta_l: Option<f64>,
    /// Pseudo-label unknown threshold.
    #[arg(long)]
    delta_u: Option<f64>,
    /// Target batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adaptation learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

impl Overrides {
    fn apply(&self, s: &mut ScenarioConfig) -> Map<String, Value> {
        let mut applied = Map::new();
        let mut set = |name: &str, slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
                applied.insert(name.into(), json!(v));
            }
        };
        set("alpha", &mut s.hyper.alpha, self.alpha);
        set("tau", &mut s.hyper.tau, self.tau);
        set("lambda", &mut s.hyper.lambda, self.lambda);
        set("delta", &mut s.hyper.delta, self.delta);
        set("delta_l", &mut s.hyper.delta_l, self.delta_l);
        set("delta_u", &mut s.hyper.delta_u, self.delta_u);
        set("lr", &mut s.hyper.learning_rate, self.lr);
        if let Some(b) = self.batch_size {
            s.stream.batch_size = b;
            applied.insert("batch_size".into(), json!(b));
        }
        applied
    }
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Comma-separated seeds; defaults to the scenario seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Labeled source data as CSV (`x0,…,label`) instead of generated data.
    #[arg(long)]
    source_csv: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value = "comet-p")]
    variant: Variant,
    /// Defaults to the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory of checkpoints written by `pretrain`.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// batch_size, alpha, delta, delta_l_u or loss_combo.
    #[arg(long, default_value = "batch_size")]
    axis: SweepAxis,
    /// Comma-separated axis values; defaults to the axis' standard grid.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "comet-p,comet-f,source-only"
    )]
    variants: Vec<Variant>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    /// Random problems per gradient check.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

/// A validated scenario plus the overrides that produced it.
struct Resolved {
    scenario: ScenarioConfig,
    overrides: Map<String, Value>,
}

fn resolve(args: &ScenarioArgs) -> Result<Resolved> {
    let path = Path::new(&args.scenario);
    let mut scenario = match builtin_scenario(&args.scenario) {
        Some(s) if !path.exists() => s?,
        _ => load_scenario(path)?,
    };
    let overrides = args.overrides.apply(&mut scenario);
    scenario.validate()?;
    Ok(Resolved {
        scenario,
        overrides,
    })
}

fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("source-seed{seed}.ckpt"))
}

fn load_source(dir: &Path, scenario: &ScenarioConfig, seed: u64) -> Result<PretrainOutcome> {
    let ckpt = Checkpoint::load(checkpoint_path(dir, seed))?;
    ckpt.check_scenario(scenario)?;
    if ckpt.seed != seed {
        return Err(Error::Checkpoint(format!(
            "checkpoint was pre-trained with seed {}, not {seed}",
            ckpt.seed
        )));
    }
    PretrainOutcome::try_from(ckpt)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    let Resolved { scenario, .. } = resolve(&args.scenario)?;
    let seeds = if args.seeds.is_empty() {
        vec![scenario.seed]
    } else {
        args.seeds.clone()
    };
    let external = match &args.source_csv {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            let examples = parse_dataset_csv(&text)?;
            Some(SourceDataset::from_examples(
                examples,
                scenario.split.num_known(),
                scenario.data.input_dim,
            )?)
        }
        None => None,
    };
    create_dir(&args.out)?;
    for seed in seeds {
        let outcome = match &external {
            Some(data) => pretrain_source(
                data,
                scenario.network_config(),
                &scenario.pretrain,
                scenario.data.validation_fraction,
                seed,
            )?,
            None => pretrain_for_scenario(&scenario, seed)?,
        };
        let path = checkpoint_path(&args.out, seed);
        println!(
            "seed {seed}: validation accuracy {:.4} after {} epochs -> {}",
            outcome.validation_accuracy,
            outcome.epochs_run,
            path.display()
        );
        Checkpoint::from_pretrained(outcome, seed).save(&path)?;
    }
    Ok(())
}

fn run_one(
    resolved: &Resolved,
    variant: Variant,
    seed: Option<u64>,
    checkpoints: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let scenario = &resolved.scenario;
    let seed = seed.unwrap_or(scenario.seed);
    let source = checkpoints
        .map(|d| load_source(d, scenario, seed))
        .transpose()?;
    let exp = run_experiment(scenario, variant, seed, source.as_ref())?;
    create_dir(out)?;
    let stem = format!("{}-seed{seed}", variant.as_str());
    let summary = json!({
        "overrides": resolved.overrides,
        "scenario": scenario,
        "summary": exp.summary,
    });
    write_atomic(
        out.join(format!("{stem}.jsonl")),
        exp.record.to_jsonl()?.as_bytes(),
    )?;
    let summary_path = out.join(format!("{stem}.summary.json"));
    write_atomic(&summary_path, &to_json_bytes(&summary)?)?;
    println!(
        "{variant} seed {seed}: {} {:.4} -> {}",
        exp.summary.primary_metric,
        exp.summary.score,
        summary_path.display()
    );
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let resolved = resolve(&args.scenario)?;
    let scenario = &resolved.scenario;
    if args.jobs == Some(0) {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let plan = SweepPlan {
        axis: args.axis,
        values: if args.values.is_empty() {
            args.axis.default_values()
        } else {
            args.values.clone()
        },
        seeds: args.seeds.clone(),
        variants: args.variants.clone(),
        jobs: args.jobs,
    };
    let table = match &args.checkpoints {
        Some(dir) => {
            let sources = plan
                .seeds
                .iter()
                .map(|&s| load_source(dir, scenario, s))
                .collect::<Result<Vec<_>>>()?;
            run_sweep_pretrained(scenario, &plan, &sources)?
        }
        None => run_sweep(scenario, &plan)?,
    };
    create_dir(&args.out)?;
    let stem = format!("sweep-{}", plan.axis);
    let means = table.means();
    write_atomic(
        args.out.join(format!("{stem}.rows.csv")),
        &table.rows_csv()?,
    )?;
    write_atomic(args.out.join(format!("{stem}.csv")), &table.means_csv()?)?;
    let report = json!({
        "overrides": resolved.overrides,
        "scenario": scenario,
        "axis": plan.axis,
        "values": plan.values,
        "seeds": plan.seeds,
        "means": means,
        "rows": table.rows,
    });
    write_atomic(
        args.out.join(format!("{stem}.json")),
        &to_json_bytes(&report)?,
    )?;
    for m in &means {
        println!(
            "{:<12} {}={:<10} {} {:.4}",
            m.variant, plan.axis, m.value, m.metric, m.mean
        );
    }
    Ok(())
}

fn selftest(args: &SelftestArgs) -> Result<bool> {
    let checks = run_selftest(args.seeds)?;
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Pretrain(a) => pretrain(a)?,
        Command::Run(a) => run_one(
            &resolve(&a.scenario)?,
            a.variant,
            a.seed,
            a.checkpoints.as_deref(),
            &a.out,
        )?,
        Command::Baseline(a) => run_one(
            &resolve(&a.scenario)?,
            Variant::SourceOnly,
            a.seed,
            a.checkpoints.as_deref(),
            &a.out,
        )?,
        Command::Sweep(a) => sweep(a)?,
        Command::Selftest(a) => return selftest(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
