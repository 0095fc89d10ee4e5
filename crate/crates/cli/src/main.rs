//! `come` — train and probe collaborative multi-expert models on long-tailed
//! graph classification corpora.
//!
//! Subcommands: `gen-data` builds a synthetic motif corpus with balanced
//! held-out splits and a power-law training set; `ingest` converts a
//! TU-format directory to the native JSON-lines corpus; `train`, `eval` and
//! `ablate` run experiments; `gradcheck` verifies every backward rule
//! against central finite differences.
//!
//! The `COME_SEED` environment variable overrides the configured seed.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use come_core::ablation::{run_ablation, to_csv, LADDER};
use come_core::checkpoint::Checkpoint;
use come_core::config::{Method, TrainConfig};
use come_core::data::longtail::{make_long_tailed, split_balanced, LongTailSpec};
use come_core::data::motif::{generate_motif_corpus, MotifSpec};
use come_core::data::tu::ingest_tu;
use come_core::data::{read_jsonl, write_jsonl, DatasetStats, Graph};
use come_core::tensor::gradcheck::run_op_suite;
use come_core::train::{evaluate_bank, train, Splits};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "come",
    version,
    about = "Long-tailed graph classification with collaborative experts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic motif corpus: balanced val/test splits plus a
    /// power-law long-tailed training split.
    GenData(GenDataArgs),
    /// Convert a TU-format dataset directory into the native JSON-lines
    /// corpus.
    Ingest(IngestArgs),
    /// Train a model and write per-epoch metrics, a summary table, and a
    /// checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus file.
    Eval(EvalArgs),
    /// Run the component ablation matrix.
    Ablate(AblateArgs),
    /// Check every tensor op's gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for train/val/test.jsonl and stats.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Per-class count before splitting and long-tailing.
    #[arg(long = "per-class", default_value_t = 80)]
    per_class: usize,
    /// Fraction of edges rewired per graph.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Balanced validation samples per class.
    #[arg(long = "val-per-class", default_value_t = 10)]
    val_per_class: usize,
    /// Balanced test samples per class.
    #[arg(long = "test-per-class", default_value_t = 10)]
    test_per_class: usize,
    /// Target imbalance factor of the training split; 1 keeps it balanced.
    #[arg(long = "imbalance-factor", default_value_t = 20.0)]
    imbalance_factor: f64,
    /// Smallest per-graph background size.
    #[arg(long = "background-nodes", default_value_t = 8)]
    background_nodes: usize,
    /// Largest per-graph background size.
    #[arg(long = "background-nodes-max", default_value_t = 11)]
    background_nodes_max: usize,
    /// Extra background edges per background node; denser backgrounds
    /// separate cycle nodes from background nodes by degree.
    #[arg(long = "background-density", default_value_t = 2.5)]
    background_density: f64,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory holding the TU text files.
    #[arg(long)]
    dir: PathBuf,
    /// Output JSON-lines corpus path.
    #[arg(long)]
    out: PathBuf,
    /// Degree cap for one-hot features when the dataset has no attributes.
    #[arg(long = "max-degree", default_value_t = 10)]
    max_degree: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.jsonl, val.jsonl and test.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics.jsonl, summary.csv and checkpoint.json.
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

/// Flag overrides applied on top of the config file.
#[derive(Args)]
struct ConfigOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long = "learning-rate")]
    learning_rate: Option<f64>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long = "m-hard")]
    m_hard: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus file to evaluate (JSON lines).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    /// Comma-separated variant names; defaults to the M1..M7 ladder.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Number of seeds averaged per variant.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random shapes per op.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::Ingest(args) => ingest(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec = MotifSpec::new(args.classes, args.per_class, args.noise, args.seed);
    spec.background_nodes = args.background_nodes;
    spec.background_nodes_max = args.background_nodes_max;
    spec.background_density = args.background_density;
    let corpus = generate_motif_corpus(&spec)?;
    let (val, test, rest) =
        split_balanced(&corpus, args.val_per_class, args.test_per_class, args.seed)?;
    let (train_split, stats) = if args.imbalance_factor > 1.0 {
        make_long_tailed(&rest, &LongTailSpec::new(args.imbalance_factor, args.seed))?
    } else {
        let stats = DatasetStats::from_graphs(&rest)?;
        (rest, stats)
    };

    fs::create_dir_all(&args.out)?;
    write_jsonl(args.out.join("train.jsonl"), &train_split)?;
    write_jsonl(args.out.join("val.jsonl"), &val)?;
    write_jsonl(args.out.join("test.jsonl"), &test)?;
    fs::write(
        args.out.join("stats.json"),
        serde_json::to_string_pretty(&stats)?,
    )?;
    println!(
        "wrote {} train / {} val / {} test graphs to {} (IF = {:.2}, class sizes {:?})",
        train_split.len(),
        val.len(),
        test.len(),
        args.out.display(),
        stats.imbalance_factor,
        stats.class_sizes,
    );
    Ok(())
}

fn ingest(args: IngestArgs) -> Result<()> {
    let (graphs, stats) = ingest_tu(&args.dir, args.max_degree)?;
    write_jsonl(&args.out, &graphs)?;
    println!(
        "ingested {} graphs, {} classes, sizes {:?} -> {}",
        graphs.len(),
        stats.class_count,
        stats.class_sizes,
        args.out.display(),
    );
    Ok(())
}

fn load_config(path: &Option<PathBuf>, overrides: &ConfigOverrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            TrainConfig::from_json_file(p).with_context(|| format!("loading {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = overrides.epochs {
        cfg.epochs = epochs;
    }
    if let Some(lr) = overrides.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(experts) = overrides.experts {
        cfg.experts = experts;
    }
    if let Some(batch) = overrides.batch_size {
        cfg.batch_size = batch;
    }
    if let Some(hidden) = overrides.hidden {
        cfg.hidden = hidden;
        cfg.z_dim = hidden;
    }
    if let Some(m) = overrides.m_hard {
        cfg.m_hard = Some(m);
    }
    if let Some(method) = &overrides.method {
        cfg.method = match method.as_str() {
            "come" => Method::Come,
            "ce-baseline" => Method::CeBaseline,
            "oversample-baseline" => Method::OversampleBaseline,
            "supcon-baseline" => Method::SupconBaseline,
            other => bail!("unknown method {other:?}"),
        };
    }
    cfg.apply_env_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn load_splits(dir: &Path) -> Result<(Vec<Graph>, Vec<Graph>, Vec<Graph>)> {
    let read = |name: &str| -> Result<Vec<Graph>> {
        let path = dir.join(name);
        read_jsonl(&path).with_context(|| format!("reading {}", path.display()))
    };
    Ok((
        read("train.jsonl")?,
        read("val.jsonl")?,
        read("test.jsonl")?,
    ))
}

fn summary_csv(rows: &[(&str, &come_core::metrics::Metrics)]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    let mut out = String::from("split,overall,head,medium,tail\n");
    for (split, m) in rows {
        out.push_str(&format!(
            "{},{:.4},{},{},{}\n",
            split,
            m.overall,
            opt(m.head),
            opt(m.medium),
            opt(m.tail)
        ));
    }
    out
}

fn run_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let (train_split, val, test) = load_splits(&args.data)?;
    fs::create_dir_all(&args.out_dir)?;

    let outcome = train(
        &cfg,
        Splits {
            train: &train_split,
            val: &val,
        },
    )?;

    let mut metrics_file = fs::File::create(args.out_dir.join("metrics.jsonl"))?;
    for record in &outcome.history {
        serde_json::to_writer(&mut metrics_file, record)?;
        metrics_file.write_all(b"\n")?;
    }

    let val_metrics = evaluate_bank(&outcome.bank, &val, &outcome.train_counts, cfg.eval_batch)?;
    let test_metrics = evaluate_bank(&outcome.bank, &test, &outcome.train_counts, cfg.eval_batch)?;
    fs::write(
        args.out_dir.join("summary.csv"),
        summary_csv(&[("val", &val_metrics), ("test", &test_metrics)]),
    )?;

    let ckpt = Checkpoint::new(
        outcome.bank,
        outcome.train_counts,
        cfg.clone(),
        outcome.best_epoch,
    );
    ckpt.save(args.out_dir.join("checkpoint.json"))?;
    fs::write(args.out_dir.join("config.json"), cfg.to_json_pretty())?;

    println!(
        "trained {} epochs (best at {}), val {:.4}, test {:.4} (head {:?} / medium {:?} / tail {:?})",
        outcome.history.len(),
        outcome.best_epoch,
        val_metrics.overall,
        test_metrics.overall,
        test_metrics.head,
        test_metrics.medium,
        test_metrics.tail,
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let graphs = read_jsonl(&args.data)?;
    let metrics = evaluate_bank(
        &ckpt.bank,
        &graphs,
        &ckpt.train_counts,
        ckpt.config.eval_batch,
    )?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let (train_split, val, test) = load_splits(&args.data)?;
    fs::create_dir_all(&args.out_dir)?;

    let variants: Vec<String> = if args.variants.is_empty() {
        LADDER.iter().map(|s| s.to_string()).collect()
    } else {
        args.variants.clone()
    };
    if args.seeds == 0 {
        bail!("need at least one seed");
    }
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| cfg.seed + i).collect();

    let rows = run_ablation(&cfg, &train_split, &val, &test, &variants, &seeds)?;
    let csv = to_csv(&rows);
    fs::write(args.out_dir.join("ablation.csv"), &csv)?;
    fs::write(
        args.out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    print!("{csv}");
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let reports = run_op_suite(args.seed, args.cases);
    let mut all_ok = true;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {op:<24} cases {cases:4}  checks {checks:6}  max rel err {err:.3e}",
            op = r.op,
            cases = r.cases,
            checks = r.checks,
            err = r.max_err,
        );
        all_ok &= r.passed();
    }
    if !all_ok {
        bail!("gradient check failed");
    }
    Ok(())
}
