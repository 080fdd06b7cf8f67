//! `grounding` command-line driver.
//!
//! Exit codes: 0 on success, 2 for usage, configuration, data or I/O
//! errors, 3 for numerical failures (non-finite losses, failed gradient
//! checks).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use grounding::data::{generate_synthetic, load_dataset, save_dataset, save_predictions, DatasetRecord, SynthSpec};
use grounding::eval::MetricReport;
use grounding::gradcheck::gradcheck;
use grounding::pipeline::{manifest_path, summarize, train_and_evaluate, EpochLog, RunConfig, Trainer};
use grounding::types::{AttentionVariant, Components};
use grounding::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "grounding", version, about = "Correlation-guided moment retrieval and highlight detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (JSONL annotations and feature sidecars).
    Gen {
        /// Generator settings as JSON; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a complete run configuration.
    Config {
        /// `desk` (small synthetic setting) or `full` (benchmark-sized model).
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Feature width for the desk preset.
        #[arg(long, default_value_t = 64)]
        feature_dim: usize,
    },
    /// Train a model and write checkpoints, metrics and a run manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run configuration JSON; every field is required. Optional with --resume.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Total epochs to reach (overrides the configuration).
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Hold out the last N pairs for evaluation.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        #[arg(long, default_value_t = 10)]
        checkpoint_every: usize,
        #[arg(long, default_value_t = 2.0)]
        clip_seconds: f64,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metric report JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also write the correspondence-alignment analysis as CSV.
        #[arg(long)]
        analysis: Option<PathBuf>,
        /// Also write predictions as JSONL.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Evaluate only the last N pairs.
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = 2.0)]
        clip_seconds: f64,
    },
    /// Train every (variant, row, seed) combination and tabulate metrics.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "a,b,c,d,e,f,g")]
        rows: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "aca")]
        variants: Vec<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Base configuration; the desk preset sized to the data when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        /// Write the table (markdown) here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        clip_seconds: f64,
    },
    /// Finite-difference check of every loss term's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(Error::Numerics(_)) => 3,
            _ => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Gen { spec, out } => cmd_gen(spec.as_deref(), &out),
        Command::Config { preset, feature_dim } => cmd_config(&preset, feature_dim),
        Command::Train { data, config, seed, out, epochs, resume, holdout, checkpoint_every, clip_seconds } => {
            cmd_train(TrainArgs {
                data,
                config,
                seed,
                out,
                epochs,
                resume,
                holdout,
                checkpoint_every,
                clip_seconds,
            })
        }
        Command::Eval { ckpt, data, out, analysis, predictions, holdout, bins, clip_seconds } => {
            cmd_eval(&ckpt, &data, &out, analysis.as_deref(), predictions.as_deref(), holdout, bins, clip_seconds)
        }
        Command::Ablate { data, rows, variants, seeds, config, epochs, holdout, out, clip_seconds } => {
            cmd_ablate(AblateArgs { data, rows, variants, seeds, config, epochs, holdout, out, clip_seconds })
        }
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid {what} {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// SHA-256 over the annotation file and every feature sidecar (path and
/// bytes, in sorted path order).
fn dataset_fingerprint(dir: &Path) -> CliResult<String> {
    let mut files = vec![dir.join(grounding::data::ANNOTATIONS_FILE)];
    let features = dir.join("features");
    if features.is_dir() {
        collect_files(&features, &mut files)?;
    }
    files[1..].sort();
    let mut h = Sha256::new();
    for f in &files {
        let rel = f.strip_prefix(dir).unwrap_or(f).to_string_lossy().replace('\\', "/");
        h.update(rel.as_bytes());
        h.update([0]);
        let bytes = fs::read(f)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    version: String,
    spec: SynthSpec,
    n_pairs: usize,
    fingerprint: String,
}

fn cmd_gen(spec: Option<&Path>, out: &Path) -> CliResult {
    let spec: SynthSpec = match spec {
        Some(p) => read_json(p, "generator spec")?,
        None => SynthSpec::default(),
    };
    let records = generate_synthetic(&spec)?;
    save_dataset(out, &records)?;
    let manifest = DatasetManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        spec,
        n_pairs: records.len(),
        fingerprint: dataset_fingerprint(out)?,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {} pairs to {} ({})", records.len(), out.display(), manifest.fingerprint);
    Ok(())
}

fn cmd_config(preset: &str, feature_dim: usize) -> CliResult {
    let run = match preset {
        "desk" => RunConfig::desk(feature_dim),
        "full" => RunConfig {
            model: Default::default(),
            loss: Default::default(),
            train: Default::default(),
        },
        other => return Err(Failure::Usage(format!("unknown preset '{other}' (expected desk or full)"))),
    };
    println!("{}", serde_json::to_string_pretty(&run)?);
    Ok(())
}

fn load_split(dir: &Path, holdout: usize, clip_seconds: f64) -> CliResult<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    let mut all = load_dataset(dir, clip_seconds)?;
    if holdout >= all.len() && holdout > 0 {
        return Err(Failure::Usage(format!("holdout {holdout} leaves no training pairs out of {}", all.len())));
    }
    let eval = all.split_off(all.len() - holdout);
    Ok((all, eval))
}

/// Everything needed to rerun a training command.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    version: String,
    config: RunConfig,
    seed: u64,
    dataset: String,
    dataset_fingerprint: String,
    holdout: usize,
    clip_seconds: f64,
    resumed_from: Option<PathBuf>,
    status: String,
    history: Vec<EpochLog>,
}

struct TrainArgs {
    data: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
    epochs: Option<usize>,
    resume: Option<PathBuf>,
    holdout: usize,
    checkpoint_every: usize,
    clip_seconds: f64,
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let config: Option<RunConfig> = a.config.as_deref().map(|p| read_json(p, "run configuration")).transpose()?;
    let mut trainer = match (&a.resume, config) {
        (Some(ckpt), cfg) => {
            let t = Trainer::load_checkpoint(ckpt)?;
            if let Some(cfg) = cfg {
                let mut expect = t.run.clone();
                expect.train.epochs = cfg.train.epochs;
                if cfg != expect {
                    return Err(Failure::Usage("configuration differs from the checkpoint being resumed".into()));
                }
            }
            if a.seed.is_some_and(|s| s != t.run.train.seed) {
                return Err(Failure::Usage("--seed differs from the checkpoint being resumed".into()));
            }
            t
        }
        (None, Some(mut cfg)) => {
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            Trainer::new(cfg)?
        }
        (None, None) => return Err(Failure::Usage("--config is required unless --resume is given".into())),
    };
    let epochs = a.epochs.unwrap_or(trainer.run.train.epochs);
    trainer.run.train.epochs = epochs;
    let (train, eval) = load_split(&a.data, a.holdout, a.clip_seconds)?;
    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    let metrics = a.out.join("metrics.jsonl");
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: trainer.run.clone(),
        seed: trainer.run.train.seed,
        dataset: a.data.display().to_string(),
        dataset_fingerprint: dataset_fingerprint(&a.data)?,
        holdout: a.holdout,
        clip_seconds: a.clip_seconds,
        resumed_from: a.resume.clone(),
        status: "running".into(),
        history: Vec::new(),
    };
    trainer.save_checkpoint(&ckpt)?;
    let every = a.checkpoint_every.max(1);
    let eval_set = (!eval.is_empty()).then_some(eval.as_slice());
    let res = trainer.fit(&train, eval_set, epochs, |t| {
        let log = t.history.last().expect("epoch logged");
        let mut line = serde_json::to_string(log)?;
        line.push('\n');
        use std::io::Write;
        fs::OpenOptions::new().create(true).append(true).open(&metrics)?.write_all(line.as_bytes())?;
        match &log.eval {
            Some(r) => eprintln!(
                "epoch {:4} loss {:.4} r1@0.5 {:.3} map_avg {:.3} hd_map {:.3}",
                t.epoch, log.total, r.r1_at_0_5, r.map_avg, r.hd_map
            ),
            None => eprintln!("epoch {:4} loss {:.4}", t.epoch, log.total),
        }
        if t.epoch % every == 0 || t.epoch == epochs {
            t.save_checkpoint(&ckpt)?;
        }
        Ok(())
    });
    manifest.history = trainer.history.clone();
    manifest.status = match &res {
        Ok(()) => "complete".into(),
        Err(e) => format!("failed: {e}"),
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    res?;
    if let Some(report) = trainer.history.last().and_then(|h| h.eval.as_ref()) {
        write_json(&a.out.join("report.json"), report)?;
    }
    println!("trained {} epochs; checkpoint {}", trainer.epoch, ckpt.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    analysis: Option<&Path>,
    predictions: Option<&Path>,
    holdout: Option<usize>,
    bins: usize,
    clip_seconds: f64,
) -> CliResult {
    if !manifest_path(ckpt).exists() {
        return Err(Failure::Usage(format!("{} has no manifest next to it", ckpt.display())));
    }
    let trainer = Trainer::load_checkpoint(ckpt)?;
    let mut records = load_dataset(data, clip_seconds)?;
    if let Some(n) = holdout {
        let n = n.min(records.len());
        records = records.split_off(records.len() - n);
    }
    let ev = trainer.evaluate(&records)?;
    write_json(out, &ev.report)?;
    if let Some(p) = predictions {
        save_predictions(&ev.predictions, p)?;
    }
    if let Some(p) = analysis {
        match ev.alignment(&records, bins)? {
            Some(a) => fs::write(p, a.to_csv())?,
            None => return Err(Failure::Usage("the model has no cross-attention correspondence to analyse".into())),
        }
    }
    for (name, v) in ev.report.fields() {
        println!("{name:>9} {v:.4}");
    }
    Ok(())
}

struct AblateArgs {
    data: PathBuf,
    rows: Vec<String>,
    variants: Vec<String>,
    seeds: u64,
    config: Option<PathBuf>,
    epochs: Option<usize>,
    holdout: usize,
    out: Option<PathBuf>,
    clip_seconds: f64,
}

fn parse_rows(rows: &[String]) -> CliResult<Vec<char>> {
    rows.iter()
        .map(|r| {
            let mut c = r.trim().chars();
            match (c.next(), c.next()) {
                (Some(ch), None) if Components::row(ch).is_some() => Ok(ch),
                _ => Err(Failure::Usage(format!("unknown ablation row '{r}' (expected a..g)"))),
            }
        })
        .collect()
}

fn parse_variants(vs: &[String]) -> CliResult<Vec<AttentionVariant>> {
    vs.iter()
        .map(|v| {
            AttentionVariant::parse(v.trim()).ok_or_else(|| {
                Failure::Usage(format!("unknown variant '{v}' (expected aca, plain_softmax, sigmoid or softmax_one)"))
            })
        })
        .collect()
}

/// Markdown table of mean±sd per configuration.
fn ablation_table(rows: &[(String, Vec<MetricReport>)]) -> String {
    let Some(first) = rows.first() else { return String::new() };
    let names: Vec<&str> = first.1.first().map(|r| r.fields().iter().map(|f| f.0).collect()).unwrap_or_default();
    let mut s = format!("| config | seeds | {} |\n", names.join(" | "));
    s += &format!("|---|---|{}\n", "---|".repeat(names.len()));
    for (label, reports) in rows {
        let cells: Vec<String> = summarize(reports).iter().map(|(_, m, sd)| format!("{m:.4}±{sd:.4}")).collect();
        s += &format!("| {label} | {} | {} |\n", reports.len(), cells.join(" | "));
    }
    s
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let rows = parse_rows(&a.rows)?;
    let variants = parse_variants(&a.variants)?;
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let (train, eval) = load_split(&a.data, a.holdout, a.clip_seconds)?;
    let eval = if eval.is_empty() { train.clone() } else { eval };
    let base = match &a.config {
        Some(p) => read_json::<RunConfig>(p, "run configuration")?,
        None => RunConfig::desk(train[0].features.clips.cols()),
    };
    let mut table = Vec::new();
    for &variant in &variants {
        for &row in &rows {
            let mut reports = Vec::new();
            for seed in 0..a.seeds {
                let mut run = base.clone().with_row(row)?;
                run.model.attention_variant = variant;
                run.train.seed = seed;
                if let Some(e) = a.epochs {
                    run.train.epochs = e;
                }
                let (_, ev) = train_and_evaluate(run, &train, &eval)?;
                eprintln!("row {row} variant {} seed {seed}: map_avg {:.4}", variant.name(), ev.report.map_avg);
                reports.push(ev.report);
            }
            let label =
                if variants.len() > 1 { format!("({row}) {}", variant.name()) } else { format!("({row})") };
            table.push((label, reports));
        }
    }
    let text = ablation_table(&table);
    print!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, &text)?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> CliResult {
    let report = gradcheck(seed)?;
    for t in &report.terms {
        println!(
            "{:18} {} max_rel_err {:.3e} over {} entries (worst {})",
            t.term.name(),
            if t.passed() { "PASS" } else { "FAIL" },
            t.max_rel_err,
            t.entries,
            t.worst
        );
    }
    println!(
        "{:18} {} max_abs_err {:.3e}",
        "bce_hand",
        if report.bce_hand.passed() { "PASS" } else { "FAIL" },
        report.bce_hand.max_abs_err
    );
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|t| t.name()).collect();
        Err(Failure::Core(Error::Numerics(format!("gradient check failed for {}", names.join(", ")))))
    }
}
