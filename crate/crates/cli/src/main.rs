use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agfnet_core::data::{save_dataset, Example};
use agfnet_core::fusion::Ablation;
use agfnet_core::metrics::{MetricReport, COLUMNS};
use agfnet_core::train::{
    evaluate, inspect_gate, load_checkpoint, load_examples, run_ablations, save_checkpoint, split_examples, train,
    write_log, Checkpoint, Decoding, GateReport, Profile, TrainConfig, TrainOutcome,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "agfnet", version, about = "Region/global feature fusion report generator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML config; keys not given fall back to the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the training seed and the synthetic data seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long, global = true, value_enum)]
    ablation: Option<AblationArg>,
    /// Output directory (a file for `generate`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoRegion,
    NoGlobal,
    NoSagate,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoRegion => Ablation::NoRegion,
            AblationArg::NoGlobal => Ablation::NoGlobal,
            AblationArg::NoSagate => Ablation::NoSagate,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct Source {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the data named in the checkpoint config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    beam: Option<usize>,
    /// Length-normalisation exponent for beam search.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Decode at most this many examples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset (features.json, features.bin, reports.jsonl).
    SynthData {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Trains a model and writes its best checkpoint and a JSONL log.
    Train {
        /// Dataset directory; synthesised from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Decodes a split and scores it.
    Evaluate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Decodes a split and prints one report per line.
    Generate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Structured records instead of plain text.
        #[arg(long)]
        jsonl: bool,
    },
    /// Trains every variant on the same data and seed and tabulates test scores.
    RunAblations {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated subset of variants.
        #[arg(long, value_enum, value_delimiter = ',')]
        variants: Option<Vec<AblationArg>>,
    },
    /// Prints per-anatomy gate masses for one example.
    InspectGate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        example: String,
    },
    /// Scores two line-aligned report files.
    Metrics {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
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

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::SynthData { count } => {
            let mut config = resolve_config(g)?;
            if let Some(n) = count {
                config.data.synth.count = n;
            }
            let out = required_out(g)?;
            let examples = agfnet_core::data::synth_generate(&config.data.synth)?;
            let manifest = save_dataset(out, &examples)?;
            let abnormal = examples.iter().filter(|e| e.is_abnormal()).count();
            println!(
                "wrote {} examples ({abnormal} abnormal, {} regions, d={}) to {}",
                manifest.count,
                manifest.n_regions,
                manifest.dim,
                out.display()
            );
        }
        Command::Train { data } => {
            let mut config = resolve_config(g)?;
            if data.is_some() {
                config.data.dir = data;
            }
            let out = required_out(g)?;
            let examples = load_examples(&config)?;
            let outcome = train(&config, &examples)?;
            write_run(out, &config, &outcome)?;
            let last = outcome.history.last();
            println!(
                "{} steps, best epoch {}, train loss {:.4}, val loss {}",
                outcome.steps,
                outcome.best_epoch,
                last.map_or(f64::NAN, |h| h.train_loss),
                last.and_then(|h| h.val_loss).map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        Command::Evaluate { source, decode } => {
            let (ckpt, examples) = open(&source)?;
            let eval = decode_split(&ckpt, &examples, &decode)?;
            if let Some(out) = &g.out {
                fs::create_dir_all(out)?;
                let metrics = json!({ "config_hash": eval.config_hash, "metrics": eval.metrics });
                fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
                let mut w = BufWriter::new(fs::File::create(out.join("generated.jsonl"))?);
                for r in &eval.generated {
                    serde_json::to_writer(&mut w, r)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            print!("{}", metric_table(&[("model", &eval.metrics)]));
            println!("config {}", ckpt.manifest.config_hash);
        }
        Command::Generate { source, decode, jsonl } => {
            let (ckpt, examples) = open(&source)?;
            let eval = decode_split(&ckpt, &examples, &decode)?;
            let mut w: Box<dyn Write> = match &g.out {
                Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            for r in &eval.generated {
                if jsonl {
                    serde_json::to_writer(&mut w, r)?;
                    w.write_all(b"\n")?;
                } else {
                    writeln!(w, "{}", r.text)?;
                }
            }
            w.flush()?;
        }
        Command::RunAblations { data, variants } => {
            let mut config = resolve_config(g)?;
            if data.is_some() {
                config.data.dir = data;
            }
            let variants: Vec<Ablation> = match variants {
                Some(v) => v.into_iter().map(Ablation::from).collect(),
                None => Ablation::ALL.to_vec(),
            };
            let examples = load_examples(&config)?;
            let (table, runs) = run_ablations(&config, &examples, &variants)?;
            if let Some(out) = &g.out {
                for run in &runs {
                    let mut cfg = config.clone();
                    cfg.model.ablation = run.ablation;
                    write_run(&out.join(run.ablation.name()), &cfg, &run.outcome)?;
                }
                fs::write(out.join("ablations.json"), serde_json::to_string_pretty(&table)?)?;
                fs::write(out.join("ablations.txt"), table.to_text())?;
            }
            print!("{}", table.to_text());
            println!("config {}", table.config_hash);
        }
        Command::InspectGate { source, example } => {
            let (ckpt, examples) = open(&source)?;
            let e = examples
                .iter()
                .find(|e| e.id == example)
                .ok_or(agfnet_core::Error::UnknownExample(example))?;
            let report = inspect_gate(&ckpt.model, &ckpt.params, e, &ckpt.manifest.config_hash)?;
            if let Some(out) = &g.out {
                if let Some(parent) = out.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::write(out, serde_json::to_string_pretty(&report)?)?;
            }
            print!("{}", gate_text(&report));
        }
        Command::Metrics { candidates, references } => {
            let c = read_lines(&candidates)?;
            let r = read_lines(&references)?;
            if c.len() != r.len() {
                bail!("{} has {} lines but {} has {}", candidates.display(), c.len(), references.display(), r.len());
            }
            let report = MetricReport::from_texts(&c, &r)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn resolve_config(g: &Global) -> Result<TrainConfig> {
    let profile = g.profile.map(|p| match p {
        ProfileArg::Paper => Profile::Paper,
        ProfileArg::Desk => Profile::Desk,
    });
    let mut config = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_toml_with_profile(&text, profile).with_context(|| format!("in {}", path.display()))?
        }
        None => TrainConfig::for_profile(profile.unwrap_or(Profile::Desk)),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
        config.data.synth.seed = seed;
    }
    if let Some(a) = g.ablation {
        config.model.ablation = a.into();
    }
    config.validate()?;
    Ok(config)
}

fn required_out(g: &Global) -> Result<&Path> {
    g.out.as_deref().context("--out is required for this command")
}

fn write_run(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    save_checkpoint(
        dir,
        config,
        &outcome.model,
        &outcome.params,
        outcome.steps,
        outcome.best_epoch,
        &outcome.history,
    )?;
    let mut w = BufWriter::new(fs::File::create(dir.join("train.jsonl"))?);
    write_log(&mut w, &outcome.log)?;
    w.flush()?;
    fs::write(dir.join("config.toml"), config.to_toml()?)?;
    Ok(())
}

fn open(source: &Source) -> Result<(Checkpoint, Vec<Example>)> {
    let ckpt = load_checkpoint(&source.checkpoint)
        .with_context(|| format!("loading checkpoint {}", source.checkpoint.display()))?;
    let mut config = ckpt.manifest.config.clone();
    if source.data.is_some() {
        config.data.dir = source.data.clone();
    }
    let examples = load_examples(&config)?;
    Ok((ckpt, examples))
}

fn decode_split(
    ckpt: &Checkpoint,
    examples: &[Example],
    args: &DecodeArgs,
) -> Result<agfnet_core::train::Evaluation> {
    let indices: Vec<usize> = match args.split {
        SplitArg::All => (0..examples.len()).collect(),
        split => {
            let parts = split_examples(&ckpt.manifest.config, examples.len())?;
            match split {
                SplitArg::Train => parts.train,
                SplitArg::Val => parts.val,
                _ => parts.test,
            }
        }
    };
    let limit = args.limit.unwrap_or(indices.len());
    let chosen: Vec<&Example> = indices.iter().take(limit).map(|&i| &examples[i]).collect();
    let decoding = match args.beam {
        Some(width) => Decoding::Beam {
            width,
            alpha: args.alpha,
        },
        None => Decoding::Greedy,
    };
    Ok(evaluate(
        &ckpt.model,
        &ckpt.params,
        &chosen,
        decoding,
        Some(ckpt.manifest.config_hash.clone()),
    )?)
}

fn metric_table(rows: &[(&str, &MetricReport)]) -> String {
    let mut s = format!("{:<12}", "");
    for c in COLUMNS {
        s += &format!(" {c:>12}");
    }
    s.push('\n');
    for (name, m) in rows {
        s += &format!("{name:<12}");
        for v in m.values() {
            s += &format!(" {v:>12.4}");
        }
        s.push('\n');
    }
    s
}

fn gate_text(r: &GateReport) -> String {
    let mut s = format!(
        "example {}  variant {}  config {}\n",
        r.example_id,
        r.ablation.name(),
        r.config_hash
    );
    for v in &r.views {
        s += &format!("{}\n", v.view);
        for e in &v.masses {
            s += &format!("  {:<28} {:.4}\n", e.anatomy, e.mass);
        }
    }
    s += &format!("generated: {}\nreference: {}\n", r.generated, r.reference);
    s
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}
