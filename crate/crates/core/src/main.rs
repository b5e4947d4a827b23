use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use admtree::backbone::{checkpoint, ParameterSet, Phase};
use admtree::compressor::CompressionSession;
use admtree::harness::{probe_position, probe_properties, Fault, PositionProbe, RunConfig};
use admtree::trainer::{load_corpus, make_needle_corpus, make_repetition_corpus, Trainer};
use admtree::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_PROPERTY: u8 = 3;

#[derive(Parser)]
#[command(name = "admtree", version, about = "Gist-token tree compression over a byte-level transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by commands that read a run configuration.
#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Target compression ratio.
    #[arg(long)]
    tau: Option<f64>,
    /// Initial segment length.
    #[arg(long)]
    segment_len: Option<usize>,
    #[arg(long)]
    lambda_ent: Option<f64>,
    /// Share of tree nodes kept per generation step.
    #[arg(long)]
    keep_fraction: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Backbone,
    Gist,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    FlipMask,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    Repetition,
    Needle,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone or the gist-side parameters.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        phase: Option<PhaseArg>,
        /// Starting checkpoint; required for the gist phase.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus file (.jsonl or UTF-8 text).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory for checkpoint.admt, report.jsonl and config.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compress a file into a session.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy continuation of a prompt conditioned on a session's tree.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
    },
    /// Dump a session's plan, tree or last-token attention.
    Inspect {
        #[arg(long)]
        session: PathBuf,
        #[arg(long, group = "view")]
        tree: bool,
        #[arg(long, group = "view")]
        plan: bool,
        #[arg(long, group = "view", requires_all = ["checkpoint", "prompt"])]
        attention: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Needle recovery accuracy per insertion depth.
    ProbePosition {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for position.json and position.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        depths: Vec<f64>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 512)]
        haystack_len: usize,
    },
    /// Run the invariant suite.
    ProbeProperties {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus as JSONL.
    Corpus {
        #[arg(long, value_enum)]
        kind: CorpusKind,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        prefix_len: usize,
        #[arg(long, default_value_t = 512)]
        haystack_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Property(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Argument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.train.seed = s;
    }
    if let Some(t) = common.tau {
        c.compression.tau = t;
    }
    if let Some(n) = common.segment_len {
        c.compression.n = n;
    }
    if let Some(l) = common.lambda_ent {
        c.compression.lambda_ent = l;
    }
    if common.keep_fraction.is_some() {
        c.keep_fraction = common.keep_fraction;
    }
    c.sync();
    Ok(c)
}

fn log_config(c: &RunConfig) -> Result<(), Failure> {
    eprintln!("resolved config: {}", serde_json::to_string(c).map_err(Error::from)?);
    Ok(())
}

fn load_model(path: &Path) -> Result<ParameterSet, Failure> {
    Ok(checkpoint::load(path)?)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable value"));
}

fn bytes_of(s: &str) -> Vec<usize> {
    s.bytes().map(usize::from).collect()
}

fn cmd_train(
    common: &Common,
    phase: Option<PhaseArg>,
    start: Option<&Path>,
    input: Option<&Path>,
    out: &Path,
    steps: Option<usize>,
) -> Outcome {
    let mut c = resolve(common)?;
    if let Some(p) = phase {
        c.train.phase = match p {
            PhaseArg::Backbone => Phase::Backbone,
            PhaseArg::Gist => Phase::Gist,
        };
    }
    if let Some(s) = steps {
        c.train.steps = s;
    }
    if let Some(i) = input {
        c.train.corpus = Some(i.to_path_buf());
    }
    c.validate()?;
    log_config(&c)?;
    let corpus_path = c
        .train
        .corpus
        .clone()
        .ok_or_else(|| Failure::Usage("no corpus: pass --input or set train.corpus".into()))?;
    let mut model = match (c.train.phase, start) {
        (Phase::Gist, None) => {
            return Err(Failure::Usage("gist training needs a backbone --checkpoint".into()));
        }
        (_, Some(p)) => load_model(p)?,
        (Phase::Backbone, None) => ParameterSet::init(&c.backbone, c.train.seed)?,
    };
    let corpus = load_corpus(&corpus_path)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), c.to_json()?)?;
    let mut report = BufWriter::new(fs::File::create(out.join("report.jsonl"))?);
    let mut trainer = Trainer::new(&mut model, corpus, c.train.clone())?;
    trainer.run(&mut model, c.train.steps, |r| {
        r.write_jsonl(&mut report)?;
        Ok(())
    })?;
    report.flush()?;
    if c.train.phase == Phase::Backbone {
        model.reset_gist_from_text();
    }
    let ckpt = out.join("checkpoint.admt");
    checkpoint::save(&model, &ckpt)?;
    print_json(&json!({
        "checkpoint": ckpt,
        "steps": c.train.steps,
        "frozen_checksum": model.checksum(admtree::backbone::Group::Frozen),
        "trainable_checksum": model.checksum(admtree::backbone::Group::Trainable),
    }));
    Ok(())
}

fn cmd_compress(common: &Common, input: &Path, ckpt: &Path, out: &Path) -> Outcome {
    let c = resolve(common)?;
    c.compression.validate()?;
    log_config(&c)?;
    let model = load_model(ckpt)?;
    let tokens: Vec<usize> = fs::read(input)?.into_iter().map(usize::from).collect();
    let session = CompressionSession::compress_document(&tokens, &model, &c.compression)?;
    session.save(out)?;
    print_json(&json!({
        "tokens": tokens.len(),
        "leaves": session.tree().leaf_count(),
        "nodes": session.tree().node_count(),
        "achieved_ratio": session.achieved_ratio()?,
    }));
    Ok(())
}

fn cmd_generate(common: &Common, session: &Path, ckpt: &Path, prompt: &str, max_new: usize) -> Outcome {
    let c = resolve(common)?;
    log_config(&c)?;
    let model = load_model(ckpt)?;
    let s = CompressionSession::load(session)?;
    let out = s.generate(&model, &bytes_of(prompt), max_new, c.keep_fraction)?;
    let text: Vec<u8> = out.iter().map(|&t| t as u8).collect();
    print_json(&json!({
        "tokens": out,
        "text": String::from_utf8_lossy(&text),
    }));
    Ok(())
}

fn cmd_inspect(
    session: &Path,
    tree: bool,
    plan: bool,
    attention: bool,
    ckpt: Option<&Path>,
    prompt: Option<&str>,
) -> Outcome {
    let s = CompressionSession::load(session)?;
    let flat = s.tree().flatten();
    if tree {
        let info = s.tree().info();
        let nodes: Vec<_> = flat
            .iter()
            .enumerate()
            .map(|(pos, &id)| json!({"position": pos, "node": info[id]}))
            .collect();
        print_json(&json!({
            "leaves": s.tree().leaf_count(),
            "node_count": s.tree().node_count(),
            "root": s.tree().root(),
            "nodes": nodes,
        }));
    } else if plan {
        print_json(&serde_json::to_value(s.turns()).map_err(Error::from)?);
    } else if attention {
        let (ckpt, prompt) = ckpt.zip(prompt).expect("clap enforces both");
        let model = load_model(ckpt)?;
        let scores = s.last_token_attention(&model, &bytes_of(prompt))?;
        print_json(&json!({
            "flatten": flat,
            "scores": scores,
            "sum": scores.iter().sum::<f64>(),
        }));
    } else {
        print_json(&json!({
            "tokens": s.tokens().len(),
            "turns": s.turns().len(),
            "leaves": s.tree().leaf_count(),
            "nodes": s.tree().node_count(),
            "sealed": s.tree().is_sealed(),
            "achieved_ratio": s.achieved_ratio().ok(),
        }));
    }
    Ok(())
}

fn cmd_probe_position(
    common: &Common,
    ckpt: &Path,
    out: &Path,
    depths: Vec<f64>,
    count: usize,
    haystack_len: usize,
) -> Outcome {
    let c = resolve(common)?;
    c.compression.validate()?;
    log_config(&c)?;
    let model = load_model(ckpt)?;
    let probe = PositionProbe {
        depths,
        count,
        haystack_len,
        seed: c.train.seed,
        keep_fraction: c.keep_fraction,
    };
    let report = probe_position(&model, &c.compression, &probe)?;
    fs::create_dir_all(out)?;
    let value = serde_json::to_value(&report).map_err(Error::from)?;
    fs::write(out.join("position.json"), serde_json::to_string_pretty(&value).map_err(Error::from)?)?;
    fs::write(out.join("position.csv"), report.to_csv())?;
    print_json(&value);
    Ok(())
}

fn cmd_probe_properties(seed: u64, fault: Option<FaultArg>, out: Option<&Path>) -> Outcome {
    let fault = fault.map(|FaultArg::FlipMask| Fault::FlipMask);
    let report = probe_properties(seed, fault);
    let value = serde_json::to_value(&report).map_err(Error::from)?;
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&value).map_err(Error::from)?)?;
    }
    print_json(&value);
    if report.passed {
        return Ok(());
    }
    let failed: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}/{}: {}", c.module, c.invariant, c.detail))
        .collect();
    Err(Failure::Property(failed.join("; ")))
}

fn cmd_corpus(kind: CorpusKind, count: usize, prefix_len: usize, haystack_len: usize, seed: u64, out: &Path) -> Outcome {
    let docs = match kind {
        CorpusKind::Repetition => make_repetition_corpus(count, prefix_len, seed),
        CorpusKind::Needle => make_needle_corpus(count, haystack_len, &[0.0, 0.25, 0.5, 0.75, 1.0], seed)?
            .into_iter()
            .map(|s| s.document)
            .collect(),
    };
    let mut w = BufWriter::new(fs::File::create(out)?);
    for d in &docs {
        writeln!(w, "{}", json!({ "tokens": d }))?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Train {
            common,
            phase,
            checkpoint,
            input,
            out,
            steps,
        } => cmd_train(&common, phase, checkpoint.as_deref(), input.as_deref(), &out, steps),
        Command::Compress {
            common,
            input,
            checkpoint,
            out,
        } => cmd_compress(&common, &input, &checkpoint, &out),
        Command::Generate {
            common,
            session,
            checkpoint,
            prompt,
            max_new,
        } => cmd_generate(&common, &session, &checkpoint, &prompt, max_new),
        Command::Inspect {
            session,
            tree,
            plan,
            attention,
            checkpoint,
            prompt,
        } => cmd_inspect(&session, tree, plan, attention, checkpoint.as_deref(), prompt.as_deref()),
        Command::ProbePosition {
            common,
            checkpoint,
            out,
            depths,
            count,
            haystack_len,
        } => cmd_probe_position(&common, &checkpoint, &out, depths, count, haystack_len),
        Command::ProbeProperties { seed, fault, out } => cmd_probe_properties(seed, fault, out.as_deref()),
        Command::Corpus {
            kind,
            count,
            prefix_len,
            haystack_len,
            seed,
            out,
        } => cmd_corpus(kind, count, prefix_len, haystack_len, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Property(m)) => {
            eprintln!("property failures: {m}");
            ExitCode::from(EXIT_PROPERTY)
        }
    }
}
