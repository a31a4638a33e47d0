//! `digitvec` command-line front end: synthesize a corpus, train models,
//! score trial lists and evaluate score files.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use digitvec::bundle::{load_features, save_features, ModelBundle};
use digitvec::config::PipelineConfig;
use digitvec::container::Container;
use digitvec::corpus::{
    format_enrollments, format_trial_list, generate_synthetic_corpus, parse_enrollments, parse_trial_list,
    synthesize_audio, trial_counts, Manifest, Split,
};
use digitvec::metrics::det_csv;
use digitvec::pipeline::{evaluate, format_rejects, format_training_log, load_corpus_features, score, train, with_jobs};
use digitvec::scoring::{format_score_file, parse_score_file};

const MANIFEST_FILE: &str = "manifest.txt";
const FEATURES_FILE: &str = "features.dvf";
const ENROLL_FILE: &str = "enroll.txt";
const TRIALS_FILE: &str = "trials.txt";
const BUNDLE_FILE: &str = "bundle.dvb";
const SCORES_FILE: &str = "scores.txt";
const AUDIO_DIR: &str = "audio";

#[derive(Parser)]
#[command(name = "digitvec", version, about = "Text-prompted speaker verification on digit strings")]
struct Cli {
    /// Sectioned `key = value` configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random choice.
    #[arg(long, global = true, env = "DIGITVEC_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores); results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: manifest, features, enrollments, trials.
    Synth(SynthArgs),
    /// Train HMMs, extractors, compensation chains and the cohort.
    Train(TrainArgs),
    /// Score a trial list against a trained bundle.
    Score(ScoreArgs),
    /// Compute EER and minimum DCFs of a labelled score file.
    Eval(EvalArgs),
    /// List the sections, metadata and training log of a bundle.
    InspectBundle(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (default: `paths.data_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    speakers: Option<usize>,
    /// Latent states per digit in the generator.
    #[arg(long)]
    states: Option<usize>,
    /// Render WAV files and list them in the manifest instead of storing features.
    #[arg(long)]
    audio: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory holding the manifest (default: `paths.data_dir`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output bundle (default: `paths.bundle`, else `<data>/bundle.dvb`).
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// HMM states per digit.
    #[arg(long)]
    states: Option<usize>,
    /// Training log (default: `train_log.txt` next to the bundle).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Trial list (default: `paths.trials`, else `<data>/trials.txt`).
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Enrollment list (default: `<data>/enroll.txt`).
    #[arg(long)]
    enroll: Option<PathBuf>,
    /// Score file (default: `paths.scores`, else `<data>/scores.txt`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rejected trials (default: `<out>.rejects`).
    #[arg(long)]
    rejects: Option<PathBuf>,
    /// Report raw cosine scores in the normalized column.
    #[arg(long)]
    no_snorm: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Score file (default: `paths.scores`).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// `key = value` report (default: `paths.report`, else `<scores>.metrics`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the DET operating points as CSV.
    #[arg(long)]
    det_csv: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    bundle: PathBuf,
}

/// Errors caused by the invocation rather than the data; they exit with 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let is_usage = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some() || matches!(e.downcast_ref::<digitvec::Error>(), Some(digitvec::Error::Config(_)))
    });
    if is_usage {
        2
    } else {
        1
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = (jobs > 0).then_some(jobs);
    }
    Ok(cfg)
}

fn required_file(path: &Path, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    let path = required_file(path, what)?;
    fs::read_to_string(&path).with_context(|| format!("reading {what} {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn data_dir(flag: &Option<PathBuf>, cfg: &PipelineConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.paths.data_dir.clone())
        .ok_or_else(|| usage("no corpus directory: pass --data or set paths.data_dir"))
}

fn bundle_path(flag: &Option<PathBuf>, cfg: &PipelineConfig, data: Option<&Path>) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.paths.bundle.clone())
        .or_else(|| data.map(|d| d.join(BUNDLE_FILE)))
        .ok_or_else(|| usage("no bundle: pass --bundle or set paths.bundle"))
}

/// Manifest plus features of every utterance, stored or extracted from audio.
fn load_corpus(data: &Path, cfg: &PipelineConfig) -> Result<(Manifest, Vec<digitvec::features::FeatureMatrix>)> {
    let manifest = Manifest::parse(&read_text(&data.join(MANIFEST_FILE), "manifest")?)?;
    manifest.check()?;
    let stored_path = data.join(FEATURES_FILE);
    let stored = if stored_path.is_file() { load_features(&stored_path)? } else { Vec::new() };
    let features = load_corpus_features(&manifest, &stored, data, cfg).context("loading features")?;
    Ok((manifest, features))
}

fn cmd_synth(args: &SynthArgs, mut cfg: PipelineConfig) -> Result<()> {
    let out = args
        .out
        .clone()
        .or_else(|| cfg.paths.data_dir.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set paths.data_dir"))?;
    if let Some(n) = args.speakers {
        cfg.synth.n_speakers = n;
    }
    if let Some(s) = args.states {
        cfg.synth.states_per_digit = s;
    }
    let synth = cfg.synth_config();
    synth.validate()?;
    let mut corpus = generate_synthetic_corpus(&synth)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    if args.audio {
        fs::create_dir_all(out.join(AUDIO_DIR))?;
        for entry in &mut corpus.manifest.entries {
            let alignment = &corpus.truth.alignments[&entry.utt_id];
            let rel = format!("{AUDIO_DIR}/{}.wav", entry.utt_id);
            synthesize_audio(&synth, entry, alignment).write_wav(out.join(&rel))?;
            entry.path = rel;
        }
    } else {
        save_features(&corpus.features, out.join(FEATURES_FILE))?;
    }
    write_text(&out.join(MANIFEST_FILE), &corpus.manifest.to_text())?;
    write_text(&out.join(ENROLL_FILE), &format_enrollments(&corpus.enrollments))?;
    let trials = corpus.trials(Split::Evaluation, true);
    write_text(&out.join(TRIALS_FILE), &format_trial_list(&trials))?;
    let (targets, nontargets) = trial_counts(&trials);
    println!(
        "synth: {} utterances, {} speakers, {targets} target / {nontargets} nontarget trials -> {}",
        corpus.manifest.entries.len(),
        synth.n_speakers,
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, mut cfg: PipelineConfig) -> Result<()> {
    if let Some(s) = args.states {
        cfg.hmm.states_per_digit = s;
    }
    cfg.validate()?;
    let data = data_dir(&args.data, &cfg)?;
    let bundle_out = bundle_path(&args.bundle, &cfg, Some(&data))?;
    let (manifest, features) = load_corpus(&data, &cfg)?;
    let bundle = train(&cfg, &manifest, &features).context("training")?;
    bundle.save(&bundle_out)?;
    let log_path = args.log.clone().unwrap_or_else(|| bundle_out.with_file_name("train_log.txt"));
    write_text(&log_path, &format_training_log(&bundle.history))?;
    println!(
        "train: {} digit models -> {} (log {})",
        bundle.extractors.len(),
        bundle_out.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_score(args: &ScoreArgs, mut cfg: PipelineConfig) -> Result<()> {
    if args.no_snorm {
        cfg.scoring.snorm = false;
    }
    cfg.validate()?;
    let data = data_dir(&args.data, &cfg)?;
    let bundle = ModelBundle::load(required_file(&bundle_path(&args.bundle, &cfg, Some(&data))?, "bundle")?)?;
    // features must come from the front-end the models were trained with
    cfg.features = bundle.feature_config.clone();
    let (manifest, features) = load_corpus(&data, &cfg)?;
    let trials_path = args.trials.clone().or_else(|| cfg.paths.trials.clone()).unwrap_or_else(|| data.join(TRIALS_FILE));
    let trials = parse_trial_list(&read_text(&trials_path, "trial list")?)?;
    let enroll_path = args.enroll.clone().unwrap_or_else(|| data.join(ENROLL_FILE));
    let enrollments = parse_enrollments(&read_text(&enroll_path, "enrollment list")?)?;

    let out = score(&cfg, &bundle, &manifest, &features, &enrollments, &trials).context("scoring")?;
    let scores_path = args.out.clone().or_else(|| cfg.paths.scores.clone()).unwrap_or_else(|| data.join(SCORES_FILE));
    write_text(&scores_path, &format_score_file(&out.scores))?;
    let rejects_path = args.rejects.clone().unwrap_or_else(|| append_extension(&scores_path, "rejects"));
    write_text(&rejects_path, &format_rejects(&out.rejects))?;
    if !out.rejects.is_empty() {
        log::warn!("{} trial(s) rejected, see {}", out.rejects.len(), rejects_path.display());
        eprintln!("warning: {} trial(s) rejected, see {}", out.rejects.len(), rejects_path.display());
    }
    println!("score: {} trials -> {}", out.scores.len(), scores_path.display());
    Ok(())
}

fn append_extension(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn cmd_eval(args: &EvalArgs, cfg: PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let scores_path = args
        .scores
        .clone()
        .or_else(|| cfg.paths.scores.clone())
        .ok_or_else(|| usage("no score file: pass --scores or set paths.scores"))?;
    let scores = parse_score_file(&read_text(&scores_path, "score file")?)?;
    let (report, curve) = evaluate(&cfg, &scores)?;
    emit(&report.to_table())?;
    let report_path =
        args.report.clone().or_else(|| cfg.paths.report.clone()).unwrap_or_else(|| append_extension(&scores_path, "metrics"));
    write_text(&report_path, &report.to_key_value())?;
    if let Some(det) = &args.det_csv {
        write_text(det, &det_csv(&curve))?;
    }
    Ok(())
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn emit(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => other.context("writing to stdout"),
    }
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let path = required_file(&args.bundle, "bundle")?;
    let container = Container::read(&path)?;
    let bundle = ModelBundle::from_container(&container)?;
    let mut out = format!("bundle {}\n", path.display());
    for (k, v) in &bundle.meta {
        writeln!(out, "meta {k} = {v}")?;
    }
    for (d, chain) in &bundle.chains {
        let steps: Vec<&str> = chain.steps.iter().map(|s| s.kind.as_str()).collect();
        writeln!(out, "digit {d}: rank {} chain [{}]", bundle.extractors[d].rank(), steps.join(", "))?;
    }
    out += &container.summary();
    out += &format_training_log(&bundle.history);
    emit(&out)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let jobs = cfg.jobs;
    with_jobs(jobs, || match &cli.command {
        Command::Synth(a) => cmd_synth(a, cfg),
        Command::Train(a) => cmd_train(a, cfg),
        Command::Score(a) => cmd_score(a, cfg),
        Command::Eval(a) => cmd_eval(a, cfg),
        Command::InspectBundle(a) => cmd_inspect(a),
    })?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
