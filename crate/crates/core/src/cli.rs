//! Command-line front end: `gauss1d`, `train`, `sample`, `eval` and
//! `synth-corpus`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::TrainConfig;
use crate::data::{load_image, quantize_8bit, read_key_values, save_image, synth_corpus, Corpus, DegradationOracle};
use crate::error::Error;
use crate::eval::{emit_report, evaluate, EvalSettings, NLL_FILE, RESIDUAL_FILE};
use crate::gauss1d::{fit_closed_form, joint_marginal_nll_1d, sample_pairs_1d, to_standard_base, Gauss1DSolution, SampleSets1D};
use crate::rng::entropy_seed;
use crate::trainer::{fit_scalar_flow, load_checkpoint, train, TrainOutputs};

pub const SEED_ENV: &str = "DEFLOW_SEED";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "deflow", version, about = "Unpaired degradation learning with a latent-shift flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Closed-form (and optionally gradient-trained) fit of the 1-D Gaussian problem.
    Gauss1d(Gauss1dArgs),
    /// Train on a corpus directory.
    Train(TrainArgs),
    /// Write degraded variants of every image in a directory.
    Sample(SampleArgs),
    /// Residual-statistics and held-out NLL reports for a checkpoint.
    Eval(EvalArgs),
    /// Generate an oracle corpus with a known degradation.
    SynthCorpus(SynthArgs),
}

#[derive(Args, Debug)]
pub struct SeedArg {
    /// Defaults to $DEFLOW_SEED, then to a fresh entropy seed (printed).
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct Gauss1dArgs {
    #[arg(long, allow_hyphen_values = true, required_unless_present = "x_file")]
    pub mu_x: Option<f64>,
    #[arg(long, required_unless_present = "x_file")]
    pub var_x: Option<f64>,
    #[arg(long, allow_hyphen_values = true, required_unless_present = "x_file")]
    pub mu_u: Option<f64>,
    #[arg(long, required_unless_present = "x_file")]
    pub var_u: Option<f64>,
    /// Clean sample count.
    #[arg(long, required_unless_present = "x_file")]
    pub n: Option<usize>,
    /// Degraded sample count; defaults to `n`.
    #[arg(long)]
    pub m: Option<usize>,
    /// Clean samples, one number per line, instead of synthetic draws.
    #[arg(long, requires = "y_file")]
    pub x_file: Option<PathBuf>,
    #[arg(long, requires = "x_file")]
    pub y_file: Option<PathBuf>,
    /// Also fit the single-affine-layer flow with this many Adam steps.
    #[arg(long)]
    pub train_iters: Option<usize>,
    #[arg(long, default_value_t = 0.02)]
    pub lr: f64,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Degradations drawn per held-out clean image.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// white_noise, correlated_noise or shifted_noise.
    #[arg(long)]
    pub oracle: String,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Comma-separated 1-D kernel for correlated_noise.
    #[arg(long, allow_hyphen_values = true)]
    pub kernel: Option<String>,
    /// Comma-separated per-channel mean for shifted_noise.
    #[arg(long, allow_hyphen_values = true)]
    pub mu: Option<String>,
    /// Comma-separated row-major channel covariance for shifted_noise.
    #[arg(long, allow_hyphen_values = true)]
    pub cov: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub n_clean: usize,
    #[arg(long, default_value_t = 64)]
    pub n_degraded: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::ArchitectureMismatch { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn resolve_seed(arg: &SeedArg, out: &mut String) -> u64 {
    match arg.seed {
        Some(s) => s,
        None => {
            let s = entropy_seed();
            eprintln!("no seed given; using seed={s}");
            out.push_str(&format!("seed={s}\n"));
            s
        }
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} '{}' does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} '{}' is not a directory", path.display())))
    }
}

fn read_numbers(path: &Path) -> CliResult<Vec<f64>> {
    require_file(path, "sample file")?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::Usage(format!("{}: '{t}' is not a number", path.display())))
        })
        .collect()
}

fn fmt_solution(prefix: &str, s: &Gauss1DSolution) -> String {
    format!(
        "{prefix}.mu_x={:?}\n{prefix}.var_x={:?}\n{prefix}.mu_u={:?}\n{prefix}.var_u={:?}\n",
        s.mu_x, s.var_x, s.mu_u, s.var_u
    )
}

fn cmd_gauss1d(a: &Gauss1dArgs) -> CliResult<String> {
    let mut out = String::new();
    let samples = match (&a.x_file, &a.y_file) {
        (Some(x), Some(y)) => SampleSets1D::new(read_numbers(x)?, read_numbers(y)?),
        _ => {
            let need = |v: Option<f64>, k: &str| v.ok_or_else(|| CliError::Usage(format!("--{k} is required")));
            let truth = Gauss1DSolution::new(
                need(a.mu_x, "mu-x")?,
                need(a.var_x, "var-x")?,
                need(a.mu_u, "mu-u")?,
                need(a.var_u, "var-u")?,
            )
            .map_err(|e| CliError::Usage(e.to_string()))?;
            let n = a.n.ok_or_else(|| CliError::Usage("--n is required".into()))?;
            let seed = resolve_seed(&a.seed, &mut out);
            out.push_str(&fmt_solution("truth", &truth));
            sample_pairs_1d(&truth, n, a.m.unwrap_or(n), seed).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    let fit = fit_closed_form(&samples)?;
    out.push_str(&format!("closed_form.case={:?}\n", fit.case));
    out.push_str(&fmt_solution("closed_form", &fit));
    out.push_str(&format!("closed_form.nll={:?}\n", joint_marginal_nll_1d(&fit, &samples)?));
    if let Some(iters) = a.train_iters {
        let std = to_standard_base(&fit)?;
        let flow = fit_scalar_flow(&samples, iters, a.lr, a.seed.seed.unwrap_or(0))?;
        out.push_str(&format!(
            "standard_base.scale={:?}\nstandard_base.offset={:?}\nstandard_base.mu_u={:?}\nstandard_base.var_u={:?}\n",
            std.scale, std.offset, std.mu_u, std.var_u
        ));
        out.push_str(&format!(
            "flow.scale={:?}\nflow.offset={:?}\nflow.mu_u={:?}\nflow.var_u={:?}\nflow.nll={:?}\n",
            flow.scale, flow.offset, flow.mu_u, flow.var_u, flow.nll
        ));
    }
    Ok(out)
}

fn load_corpus(path: &Path) -> CliResult<Corpus> {
    require_dir(path, "corpus")?;
    Ok(Corpus::load(path)?)
}

/// Config from file and overrides. Returns whether a seed was set.
fn build_config(a: &TrainArgs) -> CliResult<(TrainConfig, bool)> {
    let mut pairs = match &a.config {
        Some(p) => {
            require_file(p, "config file")?;
            read_key_values(p).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => Vec::new(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        pairs.retain(|(key, _)| *key != k);
        pairs.push((k, v));
    }
    let mut seeded = pairs.iter().any(|(k, _)| k == "seed");
    let mut cfg = TrainConfig::from_pairs(&pairs)?;
    if let Some(c) = &a.corpus {
        cfg.corpus = Some(c.clone());
    }
    if let Some(o) = &a.out_dir {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(s) = a.seed.seed {
        cfg.seed = s;
        seeded = true;
    }
    Ok((cfg, seeded))
}

fn cmd_train(a: &TrainArgs) -> CliResult<String> {
    let mut out = String::new();
    let (mut cfg, seeded) = build_config(a)?;
    if !seeded {
        cfg.seed = resolve_seed(&SeedArg { seed: None }, &mut out);
    }
    let corpus_path = cfg
        .corpus
        .clone()
        .ok_or_else(|| CliError::Usage("no corpus: set `corpus` in the config or pass --corpus".into()))?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory: set `out_dir` or pass --out-dir".into()))?;
    let corpus = load_corpus(&corpus_path)?;
    if corpus.channels() != cfg.model.channels {
        return Err(CliError::Usage(format!(
            "corpus has {} channels, config has channels={}",
            corpus.channels(),
            cfg.model.channels
        )));
    }
    let (train_part, _) = corpus.split_heldout(cfg.heldout_fraction)?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let echo = out_dir.join(CONFIG_ECHO_FILE);
    fs::write(&echo, cfg.to_text()).map_err(|e| Error::io(&echo, e))?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let metrics = out_dir.join(METRICS_FILE);
    let result = train(
        &cfg,
        train_part.training_view(),
        TrainOutputs {
            metrics: Some(&metrics),
            checkpoint: Some(&ckpt),
        },
    )?;
    if !result.clipped.is_empty() {
        out.push_str(&format!("gradient clipped on {} iterations\n", result.clipped.len()));
    }
    if let Some(last) = result.metrics.last() {
        out.push_str(&format!("final nll_total={:?} (iteration {})\n", last.nll_total, last.iter));
    }
    out.push_str(&format!("checkpoint={}\nmetrics={}\n", ckpt.display(), metrics.display()));
    Ok(out)
}

fn tau_tag(tau: f64) -> String {
    format!("{tau:.2}").replace('.', "p").replace('-', "m")
}

fn cmd_sample(a: &SampleArgs) -> CliResult<String> {
    let mut out = String::new();
    require_file(&a.checkpoint, "checkpoint")?;
    require_dir(&a.input_dir, "input directory")?;
    if !(a.tau >= 0.0) || !a.tau.is_finite() {
        return Err(CliError::Usage(format!("--tau must be a finite value >= 0, got {}", a.tau)));
    }
    if a.count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let seed = resolve_seed(&a.seed, &mut out);
    let state = load_checkpoint(&a.checkpoint)?;
    let mut inputs: Vec<PathBuf> = fs::read_dir(&a.input_dir)
        .map_err(|e| Error::io(&a.input_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm" | "pgm" | "pnm")
            )
        })
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        return Err(CliError::Usage(format!("no images in '{}'", a.input_dir.display())));
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut written = 0;
    for (i, path) in inputs.iter().enumerate() {
        let img = load_image(path)?;
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        if c != state.config.model.channels {
            return Err(CliError::Usage(format!(
                "{} has {c} channels, the model expects {}",
                path.display(),
                state.config.model.channels
            )));
        }
        let x = img.reshape(&[1, c, h, w])?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for k in 0..a.count {
            let s = crate::rng::Rng::stream(seed, (i * a.count + k) as u64).next_u64();
            let y = state.degrade(&x, a.tau, s)?.reshape(&[c, h, w])?;
            let name = format!("{stem}_v{k}_tau{}.png", tau_tag(a.tau));
            save_image(&a.out_dir.join(&name), &quantize_8bit(&y))?;
            written += 1;
        }
    }
    out.push_str(&format!("wrote {written} images to {}\n", a.out_dir.display()));
    Ok(out)
}

fn cmd_eval(a: &EvalArgs) -> CliResult<String> {
    let mut out = String::new();
    require_file(&a.checkpoint, "checkpoint")?;
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let seed = resolve_seed(&a.seed, &mut out);
    let state = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let report = evaluate(
        &state,
        &corpus,
        EvalSettings {
            tau: a.tau,
            n_samples: a.samples,
            seed,
        },
    )?;
    emit_report(&report, &a.out_dir)?;
    out.push_str(&format!(
        "nll_x={:?}\nnll_y={:?}\n",
        report.nll_x, report.nll_y
    ));
    if let Some(f) = report.cov_rel_frobenius() {
        out.push_str(&format!("cov_rel_frobenius={f:?}\n"));
    }
    out.push_str(&format!(
        "reports={} {}\n",
        a.out_dir.join(RESIDUAL_FILE).display(),
        a.out_dir.join(NLL_FILE).display()
    ));
    if report.has_nan() {
        return Err(CliError::Runtime(Error::NonFinite(format!(
            "evaluation produced a non-finite metric; reports written to {}",
            a.out_dir.display()
        ))));
    }
    Ok(out)
}

fn cmd_synth(a: &SynthArgs) -> CliResult<String> {
    let mut out = String::new();
    let mut kv = vec![("oracle".to_string(), a.oracle.clone())];
    for (k, v) in [
        ("sigma", a.sigma.map(|s| format!("{s:?}"))),
        ("kernel", a.kernel.clone()),
        ("mu", a.mu.clone()),
        ("cov", a.cov.clone()),
    ] {
        if let Some(v) = v {
            kv.push((k.to_string(), v));
        }
    }
    let oracle = DegradationOracle::from_description(&kv).map_err(|e| CliError::Usage(e.to_string()))?;
    oracle
        .validate(a.channels)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let seed = resolve_seed(&a.seed, &mut out);
    let corpus = synth_corpus(&oracle, a.n_clean, a.n_degraded, a.channels, a.size, seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    corpus.save(&a.out_dir)?;
    out.push_str(&format!(
        "wrote {} clean and {} degraded images to {} ({oracle})\n",
        a.n_clean,
        a.n_degraded,
        a.out_dir.display()
    ));
    Ok(out)
}

/// Runs one parsed command and returns its standard output.
pub fn execute(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Gauss1d(a) => cmd_gauss1d(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SynthCorpus(a) => cmd_synth(a),
    }
}

/// Parses `args` (program name first), runs the command, prints, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
