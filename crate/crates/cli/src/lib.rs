//! The `stagecap` command line: data generation, training, generation with
//! traces, evaluation, benchmarking and the ablation sweeps.
//!
//! Every subcommand accepts `--config FILE` with `key=value` lines using the
//! flag names; flags given on the command line win over the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use stagecap::checkpoint::Checkpoint;
use stagecap::data::{read_external, write_external, Corpus, LengthDistribution, RawScene, Scene, TokenId};
use stagecap::decoding::{
    finalize, generate_all, trace_lines, Generation, LengthMode, Method,
};
use stagecap::evaluation::{bench_csv, benchmark, BenchMethod, BenchSetup, MetricsReport};
use stagecap::masking::RatioSet;
use stagecap::model::{default_supervision, CaptionModel, ModelConfig};
use stagecap::synthetic::{generate_synthetic, raw_scenes, GrammarParams};
use stagecap::training::{loss_csv, train_with, Regime, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] stagecap::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

#[derive(Parser, Debug)]
#[command(name = "stagecap", version, about = "Staged masked non-autoregressive captioning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus (train and test splits).
    GenData(GenDataArgs),
    /// Train one regime and write a checkpoint.
    Train(TrainArgs),
    /// Caption a split with a checkpoint.
    Generate(GenerateArgs),
    /// Score a captions file.
    Eval(EvalArgs),
    /// Time single-sentence decoding per method.
    Bench(BenchArgs),
    /// Metrics over a grid of training/inference ratio sets.
    SweepRatios(SweepRatiosArgs),
    /// Metrics of every intermediate stage.
    SweepStages(SweepStagesArgs),
    /// Metrics per fixed caption length.
    SweepLengths(SweepLengthsArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key=value` file supplying defaults for the other flags
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "STAGECAP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training scenes
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Held-out scenes written as the test split
    #[arg(long, default_value_t = 200)]
    pub held_out: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 2)]
    pub min_refs: usize,
    #[arg(long, default_value_t = 5)]
    pub max_refs: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    /// Corpus directory holding `train.*` files
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "mnic")]
    pub regime: Regime,
    #[arg(long, default_value = "0.4,0.6,0.8,1.0")]
    pub ratios: RatioSet,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 400)]
    pub warmup: u64,
    #[arg(long, default_value_t = 1.0)]
    pub lr_scale: f64,
    /// Replace one visible word with a random word in partially masked inputs
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true", default_value = "false")]
    pub noise: bool,
    /// Present each caption once per ratio instead of at one sampled ratio
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true", default_value = "true")]
    pub replicate: bool,
    /// Words seen at most this often map to [UNK]
    #[arg(long, default_value_t = 0)]
    pub min_count: usize,
    /// Token mass covered by the high-frequency set
    #[arg(long, default_value_t = 0.2)]
    pub coverage: f64,
    /// `desk` or `full` model size
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub memory_slots: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Args, Debug, Clone)]
pub struct DecodeOpts {
    /// Directory holding `checkpoint.manifest` and `checkpoint.bin`
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Only the first N scenes
    #[arg(long)]
    pub limit: Option<usize>,
    /// ar, na or mnic (defaults to the checkpoint's regime)
    #[arg(long)]
    pub method: Option<Regime>,
    /// Inference ratio set (defaults to the training set)
    #[arg(long)]
    pub ratios: Option<RatioSet>,
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,
    /// `sampled` or a fixed length such as `11`
    #[arg(long, default_value = "sampled")]
    pub length: String,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub decode: DecodeOpts,
    /// Write per-stage trace lines here
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Also write metrics for the generated captions
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true", default_value = "false")]
    pub eval_inline: bool,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// `captions.tsv` written by `generate`
    #[arg(long)]
    pub captions: PathBuf,
    /// Checkpoint whose vocabulary scores the captions
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint used for every method without its own
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub ar_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub na_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub mnic_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "ar,na,mnic-1r,mnic-2r")]
    pub methods: String,
    #[arg(long, default_value_t = 16)]
    pub length: usize,
    #[arg(long, default_value = "0.4,0.6,0.8,1.0")]
    pub ratios: RatioSet,
    #[arg(long, default_value_t = 50)]
    pub scenes: usize,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup_runs: usize,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct SweepRatiosArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Grid file: one `train set | inference set | noise` row per line
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "sampled")]
    pub length: String,
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct SweepStagesArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub decode: DecodeOpts,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct SweepLengthsArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub decode: DecodeOpts,
    /// Inclusive range such as `9-15`, or a comma list
    #[arg(long, default_value = "9-15")]
    pub lengths: String,
}

/// Reads `key=value` lines; `#` starts a comment.
pub fn read_config(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<PathBuf> {
    args.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            args.get(i + 1).map(PathBuf::from)
        } else {
            a.strip_prefix("--config=").map(PathBuf::from)
        }
    })
}

/// Splices config-file entries in front of the user's flags so later flags win.
pub fn merge_config(args: &[String]) -> CliResult<Vec<String>> {
    let Some(path) = config_path(args) else {
        return Ok(args.to_vec());
    };
    if args.len() < 2 {
        return Ok(args.to_vec());
    }
    let mut merged = args[..2].to_vec();
    for (k, v) in read_config(&path)? {
        if k == "config" {
            continue;
        }
        merged.push(format!("--{k}={v}"));
    }
    merged.extend_from_slice(&args[2..]);
    Ok(merged)
}

/// Effective settings of the chosen subcommand as sorted `key=value` lines,
/// leaving out paths that only name outputs.
fn echo_config(matches: &clap::ArgMatches) -> String {
    let Some((name, sub)) = matches.subcommand() else {
        return String::new();
    };
    let cmd = Cli::command();
    let sub_cmd = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let mut entries = BTreeMap::new();
    for arg in sub_cmd.get_arguments() {
        let id = arg.get_id().as_str();
        if matches!(id, "config" | "out" | "trace" | "help" | "version") {
            continue;
        }
        if let Ok(Some(vals)) = sub.try_get_raw(id) {
            let v: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
            entries.insert(id.replace('_', "-"), v.join(","));
        }
    }
    let mut out = format!("command={name}\n");
    for (k, v) in entries {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

/// Runs the command line; returns the process exit status.
pub fn run(args: &[String], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let merged = match merge_config(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return 2;
        }
    };
    let matches = match Cli::command().try_get_matches_from(&merged) {
        Ok(m) => m,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{text}");
            } else {
                let _ = write!(stdout, "{text}");
            }
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return 2;
        }
    };
    let echo = echo_config(&matches);
    match dispatch(&cli.command, &echo, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(stderr, "error: {msg}");
            1
        }
    }
}

fn dispatch(cmd: &Command, echo: &str, stdout: &mut dyn Write) -> CliResult<()> {
    let common = match cmd {
        Command::GenData(a) => &a.common,
        Command::Train(a) => &a.common,
        Command::Generate(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::Bench(a) => &a.common,
        Command::SweepRatios(a) => &a.common,
        Command::SweepStages(a) => &a.common,
        Command::SweepLengths(a) => &a.common,
    };
    std::fs::create_dir_all(&common.out).map_err(io_err(&common.out))?;
    write_file(&common.out.join("config.txt"), echo)?;
    match cmd {
        Command::GenData(a) => gen_data(a, stdout),
        Command::Train(a) => train_cmd(a, stdout),
        Command::Generate(a) => generate_cmd(a, stdout),
        Command::Eval(a) => eval_cmd(a, stdout),
        Command::Bench(a) => bench_cmd(a, stdout),
        Command::SweepRatios(a) => sweep_ratios(a, stdout),
        Command::SweepStages(a) => sweep_stages(a, stdout),
        Command::SweepLengths(a) => sweep_lengths(a, stdout),
    }
}

fn gen_data(a: &GenDataArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let params = GrammarParams {
        noise_sigma: a.noise_sigma,
        min_refs: a.min_refs,
        max_refs: a.max_refs,
        ..GrammarParams::default()
    };
    let raw = raw_scenes(&generate_synthetic(a.n + a.held_out, a.common.seed, &params));
    write_external(&a.common.out, "train", &raw[..a.n])?;
    if a.held_out > 0 {
        write_external(&a.common.out, "test", &raw[a.n..])?;
    }
    let _ = writeln!(stdout, "wrote {} training and {} held-out scenes to {}", a.n, a.held_out, a.common.out.display());
    Ok(())
}

fn model_config(o: &TrainOpts, vocab_size: usize, feature_dim: usize) -> CliResult<ModelConfig> {
    let mut c = match o.preset.as_str() {
        "desk" => ModelConfig::desk(vocab_size, feature_dim),
        "full" => ModelConfig::full(vocab_size, feature_dim),
        other => return Err(CliError::Usage(format!("unknown preset `{other}` (expected desk or full)"))),
    };
    if let Some(l) = o.layers {
        c.layers = l;
        c.supervision = default_supervision(l);
    }
    c.heads = o.heads.unwrap_or(c.heads);
    c.d_model = o.d_model.unwrap_or(c.d_model);
    c.d_ff = o.d_ff.unwrap_or(c.d_ff);
    c.memory_slots = o.memory_slots.unwrap_or(c.memory_slots);
    c.dropout = o.dropout.unwrap_or(c.dropout);
    c.validate()?;
    Ok(c)
}

fn train_config(o: &TrainOpts, seed: u64, noise: bool, ratios: &RatioSet) -> TrainConfig {
    let mut t = TrainConfig::new(o.regime, ratios.clone());
    t.epochs = o.epochs;
    t.batch_size = o.batch_size;
    t.warmup = o.warmup;
    t.lr_scale = o.lr_scale;
    t.seed = seed;
    t.noise = noise && o.regime == Regime::Mnic;
    t.replicate_ratios = o.replicate;
    t
}

/// Builds the corpus from `<data>/train.*`, initializes from `seed` and trains.
pub fn train_checkpoint(
    o: &TrainOpts,
    seed: u64,
    noise: bool,
    ratios: &RatioSet,
    mut on_epoch: impl FnMut(&stagecap::training::EpochLog),
) -> CliResult<(Checkpoint, String)> {
    let raw = read_external(&o.data, "train")?;
    let corpus = Corpus::build(&raw, o.min_count, stagecap::data::DEFAULT_MAX_LEN, o.coverage)?;
    let cfg = model_config(o, corpus.vocab.len(), corpus.feature_dim())?;
    let model = CaptionModel::init(cfg, seed)?;
    let tc = train_config(o, seed, noise, ratios);
    let outcome = train_with(model, &corpus.scenes, &corpus.vocab, &tc, |e| on_epoch(e))?;
    let ck = Checkpoint {
        model: outcome.model,
        vocab: corpus.vocab,
        lengths: LengthDistribution::from_scenes(&corpus.scenes)?,
        training: Some(tc),
    };
    Ok((ck, loss_csv(&outcome.log)))
}

fn train_cmd(a: &TrainArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let (ck, log) = train_checkpoint(&a.opts, a.common.seed, a.opts.noise, &a.opts.ratios, |e| {
        let _ = writeln!(stdout, "epoch {} step {} loss {:.4} lr {:.2e}", e.epoch, e.step, e.loss, e.lr);
    })?;
    ck.save(&a.common.out, "checkpoint")?;
    write_file(&a.common.out.join("loss.csv"), log)
}

pub fn parse_length(spec: &str, dist: &LengthDistribution) -> CliResult<LengthMode> {
    let s = spec.trim();
    if s == "sampled" {
        return Ok(LengthMode::Sampled(dist.clone()));
    }
    let n = s.strip_prefix("fixed:").unwrap_or(s);
    n.parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .map(LengthMode::Fixed)
        .ok_or_else(|| CliError::Usage(format!("bad length `{spec}` (expected `sampled` or a positive length)")))
}

/// Scenes of a split encoded with the checkpoint's vocabulary.
pub fn load_scenes(ck: &Checkpoint, data: &Path, split: &str, limit: Option<usize>) -> CliResult<Vec<Scene>> {
    let raw: Vec<RawScene> = read_external(data, split)?;
    let take = limit.unwrap_or(raw.len()).min(raw.len());
    let max_len = ck.model.config().max_len.saturating_sub(1).max(1);
    Ok(raw[..take].iter().map(|r| r.encode(&ck.vocab, max_len)).collect())
}

/// Reference captions of the training split, for the novelty percentage.
pub fn training_captions(ck: &Checkpoint, data: &Path) -> CliResult<Vec<Vec<TokenId>>> {
    if !data.join("train.feat").exists() {
        return Ok(Vec::new());
    }
    Ok(load_scenes(ck, data, "train", None)?.into_iter().flat_map(|s| s.references).collect())
}

fn resolve_method(ck: &Checkpoint, d: &DecodeOpts) -> CliResult<Method> {
    let regime = d.method.or(ck.training.as_ref().map(|t| t.regime)).unwrap_or(Regime::Mnic);
    Ok(match regime {
        Regime::Ar => Method::Ar,
        Regime::Na => Method::Na,
        Regime::Mnic => {
            let ratios = d
                .ratios
                .clone()
                .or_else(|| ck.training.as_ref().filter(|t| t.regime == Regime::Mnic).map(|t| t.ratio_set.clone()))
                .unwrap_or_else(|| "0.4,0.6,0.8,1.0".parse().expect("valid literal"));
            Method::Mnic { ratios, rounds: d.rounds }
        }
    })
}

fn captions_tsv(scenes: &[Scene], gens: &[Generation], ck: &Checkpoint) -> String {
    let mut out = String::new();
    for (s, g) in scenes.iter().zip(gens) {
        let _ = writeln!(out, "{}\t{}\t{}", s.id, ck.vocab.decode_string(&g.ids), g.passes);
    }
    out
}

fn metrics_files(out: &Path, report: &MetricsReport) -> CliResult<()> {
    write_file(&out.join("metrics.txt"), report.to_kv())?;
    write_file(&out.join("metrics.csv"), format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()))
}

fn generate_cmd(a: &GenerateArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let d = &a.decode;
    let ck = Checkpoint::load(&d.checkpoint, "checkpoint")?;
    let scenes = load_scenes(&ck, &d.data, &d.split, d.limit)?;
    let method = resolve_method(&ck, d)?;
    let lengths = parse_length(&d.length, &ck.lengths)?;
    let gens = generate_all(&ck.model, &scenes, &method, &lengths, a.common.seed, ck.vocab.high_freq())?;
    write_file(&a.common.out.join("captions.tsv"), captions_tsv(&scenes, &gens, &ck))?;
    if let Some(path) = &a.trace {
        let mut text = String::new();
        for (s, g) in scenes.iter().zip(&gens) {
            if let Some(t) = &g.trace {
                for line in trace_lines(&s.id, t, &ck.vocab) {
                    text.push_str(&line);
                    text.push('\n');
                }
            }
        }
        write_file(path, text)?;
    }
    if a.eval_inline {
        let cands: Vec<Vec<TokenId>> = gens.iter().map(|g| g.ids.clone()).collect();
        let passes: Vec<usize> = gens.iter().map(|g| g.passes).collect();
        let train = training_captions(&ck, &d.data)?;
        let report = MetricsReport::compute(&cands, &scenes, &train, &ck.vocab, &passes)?;
        metrics_files(&a.common.out, &report)?;
        let _ = write!(stdout, "{}", report.to_kv());
    }
    let _ = writeln!(stdout, "captioned {} scenes", scenes.len());
    Ok(())
}

fn eval_cmd(a: &EvalArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let ck = Checkpoint::load(&a.checkpoint, "checkpoint")?;
    let all = load_scenes(&ck, &a.data, &a.split, None)?;
    let by_id: BTreeMap<&str, &Scene> = all.iter().map(|s| (s.id.as_str(), s)).collect();
    let text = std::fs::read_to_string(&a.captions).map_err(io_err(&a.captions))?;
    let mut scenes = Vec::new();
    let mut cands = Vec::new();
    let mut passes = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut cols = line.split('\t');
        let (id, caption) = match (cols.next(), cols.next()) {
            (Some(id), Some(c)) => (id, c),
            _ => return Err(CliError::Usage(format!("{}:{}: expected id<TAB>caption", a.captions.display(), i + 1))),
        };
        let scene = by_id.get(id).ok_or_else(|| {
            CliError::Usage(format!("{}:{}: unknown scene_id `{id}`", a.captions.display(), i + 1))
        })?;
        let words: Vec<&str> = caption.split_whitespace().collect();
        cands.push(ck.vocab.encode(&words));
        scenes.push((*scene).clone());
        if let Some(p) = cols.next() {
            passes.push(p.trim().parse().map_err(|_| {
                CliError::Usage(format!("{}:{}: bad pass count `{p}`", a.captions.display(), i + 1))
            })?);
        }
    }
    if passes.len() != cands.len() {
        passes.clear();
    }
    let train = training_captions(&ck, &a.data)?;
    let report = MetricsReport::compute(&cands, &scenes, &train, &ck.vocab, &passes)?;
    metrics_files(&a.common.out, &report)?;
    let _ = write!(stdout, "{}", report.to_kv());
    Ok(())
}

fn bench_cmd(a: &BenchArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let load = |specific: &Option<PathBuf>| -> CliResult<Checkpoint> {
        let dir = specific
            .as_ref()
            .or(a.checkpoint.as_ref())
            .ok_or_else(|| CliError::Usage("bench needs --checkpoint or a per-method checkpoint".into()))?;
        Ok(Checkpoint::load(dir, "checkpoint")?)
    };
    let mut methods = Vec::new();
    for m in a.methods.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        let method = match m {
            "ar" => BenchMethod::Ar,
            "na" => BenchMethod::Na,
            other => match other.strip_prefix("mnic-").and_then(|r| r.strip_suffix('r')).and_then(|r| r.parse().ok()) {
                Some(rounds) => BenchMethod::Mnic { rounds },
                None => return Err(CliError::Usage(format!("unknown method `{other}`"))),
            },
        };
        methods.push(method);
    }
    let mut checkpoints = Vec::new();
    for m in &methods {
        checkpoints.push(match m {
            BenchMethod::Ar => load(&a.ar_checkpoint)?,
            BenchMethod::Na => load(&a.na_checkpoint)?,
            BenchMethod::Mnic { .. } => load(&a.mnic_checkpoint)?,
        });
    }
    let scenes = load_scenes(&checkpoints[0], &a.data, &a.split, Some(a.scenes))?;
    let hf = checkpoints
        .iter()
        .zip(&methods)
        .find(|(_, m)| matches!(m, BenchMethod::Mnic { .. }))
        .map(|(c, _)| c.vocab.high_freq().clone())
        .unwrap_or_default();
    let pairs: Vec<(BenchMethod, &CaptionModel)> = methods.iter().copied().zip(checkpoints.iter().map(|c| &c.model)).collect();
    let setup = BenchSetup {
        scenes: &scenes,
        length: a.length,
        ratios: &a.ratios,
        high_freq: &hf,
        repetitions: a.repetitions,
        warmup: a.warmup_runs,
    };
    let rows = benchmark(&pairs, &setup)?;
    let csv = bench_csv(&rows);
    write_file(&a.common.out.join("bench.csv"), &csv)?;
    let _ = write!(stdout, "{csv}");
    Ok(())
}

/// One grid row: training set, inference set, noise flag.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub train: RatioSet,
    pub infer: RatioSet,
    pub noise: bool,
}

pub fn parse_grid(text: &str) -> CliResult<Vec<GridRow>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('|').map(str::trim).collect();
        let bad = || CliError::Usage(format!("grid line {}: expected `train | infer | noise`", i + 1));
        let [t, inf, n] = parts[..] else { return Err(bad()) };
        rows.push(GridRow {
            train: t.parse().map_err(|e: stagecap::Error| CliError::Usage(format!("grid line {}: {e}", i + 1)))?,
            infer: inf.parse().map_err(|e: stagecap::Error| CliError::Usage(format!("grid line {}: {e}", i + 1)))?,
            noise: n.parse().map_err(|_| bad())?,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Usage("grid has no rows".into()));
    }
    Ok(rows)
}

fn slash(r: &RatioSet) -> String {
    r.to_string().replace(',', "/")
}

fn sweep_ratios(a: &SweepRatiosArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let grid_path = &a.grid;
    let grid = parse_grid(&std::fs::read_to_string(grid_path).map_err(io_err(grid_path))?)?;
    let mut trained: Vec<((String, bool), Checkpoint)> = Vec::new();
    let mut csv = format!("train_set,infer_set,noise,{}\n", MetricsReport::csv_header());
    for row in &grid {
        let key = (row.train.to_string(), row.noise);
        if !trained.iter().any(|(k, _)| *k == key) {
            let mut opts = a.opts.clone();
            opts.regime = Regime::Mnic;
            let (ck, log) = train_checkpoint(&opts, a.common.seed, row.noise, &row.train, |_| {})?;
            let dir = a.common.out.join(format!("model-{}", trained.len() + 1));
            ck.save(&dir, "checkpoint")?;
            write_file(&dir.join("loss.csv"), log)?;
            trained.push((key.clone(), ck));
        }
        let ck = &trained.iter().find(|(k, _)| *k == key).expect("trained above").1;
        let scenes = load_scenes(ck, &a.opts.data, &a.split, None)?;
        let method = Method::Mnic { ratios: row.infer.clone(), rounds: a.rounds };
        let lengths = parse_length(&a.length, &ck.lengths)?;
        let gens = generate_all(&ck.model, &scenes, &method, &lengths, a.common.seed, ck.vocab.high_freq())?;
        let report = report_for(ck, &a.opts.data, &scenes, &gens)?;
        let _ = writeln!(csv, "{},{},{},{}", slash(&row.train), slash(&row.infer), row.noise, report.csv_row());
    }
    write_file(&a.common.out.join("metrics.csv"), &csv)?;
    let _ = write!(stdout, "{csv}");
    Ok(())
}

fn report_for(ck: &Checkpoint, data: &Path, scenes: &[Scene], gens: &[Generation]) -> CliResult<MetricsReport> {
    let cands: Vec<Vec<TokenId>> = gens.iter().map(|g| g.ids.clone()).collect();
    let passes: Vec<usize> = gens.iter().map(|g| g.passes).collect();
    let train = training_captions(ck, data)?;
    Ok(MetricsReport::compute(&cands, scenes, &train, &ck.vocab, &passes)?)
}

fn sweep_stages(a: &SweepStagesArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let d = &a.decode;
    let ck = Checkpoint::load(&d.checkpoint, "checkpoint")?;
    let scenes = load_scenes(&ck, &d.data, &d.split, d.limit)?;
    let method = resolve_method(&ck, d)?;
    if !matches!(method, Method::Mnic { .. }) {
        return Err(CliError::Usage("sweep-stages needs the mnic method".into()));
    }
    let lengths = parse_length(&d.length, &ck.lengths)?;
    let gens = generate_all(&ck.model, &scenes, &method, &lengths, a.common.seed, ck.vocab.high_freq())?;
    let train = training_captions(&ck, &d.data)?;
    let stages = gens[0].trace.as_ref().map_or(0, |t| t.stages.len());
    let mut csv = format!("round,stage,ratio,{}\n", MetricsReport::csv_header());
    for k in 0..stages {
        let rec = &gens[0].trace.as_ref().expect("mnic traces").stages[k];
        let cands: Vec<Vec<TokenId>> = gens
            .iter()
            .map(|g| finalize(&g.trace.as_ref().expect("mnic traces").stages[k].output_ids))
            .collect();
        let report = MetricsReport::compute(&cands, &scenes, &train, &ck.vocab, &vec![k + 1; cands.len()])?;
        let _ = writeln!(csv, "{},{},{},{}", rec.round, rec.stage, rec.input_ratio, report.csv_row());
    }
    write_file(&a.common.out.join("metrics.csv"), &csv)?;
    let _ = write!(stdout, "{csv}");
    Ok(())
}

pub fn parse_lengths(spec: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::Usage(format!("bad length list `{spec}`"));
    let out: Vec<usize> = if let Some((lo, hi)) = spec.split_once('-') {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        (lo..=hi).collect()
    } else {
        spec.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    let unique: BTreeSet<usize> = out.iter().copied().collect();
    if unique.len() != out.len() {
        return Err(bad());
    }
    Ok(out)
}

fn sweep_lengths(a: &SweepLengthsArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let d = &a.decode;
    let ck = Checkpoint::load(&d.checkpoint, "checkpoint")?;
    let scenes = load_scenes(&ck, &d.data, &d.split, d.limit)?;
    let method = resolve_method(&ck, d)?;
    let mut csv = format!("length,{}\n", MetricsReport::csv_header());
    for len in parse_lengths(&a.lengths)? {
        let gens = generate_all(&ck.model, &scenes, &method, &LengthMode::Fixed(len), a.common.seed, ck.vocab.high_freq())?;
        let report = report_for(&ck, &d.data, &scenes, &gens)?;
        let _ = writeln!(csv, "{len},{}", report.csv_row());
    }
    write_file(&a.common.out.join("metrics.csv"), &csv)?;
    let _ = write!(stdout, "{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn length_specs() {
        let dist = LengthDistribution::from_lengths([3, 4]).unwrap();
        assert_eq!(parse_length("11", &dist).unwrap(), LengthMode::Fixed(11));
        assert_eq!(parse_length("fixed:9", &dist).unwrap(), LengthMode::Fixed(9));
        assert!(matches!(parse_length("sampled", &dist).unwrap(), LengthMode::Sampled(_)));
        assert!(parse_length("0", &dist).is_err());
        assert_eq!(parse_lengths("9-11").unwrap(), vec![9, 10, 11]);
        assert_eq!(parse_lengths("4,6").unwrap(), vec![4, 6]);
        assert!(parse_lengths("4,4").is_err());
    }

    #[test]
    fn grid_rows() {
        let g = parse_grid("# comment\n0.4,0.6,0.8,1.0 | 0.4,0.6,0.8,1.0 | false\n0.7,1 | 0.4,0.6,0.8,1 | true\n").unwrap();
        assert_eq!(g.len(), 2);
        assert!(g[1].noise);
        assert!(parse_grid("0.4,1 | 0.4").is_err());
        assert!(parse_grid("").is_err());
    }
}
