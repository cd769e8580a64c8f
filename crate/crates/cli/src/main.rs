//! Pipeline driver: data generation, training, language expansion, decoding,
//! evaluation, latency reporting, and self-verification.
//!
//! Exit codes: 0 success, 1 usage error, 2 verification failure,
//! 3 runtime/data error.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use streamtt::checkpoint;
use streamtt::corpus::{self, CorpusManifest, GenConfig, PairSpec, Split};
use streamtt::decoder::{beam_decode, greedy_stream_decode, DecodeConfig, DecodeRecord};
use streamtt::mask::ChunkMaskSpec;
use streamtt::metrics;
use streamtt::model::{ModelConfig, TransducerModel};
use streamtt::trainer::{self, ExpansionPlan, TrainConfig};
use streamtt::verify::{run_all, VerifyFault};

#[derive(Parser)]
#[command(name = "streamtt", version, about = "Streaming transducer lab pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multilingual corpus for an explicit pair set.
    GenData(GenDataArgs),
    /// Train a model with one output branch on pooled pair data.
    Train(TrainArgs),
    /// Add and train a new output branch on a frozen encoder.
    Expand(ExpandArgs),
    /// Decode a manifest split and write a decode log.
    Decode(DecodeArgs),
    /// Decode and score a manifest split (quality + latency).
    Eval(EvalArgs),
    /// Latency metrics over an existing decode log.
    Latency(LatencyArgs),
    /// Run the built-in oracle checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for manifest.tsv and features/
    #[arg(long)]
    out: PathBuf,
    /// Comma list of src>tgt pairs, e.g. "A>M,B>M"
    #[arg(long)]
    pairs: String,
    #[arg(long, default_value_t = 4)]
    sources: usize,
    #[arg(long, default_value_t = 2)]
    targets: usize,
    #[arg(long, default_value_t = 20)]
    vsem: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    suite_seed: u64,
    #[arg(long, default_value_t = 200)]
    train_per_pair: usize,
    #[arg(long, default_value_t = 50)]
    test_per_pair: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainFlags {
    /// key=value config file; explicit flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_interval: Option<usize>,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig, AppError> {
        let mut cfg = TrainConfig::defaults();
        if let Some(path) = &self.config {
            cfg.apply_file(path)
                .map_err(|e| AppError::Usage(e.to_string()))?;
        }
        if let Some(v) = self.steps {
            cfg.max_steps = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup_steps = v;
        }
        if let Some(v) = self.clip {
            cfg.clip_norm = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.eval_interval {
            cfg.eval_interval = v;
        }
        cfg.validate().map_err(|e| AppError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory (holding manifest.tsv)
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
    /// Target language of the branch to train
    #[arg(long)]
    branch: String,
    /// Restrict training to these source languages (comma list)
    #[arg(long)]
    sources: Option<String>,
    /// Loss trace TSV (default: <out>.trace.tsv)
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 4)]
    chunk_frames: usize,
    #[arg(long, default_value_t = 1)]
    left_chunks: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    ff: usize,
    #[arg(long, default_value_t = 64)]
    pred_dim: usize,
    #[arg(long, default_value_t = 64)]
    joint_dim: usize,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
}

#[derive(Args)]
struct ExpandArgs {
    /// Base checkpoint to expand
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// New target language
    #[arg(long)]
    branch: String,
    /// Source languages for the new branch's training pairs (comma list)
    #[arg(long)]
    sources: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    branch_seed: u64,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    branch: String,
    #[arg(long, default_value = "test")]
    split: String,
    /// Restrict to these source languages (comma list)
    #[arg(long)]
    sources: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Chunk size in frames (defaults to the model's training value)
    #[arg(long)]
    chunk_frames: Option<usize>,
    #[arg(long)]
    left_chunks: Option<usize>,
    /// Single-chunk decoding: the whole utterance arrives at once
    #[arg(long, default_value_t = false)]
    offline: bool,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 5)]
    max_symbols: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    branch: String,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    sources: Option<String>,
    /// Report TSV to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the decode log here
    #[arg(long)]
    decode_log: Option<PathBuf>,
    #[arg(long)]
    chunk_frames: Option<usize>,
    #[arg(long)]
    left_chunks: Option<usize>,
    #[arg(long, default_value_t = false)]
    offline: bool,
    #[arg(long, default_value_t = 5)]
    max_symbols: usize,
}

#[derive(Args)]
struct LatencyArgs {
    /// Decode log to read
    #[arg(long)]
    log: PathBuf,
    /// Frame duration for millisecond AL/DAL (0 = frames only)
    #[arg(long, default_value_t = 40.0)]
    frame_ms: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-utterance AP/AL/DAL (frames) as TSV
    #[arg(long)]
    per_utterance: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Test fixture: inject a known defect to prove checks can fail
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

enum AppError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for AppError {
    fn from(e: anyhow::Error) -> Self {
        AppError::Runtime(e)
    }
}

impl From<streamtt::Error> for AppError {
    fn from(e: streamtt::Error) -> Self {
        AppError::Runtime(anyhow::Error::new(e))
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(1);
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(AppError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            3
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32, AppError> {
    match cli.cmd {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Expand(args) => expand(args),
        Command::Decode(args) => decode(args),
        Command::Eval(args) => eval(args),
        Command::Latency(args) => latency(args),
        Command::Verify(args) => verify(args),
    }
}

fn banner(cmd: &str, fields: &[(&str, String)]) {
    let body: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("[config] command={cmd} {}", body.join(" "));
}

fn parse_pairs(spec: &str) -> Result<Vec<PairSpec>, AppError> {
    let mut pairs = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        let (src, tgt) = part.split_once('>').ok_or_else(|| {
            AppError::Usage(format!(
                "bad pair {part:?}: expected src>tgt (e.g. \"A>M\")"
            ))
        })?;
        if src.is_empty() || tgt.is_empty() {
            return Err(AppError::Usage(format!("bad pair {part:?}")));
        }
        pairs.push(PairSpec::new(src, tgt));
    }
    if pairs.is_empty() {
        return Err(AppError::Usage("empty pair list".into()));
    }
    Ok(pairs)
}

fn parse_langs(spec: &str) -> Vec<String> {
    spec.split(',').map(|s| s.trim().to_string()).collect()
}

fn parse_split(s: &str) -> Result<Split, AppError> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(AppError::Usage(format!(
            "split must be train or test, got {other}"
        ))),
    }
}

fn read_manifest(data: &Path) -> Result<CorpusManifest, AppError> {
    let path = data.join("manifest.tsv");
    Ok(corpus::read_manifest(&path)?)
}

/// The branch vocabulary is the largest target token id observed for that
/// language across the manifest.
fn infer_vocab(manifest: &CorpusManifest, target: &str) -> Result<usize, AppError> {
    manifest
        .rows
        .iter()
        .filter(|r| r.target_lang == target)
        .flat_map(|r| r.target_ids.iter().copied())
        .max()
        .ok_or_else(|| AppError::Usage(format!("no utterances with target language {target}")))
}

fn infer_feature_dim(manifest: &CorpusManifest, data: &Path) -> Result<usize, AppError> {
    let row = manifest
        .rows
        .first()
        .ok_or_else(|| AppError::Usage("empty manifest".into()))?;
    let feats = corpus::load_row_features(data, row)?;
    Ok(feats.d())
}

fn gen_data(args: GenDataArgs) -> Result<i32, AppError> {
    let pairs = parse_pairs(&args.pairs)?;
    banner(
        "gen-data",
        &[
            ("out", args.out.display().to_string()),
            ("pairs", args.pairs.clone()),
            ("sources", args.sources.to_string()),
            ("targets", args.targets.to_string()),
            ("vsem", args.vsem.to_string()),
            ("dim", args.dim.to_string()),
            ("suite_seed", args.suite_seed.to_string()),
            ("train_per_pair", args.train_per_pair.to_string()),
            ("test_per_pair", args.test_per_pair.to_string()),
            ("min_len", args.min_len.to_string()),
            ("max_len", args.max_len.to_string()),
            ("noise", args.noise.to_string()),
            ("seed", args.seed.to_string()),
        ],
    );
    let suite = corpus::make_suite(args.sources, args.targets, args.vsem, args.dim, args.suite_seed)?;
    let cfg = GenConfig {
        train_per_pair: args.train_per_pair,
        test_per_pair: args.test_per_pair,
        min_len: args.min_len,
        max_len: args.max_len,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(AppError::Runtime)?;
    let manifest = corpus::generate_corpus(&suite, &pairs, &cfg, &args.out)?;
    corpus::write_manifest(&args.out.join("manifest.tsv"), &manifest)?;
    println!("pair histogram:");
    for ((src, tgt), count) in manifest.pair_histogram() {
        println!("  {src}>{tgt}\t{count}");
    }
    println!("wrote {} utterances under {}", manifest.rows.len(), args.out.display());
    Ok(0)
}

fn train(args: TrainArgs) -> Result<i32, AppError> {
    let cfg = args.train.resolve()?;
    if args.chunk_frames == 0 {
        return Err(AppError::Usage("chunk-frames must be >= 1".into()));
    }
    banner(
        "train",
        &[
            ("data", args.data.display().to_string()),
            ("out", args.out.display().to_string()),
            ("branch", args.branch.clone()),
            ("sources", args.sources.clone().unwrap_or_else(|| "all".into())),
            ("steps", cfg.max_steps.to_string()),
            ("lr", cfg.learning_rate.to_string()),
            ("batch", cfg.batch_size.to_string()),
            ("warmup", cfg.warmup_steps.to_string()),
            ("clip", cfg.clip_norm.to_string()),
            ("seed", cfg.seed.to_string()),
            ("eval_interval", cfg.eval_interval.to_string()),
            ("chunk_frames", args.chunk_frames.to_string()),
            ("left_chunks", args.left_chunks.to_string()),
            ("layers", args.layers.to_string()),
            ("hidden", args.hidden.to_string()),
            ("heads", args.heads.to_string()),
            ("ff", args.ff.to_string()),
            ("pred_dim", args.pred_dim.to_string()),
            ("joint_dim", args.joint_dim.to_string()),
            ("model_seed", args.model_seed.to_string()),
        ],
    );
    let manifest = read_manifest(&args.data)?;
    let vocab = infer_vocab(&manifest, &args.branch)?;
    let feature_dim = infer_feature_dim(&manifest, &args.data)?;
    let config = ModelConfig {
        feature_dim,
        hidden_dim: args.hidden,
        num_layers: args.layers,
        num_heads: args.heads,
        ff_dim: args.ff,
        predictor_layers: 1,
        predictor_dim: args.pred_dim,
        joint_dim: args.joint_dim,
        chunk: ChunkMaskSpec::new(args.chunk_frames, args.left_chunks, args.layers)
            .map_err(|e| AppError::Usage(e.to_string()))?,
        layer_norm_eps: 1e-5,
    };
    config.validate().map_err(|e| AppError::Usage(e.to_string()))?;

    let mut model = TransducerModel::new(config, args.model_seed)?;
    let branch = model.add_branch(&args.branch, vocab, args.model_seed.wrapping_add(1))?;
    let sources = args.sources.as_deref().map(parse_langs);
    let items = trainer::load_items(&manifest, &args.data, &args.branch, sources.as_deref(), Split::Train)?;
    if items.is_empty() {
        return Err(AppError::Usage("no training utterances match the filters".into()));
    }
    let eval_items = if cfg.eval_interval > 0 {
        Some(trainer::load_items(&manifest, &args.data, &args.branch, sources.as_deref(), Split::Test)?)
    } else {
        None
    };
    println!("training on {} utterances", items.len());
    let spec = model.config.chunk;
    let outcome = trainer::train(&mut model, &items, branch, &spec, &cfg, eval_items.as_deref())?;
    let trace_path = args
        .trace
        .unwrap_or_else(|| args.out.with_extension("trace.tsv"));
    trainer::write_trace(&trace_path, &outcome.trace)?;
    checkpoint::save(&model, &args.out)?;
    let last = outcome.trace.last().unwrap();
    println!("final loss {:.4} nats/token at step {}", last.loss, last.step);
    for (step, acc) in &outcome.evals {
        println!("eval step {step}: token accuracy {acc:.2}%");
    }
    println!("checkpoint -> {}", args.out.display());
    Ok(0)
}

fn expand(args: ExpandArgs) -> Result<i32, AppError> {
    let cfg = args.train.resolve()?;
    banner(
        "expand",
        &[
            ("base", args.base.display().to_string()),
            ("data", args.data.display().to_string()),
            ("branch", args.branch.clone()),
            ("sources", args.sources.clone()),
            ("out", args.out.display().to_string()),
            ("branch_seed", args.branch_seed.to_string()),
            ("steps", cfg.max_steps.to_string()),
            ("lr", cfg.learning_rate.to_string()),
            ("batch", cfg.batch_size.to_string()),
            ("warmup", cfg.warmup_steps.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    );
    let mut model = checkpoint::load(&args.base)?;
    let manifest = read_manifest(&args.data)?;
    let vocab = infer_vocab(&manifest, &args.branch)?;
    let before = model.params().element_count("");
    let plan = ExpansionPlan {
        new_lang: args.branch.clone(),
        vocab_size: vocab,
        sources: parse_langs(&args.sources),
        branch_seed: args.branch_seed,
        train: cfg,
    };
    let spec = model.config.chunk;
    let outcome = trainer::expand(&mut model, &manifest, &args.data, &spec, &plan)?;
    if let Some(trace) = &args.trace {
        trainer::write_trace(trace, &outcome.trace)?;
    }
    checkpoint::save(&model, &args.out)?;
    let added = model.params().element_count("") - before;
    let last = outcome.trace.last().unwrap();
    println!("final loss {:.4} nats/token at step {}", last.loss, last.step);
    println!(
        "added branch {} (+{added} parameters); encoder frozen; checkpoint -> {}",
        args.branch,
        args.out.display()
    );
    Ok(0)
}

struct DecodeSetup {
    model: TransducerModel,
    items: Vec<trainer::TrainItem>,
    spec: ChunkMaskSpec,
}

#[allow(clippy::too_many_arguments)]
fn decode_setup(
    model_path: &Path,
    data: &Path,
    branch: &str,
    split: &str,
    sources: Option<&String>,
    chunk_frames: Option<usize>,
    left_chunks: Option<usize>,
    offline: bool,
) -> Result<DecodeSetup, AppError> {
    if chunk_frames == Some(0) {
        return Err(AppError::Usage("chunk-frames must be >= 1".into()));
    }
    let model = checkpoint::load(model_path)?;
    let manifest = read_manifest(data)?;
    let split = parse_split(split)?;
    let sources = sources.map(|s| parse_langs(s));
    let items = trainer::load_items(&manifest, data, branch, sources.as_deref(), split)?;
    if items.is_empty() {
        return Err(AppError::Usage("no utterances match the filters".into()));
    }
    let u = if offline {
        items.iter().map(|i| i.feats.t()).max().unwrap()
    } else {
        chunk_frames.unwrap_or(model.config.chunk.chunk_size)
    };
    let l = left_chunks.unwrap_or(model.config.chunk.left_chunks);
    let spec = model
        .config
        .spec_with(u, l)
        .map_err(|e| AppError::Usage(e.to_string()))?;
    Ok(DecodeSetup { model, items, spec })
}

fn decode(args: DecodeArgs) -> Result<i32, AppError> {
    banner(
        "decode",
        &[
            ("model", args.model.display().to_string()),
            ("data", args.data.display().to_string()),
            ("branch", args.branch.clone()),
            ("split", args.split.clone()),
            ("sources", args.sources.clone().unwrap_or_else(|| "all".into())),
            ("out", args.out.display().to_string()),
            ("chunk_frames", format!("{:?}", args.chunk_frames)),
            ("left_chunks", format!("{:?}", args.left_chunks)),
            ("offline", args.offline.to_string()),
            ("beam", args.beam.to_string()),
            ("max_symbols", args.max_symbols.to_string()),
        ],
    );
    if args.beam == 0 {
        return Err(AppError::Usage("beam must be >= 1".into()));
    }
    let setup = decode_setup(
        &args.model,
        &args.data,
        &args.branch,
        &args.split,
        args.sources.as_ref(),
        args.chunk_frames,
        args.left_chunks,
        args.offline,
    )?;
    let branch = setup.model.branch(&args.branch)?.id;
    let config = DecodeConfig {
        beam_width: args.beam,
        max_symbols_per_frame: args.max_symbols,
        spec: setup.spec,
    };
    let mut records = Vec::with_capacity(setup.items.len());
    for item in &setup.items {
        let hyp = if args.beam > 1 {
            beam_decode(&setup.model, branch, &item.feats, &config)?
                .into_iter()
                .next()
                .expect("beam returns at least one hypothesis")
        } else {
            greedy_stream_decode(&setup.model, branch, &item.feats, &config)?
        };
        records.push(DecodeRecord {
            utt_id: item.utt_id.clone(),
            branch: args.branch.clone(),
            tokens: hyp.tokens,
            score: hyp.score,
            delays: hyp.emission_delays,
            source_len: item.feats.t(),
        });
    }
    streamtt::decoder::write_decode_log(&args.out, &records)?;
    println!("decoded {} utterances -> {}", records.len(), args.out.display());
    Ok(0)
}

fn eval(args: EvalArgs) -> Result<i32, AppError> {
    banner(
        "eval",
        &[
            ("model", args.model.display().to_string()),
            ("data", args.data.display().to_string()),
            ("branch", args.branch.clone()),
            ("split", args.split.clone()),
            ("sources", args.sources.clone().unwrap_or_else(|| "all".into())),
            ("chunk_frames", format!("{:?}", args.chunk_frames)),
            ("left_chunks", format!("{:?}", args.left_chunks)),
            ("offline", args.offline.to_string()),
            ("max_symbols", args.max_symbols.to_string()),
        ],
    );
    let setup = decode_setup(
        &args.model,
        &args.data,
        &args.branch,
        &args.split,
        args.sources.as_ref(),
        args.chunk_frames,
        args.left_chunks,
        args.offline,
    )?;
    let branch = setup.model.branch(&args.branch)?.id;
    let config = DecodeConfig {
        beam_width: 1,
        max_symbols_per_frame: args.max_symbols,
        spec: setup.spec,
    };
    let result = trainer::evaluate(&setup.model, branch, &setup.items, &config)?;
    let e = &result.eval;
    println!(
        "token_accuracy={:.2}% wer={:.2}% bleu={:.2} sentences={}",
        e.token_accuracy, e.wer, e.bleu, e.sentences
    );
    let mut rows: Vec<(&str, f64, usize)> = vec![
        ("token_accuracy", e.token_accuracy, e.sentences),
        ("wer", e.wer, e.sentences),
        ("bleu", e.bleu, e.sentences),
    ];
    if let Some(lat) = &result.latency {
        println!(
            "ap={:.4} al={:.2} dal={:.2} (frames; {} utterances, {} empty)",
            lat.ap, lat.al, lat.dal, lat.utterances, lat.skipped_empty
        );
        rows.push(("ap", lat.ap, lat.utterances));
        rows.push(("al_frames", lat.al, lat.utterances));
        rows.push(("dal_frames", lat.dal, lat.utterances));
    } else {
        println!("latency: every hypothesis was empty");
    }
    if let Some(out) = &args.out {
        metrics::write_report(out, &rows)?;
        println!("report -> {}", out.display());
    }
    if let Some(log) = &args.decode_log {
        streamtt::decoder::write_decode_log(log, &result.records)?;
        println!("decode log -> {}", log.display());
    }
    Ok(0)
}

fn latency(args: LatencyArgs) -> Result<i32, AppError> {
    banner(
        "latency",
        &[
            ("log", args.log.display().to_string()),
            ("frame_ms", args.frame_ms.to_string()),
        ],
    );
    let records = streamtt::decoder::read_decode_log(&args.log)?;
    let report = metrics::latency_report(&records)?;
    println!(
        "AP={:.4} AL={:.2} DAL={:.2} (frames; {} utterances, {} empty skipped)",
        report.ap, report.al, report.dal, report.utterances, report.skipped_empty
    );
    let mut rows: Vec<(&str, f64, usize)> = vec![
        ("ap", report.ap, report.utterances),
        ("al_frames", report.al, report.utterances),
        ("dal_frames", report.dal, report.utterances),
    ];
    if args.frame_ms > 0.0 {
        let ms = report.scaled(args.frame_ms);
        println!("AL={:.1}ms DAL={:.1}ms at {}ms/frame", ms.al, ms.dal, args.frame_ms);
        rows.push(("al_ms", ms.al, ms.utterances));
        rows.push(("dal_ms", ms.dal, ms.utterances));
    }
    if let Some(out) = &args.out {
        metrics::write_report(out, &rows)?;
        println!("report -> {}", out.display());
    }
    if let Some(path) = &args.per_utterance {
        use std::io::Write;
        let file = std::fs::File::create(path)
            .map_err(|e| AppError::Runtime(anyhow::Error::new(e)))?;
        let mut w = std::io::BufWriter::new(file);
        for (id, l) in &report.per_utterance {
            writeln!(w, "{id}\t{}\t{}\t{}", l.ap, l.al, l.dal)
                .map_err(|e| AppError::Runtime(anyhow::Error::new(e)))?;
        }
        println!("per-utterance -> {}", path.display());
    }
    Ok(0)
}

fn verify(args: VerifyArgs) -> Result<i32, AppError> {
    let fault = match args.inject_fault.as_deref() {
        None => VerifyFault::None,
        Some("mask-off-by-one") => VerifyFault::MaskOffByOne,
        Some(other) => {
            return Err(AppError::Usage(format!("unknown fault {other}")));
        }
    };
    banner("verify", &[("inject_fault", format!("{fault:?}"))]);
    let results = run_all(fault);
    let mut all_passed = true;
    println!("{:<24} {:<6} detail", "check", "status");
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        all_passed &= r.passed;
        println!("{:<24} {:<6} {}", r.name, status, r.detail);
    }
    Ok(if all_passed { 0 } else { 2 })
}
