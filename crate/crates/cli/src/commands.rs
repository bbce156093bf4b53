use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use film_core::corpus::{self, synthetic, LengthDistribution, TokenSequence, TokenizerMode, Vocab};
use film_core::decode::{fill_in, generate_from_scratch, sample_token, CausalModel, OrderPolicy, SamplerConfig};
use film_core::evalppl::{clm_corpus_perplexity, corpus_perplexity};
use film_core::infill::{build_tasks, cm_transform, run_benchmark, BenchConfig, RougeMode, Sentinels, SpanSpec, TaskKind};
use film_core::model::{Checkpoint, Transformer};
use film_core::noise::{MaskedSequence, NoiseSchedule};
use film_core::rng::{self, streams};
use film_core::train::{train, Objective, RunConfig, TrainData};
use film_core::TokenId;

use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "film", version, about = "Fill-in language models: train, score, infill and benchmark")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a corpus file or directory.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on a corpus.
    EvalPpl(EvalArgs),
    /// Fill `[MASK]` placeholders in a text.
    Infill(InfillArgs),
    /// Sample sequences from scratch.
    Generate(GenerateArgs),
    /// Compare a FiLM and a causal-masking checkpoint on infilling tasks.
    Bench(BenchArgs),
    /// Show the causal-masking rearrangement of a text.
    TransformCm(TransformArgs),
    /// Write a synthetic corpus.
    SynthCorpus(SynthArgs),
}

#[derive(Debug, Args)]
struct SamplerArgs {
    /// Nucleus threshold.
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,
    /// Take the most likely token instead of sampling.
    #[arg(long)]
    greedy: bool,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        if self.greedy {
            SamplerConfig::greedy()
        } else {
            SamplerConfig::nucleus(self.top_p, self.temperature)
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML file with [data], [model] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory for checkpoints, logs and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// fixed:P, uniform, beta-mode:M or beta:A,B
    #[arg(long)]
    schedule: Option<NoiseSchedule>,
    /// film, clm or cm
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Order policy; repeat for several. Defaults to all five.
    #[arg(long)]
    policy: Vec<OrderPolicy>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InfillArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Text with one placeholder per missing token.
    #[arg(long)]
    text: String,
    #[arg(long, default_value = corpus::MASK_TEXT)]
    placeholder: String,
    #[arg(long, default_value = "l2r")]
    policy: OrderPolicy,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the step-by-step fill trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value = "l2r")]
    policy: OrderPolicy,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    film_ckpt: PathBuf,
    #[arg(long)]
    cm_ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// span or sentence-drop
    #[arg(long, default_value = "span")]
    task: TaskKind,
    /// fills or full
    #[arg(long, default_value = "fills")]
    rouge: RougeMode,
    /// Fill order for the FiLM system.
    #[arg(long, default_value = "l2r")]
    policy: OrderPolicy,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use only the first N tasks.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TransformArgs {
    #[arg(long)]
    text: String,
    /// Sorted 1-based span endpoints, e.g. `2,4,5,6`.
    #[arg(long)]
    spans: String,
    /// Take the vocabulary from a checkpoint instead of the text itself.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "word")]
    tokenizer: TokenizerMode,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// text (running prose) or stories (one per line)
    #[arg(long, default_value = "text")]
    kind: String,
    /// Characters for text, stories for stories.
    #[arg(long, default_value_t = 200_000)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::EvalPpl(a) => cmd_eval(a),
        Command::Infill(a) => cmd_infill(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::TransformCm(a) => cmd_transform(a),
        Command::SynthCorpus(a) => cmd_synth(a),
    }
}

/// A checkpoint with the metadata written by training.
struct Loaded {
    model: Transformer<f32>,
    vocab: Vocab,
    length_dist: LengthDistribution,
    objective: Objective,
    window: usize,
}

fn load(path: &Path) -> Result<Loaded> {
    let ck = Checkpoint::load(path)?;
    let missing = |key: &str| anyhow::anyhow!("{}: checkpoint has no `{key}` metadata", path.display());
    Ok(Loaded {
        model: ck.to_model()?,
        vocab: ck.meta("vocab")?.ok_or_else(|| missing("vocab"))?,
        length_dist: ck.meta("length_dist")?.ok_or_else(|| missing("length_dist"))?,
        objective: ck.meta("objective")?.ok_or_else(|| missing("objective"))?,
        window: ck.meta("window")?.ok_or_else(|| missing("window"))?,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(s) = a.schedule {
        cfg.train.schedule = s;
    }
    if let Some(o) = a.objective {
        cfg.train.objective = o;
    }
    if let Some(n) = a.steps {
        cfg.train.total_steps = n;
    }
    cfg.train.checkpoint_dir = Some(a.out.clone());
    cfg.validate()?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("train", serde_json::to_value(&cfg)?, cfg.train.seed);

    let docs = corpus::read_documents(&a.corpus)?;
    let data = TrainData::prepare(&docs, &cfg.data, cfg.train.seed)?;
    let out = train(&cfg, &data)?;
    write_file(&a.out.join("config.toml"), &cfg.to_toml()?)?;

    let last = out.metrics.last().expect("at least one step");
    println!(
        "{}",
        json!({
            "steps": last.step,
            "train_loss": last.train_loss,
            "val_loss": last.val_loss,
            "train_sequences": data.train.len(),
            "val_sequences": data.validation.len(),
            "parameters": out.model.param_count(),
            "checkpoint": a.out.join("model.ckpt"),
        })
    );
    manifest.outputs = ["model.ckpt", "metrics.jsonl", "timing.jsonl", "config.toml"]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    manifest.finish(&a.out)
}

/// Sequences of the corpus that the vocabulary covers, and how many were dropped.
fn scoreable(docs: &[String], vocab: &Vocab, window: usize) -> Result<(Vec<TokenSequence>, usize)> {
    let all = corpus::load_sequences(docs, vocab, window)?;
    let total = all.len();
    let kept: Vec<TokenSequence> = all.into_iter().filter(|s| !s.ids().contains(&Vocab::UNK)).collect();
    let dropped = total - kept.len();
    ensure!(!kept.is_empty(), "no corpus sequence is fully covered by the checkpoint vocabulary");
    Ok((kept, dropped))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let m = load(&a.ckpt)?;
    let docs = corpus::read_documents(&a.corpus)?;
    let (seqs, dropped) = scoreable(&docs, &m.vocab, m.window)?;
    let policies = if a.policy.is_empty() {
        OrderPolicy::NAMED.to_vec()
    } else {
        a.policy.clone()
    };
    let mut report = json!({
        "checkpoint": a.ckpt,
        "corpus": a.corpus,
        "objective": m.objective,
        "seed": a.seed,
        "sequences": seqs.len(),
        "skipped_sequences": dropped,
        "total_tokens": seqs.iter().map(|s| s.len() + 1).sum::<usize>(),
    });
    match m.objective {
        Objective::Film => {
            let mut by_policy = serde_json::Map::new();
            for p in &policies {
                let r = corpus_perplexity(&m.model, &seqs, &m.length_dist, p, a.seed)?;
                by_policy.insert(p.to_string(), serde_json::to_value(r)?);
            }
            report["policies"] = by_policy.into();
        }
        Objective::Clm => {
            report["clm"] = serde_json::to_value(clm_corpus_perplexity(&m.model, &seqs)?)?;
        }
        Objective::Cm => bail!("perplexity of a causal-masking checkpoint is not defined; use a film or clm checkpoint"),
    }
    let body = serde_json::to_string_pretty(&report)?;
    println!("{body}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = dir.join("report.json");
        write_file(&path, &body)?;
        let cfg = json!({ "ckpt": a.ckpt, "corpus": a.corpus, "policies": policies.iter().map(|p| p.to_string()).collect::<Vec<_>>() });
        let mut manifest = RunManifest::new("eval-ppl", cfg, a.seed);
        manifest.outputs.push(path);
        manifest.finish(dir)?;
    }
    Ok(())
}

/// Tokenize `text`, turning each literal `placeholder` into a mask.
fn encode_with_masks(vocab: &Vocab, text: &str, placeholder: &str) -> Result<Vec<TokenId>> {
    ensure!(!placeholder.is_empty(), "placeholder must not be empty");
    let mut ids = Vec::new();
    for (i, piece) in text.split(placeholder).enumerate() {
        if i > 0 {
            ids.push(Vocab::MASK);
        }
        if !vocab.tokenize(piece).is_empty() {
            ids.extend_from_slice(vocab.encode(piece)?.ids());
        }
    }
    ensure!(!ids.is_empty(), "text is empty");
    Ok(ids)
}

fn require_film(m: &Loaded, what: &str) -> Result<()> {
    ensure!(m.objective == Objective::Film, "{what} needs a film checkpoint, got {}", m.objective);
    Ok(())
}

fn cmd_infill(a: InfillArgs) -> Result<()> {
    let m = load(&a.ckpt)?;
    require_film(&m, "infill")?;
    let ids = encode_with_masks(&m.vocab, &a.text, &a.placeholder)?;
    let masked = MaskedSequence::from_masked_ids(ids)?;
    let mut r = rng::stream(a.seed, streams::DECODE);
    let filled = fill_in(&m.model, &masked, &a.policy, &a.sampler.config(), &mut r)?;
    let text = m.vocab.decode(filled.sequence.ids())?;
    println!("{text}");
    if let Some(path) = &a.trace {
        let mut ids = masked.ids().to_vec();
        let mut lines = String::new();
        for (step, s) in filled.trace.iter().enumerate() {
            ids[s.position] = s.token;
            let row = json!({
                "step": step + 1,
                "position": s.position,
                "token": m.vocab.token(s.token),
                "entropy": s.entropy,
                "text": m.vocab.decode(&ids)?,
            });
            lines.push_str(&row.to_string());
            lines.push('\n');
        }
        write_file(path, &lines)?;
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = dir.join("completion.txt");
        write_file(&path, &format!("{text}\n"))?;
        let cfg = json!({ "ckpt": a.ckpt, "text": a.text, "policy": a.policy, "sampler": a.sampler.config() });
        let mut manifest = RunManifest::new("infill", cfg, a.seed);
        manifest.outputs.push(path);
        manifest.outputs.extend(a.trace.clone());
        manifest.finish(dir)?;
    }
    Ok(())
}

/// Left-to-right sampling from a causal checkpoint until EOS.
fn sample_causal(m: &Loaded, sampler: &SamplerConfig, r: &mut rng::Rng) -> Result<Vec<TokenId>> {
    let mut seq = vec![Vocab::EOS];
    while seq.len() < m.model.config().n_max {
        let probs: Vec<f64> = m.model.next_log_probs(&seq)?.iter().map(|l| l.exp()).collect();
        let next = sample_token(&probs, sampler, r);
        if next == Vocab::EOS {
            break;
        }
        seq.push(next);
    }
    Ok(seq.split_off(1))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let m = load(&a.ckpt)?;
    let sampler = a.sampler.config();
    let mut r = rng::stream(a.seed, streams::DECODE);
    let mut lines = Vec::with_capacity(a.count);
    for _ in 0..a.count {
        let ids = match m.objective {
            Objective::Film => {
                generate_from_scratch(&m.model, &m.length_dist, &a.policy, &sampler, &mut r)?
                    .sequence
                    .into_ids()
            }
            Objective::Clm => sample_causal(&m, &sampler, &mut r)?,
            Objective::Cm => bail!("generate needs a film or clm checkpoint"),
        };
        lines.push(m.vocab.decode(&ids)?);
    }
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    print!("{body}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = dir.join("samples.txt");
        write_file(&path, &body)?;
        let cfg = json!({ "ckpt": a.ckpt, "count": a.count, "policy": a.policy, "sampler": sampler });
        let mut manifest = RunManifest::new("generate", cfg, a.seed);
        manifest.outputs.push(path);
        manifest.finish(dir)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let film = load(&a.film_ckpt)?;
    let cm = load(&a.cm_ckpt)?;
    require_film(&film, "bench --film-ckpt")?;
    ensure!(cm.objective == Objective::Cm, "bench --cm-ckpt needs a cm checkpoint, got {}", cm.objective);
    ensure!(
        film.vocab == cm.vocab,
        "vocabulary mismatch between {} and {}",
        a.film_ckpt.display(),
        a.cm_ckpt.display()
    );
    let docs = corpus::read_documents(&a.corpus)?;
    let mut tasks = build_tasks(&docs, &film.vocab, a.task, film.window, a.seed)?;
    if let Some(n) = a.limit {
        tasks.tasks.truncate(n);
    }
    let cfg = BenchConfig {
        task_kind: a.task,
        sampler: a.sampler.config(),
        policy: a.policy.clone(),
        rouge_mode: a.rouge,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let report = run_benchmark(&film.model, &cm.model, &film.vocab, &tasks, &cfg)?;
    println!("{}", serde_json::to_string(&report.aggregate)?);
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = dir.join("report.jsonl");
        write_file(&path, &report.to_jsonl()?)?;
        let mut cfg_json = serde_json::to_value(&cfg)?;
        cfg_json["film_ckpt"] = json!(a.film_ckpt);
        cfg_json["cm_ckpt"] = json!(a.cm_ckpt);
        cfg_json["corpus"] = json!(a.corpus);
        cfg_json["limit"] = json!(a.limit);
        let mut manifest = RunManifest::new("bench", cfg_json, a.seed);
        manifest.outputs.push(path);
        manifest.finish(dir)?;
    }
    Ok(())
}

fn cmd_transform(a: TransformArgs) -> Result<()> {
    let vocab = match &a.ckpt {
        Some(p) => load(p)?.vocab,
        None => corpus::build_vocab(&a.text, a.tokenizer)?,
    };
    let endpoints = a
        .spans
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("bad span list {:?}", a.spans))?;
    let spans = SpanSpec::from_endpoints(&endpoints)?;
    let x = vocab.encode(&a.text)?;
    let s = Sentinels::for_vocab(&vocab);
    let t = cm_transform(&x, &spans, s)?;
    println!("{}", s.decode(&vocab, t.ids())?);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let body = match a.kind.as_str() {
        "text" => synthetic::text(a.seed, a.size),
        "stories" => synthetic::stories(a.seed, a.size, 5),
        other => bail!("unknown corpus kind {other:?} (text, stories)"),
    };
    write_file(&a.out, &body)
}
