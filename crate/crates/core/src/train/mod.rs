//! Training loops for the fill-in objective and the two causal baselines
//! (plain left-to-right and span-rearranged), with Adam, warmup, gradient
//! clipping, periodic validation and checkpoints.

mod adam;
mod loss;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use loss::{causal_pairs, causal_support, clm_loss, fill_support, masked_ce_loss};
pub(crate) use loss::{batch_nll, Example};

use crate::corpus::{self, LengthDistribution, TokenSequence, TokenizerMode, Vocab};
use crate::infill::{cm_transform, sample_spans, Sentinels, MAX_SPANS};
use crate::model::{AttentionMode, Checkpoint, ModelConfig, Transformer};
use crate::noise::{mask_sequence, NoiseSchedule};
use crate::rng::{self, streams};
use crate::tensor::{Graph, Scalar};
use crate::{Error, Result};

/// Validation never scores more sequences than this.
pub const MAX_VALIDATION_SEQUENCES: usize = 64;
/// Bins of the per-step mask-probability histogram.
pub const P_HIST_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Bidirectional fill-in of randomly masked tokens.
    Film,
    /// Left-to-right next-token prediction.
    Clm,
    /// Left-to-right prediction over span-rearranged sequences.
    Cm,
}

impl Objective {
    pub fn attention_mode(self) -> AttentionMode {
        match self {
            Self::Film => AttentionMode::Bidirectional,
            Self::Clm | Self::Cm => AttentionMode::Causal,
        }
    }

    /// Longest model input for sequences of at most `window` tokens.
    pub fn n_max(self, window: usize) -> usize {
        match self {
            Self::Film => window,
            Self::Clm => window + 1,
            Self::Cm => window + 1 + 2 * MAX_SPANS,
        }
    }

    /// Model vocabulary size for a base vocabulary of `base` entries.
    pub fn vocab_size(self, base: usize) -> usize {
        match self {
            Self::Cm => base + 2 * MAX_SPANS,
            _ => base,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Film => "film",
            Self::Clm => "clm",
            Self::Cm => "cm",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "film" => Ok(Self::Film),
            "clm" => Ok(Self::Clm),
            "cm" => Ok(Self::Cm),
            _ => Err(Error::InvalidArgument(format!("unknown objective {s:?} (film, clm, cm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub tokenizer: TokenizerMode,
    /// Sequence length corpora are chunked to.
    pub window: usize,
    /// Share of sequences held out for validation.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerMode::Char,
            window: 32,
            val_fraction: 0.1,
        }
    }
}

/// Architecture sizes; vocabulary size and maximum length come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            dropout_p: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub schedule: NoiseSchedule,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Tokens per optimizer step; the batch holds `batch_tokens / window` sequences.
    pub batch_tokens: usize,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            objective: Objective::Film,
            schedule: NoiseSchedule::Beta { alpha: 2.5, beta: 2.5 },
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            weight_decay: adam.weight_decay,
            batch_tokens: 512,
            total_steps: 1000,
            eval_interval: 100,
            warmup_steps: 100,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0,1)".into());
        }
        if !(self.epsilon > 0.0) || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) {
            return bad("epsilon and clip_norm must be positive, weight_decay non-negative".into());
        }
        self.schedule.validate()
    }
}

/// A complete run description, read from a TOML file with `[data]`,
/// `[model]` and `[train]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.window == 0 {
            return Err(Error::InvalidConfig("window must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::InvalidConfig("val_fraction must lie in [0,1)".into()));
        }
        self.train.validate()
    }

    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        let objective = self.train.objective;
        ModelConfig {
            vocab_size: objective.vocab_size(vocab.len()),
            n_max: objective.n_max(self.data.window),
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            dropout_p: self.model.dropout_p,
            attention_mode: objective.attention_mode(),
            seed: self.train.seed,
        }
    }
}

/// Tokenized corpus split into training and validation sequences.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub vocab: Vocab,
    pub train: Vec<TokenSequence>,
    pub validation: Vec<TokenSequence>,
}

impl TrainData {
    /// Build the vocabulary from `docs`, chunk them to `window` and hold out
    /// a seeded random share for validation.
    pub fn prepare(docs: &[String], data: &DataConfig, seed: u64) -> Result<Self> {
        let vocab = corpus::build_vocab(&docs.concat(), data.tokenizer)?;
        Self::with_vocab(vocab, docs, data, seed)
    }

    pub fn with_vocab(vocab: Vocab, docs: &[String], data: &DataConfig, seed: u64) -> Result<Self> {
        let mut seqs = corpus::load_sequences(docs, &vocab, data.window)?;
        if seqs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        seqs.shuffle(&mut rng::stream(seed, streams::DATA));
        let n_val = (seqs.len() as f64 * data.val_fraction).floor() as usize;
        let n_val = n_val.min(seqs.len() - 1);
        let validation = seqs.split_off(seqs.len() - n_val);
        Ok(Self {
            vocab,
            train: seqs,
            validation,
        })
    }

    /// Sequences used for validation: the held-out split, or the training
    /// set when nothing was held out.
    fn validation_set(&self) -> &[TokenSequence] {
        let set = if self.validation.is_empty() {
            &self.train
        } else {
            &self.validation
        };
        &set[..set.len().min(MAX_VALIDATION_SEQUENCES)]
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Tokens scored by the loss this step.
    pub masked_tokens: usize,
    pub grad_norm: f64,
    pub lr: f64,
    pub p_mean: Option<f64>,
    pub p_min: Option<f64>,
    pub p_max: Option<f64>,
    pub p_hist: Option<[u32; P_HIST_BINS]>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Transformer<f32>,
    pub metrics: Vec<MetricsRecord>,
    pub length_dist: LengthDistribution,
    pub checkpoint: Checkpoint,
}

/// Builds training examples for one objective.
struct ExampleBuilder {
    objective: Objective,
    schedule: NoiseSchedule,
    sentinels: Sentinels,
}

impl ExampleBuilder {
    /// Returns the example and, for fill-in, the sampled mask probability.
    fn build(
        &self,
        x: &TokenSequence,
        mask_rng: &mut dyn RngCore,
        span_rng: &mut dyn RngCore,
    ) -> Result<(Example, Option<f64>)> {
        match self.objective {
            Objective::Film => {
                let p = self.schedule.sample(mask_rng);
                let masked = mask_sequence(x, p, mask_rng)?;
                let targets = masked
                    .mask_positions()
                    .iter()
                    .copied()
                    .zip(masked.originals().iter().copied())
                    .collect();
                Ok((
                    Example {
                        input: masked.ids().to_vec(),
                        targets,
                    },
                    Some(p),
                ))
            }
            Objective::Clm => {
                let (input, targets) = causal_pairs(x.ids());
                Ok((Example { input, targets }, None))
            }
            Objective::Cm => {
                let spans = sample_spans(x.len(), span_rng)?;
                let t = cm_transform(x, &spans, self.sentinels)?;
                let (input, targets) = causal_pairs(t.ids());
                Ok((Example { input, targets }, None))
            }
        }
    }
}

fn support_for(objective: Objective, vocab_size: usize) -> std::sync::Arc<[bool]> {
    match objective {
        Objective::Film => fill_support(vocab_size),
        Objective::Clm | Objective::Cm => causal_support(vocab_size),
    }
}

/// Mean loss of `model` over the validation set. Masks and spans are drawn
/// from a fixed stream so every evaluation sees the same examples.
fn validation_loss(
    model: &Transformer<f32>,
    builder: &ExampleBuilder,
    seqs: &[TokenSequence],
    seed: u64,
) -> Result<f64> {
    let mut mask_rng = rng::stream(seed, streams::VALIDATION);
    let mut span_rng = rng::stream(rng::derive(seed, streams::VALIDATION), streams::CM_SPANS);
    let support = support_for(builder.objective, model.config().vocab_size);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(16) {
        let examples = chunk
            .iter()
            .map(|x| builder.build(x, &mut mask_rng, &mut span_rng).map(|(e, _)| e))
            .collect::<Result<Vec<_>>>()?;
        count += examples.iter().map(|e| e.targets.len()).sum::<usize>();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        if let Some(nll) = batch_nll(&mut g, model, &bound, &examples, &support, None)? {
            total += g.value(nll).item().expect("scalar").as_f64();
        }
    }
    Ok(total / count.max(1) as f64)
}

fn p_summary(ps: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>, Option<[u32; P_HIST_BINS]>) {
    if ps.is_empty() {
        return (None, None, None, None);
    }
    let mut hist = [0u32; P_HIST_BINS];
    for &p in ps {
        hist[((p * P_HIST_BINS as f64) as usize).min(P_HIST_BINS - 1)] += 1;
    }
    let mean = ps.iter().sum::<f64>() / ps.len() as f64;
    let min = ps.iter().copied().fold(f64::INFINITY, f64::min);
    let max = ps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (Some(mean), Some(min), Some(max), Some(hist))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn make_checkpoint(
    model: &Transformer<f32>,
    cfg: &RunConfig,
    vocab: &Vocab,
    length_dist: &LengthDistribution,
    step: u64,
) -> Result<Checkpoint> {
    Checkpoint::from_model(model)
        .with_meta("vocab", vocab)?
        .with_meta("length_dist", length_dist)?
        .with_meta("objective", cfg.train.objective)?
        .with_meta("schedule", cfg.train.schedule)?
        .with_meta("window", cfg.data.window)?
        .with_meta("step", step)
}

/// Train a model on `data` as described by `cfg`.
///
/// With a checkpoint directory set, a checkpoint `step-NNNNNN.ckpt` is saved
/// every `eval_interval` steps, the final model goes to `model.ckpt`, the
/// per-step metrics to `metrics.jsonl` and wall-clock timings to
/// `timing.jsonl` (kept apart so the metrics log is reproducible).
pub fn train(cfg: &RunConfig, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let tc = &cfg.train;
    let window = cfg.data.window;
    let model_cfg = cfg.model_config(&data.vocab);
    let mut model = Transformer::<f32>::init(model_cfg)?;
    let length_dist = corpus::estimate_length_dist(&data.train, window)?;
    let builder = ExampleBuilder {
        objective: tc.objective,
        schedule: tc.schedule,
        sentinels: Sentinels::for_vocab(&data.vocab),
    };
    let support = support_for(tc.objective, model.config().vocab_size);
    let adam = tc.adam();
    let mut state = AdamState::new(model.params());

    if let Some(dir) = &tc.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut data_rng = rng::stream(tc.seed, streams::DATA);
    let mut mask_rng = rng::stream(tc.seed, streams::MASK);
    let mut span_rng = rng::stream(tc.seed, streams::CM_SPANS);
    let mut dropout_rng = rng::stream(tc.seed, streams::DROPOUT);
    let batch_size = (tc.batch_tokens / window).max(1);
    let mut order: Vec<usize> = Vec::new();

    let mut metrics = Vec::with_capacity(tc.total_steps as usize);
    let mut timing = Vec::new();
    let started = Instant::now();
    for step in 1..=tc.total_steps {
        let mut batch = Vec::with_capacity(batch_size);
        let mut ps = Vec::new();
        for _ in 0..batch_size {
            if order.is_empty() {
                order = (0..data.train.len()).collect();
                order.shuffle(&mut data_rng);
                order.reverse();
            }
            let x = &data.train[order.pop().expect("refilled")];
            let (ex, p) = builder.build(x, &mut mask_rng, &mut span_rng)?;
            ps.extend(p);
            batch.push(ex);
        }
        let scored: usize = batch.iter().map(|e| e.targets.len()).sum();

        let (train_loss, mut grads) = {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let dropout: Option<&mut dyn RngCore> = (model.config().dropout_p > 0.0).then_some(&mut dropout_rng as _);
            let nll = batch_nll(&mut g, &model, &bound, &batch, &support, dropout)?.ok_or(Error::NoMasks)?;
            let loss = g.scale(nll, 1.0 / scored as f32);
            let value = g.value(loss).item().expect("scalar").as_f64();
            (value, g.backward(loss)?)
        };
        let grad_norm = clip_grad_norm(&mut grads, tc.clip_norm);
        let warm = if tc.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / tc.warmup_steps as f64).min(1.0)
        };
        let lr = tc.learning_rate * warm;
        adam_step(&mut model, &grads, &mut state, &adam, lr)?;

        let evaluate = step % tc.eval_interval == 0 || step == tc.total_steps;
        let val_loss = if evaluate {
            Some(validation_loss(&model, &builder, data.validation_set(), tc.seed)?)
        } else {
            None
        };
        if evaluate && step != tc.total_steps {
            if let Some(dir) = &tc.checkpoint_dir {
                make_checkpoint(&model, cfg, &data.vocab, &length_dist, step)?
                    .save(&dir.join(format!("step-{step:06}.ckpt")))?;
            }
        }
        let (p_mean, p_min, p_max, p_hist) = p_summary(&ps);
        metrics.push(MetricsRecord {
            step,
            train_loss,
            val_loss,
            masked_tokens: scored,
            grad_norm,
            lr,
            p_mean,
            p_min,
            p_max,
            p_hist,
        });
        timing.push(serde_json::json!({ "step": step, "elapsed_s": started.elapsed().as_secs_f64() }));
    }

    let checkpoint = make_checkpoint(&model, cfg, &data.vocab, &length_dist, tc.total_steps)?;
    if let Some(dir) = &tc.checkpoint_dir {
        checkpoint.save(&dir.join(format!("step-{:06}.ckpt", tc.total_steps)))?;
        checkpoint.save(&dir.join("model.ckpt"))?;
        write_jsonl(&dir.join("metrics.jsonl"), &metrics)?;
        write_jsonl(&dir.join("timing.jsonl"), &timing)?;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        length_dist,
        checkpoint,
    })
}

/// Serialize a metrics log the way `train` writes it to disk.
pub fn metrics_jsonl(metrics: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in metrics {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
