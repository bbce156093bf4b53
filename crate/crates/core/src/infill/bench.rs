//! FiLM against the causal-masking baseline on identical infilling tasks.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{cm_reintegrate, drop_sentence, rouge, sample_spans, split_sentences, CmLayout, InfillTask, Prf};
use super::{RougeScore, Sentinels, TaskKind, MAX_SPANS};
use crate::corpus::{self, TokenSequence, TokenizerMode, Vocab};
use crate::decode::{fill_in, sample_token, CausalModel, FillModel, OrderPolicy, SamplerConfig};
use crate::rng::{self, streams};
use crate::{Error, Result, TokenId};

/// Most tokens the causal baseline may write for one span.
pub const MAX_SPAN_TOKENS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeMode {
    /// Generated fill tokens against reference fill tokens.
    FillsOnly,
    /// Completed sequence against the original sequence.
    FullText,
}

impl std::str::FromStr for RougeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fills" | "fills-only" => Ok(Self::FillsOnly),
            "full" | "full-text" => Ok(Self::FullText),
            other => Err(Error::InvalidArgument(format!("unknown ROUGE mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub task_kind: TaskKind,
    pub sampler: SamplerConfig,
    /// Fill order used by FiLM.
    pub policy: OrderPolicy,
    pub rouge_mode: RougeMode,
    pub seed: u64,
    pub max_span_tokens: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            task_kind: TaskKind::Span,
            sampler: SamplerConfig::default(),
            policy: OrderPolicy::LeftToRight,
            rouge_mode: RougeMode::FillsOnly,
            seed: 0,
            max_span_tokens: MAX_SPAN_TOKENS,
        }
    }
}

/// Tasks built from a corpus, plus how many candidates were skipped.
#[derive(Debug, Clone)]
pub struct TaskSet {
    pub tasks: Vec<InfillTask>,
    pub skipped: usize,
}

/// Build benchmark tasks from raw documents.
///
/// Span tasks chunk the documents to `window` and sample spans on every
/// chunk of at least two tokens. Sentence-drop tasks read one story per
/// line and keep stories of at least two sentences and at most `window`
/// tokens.
pub fn build_tasks(docs: &[String], vocab: &Vocab, kind: TaskKind, window: usize, seed: u64) -> Result<TaskSet> {
    let mut task_rng = rng::stream(seed, streams::TASKS);
    let mut tasks = Vec::new();
    let mut skipped = 0;
    match kind {
        TaskKind::Span => {
            for x in corpus::load_sequences(docs, vocab, window)? {
                if x.len() < 2 {
                    skipped += 1;
                    continue;
                }
                let spans = sample_spans(x.len(), &mut task_rng)?;
                tasks.push(InfillTask::new(TaskKind::Span, x, spans)?);
            }
        }
        TaskKind::SentenceDrop => {
            for line in docs.iter().flat_map(|d| d.lines()).filter(|l| !l.trim().is_empty()) {
                let story = split_sentences(line)
                    .into_iter()
                    .map(|s| vocab.encode(s).map(TokenSequence::into_ids))
                    .collect::<Result<Vec<_>>>()?;
                let len: usize = story.iter().map(Vec::len).sum();
                if story.len() < 2 || len > window {
                    skipped += 1;
                    continue;
                }
                tasks.push(drop_sentence(&story, &mut task_rng)?);
            }
        }
    }
    if tasks.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(TaskSet { tasks, skipped })
}

/// One system's answer to a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemOutput {
    pub fills: Vec<String>,
    pub text: String,
    pub rouge: RougeScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub task_id: usize,
    pub spans: Vec<(usize, usize)>,
    pub context: String,
    pub reference: Vec<String>,
    pub film: SystemOutput,
    pub cm: SystemOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub task_kind: TaskKind,
    pub rouge_mode: RougeMode,
    pub rouge_note: String,
    pub sampler: SamplerConfig,
    pub policy: OrderPolicy,
    pub seed: u64,
    pub max_span_tokens: usize,
    pub examples: usize,
    pub skipped: usize,
}

/// Macro-averaged scores over all examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub film: RougeScore,
    pub cm: RougeScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub header: ReportHeader,
    pub rows: Vec<ExampleRow>,
    pub aggregate: Aggregate,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line<'a> {
    Header(&'a ReportHeader),
    Example(&'a ExampleRow),
    Aggregate(&'a Aggregate),
}

impl BenchReport {
    /// Header line, one line per example, then the aggregate line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let lines = std::iter::once(Line::Header(&self.header))
            .chain(self.rows.iter().map(Line::Example))
            .chain(std::iter::once(Line::Aggregate(&self.aggregate)));
        for line in lines {
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn mean_score(scores: &[RougeScore]) -> RougeScore {
    let n = scores.len().max(1) as f64;
    let avg = |get: fn(&RougeScore) -> Prf| Prf {
        precision: scores.iter().map(|s| get(s).precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| get(s).recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| get(s).f1).sum::<f64>() / n,
    };
    RougeScore {
        rouge1: avg(|s| s.rouge1),
        rouge2: avg(|s| s.rouge2),
        rouge_l: avg(|s| s.rouge_l),
    }
}

/// Token strings used for ROUGE: lowercased words, or raw characters.
fn rouge_units(vocab: &Vocab, ids: &[TokenId]) -> Vec<String> {
    ids.iter()
        .map(|&id| {
            let t = vocab.token(id).unwrap_or_default();
            match vocab.mode() {
                TokenizerMode::Word => t.to_lowercase(),
                TokenizerMode::Char => t.to_string(),
            }
        })
        .collect()
}

fn score(vocab: &Vocab, mode: RougeMode, task: &InfillTask, fills: &[Vec<TokenId>], completed: &[TokenId]) -> RougeScore {
    let (cand, refr) = match mode {
        RougeMode::FillsOnly => (fills.concat(), task.reference_fills.concat()),
        RougeMode::FullText => (completed.to_vec(), task.original.ids().to_vec()),
    };
    rouge(&rouge_units(vocab, &cand), &rouge_units(vocab, &refr))
}

fn output(vocab: &Vocab, mode: RougeMode, task: &InfillTask, fills: Vec<Vec<TokenId>>, completed: &[TokenId]) -> Result<SystemOutput> {
    let rouge = score(vocab, mode, task, &fills, completed);
    Ok(SystemOutput {
        fills: fills.iter().map(|f| vocab.decode(f)).collect::<Result<_>>()?,
        text: vocab.decode(completed)?,
        rouge,
    })
}

/// Causal-masking generation for one task: the prompt is the begin marker
/// and the sentinel context; each span is opened with its FILL marker and
/// written until the next marker (or EOS after the last span), the per-span
/// cap, or the model's length limit.
pub fn cm_generate<C: CausalModel + ?Sized>(
    model: &C,
    task: &InfillTask,
    sentinels: Sentinels,
    sampler: &SamplerConfig,
    max_span_tokens: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<TokenId>> {
    let layout = CmLayout::build(&task.original, &task.spans, sentinels)?;
    let m = layout.fills.len();
    let mut seq = vec![Vocab::EOS];
    seq.extend_from_slice(&layout.context);
    let base = sentinels.base;
    'spans: for i in 0..m {
        if seq.len() >= model.n_max() {
            break;
        }
        seq.push(sentinels.fill(i));
        let terminator = if i + 1 < m { sentinels.fill(i + 1) } else { Vocab::EOS };
        for _ in 0..max_span_tokens {
            if seq.len() >= model.n_max() {
                break 'spans;
            }
            let lp = model.next_log_probs(&seq)?;
            let mut probs: Vec<f64> = lp
                .iter()
                .enumerate()
                .map(|(id, l)| {
                    let id = id as TokenId;
                    let allowed = (id >= Vocab::N_SPECIAL as TokenId && id < base) || id == terminator;
                    if allowed { l.exp() } else { 0.0 }
                })
                .collect();
            let z: f64 = probs.iter().sum();
            if !(z > 0.0) {
                break;
            }
            probs.iter_mut().for_each(|p| *p /= z);
            let next = sample_token(&probs, sampler, rng);
            if next == terminator {
                break;
            }
            seq.push(next);
        }
    }
    Ok(seq)
}

/// Run both systems on every task with the same per-task seed and score
/// them with ROUGE.
pub fn run_benchmark<M: FillModel + ?Sized, C: CausalModel + ?Sized>(
    film: &M,
    cm: &C,
    vocab: &Vocab,
    tasks: &TaskSet,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    cfg.sampler.validate()?;
    let sentinels = Sentinels::for_vocab(vocab);
    if film.vocab_size() != vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "FiLM model vocabulary {} does not match corpus vocabulary {}",
            film.vocab_size(),
            vocab.len()
        )));
    }
    if cm.vocab_size() != sentinels.extended_size() {
        return Err(Error::InvalidArgument(format!(
            "CM model vocabulary {} does not match corpus vocabulary {} plus {} sentinels",
            cm.vocab_size(),
            vocab.len(),
            2 * MAX_SPANS
        )));
    }
    let mut rows = Vec::with_capacity(tasks.tasks.len());
    for (task_id, task) in tasks.tasks.iter().enumerate() {
        task.original.check_vocab(vocab.len())?;
        let task_seed = rng::derive(rng::derive(cfg.seed, streams::DECODE), task_id as u64);

        let filled = fill_in(film, &task.context_with_masks, &cfg.policy, &cfg.sampler, &mut rng::stream(task_seed, 0))?;
        let film_fills = task.spans.extract(filled.sequence.ids());
        let film_out = output(vocab, cfg.rouge_mode, task, film_fills, filled.sequence.ids())?;

        let generated = cm_generate(cm, task, sentinels, &cfg.sampler, cfg.max_span_tokens, &mut rng::stream(task_seed, 0))?;
        let layout = super::cm::parse_layout(&generated, sentinels)?;
        let completed = cm_reintegrate(&generated, sentinels)?;
        let cm_out = output(vocab, cfg.rouge_mode, task, layout.fills, completed.ids())?;

        let context: Vec<TokenId> = task.context_with_masks.ids().to_vec();
        rows.push(ExampleRow {
            task_id,
            spans: task.spans.spans().to_vec(),
            context: vocab.decode(&context)?,
            reference: task.reference_fills.iter().map(|f| vocab.decode(f)).collect::<Result<_>>()?,
            film: film_out,
            cm: cm_out,
        });
    }
    let film_scores: Vec<RougeScore> = rows.iter().map(|r| r.film.rouge).collect();
    let cm_scores: Vec<RougeScore> = rows.iter().map(|r| r.cm.rouge).collect();
    let rouge_note = match cfg.rouge_mode {
        RougeMode::FillsOnly => "ROUGE over concatenated generated fills vs concatenated reference fills",
        RougeMode::FullText => "ROUGE over the completed sequence vs the original sequence",
    };
    Ok(BenchReport {
        header: ReportHeader {
            task_kind: cfg.task_kind,
            rouge_mode: cfg.rouge_mode,
            rouge_note: rouge_note.into(),
            sampler: cfg.sampler,
            policy: cfg.policy.clone(),
            seed: cfg.seed,
            max_span_tokens: cfg.max_span_tokens,
            examples: rows.len(),
            skipped: tasks.skipped,
        },
        aggregate: Aggregate {
            film: mean_score(&film_scores),
            cm: mean_score(&cm_scores),
        },
        rows,
    })
}
