//! Exact perplexity of a fill-in model under a chosen filling order, and
//! ordinary perplexity of a causal model, on the same n+1 denominator.
//!
//! A length-n sequence scores `log p_len(n)` plus, for each step, the log
//! probability of the gold token at the position the policy picks, with
//! every earlier pick already written in.

use serde::{Deserialize, Serialize};

use crate::corpus::{LengthPrior, TokenSequence, Vocab};
use crate::decode::{log_softmax_support, select_from_log_probs, FillModel, OrderPolicy};
use crate::model::{AttentionMode, Transformer};
use crate::rng::{self, streams};
use crate::tensor::Scalar;
use crate::train::{causal_pairs, causal_support};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderedLogProb {
    /// `length_term + Σ per_step_logprobs`, in nats.
    pub total_logprob: f64,
    pub length_term: f64,
    pub per_step_logprobs: Vec<f64>,
    /// 0-based positions in the order they were scored.
    pub realized_order: Vec<usize>,
}

impl OrderedLogProb {
    /// Number of scored terms: n tokens plus the length.
    pub fn denominator(&self) -> usize {
        self.realized_order.len() + 1
    }
}

/// Score `x` under `policy`. A random order is drawn from a stream keyed by
/// `seed` and the tokens of `x`, so it does not depend on corpus position.
pub fn logprob_with_order<M: FillModel + ?Sized>(
    model: &M,
    x: &TokenSequence,
    p_len: &dyn LengthPrior,
    policy: &OrderPolicy,
    seed: u64,
) -> Result<OrderedLogProb> {
    let n = x.len();
    if n > model.n_max() {
        return Err(Error::SequenceTooLong {
            len: n,
            n_max: model.n_max(),
        });
    }
    x.check_vocab(model.vocab_size())?;
    let mut order_rng = rng::stream(rng::hash_tokens(seed, x.ids()), streams::ORDER);
    let mut ids = vec![Vocab::MASK; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut per_step = Vec::with_capacity(n);
    let mut order = Vec::with_capacity(n);
    while !remaining.is_empty() {
        let (pos, log_probs) = if policy.needs_distributions() {
            let all = model.fill_log_probs(&ids, &remaining)?;
            let k = select_from_log_probs(&remaining, &all, policy, &mut order_rng)?;
            (remaining.remove(k), all.into_iter().nth(k).expect("k indexes remaining"))
        } else {
            let k = select_from_log_probs(&remaining, &[], policy, &mut order_rng)?;
            let pos = remaining.remove(k);
            let lp = model.fill_log_probs(&ids, &[pos])?.pop().expect("one position requested");
            (pos, lp)
        };
        let gold = x.ids()[pos];
        let lp = log_probs[gold as usize];
        if lp == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(format!(
                "token {gold} at position {pos} is outside the model's output support"
            )));
        }
        per_step.push(lp);
        order.push(pos);
        ids[pos] = gold;
    }
    let length_term = p_len.log_prob(n);
    Ok(OrderedLogProb {
        total_logprob: length_term + per_step.iter().sum::<f64>(),
        length_term,
        per_step_logprobs: per_step,
        realized_order: order,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    /// `exp(-Σ logprob / Σ (n+1))`.
    pub perplexity: f64,
    pub total_logprob: f64,
    /// `Σ (n+1)` over the corpus.
    pub total_tokens: usize,
    pub sequences: usize,
    /// Mean of the per-sequence perplexities.
    pub mean_sequence_perplexity: f64,
}

impl PerplexityReport {
    /// Aggregate `(logprob, n+1)` pairs. Summation runs in slice order so
    /// the result does not depend on how the scores were computed.
    pub fn from_scores(scores: &[(f64, usize)]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let total_logprob: f64 = scores.iter().map(|s| s.0).sum();
        let total_tokens: usize = scores.iter().map(|s| s.1).sum();
        let mean_sequence_perplexity =
            scores.iter().map(|&(lp, d)| (-lp / d as f64).exp()).sum::<f64>() / scores.len() as f64;
        Ok(Self {
            perplexity: (-total_logprob / total_tokens as f64).exp(),
            total_logprob,
            total_tokens,
            sequences: scores.len(),
            mean_sequence_perplexity,
        })
    }
}

/// Run `score` over `corpus` on all available cores, keeping results in
/// corpus order.
fn score_all<T: Send>(
    corpus: &[TokenSequence],
    score: impl Fn(&TokenSequence) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(corpus.len().max(1));
    if threads <= 1 {
        return corpus.iter().map(&score).collect();
    }
    let chunk = corpus.len().div_ceil(threads);
    let score = &score;
    std::thread::scope(|s| {
        let handles: Vec<_> = corpus
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(score).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(corpus.len());
        for h in handles {
            out.extend(h.join().expect("scoring thread panicked")?);
        }
        Ok(out)
    })
}

/// Token-weighted perplexity of a fill-in model under `policy`.
pub fn corpus_perplexity<M: FillModel + Sync + ?Sized>(
    model: &M,
    corpus: &[TokenSequence],
    p_len: &(dyn LengthPrior + Sync),
    policy: &OrderPolicy,
    seed: u64,
) -> Result<PerplexityReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scores = score_all(corpus, |x| {
        let s = logprob_with_order(model, x, p_len, policy, seed)?;
        Ok((s.total_logprob, s.denominator()))
    })?;
    PerplexityReport::from_scores(&scores)
}

/// Log-probability of `x` followed by EOS under a causal model.
pub fn clm_logprob<F: Scalar>(model: &Transformer<F>, x: &TokenSequence) -> Result<f64> {
    if model.config().attention_mode != AttentionMode::Causal {
        return Err(Error::InvalidArgument("causal perplexity needs a causal model".into()));
    }
    let v = model.config().vocab_size;
    x.check_vocab(v)?;
    let (input, targets) = causal_pairs(x.ids());
    let logits = model.forward(&[&input])?;
    let support = causal_support(v);
    let mut total = 0.0;
    for (row, gold) in targets {
        let lp = log_softmax_support(&logits.data()[row * v..(row + 1) * v], &support)[gold as usize];
        if lp == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(format!(
                "token {gold} is outside the model's output support"
            )));
        }
        total += lp;
    }
    Ok(total)
}

/// Token-weighted perplexity of a causal model over n+1 positions per sequence.
pub fn clm_corpus_perplexity<F: Scalar>(model: &Transformer<F>, corpus: &[TokenSequence]) -> Result<PerplexityReport> {
    if model.config().attention_mode != AttentionMode::Causal {
        return Err(Error::InvalidArgument("causal perplexity needs a causal model".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scores = score_all(corpus, |x| Ok((clm_logprob(model, x)?, x.len() + 1)))?;
    PerplexityReport::from_scores(&scores)
}
