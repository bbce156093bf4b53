//! Sequential fill-in decoding: one mask is filled per forward pass, with
//! the position picked by an order policy and the token by a sampler.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::{LengthPrior, TokenSequence, Vocab};
use crate::model::{AttentionMode, Transformer};
use crate::noise::MaskedSequence;
use crate::tensor::Scalar;
use crate::train::{causal_support, fill_support};
use crate::{Error, Result, TokenId};

/// Tolerance on the total mass of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// A bidirectional model that predicts tokens at mask positions.
pub trait FillModel {
    fn n_max(&self) -> usize;

    fn vocab_size(&self) -> usize;

    /// Temperature-1 log-probabilities over the vocabulary at each of
    /// `positions` of `ids`. Tokens the model never predicts get `-inf`.
    fn fill_log_probs(&self, ids: &[TokenId], positions: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// A left-to-right model.
pub trait CausalModel {
    fn n_max(&self) -> usize;

    fn vocab_size(&self) -> usize;

    /// Log-probabilities of the token following `prefix`.
    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// Log-softmax of one logit row restricted to `support`, in f64.
pub fn log_softmax_support<F: Scalar>(row: &[F], support: &[bool]) -> Vec<f64> {
    let max = row
        .iter()
        .zip(support)
        .filter(|(_, &s)| s)
        .map(|(x, _)| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .zip(support)
            .filter(|(_, &s)| s)
            .map(|(x, _)| (x.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
    row.iter()
        .zip(support)
        .map(|(x, &s)| if s { x.as_f64() - lse } else { f64::NEG_INFINITY })
        .collect()
}

impl<F: Scalar> FillModel for Transformer<F> {
    fn n_max(&self) -> usize {
        self.config().n_max
    }

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn fill_log_probs(&self, ids: &[TokenId], positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        if self.config().attention_mode != AttentionMode::Bidirectional {
            return Err(Error::InvalidArgument("fill-in decoding needs a bidirectional model".into()));
        }
        let v = self.config().vocab_size;
        let logits = self.forward(&[ids])?;
        let support = fill_support(v);
        positions
            .iter()
            .map(|&p| {
                if p >= ids.len() {
                    return Err(Error::InvalidArgument(format!("position {p} outside sequence")));
                }
                Ok(log_softmax_support(&logits.data()[p * v..(p + 1) * v], &support))
            })
            .collect()
    }
}

impl<F: Scalar> CausalModel for Transformer<F> {
    fn n_max(&self) -> usize {
        self.config().n_max
    }

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        if self.config().attention_mode != AttentionMode::Causal {
            return Err(Error::InvalidArgument("next-token prediction needs a causal model".into()));
        }
        let v = self.config().vocab_size;
        let logits = self.forward(&[prefix])?;
        let last = prefix.len() - 1;
        Ok(log_softmax_support(&logits.data()[last * v..(last + 1) * v], &causal_support(v)))
    }
}

/// Which mask to fill next.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OrderPolicy {
    Random,
    LeftToRight,
    RightToLeft,
    MinEntropy,
    MaxEntropy,
    /// Positions in the listed order (0-based); unlisted masks follow left to right.
    Fixed(Vec<usize>),
}

impl OrderPolicy {
    /// The five named policies.
    pub const NAMED: [OrderPolicy; 5] = [
        Self::LeftToRight,
        Self::RightToLeft,
        Self::Random,
        Self::MinEntropy,
        Self::MaxEntropy,
    ];

    pub fn needs_distributions(&self) -> bool {
        matches!(self, Self::MinEntropy | Self::MaxEntropy)
    }
}

impl fmt::Display for OrderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Random => f.write_str("random"),
            Self::LeftToRight => f.write_str("l2r"),
            Self::RightToLeft => f.write_str("r2l"),
            Self::MinEntropy => f.write_str("min-ent"),
            Self::MaxEntropy => f.write_str("max-ent"),
            Self::Fixed(order) => {
                let parts: Vec<String> = order.iter().map(usize::to_string).collect();
                write!(f, "fixed:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for OrderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => Self::Random,
            "l2r" => Self::LeftToRight,
            "r2l" => Self::RightToLeft,
            "min-ent" => Self::MinEntropy,
            "max-ent" => Self::MaxEntropy,
            _ => match s.strip_prefix("fixed:") {
                Some(list) => Self::Fixed(
                    list.split(',')
                        .map(|p| p.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::InvalidArgument(format!("bad fixed order {s:?}")))?,
                ),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown order policy {s:?} (random, l2r, r2l, min-ent, max-ent, fixed:i,j,..)"
                    )))
                }
            },
        })
    }
}

impl TryFrom<String> for OrderPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OrderPolicy> for String {
    fn from(p: OrderPolicy) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplerConfig {
    /// Nucleus sampling with threshold 0.95 at temperature 0.8.
    fn default() -> Self {
        Self::nucleus(0.95, 0.8)
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            mode: SamplerMode::Greedy,
            temperature: 1.0,
            top_p: 1.0,
        }
    }

    pub fn nucleus(top_p: f64, temperature: f64) -> Self {
        Self {
            mode: SamplerMode::Sample,
            temperature,
            top_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig(format!("top_p must lie in (0,1], got {}", self.top_p)));
        }
        Ok(())
    }
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative or NaN probability {p}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(Error::InvalidArgument(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    check_distribution(probs)?;
    Ok(-probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

fn entropy_of_log_probs(log_probs: &[f64]) -> f64 {
    -log_probs
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|&lp| lp.exp() * lp)
        .sum::<f64>()
}

/// Index of the first maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Pick which of the masks at `positions` to fill. `distributions[i]`
/// (temperature-1 probabilities) is consulted only by the entropy policies.
/// Returns an index into `positions`.
pub fn select_position(
    positions: &[usize],
    distributions: &[Vec<f64>],
    policy: &OrderPolicy,
    rng: &mut dyn RngCore,
) -> Result<usize> {
    if positions.is_empty() {
        return Err(Error::NoMasks);
    }
    let by_position = |pick: fn(&usize, &usize) -> bool| {
        let mut best = 0;
        for (i, p) in positions.iter().enumerate() {
            if pick(p, &positions[best]) {
                best = i;
            }
        }
        best
    };
    Ok(match policy {
        OrderPolicy::LeftToRight => by_position(|a, b| a < b),
        OrderPolicy::RightToLeft => by_position(|a, b| a > b),
        OrderPolicy::Random => rng.random_range(0..positions.len()),
        OrderPolicy::Fixed(order) => order
            .iter()
            .find_map(|want| positions.iter().position(|p| p == want))
            .unwrap_or_else(|| by_position(|a, b| a < b)),
        OrderPolicy::MinEntropy | OrderPolicy::MaxEntropy => {
            if distributions.len() != positions.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} distributions for {} masks",
                    distributions.len(),
                    positions.len()
                )));
            }
            let h = distributions.iter().map(|d| entropy(d)).collect::<Result<Vec<f64>>>()?;
            pick_by_entropy(positions, &h, policy)
        }
    })
}

/// Argmin or argmax of `entropies`, ties to the leftmost position.
fn pick_by_entropy(positions: &[usize], entropies: &[f64], policy: &OrderPolicy) -> usize {
    let sign = if *policy == OrderPolicy::MinEntropy { -1.0 } else { 1.0 };
    let mut best = 0;
    for i in 1..positions.len() {
        let (a, b) = (sign * entropies[i], sign * entropies[best]);
        if a > b || (a == b && positions[i] < positions[best]) {
            best = i;
        }
    }
    best
}

/// Like [`select_position`] but from log-probabilities, as produced by a
/// [`FillModel`].
pub(crate) fn select_from_log_probs(
    positions: &[usize],
    log_probs: &[Vec<f64>],
    policy: &OrderPolicy,
    rng: &mut dyn RngCore,
) -> Result<usize> {
    if !policy.needs_distributions() {
        return select_position(positions, &[], policy, rng);
    }
    let h: Vec<f64> = log_probs.iter().map(|lp| entropy_of_log_probs(lp)).collect();
    Ok(pick_by_entropy(positions, &h, policy))
}

/// Draw a token index from `probs`.
///
/// Greedy returns the first argmax. Sampling raises probabilities to
/// `1 / temperature`, keeps the smallest high-to-low prefix whose mass
/// reaches `top_p` (the token crossing the threshold is kept), renormalizes
/// and draws.
pub fn sample_token(probs: &[f64], sampler: &SamplerConfig, rng: &mut dyn RngCore) -> TokenId {
    if sampler.mode == SamplerMode::Greedy {
        return argmax(probs) as TokenId;
    }
    let inv_t = 1.0 / sampler.temperature;
    let log_max = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { ((p.ln() - log_max) * inv_t).exp() } else { 0.0 })
        .collect();
    let total: f64 = scaled.iter().sum();
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| scaled[i] > 0.0).collect();
    if order.is_empty() {
        return argmax(probs) as TokenId;
    }
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += scaled[i];
        kept += 1;
        if mass / total >= sampler.top_p {
            break;
        }
    }
    let nucleus = &order[..kept];
    let mut u = rng.random::<f64>() * mass;
    for &i in nucleus {
        u -= scaled[i];
        if u < 0.0 {
            return i as TokenId;
        }
    }
    *nucleus.last().expect("nucleus is non-empty") as TokenId
}

/// One decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillStep {
    pub position: usize,
    pub token: TokenId,
    /// Entropy (nats) of the distribution the token was drawn from.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Filled {
    pub sequence: TokenSequence,
    pub trace: Vec<FillStep>,
    pub forward_passes: usize,
}

impl Filled {
    /// Positions in the order they were filled.
    pub fn realized_order(&self) -> Vec<usize> {
        self.trace.iter().map(|s| s.position).collect()
    }
}

/// Fill every mask of `masked`, one per forward pass.
pub fn fill_in<M: FillModel + ?Sized>(
    model: &M,
    masked: &MaskedSequence,
    policy: &OrderPolicy,
    sampler: &SamplerConfig,
    rng: &mut dyn RngCore,
) -> Result<Filled> {
    sampler.validate()?;
    let n = masked.len();
    if n > model.n_max() {
        return Err(Error::SequenceTooLong {
            len: n,
            n_max: model.n_max(),
        });
    }
    let mut ids = masked.ids().to_vec();
    let mut remaining = masked.mask_positions().to_vec();
    let mut trace = Vec::with_capacity(remaining.len());
    let mut passes = 0;
    while !remaining.is_empty() {
        let log_probs = model.fill_log_probs(&ids, &remaining)?;
        passes += 1;
        let k = select_from_log_probs(&remaining, &log_probs, policy, rng)?;
        let probs: Vec<f64> = log_probs[k].iter().map(|lp| lp.exp()).collect();
        let token = sample_token(&probs, sampler, rng);
        let pos = remaining.remove(k);
        debug_assert_eq!(ids[pos], Vocab::MASK);
        ids[pos] = token;
        trace.push(FillStep {
            position: pos,
            token,
            entropy: entropy_of_log_probs(&log_probs[k]),
        });
    }
    Ok(Filled {
        sequence: TokenSequence::new(ids)?,
        trace,
        forward_passes: passes,
    })
}

/// Draw a length from `p_len` and fill an all-mask sequence of that length.
pub fn generate_from_scratch<M: FillModel + ?Sized>(
    model: &M,
    p_len: &dyn LengthPrior,
    policy: &OrderPolicy,
    sampler: &SamplerConfig,
    rng: &mut dyn RngCore,
) -> Result<Filled> {
    let n = p_len.sample(rng);
    let masked = MaskedSequence::from_masked_ids(vec![Vocab::MASK; n])?;
    fill_in(model, &masked, policy, sampler, rng)
}

#[cfg(test)]
mod tests;
