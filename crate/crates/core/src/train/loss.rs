//! Training objectives and the output supports they score over.

use std::sync::Arc;

use crate::corpus::Vocab;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result, TokenId};

/// Columns a fill-in model may predict: corpus tokens only.
pub fn fill_support(vocab_size: usize) -> Arc<[bool]> {
    (0..vocab_size).map(|i| !Vocab::is_special(i as TokenId)).collect()
}

/// Columns a causal model may predict: everything but MASK, PAD and UNK.
/// EOS stays in so the model can end a sequence.
pub fn causal_support(vocab_size: usize) -> Arc<[bool]> {
    (0..vocab_size)
        .map(|i| {
            let id = i as TokenId;
            id == Vocab::EOS || !Vocab::is_special(id)
        })
        .collect()
}

/// Mean negative log-likelihood of `originals` at `mask_positions` of a
/// `[n, V]` (or `[1, n, V]`) logit tensor. Other positions are ignored.
pub fn masked_ce_loss<F: Scalar>(
    logits: &Tensor<F>,
    originals: &[TokenId],
    mask_positions: &[usize],
) -> Result<f64> {
    if mask_positions.is_empty() {
        return Err(Error::NoMasks);
    }
    if originals.len() != mask_positions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} originals for {} mask positions",
            originals.len(),
            mask_positions.len()
        )));
    }
    let support = fill_support(logits.last_dim());
    let targets: Vec<(usize, TokenId)> = mask_positions.iter().copied().zip(originals.iter().copied()).collect();
    let mut g = Graph::new();
    let l = g.param(0, logits);
    let sum = g.cross_entropy(l, &targets, Some(&support))?;
    Ok(g.value(sum).item().expect("scalar").as_f64() / targets.len() as f64)
}

/// Input and targets for next-token training on `ids`: the input is
/// `[EOS] ++ ids` (EOS doubling as the begin marker) and row `t` predicts
/// `(ids ++ [EOS])[t]`, giving `n + 1` scored positions.
pub fn causal_pairs(ids: &[TokenId]) -> (Vec<TokenId>, Vec<(usize, TokenId)>) {
    let mut input = Vec::with_capacity(ids.len() + 1);
    input.push(Vocab::EOS);
    input.extend_from_slice(ids);
    let targets = ids
        .iter()
        .copied()
        .chain(std::iter::once(Vocab::EOS))
        .enumerate()
        .collect();
    (input, targets)
}

/// Mean next-token NLL from logits over `[EOS] ++ x` (shape `[n+1, V]`),
/// where `ids_with_eos` is `x ++ [EOS]`.
pub fn clm_loss<F: Scalar>(logits: &Tensor<F>, ids_with_eos: &[TokenId]) -> Result<f64> {
    let Some((&last, body)) = ids_with_eos.split_last() else {
        return Err(Error::EmptySequence);
    };
    if last != Vocab::EOS {
        return Err(Error::InvalidArgument("clm_loss expects a trailing EOS".into()));
    }
    let (_, targets) = causal_pairs(body);
    let rows = logits.len() / logits.last_dim();
    if rows != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "clm_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let support = causal_support(logits.last_dim());
    let mut g = Graph::new();
    let l = g.param(0, logits);
    let sum = g.cross_entropy(l, &targets, Some(&support))?;
    Ok(g.value(sum).item().expect("scalar").as_f64() / targets.len() as f64)
}

/// One training example: input ids plus the (position, token) pairs scored.
#[derive(Debug, Clone)]
pub(crate) struct Example {
    pub input: Vec<TokenId>,
    pub targets: Vec<(usize, TokenId)>,
}

/// Summed NLL over a batch of examples. Examples are grouped by input
/// length so each group runs as one batched forward pass.
pub(crate) fn batch_nll<'a, F: Scalar>(
    g: &mut Graph<'a, F>,
    model: &'a crate::model::Transformer<F>,
    bound: &crate::model::Bound,
    examples: &[Example],
    support: &Arc<[bool]>,
    mut dropout_rng: Option<&mut dyn rand::RngCore>,
) -> Result<Option<Var>> {
    let mut lengths: Vec<usize> = examples.iter().map(|e| e.input.len()).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut total: Option<Var> = None;
    for n in lengths {
        let group: Vec<&Example> = examples.iter().filter(|e| e.input.len() == n).collect();
        let rows: Vec<&[TokenId]> = group.iter().map(|e| e.input.as_slice()).collect();
        let rng: Option<&mut dyn rand::RngCore> = match dropout_rng {
            Some(ref mut r) => Some(&mut **r),
            None => None,
        };
        let logits = model.forward_graph(g, bound, &rows, rng)?;
        let targets: Vec<(usize, TokenId)> = group
            .iter()
            .enumerate()
            .flat_map(|(b, e)| e.targets.iter().map(move |&(p, t)| (b * n + p, t)))
            .collect();
        if targets.is_empty() {
            continue;
        }
        let nll = g.cross_entropy(logits, &targets, Some(support))?;
        total = Some(match total {
            Some(t) => g.add(t, nll)?,
            None => nll,
        });
    }
    Ok(total)
}
