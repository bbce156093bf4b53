//! Causal-masking rearrangement: each span is replaced in place by a
//! `[MASK:i]` sentinel and its tokens move after the context behind a
//! `[FILL:i]` marker, so a left-to-right model sees the right context before
//! it writes the span.

use serde::{Deserialize, Serialize};

use super::SpanSpec;
use crate::corpus::{TokenSequence, Vocab};
use crate::{Error, Result, TokenId};

/// Number of reserved `[MASK:i]` / `[FILL:i]` pairs.
pub const MAX_SPANS: usize = 5;

/// Sentinel ids, placed directly after a base vocabulary of size `base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentinels {
    pub base: TokenId,
}

impl Sentinels {
    pub fn for_vocab(vocab: &Vocab) -> Self {
        Self {
            base: vocab.len() as TokenId,
        }
    }

    /// Size of the extended vocabulary.
    pub fn extended_size(&self) -> usize {
        self.base as usize + 2 * MAX_SPANS
    }

    pub fn mask(&self, i: usize) -> TokenId {
        debug_assert!(i < MAX_SPANS);
        self.base + i as TokenId
    }

    pub fn fill(&self, i: usize) -> TokenId {
        debug_assert!(i < MAX_SPANS);
        self.base + (MAX_SPANS + i) as TokenId
    }

    pub fn mask_index(&self, id: TokenId) -> Option<usize> {
        (id >= self.base && id < self.base + MAX_SPANS as TokenId).then(|| (id - self.base) as usize)
    }

    pub fn fill_index(&self, id: TokenId) -> Option<usize> {
        let lo = self.base + MAX_SPANS as TokenId;
        (id >= lo && id < lo + MAX_SPANS as TokenId).then(|| (id - lo) as usize)
    }

    pub fn render(&self, id: TokenId) -> Option<String> {
        self.mask_index(id)
            .map(|i| format!("[MASK:{i}]"))
            .or_else(|| self.fill_index(id).map(|i| format!("[FILL:{i}]")))
    }

    /// Render ids over the extended vocabulary.
    pub fn decode(&self, vocab: &Vocab, ids: &[TokenId]) -> Result<String> {
        let parts = ids
            .iter()
            .map(|&id| match self.render(id) {
                Some(s) => Ok(s),
                None => vocab.decode(&[id]),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(match vocab.mode() {
            crate::corpus::TokenizerMode::Char => parts.concat(),
            crate::corpus::TokenizerMode::Word => parts.join(" "),
        })
    }
}

/// A rearranged sequence split into its context and its per-span fills.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmLayout {
    /// Context with `[MASK:i]` in place of span `i`.
    pub context: Vec<TokenId>,
    pub fills: Vec<Vec<TokenId>>,
}

impl CmLayout {
    pub fn build(x: &TokenSequence, spans: &SpanSpec, sentinels: Sentinels) -> Result<Self> {
        if spans.len() > MAX_SPANS {
            return Err(Error::InvalidArgument(format!(
                "{} spans exceed the {MAX_SPANS} reserved sentinels",
                spans.len()
            )));
        }
        spans.check_fits(x.len())?;
        let ids = x.ids();
        let mut context = Vec::with_capacity(ids.len());
        let mut cursor = 0;
        for (i, &(a, b)) in spans.spans().iter().enumerate() {
            context.extend_from_slice(&ids[cursor..a - 1]);
            context.push(sentinels.mask(i));
            cursor = b - 1;
        }
        context.extend_from_slice(&ids[cursor..]);
        Ok(Self {
            context,
            fills: spans.extract(ids),
        })
    }

    pub fn flatten(&self, sentinels: Sentinels) -> Vec<TokenId> {
        let mut out = self.context.clone();
        for (i, f) in self.fills.iter().enumerate() {
            out.push(sentinels.fill(i));
            out.extend_from_slice(f);
        }
        out
    }
}

pub fn cm_transform(x: &TokenSequence, spans: &SpanSpec, sentinels: Sentinels) -> Result<TokenSequence> {
    TokenSequence::new(CmLayout::build(x, spans, sentinels)?.flatten(sentinels))
}

/// Parse a rearranged sequence back into its context and fill segments.
/// A leading EOS (begin marker) is skipped and a later EOS ends parsing.
pub(crate) fn parse_layout(generated: &[TokenId], sentinels: Sentinels) -> Result<CmLayout> {
    let body = generated.strip_prefix(&[Vocab::EOS]).unwrap_or(generated);
    let body = match body.iter().position(|&id| id == Vocab::EOS) {
        Some(end) => &body[..end],
        None => body,
    };
    let split = body
        .iter()
        .position(|&id| sentinels.fill_index(id).is_some())
        .unwrap_or(body.len());
    let context = body[..split].to_vec();

    let mut expected = 0;
    let mut span_count = 0;
    for &id in &context {
        if let Some(i) = sentinels.mask_index(id) {
            if i != expected {
                return Err(Error::InvalidArgument(format!(
                    "context has [MASK:{i}] where [MASK:{expected}] was expected"
                )));
            }
            expected += 1;
            span_count += 1;
        }
    }

    let mut fills = vec![Vec::new(); span_count];
    let mut current: Option<usize> = None;
    for &id in &body[split..] {
        if let Some(i) = sentinels.fill_index(id) {
            if current.is_some_and(|c| i <= c) {
                return Err(Error::InvalidArgument(format!("[FILL:{i}] out of order")));
            }
            if i >= span_count {
                return Err(Error::InvalidArgument(format!("[FILL:{i}] has no matching [MASK:{i}]")));
            }
            current = Some(i);
        } else if sentinels.mask_index(id).is_some() {
            return Err(Error::InvalidArgument("mask sentinel inside a fill segment".into()));
        } else {
            fills[current.expect("segment started by a FILL marker")].push(id);
        }
    }
    Ok(CmLayout { context, fills })
}

/// Put each `[FILL:i]` segment back in place of `[MASK:i]`. Spans whose
/// segment never appears are filled with nothing.
pub fn cm_reintegrate(generated: &[TokenId], sentinels: Sentinels) -> Result<TokenSequence> {
    let layout = parse_layout(generated, sentinels)?;
    let mut out = Vec::with_capacity(generated.len());
    for &id in &layout.context {
        match sentinels.mask_index(id) {
            Some(i) => out.extend_from_slice(&layout.fills[i]),
            None => out.push(id),
        }
    }
    TokenSequence::new(out)
}
