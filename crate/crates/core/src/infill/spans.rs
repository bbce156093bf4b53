use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::noise::MaskedSequence;
use crate::{Error, Result, TokenId};

/// Masked intervals `[start, end)` over 1-indexed token positions, sorted,
/// disjoint and non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpanSpec {
    spans: Vec<(usize, usize)>,
}

impl SpanSpec {
    pub fn new(spans: Vec<(usize, usize)>) -> Result<Self> {
        for &(a, b) in &spans {
            if a < 1 || a >= b {
                return Err(Error::InvalidArgument(format!("bad span [{a}, {b})")));
            }
        }
        if spans.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(Error::InvalidArgument(format!("spans overlap or are unsorted: {spans:?}")));
        }
        Ok(Self { spans })
    }

    /// Spans from sorted, distinct endpoints `a_1 < … < a_2m`.
    pub fn from_endpoints(endpoints: &[usize]) -> Result<Self> {
        if endpoints.len() % 2 != 0 {
            return Err(Error::InvalidArgument("odd number of span endpoints".into()));
        }
        Self::new(endpoints.chunks(2).map(|c| (c[0], c[1])).collect())
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Check every span covers only positions `1..=n`. The exclusive end may
    /// be `n + 1` so a span can reach the last token.
    pub fn check_fits(&self, n: usize) -> Result<()> {
        match self.spans.last() {
            Some(&(_, b)) if b > n + 1 => Err(Error::InvalidArgument(format!(
                "span endpoint {b} outside sequence of length {n}"
            ))),
            _ => Ok(()),
        }
    }

    /// 0-indexed masked positions.
    pub fn positions(&self) -> Vec<usize> {
        self.spans.iter().flat_map(|&(a, b)| a - 1..b - 1).collect()
    }

    /// Tokens covered by each span.
    pub fn extract(&self, ids: &[TokenId]) -> Vec<Vec<TokenId>> {
        self.spans.iter().map(|&(a, b)| ids[a - 1..b - 1].to_vec()).collect()
    }
}

/// Draw `m` uniformly from `1..=min(5, n/2)`, then `2m` distinct endpoints
/// from `1..=n`, sorted.
pub fn sample_spans<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<SpanSpec> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("span sampling needs n >= 2, got {n}")));
    }
    let m = rng.random_range(1..=(n / 2).min(super::MAX_SPANS));
    let mut endpoints: Vec<usize> = index::sample(rng, n, 2 * m).into_iter().map(|i| i + 1).collect();
    endpoints.sort_unstable();
    SpanSpec::from_endpoints(&endpoints)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Span,
    SentenceDrop,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "span" => Ok(Self::Span),
            "sentence-drop" | "sentence_drop" => Ok(Self::SentenceDrop),
            other => Err(Error::InvalidArgument(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfillTask {
    pub kind: TaskKind,
    pub original: TokenSequence,
    pub spans: SpanSpec,
    pub context_with_masks: MaskedSequence,
    pub reference_fills: Vec<Vec<TokenId>>,
}

impl InfillTask {
    pub fn new(kind: TaskKind, original: TokenSequence, spans: SpanSpec) -> Result<Self> {
        spans.check_fits(original.len())?;
        let context_with_masks = MaskedSequence::from_positions(&original, &spans.positions())?;
        let reference_fills = spans.extract(original.ids());
        Ok(Self {
            kind,
            original,
            spans,
            context_with_masks,
            reference_fills,
        })
    }
}

/// Split text after `.`, `!` or `?` followed by whitespace. Each sentence
/// keeps its trailing whitespace, so the pieces concatenate to the input.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let mut end = i + c.len_utf8();
            let mut saw_space = false;
            while let Some(&(j, w)) = chars.peek() {
                if !w.is_whitespace() {
                    break;
                }
                saw_space = true;
                end = j + w.len_utf8();
                chars.next();
            }
            if saw_space || end == text.len() {
                out.push(&text[start..end]);
                start = end;
            }
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Remove one uniformly chosen sentence; its tokens become the masked span.
pub fn drop_sentence<R: Rng + ?Sized>(story: &[Vec<TokenId>], rng: &mut R) -> Result<InfillTask> {
    if story.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "sentence drop needs at least 2 sentences, got {}",
            story.len()
        )));
    }
    if story.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("story contains an empty sentence".into()));
    }
    let k = rng.random_range(0..story.len());
    let start: usize = story[..k].iter().map(Vec::len).sum();
    let end = start + story[k].len();
    let ids: Vec<TokenId> = story.concat();
    let spans = SpanSpec::new(vec![(start + 1, end + 1)])?;
    InfillTask::new(TaskKind::SentenceDrop, TokenSequence::new(ids)?, spans)
}
