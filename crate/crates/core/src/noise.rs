//! Mask-probability schedules and per-token masking.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, Vocab};
use crate::{Error, Result, TokenId};

/// Sum of the Beta shape parameters used when a schedule is given by its mode.
pub const BETA_CONCENTRATION: f64 = 5.0;

/// Distribution of the per-sequence mask probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoiseSchedule {
    Fixed(f64),
    Uniform,
    Beta { alpha: f64, beta: f64 },
}

/// Beta shape parameters with the given mode and `alpha + beta = 5`.
pub fn mode_to_params(mode: f64) -> Result<(f64, f64)> {
    if !(mode > 0.0 && mode < 1.0) {
        return Err(Error::InvalidArgument(format!("Beta mode must lie in (0,1), got {mode}")));
    }
    let alpha = 1.0 + (BETA_CONCENTRATION - 2.0) * mode;
    Ok((alpha, BETA_CONCENTRATION - alpha))
}

impl NoiseSchedule {
    pub fn beta_with_mode(mode: f64) -> Result<Self> {
        let (alpha, beta) = mode_to_params(mode)?;
        Ok(Self::Beta { alpha, beta })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Fixed(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::InvalidConfig(format!("fixed mask probability {p} outside [0,1]")))
            }
            Self::Beta { alpha, beta } if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() => {
                Err(Error::InvalidConfig(format!("Beta({alpha}, {beta}) needs positive finite shapes")))
            }
            _ => Ok(()),
        }
    }

    /// Draw one mask probability.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Fixed(p) => p,
            Self::Uniform => rng.random::<f64>(),
            Self::Beta { alpha, beta } => {
                // X/(X+Y) with X ~ Gamma(α), Y ~ Gamma(β)
                let x = Gamma::new(alpha, 1.0).expect("validated shape").sample(rng);
                let y = Gamma::new(beta, 1.0).expect("validated shape").sample(rng);
                if x + y == 0.0 {
                    // both draws underflowed; only reachable for tiny shapes
                    return if rng.random_bool(alpha / (alpha + beta)) { 1.0 } else { 0.0 };
                }
                x / (x + y)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Self::Fixed(p) => p,
            Self::Uniform => 0.5,
            Self::Beta { alpha, beta } => alpha / (alpha + beta),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Self::Fixed(_) => 0.0,
            Self::Uniform => 1.0 / 12.0,
            Self::Beta { alpha, beta } => {
                let s = alpha + beta;
                alpha * beta / (s * s * (s + 1.0))
            }
        }
    }
}

pub fn sample_mask_prob<R: Rng + ?Sized>(schedule: &NoiseSchedule, rng: &mut R) -> f64 {
    schedule.sample(rng)
}

impl fmt::Display for NoiseSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Fixed(p) => write!(f, "fixed:{p}"),
            Self::Uniform => write!(f, "uniform"),
            Self::Beta { alpha, beta } => write!(f, "beta:{alpha},{beta}"),
        }
    }
}

/// Accepts `fixed:P`, `uniform`, `beta-mode:M`, and `beta:A,B`.
impl FromStr for NoiseSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number `{v}` in schedule `{s}`")))
        };
        let schedule = match s.split_once(':') {
            None if s == "uniform" => Self::Uniform,
            Some(("fixed", p)) => Self::Fixed(num(p)?),
            Some(("beta-mode", m)) => Self::beta_with_mode(num(m)?)?,
            Some(("beta", ab)) => {
                let (a, b) = ab
                    .split_once(',')
                    .ok_or_else(|| Error::InvalidArgument(format!("expected beta:A,B, got `{s}`")))?;
                Self::Beta {
                    alpha: num(a)?,
                    beta: num(b)?,
                }
            }
            _ => return Err(Error::InvalidArgument(format!("unknown noise schedule `{s}`"))),
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

impl TryFrom<String> for NoiseSchedule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NoiseSchedule> for String {
    fn from(s: NoiseSchedule) -> Self {
        s.to_string()
    }
}

/// A token sequence with some positions replaced by the mask token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    ids: Vec<TokenId>,
    positions: Vec<usize>,
    originals: Vec<TokenId>,
    forced: bool,
}

impl MaskedSequence {
    /// Mask an explicit set of positions.
    pub fn from_positions(x: &TokenSequence, positions: &[usize]) -> Result<Self> {
        let mut positions = positions.to_vec();
        positions.sort_unstable();
        positions.dedup();
        if let Some(&p) = positions.last() {
            if p >= x.len() {
                return Err(Error::InvalidArgument(format!(
                    "mask position {p} outside sequence of length {}",
                    x.len()
                )));
            }
        }
        if x.ids().contains(&Vocab::MASK) {
            return Err(Error::InvalidArgument("sequence already contains mask tokens".into()));
        }
        let mut ids = x.ids().to_vec();
        let originals = positions
            .iter()
            .map(|&p| std::mem::replace(&mut ids[p], Vocab::MASK))
            .collect();
        Ok(Self {
            ids,
            positions,
            originals,
            forced: false,
        })
    }

    /// Wrap ids that already contain mask tokens; the originals are unknown
    /// and recorded as the mask id.
    pub fn from_masked_ids(ids: Vec<TokenId>) -> Result<Self> {
        let seq = TokenSequence::new(ids)?;
        let positions: Vec<usize> = seq
            .ids()
            .iter()
            .enumerate()
            .filter_map(|(i, &id)| (id == Vocab::MASK).then_some(i))
            .collect();
        let originals = vec![Vocab::MASK; positions.len()];
        Ok(Self {
            ids: seq.into_ids(),
            positions,
            originals,
            forced: false,
        })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask_positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn originals(&self) -> &[TokenId] {
        &self.originals
    }

    pub fn mask_count(&self) -> usize {
        self.positions.len()
    }

    /// Whether the only mask was placed by the at-least-one rule.
    pub fn forced(&self) -> bool {
        self.forced
    }

    /// Write the originals back.
    pub fn restore(&self) -> Result<TokenSequence> {
        let mut ids = self.ids.clone();
        for (&p, &t) in self.positions.iter().zip(&self.originals) {
            ids[p] = t;
        }
        TokenSequence::new(ids)
    }
}

/// Mask each position independently with probability `p`; when nothing was
/// masked, mask one uniformly chosen position.
pub fn mask_sequence<R: Rng + ?Sized>(x: &TokenSequence, p: f64, rng: &mut R) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("mask probability {p} outside [0,1]")));
    }
    let mut positions: Vec<usize> = (0..x.len()).filter(|_| rng.random::<f64>() < p).collect();
    let forced = positions.is_empty();
    if forced {
        positions.push(rng.random_range(0..x.len()));
    }
    let mut m = MaskedSequence::from_positions(x, &positions)?;
    m.forced = forced;
    Ok(m)
}
