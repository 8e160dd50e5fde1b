//! Training-time mask planning: random masking plus the four code-switching
//! strategies (first/second member of a switch pair, Mandarin or English
//! members), and code-switch pair detection.
//!
//! The complementary (C-Mask) regime is not a planning strategy: training
//! draws a random plan and adds a second decoder pass on its complement, see
//! `objectives::enforced_nat_loss`.

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::vocab::{Lang, LanguageMap};

/// `Pair1` is (CN, EN); `Pair2` is (EN, CN).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PairKind {
    CnEn,
    EnCn,
}

/// Adjacent positions whose tokens carry different non-special languages.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct CsPair {
    pub first: usize,
    pub second: usize,
    pub kind: PairKind,
}

/// A partition of a length-N sequence: the (sorted, unique) masked positions
/// and, implicitly, their observed complement. Plans produced by
/// [`plan_mask`] are never empty; an empty plan only arises as the complement
/// of an all-position plan inside the enforced-loss path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    seq_len: usize,
    positions: Vec<usize>,
}

impl MaskPlan {
    pub fn new(seq_len: usize, mut positions: Vec<usize>) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if let Some(&last) = positions.last() {
            if last >= seq_len {
                return Err(Error::InvalidArg(format!(
                    "mask position {last} out of range for length {seq_len}"
                )));
            }
        }
        Ok(Self { seq_len, positions })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.positions.binary_search(&pos).is_ok()
    }

    /// Positions of `[0, N)` not in this plan.
    pub fn complement(&self) -> MaskPlan {
        let positions = (0..self.seq_len).filter(|p| !self.contains(*p)).collect();
        MaskPlan {
            seq_len: self.seq_len,
            positions,
        }
    }
}

/// Mask planning strategies. The complementary regime lives in the training
/// loop, not here (see module docs).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    /// R-Mask: mask count uniform on [1, N], positions uniform without
    /// replacement.
    Random,
    /// F-Mask: first members of all code-switching pairs.
    First,
    /// S-Mask: second members of all code-switching pairs.
    Second,
    /// M-Mask: Mandarin members of code-switching pairs.
    Mandarin,
    /// E-Mask: English members of code-switching pairs.
    English,
}

/// Every adjacent index pair whose language tags differ and are both
/// non-special, classified by direction.
pub fn detect_cs_pairs(labels: &LabelSeq, map: &LanguageMap) -> Result<Vec<CsPair>> {
    let ids = labels.ids();
    let mut pairs = Vec::new();
    for i in 0..ids.len().saturating_sub(1) {
        let a = map.tag(ids[i])?;
        let b = map.tag(ids[i + 1])?;
        let kind = match (a, b) {
            (Lang::Cn, Lang::En) => PairKind::CnEn,
            (Lang::En, Lang::Cn) => PairKind::EnCn,
            _ => continue,
        };
        pairs.push(CsPair {
            first: i,
            second: i + 1,
            kind,
        });
    }
    Ok(pairs)
}

/// R-Mask draw: mask count uniform on `[1, N]`, positions uniform without
/// replacement. Exposed directly for callers that re-mask arbitrary
/// sequences (input-side N-best generation).
pub fn random_mask_plan(len: usize, rng: &mut SeededRng) -> Result<MaskPlan> {
    if len == 0 {
        return Err(Error::InvalidArg("cannot plan masks for an empty sequence".into()));
    }
    let count = rng.uniform_usize(1, len);
    Ok(MaskPlan {
        seq_len: len,
        positions: rng.choose_k(len, count),
    })
}

/// Build the mask plan for one utterance. Code-switch strategies mask all
/// their targeted positions; a strategy that targets nothing (monolingual
/// utterance) falls back to a random plan so the CMLM term always has
/// targets.
pub fn plan_mask(
    strategy: MaskStrategy,
    labels: &LabelSeq,
    map: &LanguageMap,
    rng: &mut SeededRng,
) -> Result<MaskPlan> {
    let len = labels.len();
    if len == 0 {
        return Err(Error::InvalidArg("cannot plan masks for an empty sequence".into()));
    }
    if let MaskStrategy::Random = strategy {
        return random_mask_plan(len, rng);
    }
    let pairs = detect_cs_pairs(labels, map)?;
    let mut positions: Vec<usize> = match strategy {
        MaskStrategy::Random => unreachable!(),
        MaskStrategy::First => pairs.iter().map(|p| p.first).collect(),
        MaskStrategy::Second => pairs.iter().map(|p| p.second).collect(),
        MaskStrategy::Mandarin => pairs
            .iter()
            .map(|p| match p.kind {
                PairKind::CnEn => p.first,
                PairKind::EnCn => p.second,
            })
            .collect(),
        MaskStrategy::English => pairs
            .iter()
            .map(|p| match p.kind {
                PairKind::CnEn => p.second,
                PairKind::EnCn => p.first,
            })
            .collect(),
    };
    positions.sort_unstable();
    positions.dedup();
    if positions.is_empty() {
        log::debug!("{strategy:?} found no code-switch positions; falling back to random");
        return random_mask_plan(len, rng);
    }
    Ok(MaskPlan {
        seq_len: len,
        positions,
    })
}

/// Replace the tokens at the plan's positions with the mask symbol.
pub fn apply_mask(labels: &LabelSeq, plan: &MaskPlan, mask_id: usize) -> Result<Vec<usize>> {
    if plan.seq_len() != labels.len() {
        return Err(Error::InvalidArg(format!(
            "plan length {} does not match sequence length {}",
            plan.seq_len(),
            labels.len()
        )));
    }
    let mut out = labels.ids().to_vec();
    for &pos in plan.positions() {
        out[pos] = mask_id;
    }
    Ok(out)
}
