//! Edit-distance alignment and error-rate metrics.
//!
//! The token inventory is already English words and Mandarin characters, so
//! token-level Levenshtein distance realizes the mixed error rate directly.
//! All rates are pooled over the corpus (total errors over total reference
//! tokens), never averaged per utterance.

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::masking::{detect_cs_pairs, MaskPlan};
use crate::tensor::Tensor;
use crate::vocab::LanguageMap;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum EditOp {
    /// ref[r] == hyp[h]
    Match { r: usize, h: usize },
    /// ref[r] replaced by hyp[h]
    Substitute { r: usize, h: usize },
    /// ref[r] dropped
    Delete { r: usize },
    /// hyp[h] inserted
    Insert { h: usize },
}

/// Ordered edit operations turning the reference into the hypothesis.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
}

impl Alignment {
    /// Counted substitutions + deletions + insertions.
    pub fn cost(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| !matches!(op, EditOp::Match { .. }))
            .count()
    }

    /// Apply the operations to `reference`; yields the hypothesis.
    pub fn replay(&self, reference: &[usize], hypothesis: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        for op in &self.ops {
            match *op {
                EditOp::Match { r, .. } => out.push(reference[r]),
                EditOp::Substitute { h, .. } | EditOp::Insert { h } => out.push(hypothesis[h]),
                EditOp::Delete { .. } => {}
            }
        }
        out
    }
}

/// Levenshtein distance with unit costs and a deterministic backtrace
/// (preference order match > substitute > delete > insert).
pub fn edit_distance(reference: &LabelSeq, hypothesis: &LabelSeq) -> (usize, Alignment) {
    let r = reference.ids();
    let h = hypothesis.ids();
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = d[i - 1][j] + 1;
            let ins = d[i][j - 1] + 1;
            d[i][j] = sub.min(del).min(ins);
        }
    }

    let mut ops = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && r[i - 1] == h[j - 1] && d[i][j] == d[i - 1][j - 1] {
            ops.push(EditOp::Match { r: i - 1, h: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            ops.push(EditOp::Substitute { r: i - 1, h: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(EditOp::Delete { r: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Insert { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    (d[n][m], Alignment { ops })
}

/// Pooled mixed error rate in percent: total edit distance over total
/// reference length.
pub fn mer(refs: &[LabelSeq], hyps: &[LabelSeq]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::InvalidArg(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::InvalidArg("empty reference corpus".into()));
    }
    let total_ref: usize = refs.iter().map(LabelSeq::len).sum();
    if total_ref == 0 {
        return Err(Error::InvalidArg("reference corpus has zero tokens".into()));
    }
    let total_err: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r, h).0)
        .sum();
    Ok(total_err as f64 / total_ref as f64 * 100.0)
}

/// Error counts restricted to code-switch points. A reference token is
/// flagged when it belongs to any code-switching pair; substitutions and
/// deletions count when their reference side is flagged, insertions when the
/// preceding consumed reference token is flagged.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CsPointCounts {
    pub flagged_tokens: usize,
    pub flagged_errors: usize,
}

pub fn cs_point_counts(
    refs: &[LabelSeq],
    hyps: &[LabelSeq],
    map: &LanguageMap,
) -> Result<CsPointCounts> {
    if refs.len() != hyps.len() {
        return Err(Error::InvalidArg(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut counts = CsPointCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        let mut flagged = vec![false; r.len()];
        for pair in detect_cs_pairs(r, map)? {
            flagged[pair.first] = true;
            flagged[pair.second] = true;
        }
        counts.flagged_tokens += flagged.iter().filter(|f| **f).count();
        let (_, alignment) = edit_distance(r, h);
        let mut last_ref: Option<usize> = None;
        for op in &alignment.ops {
            match *op {
                EditOp::Match { r, .. } => last_ref = Some(r),
                EditOp::Substitute { r, .. } => {
                    if flagged[r] {
                        counts.flagged_errors += 1;
                    }
                    last_ref = Some(r);
                }
                EditOp::Delete { r } => {
                    if flagged[r] {
                        counts.flagged_errors += 1;
                    }
                    last_ref = Some(r);
                }
                EditOp::Insert { .. } => {
                    if let Some(prev) = last_ref {
                        if flagged[prev] {
                            counts.flagged_errors += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(counts)
}

/// Mixed error rate over code-switch-point tokens, in percent.
pub fn cs_point_mer(refs: &[LabelSeq], hyps: &[LabelSeq], map: &LanguageMap) -> Result<f64> {
    let counts = cs_point_counts(refs, hyps, map)?;
    if counts.flagged_tokens == 0 {
        return Err(Error::InvalidArg(
            "corpus has no code-switch points to score".into(),
        ));
    }
    Ok(counts.flagged_errors as f64 / counts.flagged_tokens as f64 * 100.0)
}

/// Fraction of masked positions whose argmax prediction (ties toward the
/// lowest token id) equals the target.
pub fn mask_accuracy(dists: &Tensor, targets: &[usize], plan: &MaskPlan) -> Result<f64> {
    if plan.is_empty() {
        return Err(Error::InvalidArg("mask_accuracy needs a non-empty plan".into()));
    }
    if plan.seq_len() != targets.len() || dists.dims2().0 != targets.len() {
        return Err(Error::InvalidArg(format!(
            "plan length {}, targets {}, rows {}",
            plan.seq_len(),
            targets.len(),
            dists.dims2().0
        )));
    }
    let mut correct = 0;
    for &pos in plan.positions() {
        let predicted = dists.argmax_row(pos) + 1; // column j holds token id j+1
        if predicted == targets[pos] {
            correct += 1;
        }
    }
    Ok(correct as f64 / plan.len() as f64)
}
