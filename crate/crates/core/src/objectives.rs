//! Training criteria: CMLM cross-entropy, the joint CTC+CMLM loss, the
//! enforced complementary variant, minimum-word-error loss over N-best
//! lists, and both N-best generators.
//!
//! Loss interpolations operate on negative log-likelihoods. The MWE baseline
//! subtracts the uniform mean of the N-best distances, so a list with equal
//! distances contributes exactly zero. Gradients flow through log-posteriors
//! only; edit distances and the discrete N-best structure are constants.

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::graph::{softmax_row, Graph, NodeId};
use crate::masking::{apply_mask, random_mask_plan, MaskPlan};
use crate::model::Model;
use crate::rng::SeededRng;
use crate::scoring::edit_distance;
use crate::tensor::Tensor;

/// Mean over masked positions of `-log p(target)`, from `[N, V]`
/// log-distributions (column j holds token id j+1).
pub fn cmlm_ce_loss(
    g: &mut Graph,
    dists: NodeId,
    targets: &LabelSeq,
    plan: &MaskPlan,
) -> Result<NodeId> {
    if plan.is_empty() {
        return Err(Error::InvalidArg("cmlm_ce_loss needs a non-empty plan".into()));
    }
    let (rows, vocab) = g.value(dists).dims2();
    if plan.seq_len() != targets.len() || rows != targets.len() {
        return Err(Error::InvalidArg(format!(
            "plan length {}, targets {}, distribution rows {rows}",
            plan.seq_len(),
            targets.len()
        )));
    }
    targets.validate(vocab)?;
    let coords: Vec<(usize, usize)> = plan
        .positions()
        .iter()
        .map(|&pos| (pos, targets.ids()[pos] - 1))
        .collect();
    let picked = g.pick(dists, &coords)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / plan.len() as f64)
}

/// Cross-entropy over every position of a causal decoder output `[L, V+1]`;
/// the EOS target maps to the last column.
pub fn causal_ce_loss(
    g: &mut Graph,
    dists: NodeId,
    targets: &[usize],
    vocab: usize,
    eos_id: usize,
) -> Result<NodeId> {
    let (rows, width) = g.value(dists).dims2();
    if rows != targets.len() || width != vocab + 1 {
        return Err(Error::InvalidArg(format!(
            "causal CE over [{rows}, {width}] with {} targets, vocab {vocab}",
            targets.len()
        )));
    }
    let mut coords = Vec::with_capacity(targets.len());
    for (row, &id) in targets.iter().enumerate() {
        let col = if id == eos_id {
            vocab
        } else if (1..=vocab).contains(&id) {
            id - 1
        } else {
            return Err(Error::UnknownToken {
                id,
                valid: format!("1..={vocab} or EOS {eos_id}"),
            });
        };
        coords.push((row, col));
    }
    let picked = g.pick(dists, &coords)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / targets.len() as f64)
}

/// `alpha * ctc + (1 - alpha) * cmlm`, both negative log-likelihoods.
pub fn joint_nat_loss(g: &mut Graph, ctc: NodeId, cmlm: NodeId, alpha: f64) -> Result<NodeId> {
    let a = g.scale(ctc, alpha)?;
    let b = g.scale(cmlm, 1.0 - alpha)?;
    g.add(a, b)
}

pub fn joint_nat_loss_value(ctc: f64, cmlm: f64, alpha: f64) -> f64 {
    alpha * ctc + (1.0 - alpha) * cmlm
}

/// `alpha * ctc + (1 - alpha) * (cmlm_on_plan + cmlm_on_complement)`. The
/// complement term comes from a second decoder pass with the roles of masked
/// and observed tokens swapped; an empty complement contributes zero.
pub fn enforced_nat_loss(
    g: &mut Graph,
    ctc: NodeId,
    cmlm_on_plan: NodeId,
    cmlm_on_complement: Option<NodeId>,
    alpha: f64,
) -> Result<NodeId> {
    let both = match cmlm_on_complement {
        Some(comp) => g.add(cmlm_on_plan, comp)?,
        None => cmlm_on_plan,
    };
    joint_nat_loss(g, ctc, both, alpha)
}

pub fn enforced_nat_loss_value(
    ctc: f64,
    cmlm_on_plan: f64,
    cmlm_on_complement: f64,
    alpha: f64,
) -> f64 {
    alpha * ctc + (1.0 - alpha) * (cmlm_on_plan + cmlm_on_complement)
}

/// Log-posterior of a hypothesis: the sum over masked positions of the
/// hypothesis token's log-probability. The caller guarantees `hyp` matches
/// the decoder's conditioning sequence outside the plan. An empty plan is a
/// vacuous product (log 1 = 0).
pub fn hypothesis_posterior(
    g: &mut Graph,
    dists: NodeId,
    hyp: &[usize],
    plan: &MaskPlan,
) -> Result<NodeId> {
    let (rows, vocab) = g.value(dists).dims2();
    if plan.seq_len() != hyp.len() || rows != hyp.len() {
        return Err(Error::InvalidArg(format!(
            "plan length {}, hypothesis {}, distribution rows {rows}",
            plan.seq_len(),
            hyp.len()
        )));
    }
    if plan.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let coords = posterior_coords(hyp, plan, vocab)?;
    let picked = g.pick(dists, &coords)?;
    g.sum(picked)
}

/// Value-level twin of [`hypothesis_posterior`].
pub fn hypothesis_posterior_value(dists: &Tensor, hyp: &[usize], plan: &MaskPlan) -> Result<f64> {
    let (rows, vocab) = dists.dims2();
    if plan.seq_len() != hyp.len() || rows != hyp.len() {
        return Err(Error::InvalidArg(format!(
            "plan length {}, hypothesis {}, distribution rows {rows}",
            plan.seq_len(),
            hyp.len()
        )));
    }
    let coords = posterior_coords(hyp, plan, vocab)?;
    Ok(coords.iter().map(|&(r, c)| dists.at(r, c)).sum())
}

fn posterior_coords(
    hyp: &[usize],
    plan: &MaskPlan,
    vocab: usize,
) -> Result<Vec<(usize, usize)>> {
    plan.positions()
        .iter()
        .map(|&pos| {
            let id = hyp[pos];
            if id == 0 || id > vocab {
                return Err(Error::UnknownToken {
                    id,
                    valid: format!("1..={vocab}"),
                });
            }
            Ok((pos, id - 1))
        })
        .collect()
}

fn centered_distances(distances: &[usize]) -> Vec<f64> {
    let mean = distances.iter().sum::<usize>() as f64 / distances.len() as f64;
    distances.iter().map(|&d| d as f64 - mean).collect()
}

/// Expected-distance loss over an N-best list:
/// `sum_i softmax(log_posteriors)_i * (D_i - mean(D))`.
pub fn mwe_loss(g: &mut Graph, log_posteriors: &[NodeId], distances: &[usize]) -> Result<NodeId> {
    if log_posteriors.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "MWE needs at least 2 hypotheses, got {}",
            log_posteriors.len()
        )));
    }
    if log_posteriors.len() != distances.len() {
        return Err(Error::InvalidArg(format!(
            "{} posteriors vs {} distances",
            log_posteriors.len(),
            distances.len()
        )));
    }
    let stacked = g.stack(log_posteriors)?;
    let weights = g.softmax(stacked)?;
    let centered = g.constant(Tensor::new(
        vec![distances.len()],
        centered_distances(distances),
    )?)?;
    let weighted = g.mul(weights, centered)?;
    g.sum(weighted)
}

/// Value-level twin of [`mwe_loss`]; independent arithmetic used for
/// log-and-replay checks of the training path.
pub fn mwe_loss_value(log_posteriors: &[f64], distances: &[usize]) -> Result<f64> {
    if log_posteriors.len() < 2 || log_posteriors.len() != distances.len() {
        return Err(Error::InvalidArg(format!(
            "MWE over {} posteriors / {} distances",
            log_posteriors.len(),
            distances.len()
        )));
    }
    let weights = softmax_row(log_posteriors);
    let centered = centered_distances(distances);
    Ok(weights.iter().zip(&centered).map(|(w, d)| w * d).sum())
}

/// `gamma * nat + (1 - gamma) * mwe`.
pub fn combined_mwe_loss(g: &mut Graph, nat: NodeId, mwe: NodeId, gamma: f64) -> Result<NodeId> {
    let a = g.scale(nat, gamma)?;
    let b = g.scale(mwe, 1.0 - gamma)?;
    g.add(a, b)
}

pub fn combined_mwe_loss_value(nat: f64, mwe: f64, gamma: f64) -> f64 {
    gamma * nat + (1.0 - gamma) * mwe
}

/// How an N-best list was generated: a beam over the masked positions of one
/// shared plan (output side), or independent random re-maskings of the CTC
/// greedy sequence (input side).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NbestProvenance {
    Output { plan: MaskPlan },
    Input { plans: Vec<MaskPlan> },
}

/// N hypotheses with per-hypothesis log-posteriors and edit distances to the
/// ground truth. Duplicates are retained and scored separately.
#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    pub hypotheses: Vec<LabelSeq>,
    pub log_posteriors: Vec<f64>,
    pub distances: Vec<usize>,
    pub provenance: NbestProvenance,
    /// True when the request exceeded the space of assignments and the list
    /// holds all of them (shorter than asked).
    pub exhausted: bool,
}

impl NBestList {
    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

/// Overlay `fill` (one token per plan position, ascending) onto `base`.
pub fn splice_fill(base: &[usize], plan: &MaskPlan, fill: &[usize]) -> Vec<usize> {
    debug_assert_eq!(plan.len(), fill.len());
    let mut out = base.to_vec();
    for (&pos, &token) in plan.positions().iter().zip(fill) {
        out[pos] = token;
    }
    out
}

/// Overlay the per-position argmax token onto `base` at the plan positions.
pub fn argmax_fill(dists: &Tensor, base: &[usize], plan: &MaskPlan) -> Vec<usize> {
    let fill: Vec<usize> = plan
        .positions()
        .iter()
        .map(|&pos| dists.argmax_row(pos) + 1)
        .collect();
    splice_fill(base, plan, &fill)
}

/// Width-n beam over the masked positions in ascending index order. Because
/// per-position scores are additive and independent of the prefix, the beam
/// is exact: it returns the n fill-ins with the highest joint log-posterior
/// (ties broken toward the lexicographically smaller fill). Requests larger
/// than the assignment space return the whole space, flagged `exhausted`.
pub fn gen_output_nbest(
    dists: &Tensor,
    plan: &MaskPlan,
    targets: &LabelSeq,
    n: usize,
) -> Result<NBestList> {
    if plan.is_empty() {
        return Err(Error::InvalidArg("output N-best needs a non-empty plan".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArg("output N-best needs n >= 1".into()));
    }
    let (rows, vocab) = dists.dims2();
    if rows != targets.len() || plan.seq_len() != targets.len() {
        return Err(Error::InvalidArg(format!(
            "plan length {}, targets {}, distribution rows {rows}",
            plan.seq_len(),
            targets.len()
        )));
    }
    let space: Option<usize> = vocab.checked_pow(plan.len().min(u32::MAX as usize) as u32);
    let exhausted = space.is_some_and(|s| s <= n);

    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for &pos in plan.positions() {
        let mut next = Vec::with_capacity(beams.len() * vocab);
        for (fill, score) in &beams {
            for token in 1..=vocab {
                let mut extended = fill.clone();
                extended.push(token);
                next.push((extended, score + dists.at(pos, token - 1)));
            }
        }
        next.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("scores are finite")
                .then_with(|| a.0.cmp(&b.0))
        });
        next.truncate(n);
        beams = next;
    }

    let mut hypotheses = Vec::with_capacity(beams.len());
    let mut log_posteriors = Vec::with_capacity(beams.len());
    let mut distances = Vec::with_capacity(beams.len());
    for (fill, score) in beams {
        let hyp = LabelSeq::new(splice_fill(targets.ids(), plan, &fill))?;
        distances.push(edit_distance(targets, &hyp).0);
        hypotheses.push(hyp);
        log_posteriors.push(score);
    }
    if exhausted {
        log::debug!(
            "output N-best asked for {n} of {} assignments; returning all",
            space.unwrap_or(usize::MAX)
        );
    }
    Ok(NBestList {
        hypotheses,
        log_posteriors,
        distances,
        provenance: NbestProvenance::Output { plan: plan.clone() },
        exhausted,
    })
}

/// Input-side N-best: draw n independent random mask plans over the CTC
/// greedy sequence, fill each plan's positions with the argmax of one CMLM
/// pass, and score each hypothesis over its own plan. Colliding hypotheses
/// are both kept.
pub fn gen_input_nbest(
    model: &Model,
    hidden: &Tensor,
    ctc_greedy: &LabelSeq,
    truth: &LabelSeq,
    n: usize,
    rng: &mut SeededRng,
) -> Result<NBestList> {
    if ctc_greedy.is_empty() {
        return Err(Error::EmptyGreedy);
    }
    if n < 2 {
        return Err(Error::InvalidArg("input N-best needs n >= 2".into()));
    }
    let mut hypotheses = Vec::with_capacity(n);
    let mut log_posteriors = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    let mut plans = Vec::with_capacity(n);
    for _ in 0..n {
        let plan = random_mask_plan(ctc_greedy.len(), rng)?;
        let masked = apply_mask(ctc_greedy, &plan, model.config.mask_id)?;
        let dists = model.cmlm_decode(&masked, hidden)?;
        let filled = argmax_fill(&dists, ctc_greedy.ids(), &plan);
        let log_posterior = hypothesis_posterior_value(&dists, &filled, &plan)?;
        let hyp = LabelSeq::new(filled)?;
        distances.push(edit_distance(truth, &hyp).0);
        hypotheses.push(hyp);
        log_posteriors.push(log_posterior);
        plans.push(plan);
    }
    Ok(NBestList {
        hypotheses,
        log_posteriors,
        distances,
        provenance: NbestProvenance::Input { plans },
        exhausted: false,
    })
}
