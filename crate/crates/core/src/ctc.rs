//! Connectionist Temporal Classification: the collapse function, the
//! forward (alpha) recursion for the training loss, greedy decoding with
//! per-token confidences, and a brute-force enumeration oracle.
//!
//! The blank symbol is id 0 everywhere in this repo. All DP runs in log
//! space with `-inf` as the impossible-state sentinel; no probability-domain
//! arithmetic is used outside the tiny brute-force oracle.

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, NodeId};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// A label sequence: token ids in `[1, V]`, no blanks, no mask symbol.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.contains(&BLANK) {
            return Err(Error::InvalidArg(
                "label sequence must not contain the blank id 0".into(),
            ));
        }
        Ok(Self(ids))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Check every id against a vocabulary size.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        for &id in &self.0 {
            if id == 0 || id > vocab {
                return Err(Error::UnknownToken {
                    id,
                    valid: format!("1..={vocab}"),
                });
            }
        }
        Ok(())
    }
}

impl AsRef<[usize]> for LabelSeq {
    fn as_ref(&self) -> &[usize] {
        &self.0
    }
}

impl From<LabelSeq> for Vec<usize> {
    fn from(seq: LabelSeq) -> Self {
        seq.0
    }
}

/// Per-frame log-distribution over vocabulary-plus-blank (blank at column 0).
/// Rows must exponentiate-and-sum to 1 within 1e-10.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid {
    log_probs: Tensor,
}

impl PosteriorGrid {
    pub fn new(log_probs: Tensor) -> Result<Self> {
        if log_probs.rank() != 2 || log_probs.dims2().1 < 2 || log_probs.dims2().0 == 0 {
            return Err(Error::InvalidArg(format!(
                "posterior grid must be [T >= 1, V+1 >= 2], got {:?}",
                log_probs.shape()
            )));
        }
        let (t, _) = log_probs.dims2();
        for r in 0..t {
            let total: f64 = log_probs.row(r).iter().map(|v| v.exp()).sum();
            if (total - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidArg(format!(
                    "grid row {r} sums to {total}, expected 1 within 1e-10"
                )));
            }
        }
        Ok(Self { log_probs })
    }

    pub fn frames(&self) -> usize {
        self.log_probs.dims2().0
    }

    /// Alphabet size including the blank (V+1).
    pub fn alphabet(&self) -> usize {
        self.log_probs.dims2().1
    }

    /// Vocabulary size excluding the blank.
    pub fn vocab(&self) -> usize {
        self.alphabet() - 1
    }

    pub fn log_prob(&self, frame: usize, symbol: usize) -> f64 {
        self.log_probs.at(frame, symbol)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.log_probs
    }
}

/// Merge adjacent duplicates, then remove blanks.
pub fn collapse(frame_tokens: &[usize]) -> LabelSeq {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &sym in frame_tokens {
        if prev != Some(sym) && sym != BLANK {
            out.push(sym);
        }
        prev = Some(sym);
    }
    LabelSeq(out)
}

/// Minimal number of frames an alignment of `labels` needs: one frame per
/// label plus one separating blank between equal neighbours.
fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_ctc_inputs(logp: &Tensor, labels: &[usize]) -> Result<()> {
    let (frames, alphabet) = logp.dims2();
    for &id in labels {
        if id == BLANK || id >= alphabet {
            return Err(Error::UnknownToken {
                id,
                valid: format!("1..={}", alphabet - 1),
            });
        }
    }
    let needed = min_frames(labels);
    if needed > frames {
        return Err(Error::CtcInfeasible {
            labels: labels.len(),
            needed,
            frames,
        });
    }
    Ok(())
}

/// Blank-interleaved extended sequence `[-, l1, -, l2, ..., lN, -]`.
fn extended(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Forward (alpha) table over the extended states; row t stores the log
/// probability of every prefix alignment ending in state s at frame t.
fn alpha_table(logp: &Tensor, ext: &[usize]) -> Vec<Vec<f64>> {
    let (frames, _) = logp.dims2();
    let states = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; states]; frames];
    alpha[0][0] = logp.at(0, ext[0]);
    if states > 1 {
        alpha[0][1] = logp.at(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = lse2(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = lse2(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if acc == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                acc + logp.at(t, ext[s])
            };
        }
    }
    alpha
}

/// Backward (beta) table, symmetric to alpha and including the emission at t.
fn beta_table(logp: &Tensor, ext: &[usize]) -> Vec<Vec<f64>> {
    let (frames, _) = logp.dims2();
    let states = ext.len();
    let mut beta = vec![vec![f64::NEG_INFINITY; states]; frames];
    beta[frames - 1][states - 1] = logp.at(frames - 1, ext[states - 1]);
    if states > 1 {
        beta[frames - 1][states - 2] = logp.at(frames - 1, ext[states - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta[t + 1][s];
            if s + 1 < states {
                acc = lse2(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < states && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = lse2(acc, beta[t + 1][s + 2]);
            }
            beta[t][s] = if acc == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                acc + logp.at(t, ext[s])
            };
        }
    }
    beta
}

fn log_total(alpha: &[Vec<f64>], states: usize) -> f64 {
    let last = alpha.last().expect("at least one frame");
    if states > 1 {
        lse2(last[states - 1], last[states - 2])
    } else {
        last[states - 1]
    }
}

/// Negative log of the summed probability of all alignments collapsing to
/// `labels`, straight from a raw `[T, V+1]` log-probability matrix. Most
/// callers want [`ctc_loss`]; this entry point exists so gradient checks can
/// perturb individual grid entries without re-normalizing rows.
pub fn ctc_nll(logp: &Tensor, labels: &[usize]) -> Result<f64> {
    check_ctc_inputs(logp, labels)?;
    let ext = extended(labels);
    let alpha = alpha_table(logp, &ext);
    Ok(-log_total(&alpha, ext.len()))
}

/// NLL plus its gradient w.r.t. every grid entry.
pub fn ctc_nll_with_grad(logp: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    check_ctc_inputs(logp, labels)?;
    let ext = extended(labels);
    let states = ext.len();
    let (frames, alphabet) = logp.dims2();
    let alpha = alpha_table(logp, &ext);
    let beta = beta_table(logp, &ext);
    let log_p = log_total(&alpha, states);

    // d(-log P)/d logp[t][k] = -exp(lse_{s: ext[s]=k}(alpha + beta - emit) - log P)
    let mut grad = Tensor::zeros(&[frames, alphabet]);
    for t in 0..frames {
        let mut occupancy = vec![f64::NEG_INFINITY; alphabet];
        for s in 0..states {
            if alpha[t][s] == f64::NEG_INFINITY || beta[t][s] == f64::NEG_INFINITY {
                continue;
            }
            let term = alpha[t][s] + beta[t][s] - logp.at(t, ext[s]);
            occupancy[ext[s]] = lse2(occupancy[ext[s]], term);
        }
        for (k, &occ) in occupancy.iter().enumerate() {
            if occ != f64::NEG_INFINITY {
                grad.data_mut()[t * alphabet + k] = -((occ - log_p).exp());
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC negative log-likelihood of `labels` under `grid`.
pub fn ctc_loss(grid: &PosteriorGrid, labels: &LabelSeq) -> Result<f64> {
    ctc_nll(grid.tensor(), labels.ids())
}

#[derive(Debug)]
struct CtcLossOp {
    labels: Vec<usize>,
}

impl CustomOp for CtcLossOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(ctc_nll(inputs[0], &self.labels)?))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let upstream = grad.item()?;
        let (_, mut g) = ctc_nll_with_grad(inputs[0], &self.labels)?;
        for v in g.data_mut() {
            *v *= upstream;
        }
        Ok(vec![g])
    }
}

/// Differentiable CTC loss node over a `[T, V+1]` log-probability node.
pub fn ctc_loss_node(g: &mut Graph, grid: NodeId, labels: &LabelSeq) -> Result<NodeId> {
    g.custom(
        Box::new(CtcLossOp {
            labels: labels.ids().to_vec(),
        }),
        &[grid],
    )
}

/// Per-frame argmax followed by collapse. Each surviving token carries a
/// confidence: the maximum per-frame probability over the contiguous argmax
/// run that emitted it. Argmax ties break toward the lowest symbol index.
pub fn greedy_decode(grid: &PosteriorGrid) -> (LabelSeq, Vec<f64>) {
    let frames = grid.frames();
    let mut tokens = Vec::new();
    let mut confidences = Vec::new();
    let mut t = 0;
    while t < frames {
        let sym = grid.tensor().argmax_row(t);
        let mut best = grid.log_prob(t, sym).exp();
        let mut end = t + 1;
        while end < frames && grid.tensor().argmax_row(end) == sym {
            best = best.max(grid.log_prob(end, sym).exp());
            end += 1;
        }
        if sym != BLANK {
            tokens.push(sym);
            confidences.push(best);
        }
        t = end;
    }
    (LabelSeq(tokens), confidences)
}

/// Enumerate every frame sequence and sum the probability of those that
/// collapse to `labels`; returns the negative log. Only for tiny instances:
/// the pre-condition `(V+1)^T <= 10^6` is enforced. Returns `inf` when no
/// alignment exists (zero probability).
pub fn brute_force_ctc(grid: &PosteriorGrid, labels: &LabelSeq) -> Result<f64> {
    let frames = grid.frames();
    let alphabet = grid.alphabet();
    let count = (alphabet as f64).powi(frames as i32);
    if count > 1e6 {
        return Err(Error::TooLarge(format!(
            "brute force over {alphabet}^{frames} frame sequences"
        )));
    }
    labels.validate(grid.vocab())?;
    let mut assignment = vec![0usize; frames];
    let mut total = 0.0f64;
    loop {
        if collapse(&assignment).ids() == labels.ids() {
            let logp: f64 = assignment
                .iter()
                .enumerate()
                .map(|(t, &sym)| grid.log_prob(t, sym))
                .sum();
            total += logp.exp();
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == frames {
                return Ok(-total.ln());
            }
            assignment[pos] += 1;
            if assignment[pos] < alphabet {
                break;
            }
            assignment[pos] = 0;
            pos += 1;
        }
    }
}
