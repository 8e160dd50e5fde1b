//! Config-driven pipeline: corpus generation, CE training with mask
//! strategy selection, MWE fine-tuning over generated N-best lists, decoding
//! with RTF accounting, and scoring.
//!
//! Every run writes a resolved-config snapshot next to its outputs. All
//! randomness derives from the config seed through fixed substream domains,
//! so a rerun from the snapshot is byte-identical in single-thread mode
//! (timing reports aside). A training batch is processed one utterance at a
//! time with summed gradients scaled by the batch size; that realizes
//! batched optimization without padding, so no padded positions ever enter a
//! loss.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{NbestMode, RunConfig};
use crate::corpus::{self, gen_corpus, read_features};
use crate::ctc::{ctc_loss_node, greedy_decode, LabelSeq, PosteriorGrid};
use crate::decode::{at_beam_decode, maskctc_decode, measure_rtf, TimedResult};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::masking::{apply_mask, plan_mask, random_mask_plan, MaskStrategy};
use crate::model::{average_checkpoints, DecoderMode, Model};
use crate::objectives::{
    argmax_fill, causal_ce_loss, cmlm_ce_loss, combined_mwe_loss, enforced_nat_loss,
    gen_output_nbest, hypothesis_posterior, joint_nat_loss, mwe_loss,
};
use crate::optim::NoamAdam;
use crate::rng::SeededRng;
use crate::scoring::{cs_point_counts, cs_point_mer, edit_distance, mask_accuracy, mer};
use crate::vocab::{LanguageMap, Vocabulary};

// rng substream domains (0 is model init, 10/11 the corpus)
const D_SHUFFLE: u8 = 1;
const D_PLAN: u8 = 2;
const D_DROPOUT: u8 = 3;
const D_VALID_PLAN: u8 = 4;
const D_MWE_SHUFFLE: u8 = 5;
const D_MWE_PLAN: u8 = 6;
const D_MWE_DROPOUT: u8 = 7;
const D_SPEC_AUGMENT: u8 = 8;

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const CURVES_FILE: &str = "curves.csv";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const MWE_CKPT: &str = "mwe_final.ckpt";
pub const NBEST_LOG: &str = "mwe_nbest.jsonl";

/// An utterance held in memory for training or decoding.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub utt_id: String,
    pub features: crate::tensor::Tensor,
    pub labels: LabelSeq,
}

pub fn load_split(data_dir: &Path, split: &str, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    let entries = corpus::load_manifest(data_dir, split, vocab)?;
    entries
        .into_iter()
        .map(|e| {
            let features = read_features(data_dir.join(&e.feature_path))?;
            Ok(Utterance {
                utt_id: e.utt_id,
                features,
                labels: e.tokens,
            })
        })
        .collect()
}

/// Generate the synthetic corpus under `cfg.data_dir`.
pub fn run_gen_data(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    gen_corpus(&cfg.synth_spec(), &cfg.data_dir)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    cfg.write_snapshot(cfg.data_dir.join(SNAPSHOT_FILE))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_acc: f64,
    pub valid_acc: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub final_checkpoint: PathBuf,
    pub curves: PathBuf,
}

/// One forward pass worth of training state on a tape.
struct TrainPass {
    loss: NodeId,
    /// (correct, counted) prediction positions for the accuracy metric.
    hits: (usize, usize),
}

/// CE pass for one utterance. CMLM mode: CTC loss plus cross-entropy over a
/// mask plan (plus the complement pass for the complementary regime).
/// Causal mode: CTC loss plus teacher-forced cross-entropy.
#[allow(clippy::too_many_arguments)]
fn build_ce_pass(
    g: &mut Graph,
    model: &Model,
    cfg: &RunConfig,
    utt: &Utterance,
    features: &crate::tensor::Tensor,
    langmap: &LanguageMap,
    plan_strategy: Option<MaskStrategy>,
    plan_rng: &mut SeededRng,
) -> Result<TrainPass> {
    let hidden = model.encode_on(g, features)?;
    let grid = model.ctc_head_on(g, hidden)?;
    let ctc = ctc_loss_node(g, grid, &utt.labels)?;
    match model.config.decoder_mode {
        DecoderMode::Cmlm => {
            let strategy = plan_strategy.unwrap_or(cfg.mask_strategy.plan_strategy());
            let plan = plan_mask(strategy, &utt.labels, langmap, plan_rng)?;
            let masked = apply_mask(&utt.labels, &plan, model.config.mask_id)?;
            let dists = model.cmlm_decode_on(g, &masked, hidden)?;
            let ce = cmlm_ce_loss(g, dists, &utt.labels, &plan)?;
            let enforced = plan_strategy.is_none() && cfg.mask_strategy.is_complementary();
            let loss = if enforced {
                let comp = plan.complement();
                let comp_term = if comp.is_empty() {
                    None
                } else {
                    let masked2 = apply_mask(&utt.labels, &comp, model.config.mask_id)?;
                    let dists2 = model.cmlm_decode_on(g, &masked2, hidden)?;
                    Some(cmlm_ce_loss(g, dists2, &utt.labels, &comp)?)
                };
                enforced_nat_loss(g, ctc, ce, comp_term, cfg.alpha)?
            } else {
                joint_nat_loss(g, ctc, ce, cfg.alpha)?
            };
            let correct = (mask_accuracy(g.value(dists), utt.labels.ids(), &plan)?
                * plan.len() as f64)
                .round() as usize;
            Ok(TrainPass {
                loss,
                hits: (correct, plan.len()),
            })
        }
        DecoderMode::Causal => {
            let mut input = vec![model.config.eos_id];
            input.extend_from_slice(utt.labels.ids());
            let mut targets = utt.labels.ids().to_vec();
            targets.push(model.config.eos_id);
            let dists = model.causal_all_on(g, &input, hidden)?;
            let ce = causal_ce_loss(g, dists, &targets, model.config.vocab, model.config.eos_id)?;
            let loss = joint_nat_loss(g, ctc, ce, cfg.alpha)?;
            let values = g.value(dists);
            let mut correct = 0;
            for (row, &target) in targets.iter().enumerate() {
                let col = if target == model.config.eos_id {
                    model.config.vocab
                } else {
                    target - 1
                };
                if values.argmax_row(row) == col {
                    correct += 1;
                }
            }
            Ok(TrainPass {
                loss,
                hits: (correct, targets.len()),
            })
        }
    }
}

/// Validation metrics: eval-mode forward passes, random plans drawn from an
/// epoch-level stream that does not depend on the training strategy, plain
/// joint loss. Keeps runs with different mask regimes comparable.
fn evaluate_split(
    cfg: &RunConfig,
    model: &Model,
    data: &[Utterance],
    langmap: &LanguageMap,
    epoch: usize,
) -> Result<(f64, f64)> {
    let mut plan_rng = SeededRng::substream(cfg.seed, D_VALID_PLAN, epoch as u32, 0);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut counted = 0usize;
    for utt in data {
        let mut g = Graph::eval();
        let pass = build_ce_pass(
            &mut g,
            model,
            cfg,
            utt,
            &utt.features,
            langmap,
            Some(MaskStrategy::Random),
            &mut plan_rng,
        )?;
        loss_sum += g.value(pass.loss).item()?;
        correct += pass.hits.0;
        counted += pass.hits.1;
    }
    Ok((
        loss_sum / data.len().max(1) as f64,
        correct as f64 / counted.max(1) as f64,
    ))
}

fn write_curves(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut out = String::from("epoch,train_acc,valid_acc,train_loss,valid_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.train_acc, r.valid_acc, r.train_loss, r.valid_loss
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Cross-entropy training: seeded shuffled batches, Noam-Adam updates,
/// per-epoch curves, per-epoch checkpoints, and a final checkpoint that
/// averages the last `avg_last` epochs.
pub fn run_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    cfg.write_snapshot(cfg.out_dir.join(SNAPSHOT_FILE))?;
    let vocab = Vocabulary::load(cfg.data_dir.join("vocab.tsv"))?;
    let langmap = vocab.language_map();
    let train = load_split(&cfg.data_dir, "train", &vocab)?;
    let valid = load_split(&cfg.data_dir, "valid", &vocab)?;
    if train.is_empty() {
        return Err(Error::InvalidArg("training split is empty".into()));
    }

    let mut model = Model::new(cfg.model_config(&vocab), cfg.seed)?;
    let mut opt = NoamAdam::new(cfg.d_model, cfg.warmup, cfg.lr_scale);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut recent: Vec<Checkpoint> = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        SeededRng::substream(cfg.seed, D_SHUFFLE, epoch as u32, 0).shuffle(&mut order);
        let mut plan_rng = SeededRng::substream(cfg.seed, D_PLAN, epoch as u32, 0);
        let mut sa_rng = SeededRng::substream(cfg.seed, D_SPEC_AUGMENT, epoch as u32, 0);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut counted = 0usize;
        let mut utt_counter = 0u32;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Gradients::default();
            for &idx in batch {
                let utt = &train[idx];
                let features = if cfg.spec_augment {
                    corpus::spec_augment(
                        &utt.features,
                        (cfg.sa_time_masks, cfg.sa_time_width.min(utt.features.dims2().0)),
                        (cfg.sa_freq_masks, cfg.sa_freq_width.min(cfg.feat_dim)),
                        &mut sa_rng,
                    )?
                } else {
                    utt.features.clone()
                };
                let dropout_rng = SeededRng::substream(cfg.seed, D_DROPOUT, epoch as u32, utt_counter);
                utt_counter += 1;
                let mut g = Graph::training(dropout_rng);
                let outcome = build_ce_pass(
                    &mut g, &model, cfg, utt, &features, &langmap, None, &mut plan_rng,
                )
                .and_then(|pass| {
                    let value = g.value(pass.loss).item()?;
                    let grad = g.backward(pass.loss)?;
                    Ok((pass, value, grad))
                });
                let (pass, value, grad) = match outcome {
                    Ok(ok) => ok,
                    Err(Error::NonFinite { .. }) => {
                        return Err(Error::Diverged {
                            epoch,
                            batch: batch_idx,
                            utt: utt.utt_id.clone(),
                        })
                    }
                    Err(e) => return Err(e),
                };
                loss_sum += value;
                correct += pass.hits.0;
                counted += pass.hits.1;
                grads.merge(&grad);
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.apply(&mut model.params, &grads)?;
        }

        let train_loss = loss_sum / train.len() as f64;
        let train_acc = correct as f64 / counted.max(1) as f64;
        let (valid_loss, valid_acc) = evaluate_split(cfg, &model, &valid, &langmap, epoch)?;
        rows.push(EpochRow {
            epoch,
            train_acc,
            valid_acc,
            train_loss,
            valid_loss,
        });
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4} acc {train_acc:.4} | valid loss {valid_loss:.4} acc {valid_acc:.4}"
        );

        let ckpt = model.to_checkpoint(opt.step_count(), epoch as u32);
        ckpt.save(cfg.out_dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        recent.push(ckpt);
        if recent.len() > cfg.avg_last {
            recent.remove(0);
        }
    }

    let final_ckpt = average_checkpoints(&recent)?;
    let final_path = cfg.out_dir.join(FINAL_CKPT);
    final_ckpt.save(&final_path)?;
    let curves_path = cfg.out_dir.join(CURVES_FILE);
    write_curves(&curves_path, &rows)?;
    Ok(TrainReport {
        rows,
        final_checkpoint: final_path,
        curves: curves_path,
    })
}

/// One line of the MWE N-best log; written per utterance so the training
/// loss can be recomputed offline from the logged lists.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NbestLogRecord {
    pub utt_id: String,
    pub epoch: usize,
    pub hypotheses: Vec<Vec<usize>>,
    pub log_posteriors: Vec<f64>,
    pub distances: Vec<usize>,
    pub mwe: f64,
}

#[derive(Clone, Debug)]
pub struct MweReport {
    pub checkpoint: PathBuf,
    pub nbest_log: PathBuf,
    pub skipped_empty_greedy: usize,
    pub epoch_losses: Vec<f64>,
}

/// The MWE objective for one utterance on a tape: the CE pass provides the
/// NAT term, the configured generator provides N hypotheses whose
/// log-posteriors stay differentiable, and the combined loss interpolates
/// the two. Returns None when input-side generation finds an empty CTC
/// greedy sequence.
#[allow(clippy::too_many_arguments)]
fn build_mwe_pass(
    g: &mut Graph,
    model: &Model,
    cfg: &RunConfig,
    utt: &Utterance,
    langmap: &LanguageMap,
    plan_rng: &mut SeededRng,
    record: &mut Option<NbestLogRecord>,
    epoch: usize,
) -> Result<Option<NodeId>> {
    let hidden = model.encode_on(g, &utt.features)?;
    let grid = model.ctc_head_on(g, hidden)?;
    let ctc = ctc_loss_node(g, grid, &utt.labels)?;
    let plan = plan_mask(cfg.mask_strategy.plan_strategy(), &utt.labels, langmap, plan_rng)?;
    let masked = apply_mask(&utt.labels, &plan, model.config.mask_id)?;
    let dists = model.cmlm_decode_on(g, &masked, hidden)?;
    let ce = cmlm_ce_loss(g, dists, &utt.labels, &plan)?;
    let nat = if cfg.mask_strategy.is_complementary() {
        let comp = plan.complement();
        let comp_term = if comp.is_empty() {
            None
        } else {
            let masked2 = apply_mask(&utt.labels, &comp, model.config.mask_id)?;
            let dists2 = model.cmlm_decode_on(g, &masked2, hidden)?;
            Some(cmlm_ce_loss(g, dists2, &utt.labels, &comp)?)
        };
        enforced_nat_loss(g, ctc, ce, comp_term, cfg.alpha)?
    } else {
        joint_nat_loss(g, ctc, ce, cfg.alpha)?
    };

    let (hyps, posterior_nodes, distances): (Vec<Vec<usize>>, Vec<NodeId>, Vec<usize>) =
        match cfg.nbest_mode {
            NbestMode::Output => {
                let dist_values = g.value(dists).clone();
                let list = gen_output_nbest(&dist_values, &plan, &utt.labels, cfg.nbest)?;
                let mut nodes = Vec::with_capacity(list.len());
                for hyp in &list.hypotheses {
                    nodes.push(hypothesis_posterior(g, dists, hyp.ids(), &plan)?);
                }
                (
                    list.hypotheses.iter().map(|h| h.ids().to_vec()).collect(),
                    nodes,
                    list.distances,
                )
            }
            NbestMode::Input => {
                let posterior_grid = PosteriorGrid::new(g.value(grid).clone())?;
                let (greedy, _) = greedy_decode(&posterior_grid);
                if greedy.is_empty() {
                    return Ok(None);
                }
                let mut hyps = Vec::with_capacity(cfg.nbest);
                let mut nodes = Vec::with_capacity(cfg.nbest);
                let mut distances = Vec::with_capacity(cfg.nbest);
                for _ in 0..cfg.nbest {
                    let hyp_plan = random_mask_plan(greedy.len(), plan_rng)?;
                    let hyp_masked = apply_mask(&greedy, &hyp_plan, model.config.mask_id)?;
                    let hyp_dists = model.cmlm_decode_on(g, &hyp_masked, hidden)?;
                    let filled = argmax_fill(g.value(hyp_dists), greedy.ids(), &hyp_plan);
                    nodes.push(hypothesis_posterior(g, hyp_dists, &filled, &hyp_plan)?);
                    distances.push(edit_distance(&utt.labels, &LabelSeq::new(filled.clone())?).0);
                    hyps.push(filled);
                }
                (hyps, nodes, distances)
            }
        };

    if distances.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "MWE needs at least 2 hypotheses, generator produced {}",
            distances.len()
        )));
    }
    let mwe = mwe_loss(g, &posterior_nodes, &distances)?;
    let combined = combined_mwe_loss(g, nat, mwe, cfg.gamma)?;
    *record = Some(NbestLogRecord {
        utt_id: utt.utt_id.clone(),
        epoch,
        hypotheses: hyps,
        log_posteriors: posterior_nodes
            .iter()
            .map(|&n| g.value(n).item())
            .collect::<Result<_>>()?,
        distances,
        mwe: g.value(mwe).item()?,
    });
    Ok(Some(combined))
}

/// Minimum-word-error fine-tuning from a CE checkpoint. Utterances whose CTC
/// greedy output is empty are skipped and counted (input-side generation
/// has nothing to re-mask for them).
pub fn run_mwe_train(cfg: &RunConfig, init_checkpoint: &Path) -> Result<MweReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    cfg.write_snapshot(cfg.out_dir.join(SNAPSHOT_FILE))?;
    if cfg.decoder_mode != DecoderMode::Cmlm {
        return Err(Error::Config("MWE fine-tuning needs a cmlm-mode model".into()));
    }
    let vocab = Vocabulary::load(cfg.data_dir.join("vocab.tsv"))?;
    let langmap = vocab.language_map();
    let train = load_split(&cfg.data_dir, "train", &vocab)?;
    if train.is_empty() {
        return Err(Error::InvalidArg("training split is empty".into()));
    }
    let init = Checkpoint::load(init_checkpoint)?;
    let mut model = Model::from_checkpoint(cfg.model_config(&vocab), &init)?;
    let mut opt = NoamAdam::resumed(cfg.d_model, cfg.warmup, cfg.lr_scale, init.step);

    let log_path = cfg.out_dir.join(NBEST_LOG);
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut skipped = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.mwe_epochs);

    for epoch in 1..=cfg.mwe_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        SeededRng::substream(cfg.seed, D_MWE_SHUFFLE, epoch as u32, 0).shuffle(&mut order);
        let mut plan_rng = SeededRng::substream(cfg.seed, D_MWE_PLAN, epoch as u32, 0);
        let mut utt_counter = 0u32;
        let mut loss_sum = 0.0;
        let mut contributing = 0usize;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Gradients::default();
            let mut in_batch = 0usize;
            for &idx in batch {
                let utt = &train[idx];
                let dropout_rng =
                    SeededRng::substream(cfg.seed, D_MWE_DROPOUT, epoch as u32, utt_counter);
                utt_counter += 1;
                let mut g = Graph::training(dropout_rng);
                let mut record = None;
                let outcome = build_mwe_pass(
                    &mut g, &model, cfg, utt, &langmap, &mut plan_rng, &mut record, epoch,
                );
                let loss = match outcome {
                    Ok(Some(node)) => node,
                    Ok(None) => {
                        skipped += 1;
                        log::debug!("{}: empty CTC greedy output, skipping MWE", utt.utt_id);
                        continue;
                    }
                    Err(Error::NonFinite { .. }) => {
                        return Err(Error::Diverged {
                            epoch,
                            batch: batch_idx,
                            utt: utt.utt_id.clone(),
                        })
                    }
                    Err(e) => return Err(e),
                };
                let value = g.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_idx,
                        utt: utt.utt_id.clone(),
                    });
                }
                let record = record.expect("record is set alongside the loss");
                serde_json::to_writer(&mut log_file, &record)
                    .map_err(|e| Error::Format {
                        path: log_path.display().to_string(),
                        reason: e.to_string(),
                    })?;
                log_file
                    .write_all(b"\n")
                    .map_err(|e| Error::io(&log_path, e))?;
                loss_sum += value;
                contributing += 1;
                in_batch += 1;
                grads.merge(&g.backward(loss)?);
            }
            if in_batch > 0 {
                grads.scale(1.0 / in_batch as f64);
                opt.apply(&mut model.params, &grads)?;
            }
        }
        let mean = loss_sum / contributing.max(1) as f64;
        epoch_losses.push(mean);
        log::info!("mwe epoch {epoch}: mean combined loss {mean:.6} ({contributing} utterances)");
    }

    let out_path = cfg.out_dir.join(MWE_CKPT);
    model
        .to_checkpoint(opt.step_count(), (cfg.epochs + cfg.mwe_epochs) as u32)
        .save(&out_path)?;
    Ok(MweReport {
        checkpoint: out_path,
        nbest_log: log_path,
        skipped_empty_greedy: skipped,
        epoch_losses,
    })
}

#[derive(Clone, Debug)]
pub struct DecodeReport {
    pub hyp_path: PathBuf,
    pub rtf_path: PathBuf,
    pub rtf: f64,
    pub utterances: usize,
    pub decoder: &'static str,
    pub single_thread: bool,
}

/// Decode a split with the mode the config selects (mask-predict for cmlm,
/// beam search for causal) and write hypotheses plus an RTF report. With
/// `workers > 1` utterances decode on a thread pool; outputs keep manifest
/// order either way, but RTF numbers are only meaningful single-threaded.
pub fn run_decode(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<DecodeReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    cfg.write_snapshot(cfg.out_dir.join(SNAPSHOT_FILE))?;
    let vocab = Vocabulary::load(cfg.data_dir.join("vocab.tsv"))?;
    let entries = corpus::load_manifest(&cfg.data_dir, split, &vocab)?;
    let model = Model::from_checkpoint(cfg.model_config(&vocab), &Checkpoint::load(checkpoint)?);
    let model = model?;
    let decode_cfg = cfg.decode_config();
    let decoder = match cfg.decoder_mode {
        DecoderMode::Cmlm => "maskctc",
        DecoderMode::Causal => "at-beam",
    };

    let decode_one = |entry: &corpus::ManifestEntry| -> Result<TimedResult> {
        let features = read_features(cfg.data_dir.join(&entry.feature_path))?;
        match cfg.decoder_mode {
            DecoderMode::Cmlm => maskctc_decode(&model, &features, &decode_cfg),
            DecoderMode::Causal => at_beam_decode(&model, &features, &decode_cfg),
        }
    };
    let results: Vec<TimedResult> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::InvalidArg(format!("worker pool: {e}")))?;
        pool.install(|| entries.par_iter().map(decode_one).collect::<Result<Vec<_>>>())?
    } else {
        entries.iter().map(decode_one).collect::<Result<Vec<_>>>()?
    };

    let hyp_path = cfg.out_dir.join(format!("{split}_hyps.tsv"));
    let mut out = String::new();
    for (entry, result) in entries.iter().zip(&results) {
        let surfaces: Vec<&str> = result
            .hypothesis
            .ids()
            .iter()
            .map(|&id| vocab.surface(id))
            .collect::<Result<_>>()?;
        out.push_str(&format!("{}\t{}\n", entry.utt_id, surfaces.join(" ")));
    }
    fs::write(&hyp_path, out).map_err(|e| Error::io(&hyp_path, e))?;

    let rtf = measure_rtf(&results)?;
    let wall: f64 = results.iter().map(|r| r.wall_seconds).sum();
    let audio: f64 = results.iter().map(|r| r.audio_seconds).sum();
    let mode = if cfg.workers == 1 {
        "single-thread".to_string()
    } else {
        format!("workers-{}", cfg.workers)
    };
    let rtf_path = cfg.out_dir.join(format!("{split}_rtf.txt"));
    let report = format!(
        "decoder={decoder}\nsplit={split}\nutterances={}\nwall_seconds={wall:.6}\naudio_seconds={audio:.6}\nrtf={rtf:.6}\nmode={mode}\n",
        entries.len()
    );
    fs::write(&rtf_path, report).map_err(|e| Error::io(&rtf_path, e))?;

    Ok(DecodeReport {
        hyp_path,
        rtf_path,
        rtf,
        utterances: entries.len(),
        decoder,
        single_thread: cfg.workers == 1,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub utterances: usize,
    pub ref_tokens: usize,
    pub errors: usize,
    pub mer: f64,
    pub cs_flagged_tokens: usize,
    pub cs_flagged_errors: usize,
    pub cs_point_mer: f64,
}

impl ScoreReport {
    pub fn to_key_values(&self) -> String {
        format!(
            "utterances={}\nref_tokens={}\nerrors={}\nmer={:.4}\ncs_flagged_tokens={}\ncs_flagged_errors={}\ncs_point_mer={:.4}\n",
            self.utterances,
            self.ref_tokens,
            self.errors,
            self.mer,
            self.cs_flagged_tokens,
            self.cs_flagged_errors,
            self.cs_point_mer
        )
    }
}

/// Parse a reference or hypothesis file: `utt-id<TAB>tokens` lines, or
/// manifest lines (`utt-id<TAB>path<TAB>tokens`) whose middle column is
/// skipped.
fn parse_token_file(path: &Path, vocab: &Vocabulary) -> Result<Vec<(String, LabelSeq)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (utt_id, transcript) = match fields.len() {
            2 => (fields[0], fields[1]),
            3 => (fields[0], fields[2]),
            _ => {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("line {}: expected 2 or 3 tab-separated fields", lineno + 1),
                })
            }
        };
        if !seen.insert(utt_id.to_string()) {
            return Err(Error::DuplicateId(utt_id.to_string()));
        }
        let mut ids = Vec::new();
        for surface in transcript.split_whitespace() {
            let id = vocab.id_of(surface).ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("line {}: unknown token {surface:?}", lineno + 1),
            })?;
            ids.push(id);
        }
        out.push((utt_id.to_string(), LabelSeq::new(ids)?));
    }
    Ok(out)
}

/// Score a hypothesis file against references (a manifest or another token
/// file). The id sets must align exactly; mismatches are listed.
pub fn run_score(
    refs_path: &Path,
    hyps_path: &Path,
    vocab_path: &Path,
    report_path: Option<&Path>,
) -> Result<ScoreReport> {
    let vocab = Vocabulary::load(vocab_path)?;
    let langmap = vocab.language_map();
    let refs = parse_token_file(refs_path, &vocab)?;
    let hyps = parse_token_file(hyps_path, &vocab)?;
    let hyp_map: std::collections::HashMap<&str, &LabelSeq> =
        hyps.iter().map(|(id, seq)| (id.as_str(), seq)).collect();
    let ref_ids: std::collections::HashSet<&str> = refs.iter().map(|(id, _)| id.as_str()).collect();
    let mut missing: Vec<String> = refs
        .iter()
        .filter(|(id, _)| !hyp_map.contains_key(id.as_str()))
        .map(|(id, _)| id.clone())
        .collect();
    missing.extend(
        hyps.iter()
            .filter(|(id, _)| !ref_ids.contains(id.as_str()))
            .map(|(id, _)| format!("{id} (hypothesis only)")),
    );
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::MissingIds(missing));
    }

    let ref_seqs: Vec<LabelSeq> = refs.iter().map(|(_, s)| s.clone()).collect();
    let hyp_seqs: Vec<LabelSeq> = refs
        .iter()
        .map(|(id, _)| (*hyp_map.get(id.as_str()).expect("checked above")).clone())
        .collect();
    let errors: usize = ref_seqs
        .iter()
        .zip(&hyp_seqs)
        .map(|(r, h)| edit_distance(r, h).0)
        .sum();
    let mer = mer(&ref_seqs, &hyp_seqs)?;
    let counts = cs_point_counts(&ref_seqs, &hyp_seqs, &langmap)?;
    let cs_mer = cs_point_mer(&ref_seqs, &hyp_seqs, &langmap)?;
    let report = ScoreReport {
        utterances: ref_seqs.len(),
        ref_tokens: ref_seqs.iter().map(LabelSeq::len).sum(),
        errors,
        mer,
        cs_flagged_tokens: counts.flagged_tokens,
        cs_flagged_errors: counts.flagged_errors,
        cs_point_mer: cs_mer,
    };
    if let Some(path) = report_path {
        fs::write(path, report.to_key_values()).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}
