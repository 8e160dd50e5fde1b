//! Transformer encoder with a CTC head, plus a decoder that runs either as a
//! conditional masked language model (full self-attention, vocabulary-sized
//! output) or causally for the autoregressive baseline (triangular mask,
//! vocabulary-plus-EOS output).
//!
//! Blocks are pre-norm with sinusoidal position encodings on both sides and
//! no temporal subsampling in the encoder. The causal decoder uses EOS as the
//! begin symbol, so an empty prefix feeds a single EOS token.

use crate::checkpoint::Checkpoint;
use crate::ctc::PosteriorGrid;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamSet};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Additive attention-mask value for forbidden positions. Large but finite so
/// every node on the tape stays finite; it underflows to an exact zero weight
/// after the softmax shift.
const MASKED_SCORE: f64 = -1e30;

const INIT_STREAM_DOMAIN: u8 = 0;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    Cmlm,
    Causal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub feat_dim: usize,
    pub vocab: usize,
    pub decoder_mode: DecoderMode,
    pub mask_id: usize,
    pub eos_id: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 2+2 layers, d_model 64, 4 heads, FFN 256,
    /// dropout 0.1. MASK and EOS ids follow the vocabulary convention V+1,
    /// V+2.
    pub fn desk_default(feat_dim: usize, vocab: usize, decoder_mode: DecoderMode) -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 64,
            heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            feat_dim,
            vocab,
            decoder_mode,
            mask_id: vocab + 1,
            eos_id: vocab + 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if self.vocab == 0 || self.feat_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("vocab, feat_dim and ffn_dim must be positive".into()));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        let ids = [0, self.mask_id, self.eos_id];
        if ids[1] == ids[2] || ids[1] == 0 || ids[2] == 0 {
            return Err(Error::Config("blank, MASK and EOS ids must be distinct".into()));
        }
        if self.mask_id <= self.vocab || self.eos_id <= self.vocab {
            return Err(Error::Config("MASK and EOS ids must lie above the vocabulary".into()));
        }
        Ok(())
    }

    /// Decoder embedding table height: blank + vocab + MASK + EOS.
    fn embed_rows(&self) -> usize {
        self.mask_id.max(self.eos_id) + 1
    }

    /// Decoder output width: V for CMLM, V+1 (EOS in the last column) causal.
    pub fn out_dim(&self) -> usize {
        match self.decoder_mode {
            DecoderMode::Cmlm => self.vocab,
            DecoderMode::Causal => self.vocab + 1,
        }
    }
}

#[derive(Copy, Clone)]
enum Init {
    Xavier,
    Zeros,
    Ones,
    Embedding,
}

fn attention_params(prefix: &str, dm: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    for part in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.w{part}"), vec![dm, dm], Init::Xavier));
        out.push((format!("{prefix}.b{part}"), vec![dm], Init::Zeros));
    }
}

fn norm_params(prefix: &str, dm: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.g"), vec![dm], Init::Ones));
    out.push((format!("{prefix}.b"), vec![dm], Init::Zeros));
}

fn ffn_params(prefix: &str, dm: usize, ffn: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.w1"), vec![dm, ffn], Init::Xavier));
    out.push((format!("{prefix}.b1"), vec![ffn], Init::Zeros));
    out.push((format!("{prefix}.w2"), vec![ffn, dm], Init::Xavier));
    out.push((format!("{prefix}.b2"), vec![dm], Init::Zeros));
}

fn param_table(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let dm = cfg.d_model;
    let mut t = Vec::new();
    t.push(("enc.in.w".into(), vec![cfg.feat_dim, dm], Init::Xavier));
    t.push(("enc.in.b".into(), vec![dm], Init::Zeros));
    for i in 0..cfg.encoder_layers {
        norm_params(&format!("enc.l{i}.ln1"), dm, &mut t);
        attention_params(&format!("enc.l{i}.attn"), dm, &mut t);
        norm_params(&format!("enc.l{i}.ln2"), dm, &mut t);
        ffn_params(&format!("enc.l{i}.ffn"), dm, cfg.ffn_dim, &mut t);
    }
    norm_params("enc.ln", dm, &mut t);
    t.push(("ctc.w".into(), vec![dm, cfg.vocab + 1], Init::Xavier));
    t.push(("ctc.b".into(), vec![cfg.vocab + 1], Init::Zeros));
    t.push(("dec.embed".into(), vec![cfg.embed_rows(), dm], Init::Embedding));
    for i in 0..cfg.decoder_layers {
        norm_params(&format!("dec.l{i}.ln1"), dm, &mut t);
        attention_params(&format!("dec.l{i}.self"), dm, &mut t);
        norm_params(&format!("dec.l{i}.ln2"), dm, &mut t);
        attention_params(&format!("dec.l{i}.cross"), dm, &mut t);
        norm_params(&format!("dec.l{i}.ln3"), dm, &mut t);
        ffn_params(&format!("dec.l{i}.ffn"), dm, cfg.ffn_dim, &mut t);
    }
    norm_params("dec.ln", dm, &mut t);
    t.push(("dec.out.w".into(), vec![dm, cfg.out_dim()], Init::Xavier));
    t.push(("dec.out.b".into(), vec![cfg.out_dim()], Init::Zeros));
    t
}

/// Sinusoidal position encodings for `len` positions.
fn position_encoding(len: usize, dm: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dm);
    for pos in 0..len {
        for j in 0..dm {
            let pair = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / dm as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, dm], data).expect("shape is consistent")
}

fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = MASKED_SCORE;
        }
    }
    Tensor::new(vec![len, len], data).expect("shape is consistent")
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Fresh seeded initialization: Xavier-uniform weights, zero biases, unit
    /// norm gains, N(0, d_model^-1) embeddings.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::substream(seed, INIT_STREAM_DOMAIN, 0, 0);
        let mut params = ParamSet::new();
        for (name, shape, init) in param_table(&config) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Xavier => {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..numel)
                        .map(|_| (2.0 * rng.uniform_f64() - 1.0) * limit)
                        .collect()
                }
                Init::Embedding => {
                    let sigma = (config.d_model as f64).powf(-0.5);
                    (0..numel).map(|_| sigma * rng.normal()).collect()
                }
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// Load parameters from a checkpoint; names and shapes must match the
    /// config exactly.
    pub fn from_checkpoint(config: ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let table = param_table(&config);
        if table.len() != ckpt.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, config expects {}",
                ckpt.params.len(),
                table.len()
            )));
        }
        for (name, shape, _) in &table {
            let tensor = ckpt
                .params
                .get(name)
                .map_err(|_| Error::Config(format!("checkpoint is missing parameter {name:?}")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name:?} has shape {:?}, config expects {:?}",
                    tensor.shape(),
                    shape
                )));
            }
        }
        Ok(Self {
            config,
            params: ckpt.params.clone(),
        })
    }

    pub fn to_checkpoint(&self, step: u64, epoch: u32) -> Checkpoint {
        Checkpoint::new(self.params.clone(), step, epoch)
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        g.param(name, self.params.get(name)?)
    }

    fn linear(&self, g: &mut Graph, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let w = self.p(g, w)?;
        let b = self.p(g, b)?;
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    fn norm(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gain = self.p(g, &format!("{prefix}.g"))?;
        let bias = self.p(g, &format!("{prefix}.b"))?;
        g.layer_norm(x, gain, bias)
    }

    /// Multi-head attention block: queries from `x_q`, keys/values from
    /// `x_kv`, optional additive score mask.
    fn mha(
        &self,
        g: &mut Graph,
        x_q: NodeId,
        x_kv: NodeId,
        prefix: &str,
        mask: Option<&Tensor>,
    ) -> Result<NodeId> {
        let dm = self.config.d_model;
        let dk = dm / self.config.heads;
        let q = self.linear(g, x_q, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(g, x_kv, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(g, x_kv, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let mask_node = match mask {
            Some(m) => Some(g.constant(m.clone())?),
            None => None,
        };
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
            let gated = match mask_node {
                Some(m) => g.add(scaled, m)?,
                None => scaled,
            };
            let weights = g.softmax(gated)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        self.linear(g, cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let hidden = self.linear(g, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let act = g.gelu(hidden)?;
        self.linear(g, act, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn residual_dropout(&self, g: &mut Graph, x: NodeId, sublayer: NodeId) -> Result<NodeId> {
        let dropped = g.dropout(sublayer, self.config.dropout)?;
        g.add(x, dropped)
    }

    /// Encoder stack on a tape: `[T, feat_dim]` features to `[T, d_model]`.
    pub fn encode_on(&self, g: &mut Graph, features: &Tensor) -> Result<NodeId> {
        if features.rank() != 2 || features.dims2().1 != self.config.feat_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: features.shape().to_vec(),
                rhs: vec![features.dims2().0, self.config.feat_dim],
            });
        }
        let frames = features.dims2().0;
        if frames == 0 {
            return Err(Error::InvalidArg("encode needs at least one frame".into()));
        }
        let x = g.constant(features.clone())?;
        let projected = self.linear(g, x, "enc.in.w", "enc.in.b")?;
        let pe = g.constant(position_encoding(frames, self.config.d_model))?;
        let with_pos = g.add(projected, pe)?;
        let mut h = g.dropout(with_pos, self.config.dropout)?;
        for i in 0..self.config.encoder_layers {
            let a = self.norm(g, h, &format!("enc.l{i}.ln1"))?;
            let attn = self.mha(g, a, a, &format!("enc.l{i}.attn"), None)?;
            h = self.residual_dropout(g, h, attn)?;
            let f = self.norm(g, h, &format!("enc.l{i}.ln2"))?;
            let ffn = self.ffn(g, f, &format!("enc.l{i}.ffn"))?;
            h = self.residual_dropout(g, h, ffn)?;
        }
        self.norm(g, h, "enc.ln")
    }

    /// CTC head on a tape: `[T, d_model]` to `[T, V+1]` log-probabilities.
    pub fn ctc_head_on(&self, g: &mut Graph, hidden: NodeId) -> Result<NodeId> {
        let logits = self.linear(g, hidden, "ctc.w", "ctc.b")?;
        g.log_softmax(logits)
    }

    fn decode_stack(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        hidden: NodeId,
        self_mask: Option<&Tensor>,
    ) -> Result<NodeId> {
        let table = self.p(g, "dec.embed")?;
        let emb = g.embed(table, tokens)?;
        let scaled = g.scale(emb, (self.config.d_model as f64).sqrt())?;
        let pe = g.constant(position_encoding(tokens.len(), self.config.d_model))?;
        let with_pos = g.add(scaled, pe)?;
        let mut h = g.dropout(with_pos, self.config.dropout)?;
        for i in 0..self.config.decoder_layers {
            let a = self.norm(g, h, &format!("dec.l{i}.ln1"))?;
            let sa = self.mha(g, a, a, &format!("dec.l{i}.self"), self_mask)?;
            h = self.residual_dropout(g, h, sa)?;
            let c = self.norm(g, h, &format!("dec.l{i}.ln2"))?;
            let ca = self.mha(g, c, hidden, &format!("dec.l{i}.cross"), None)?;
            h = self.residual_dropout(g, h, ca)?;
            let f = self.norm(g, h, &format!("dec.l{i}.ln3"))?;
            let ffn = self.ffn(g, f, &format!("dec.l{i}.ffn"))?;
            h = self.residual_dropout(g, h, ffn)?;
        }
        let normed = self.norm(g, h, "dec.ln")?;
        let logits = self.linear(g, normed, "dec.out.w", "dec.out.b")?;
        g.log_softmax(logits)
    }

    /// CMLM decoder on a tape: a length-N sequence over vocab-plus-MASK to
    /// `[N, V]` log-distributions. Every position, masked or not, receives a
    /// distribution; attention is fully bidirectional.
    pub fn cmlm_decode_on(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        hidden: NodeId,
    ) -> Result<NodeId> {
        if self.config.decoder_mode != DecoderMode::Cmlm {
            return Err(Error::Config("model is not in cmlm decoder mode".into()));
        }
        if tokens.is_empty() {
            return Err(Error::InvalidArg("cmlm decoder needs at least one token".into()));
        }
        for &id in tokens {
            let real = (1..=self.config.vocab).contains(&id);
            if !real && id != self.config.mask_id {
                return Err(Error::UnknownToken {
                    id,
                    valid: format!("1..={} or MASK {}", self.config.vocab, self.config.mask_id),
                });
            }
        }
        self.decode_stack(g, tokens, hidden, None)
    }

    /// Causal decoder on a tape: input `[eos, y1..yL-1]`-style sequences to
    /// `[L, V+1]` next-token log-distributions (EOS in the last column).
    pub fn causal_all_on(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        hidden: NodeId,
    ) -> Result<NodeId> {
        if self.config.decoder_mode != DecoderMode::Causal {
            return Err(Error::Config("model is not in causal decoder mode".into()));
        }
        if tokens.is_empty() {
            return Err(Error::InvalidArg("causal decoder needs at least one token".into()));
        }
        for &id in tokens {
            let real = (1..=self.config.vocab).contains(&id);
            if !real && id != self.config.eos_id {
                return Err(Error::UnknownToken {
                    id,
                    valid: format!("1..={} or EOS {}", self.config.vocab, self.config.eos_id),
                });
            }
        }
        let mask = causal_mask(tokens.len());
        self.decode_stack(g, tokens, hidden, Some(&mask))
    }

    /// Eval-mode encoder (dropout off): deterministic for fixed parameters.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::eval();
        let h = self.encode_on(&mut g, features)?;
        Ok(g.value(h).clone())
    }

    /// Eval-mode CTC posteriors from encoder states.
    pub fn ctc_head(&self, hidden: &Tensor) -> Result<PosteriorGrid> {
        let mut g = Graph::eval();
        let h = g.constant(hidden.clone())?;
        let grid = self.ctc_head_on(&mut g, h)?;
        PosteriorGrid::new(g.value(grid).clone())
    }

    /// Eval-mode CMLM pass over a masked sequence.
    pub fn cmlm_decode(&self, tokens: &[usize], hidden: &Tensor) -> Result<Tensor> {
        let mut g = Graph::eval();
        let h = g.constant(hidden.clone())?;
        let out = self.cmlm_decode_on(&mut g, tokens, h)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode next-token log-distribution after `prefix` (empty prefix
    /// feeds the begin symbol alone).
    pub fn causal_decode(&self, prefix: &[usize], hidden: &Tensor) -> Result<Vec<f64>> {
        let mut tokens = Vec::with_capacity(prefix.len() + 1);
        tokens.push(self.config.eos_id);
        tokens.extend_from_slice(prefix);
        let mut g = Graph::eval();
        let h = g.constant(hidden.clone())?;
        let out = self.causal_all_on(&mut g, &tokens, h)?;
        Ok(g.value(out).row(tokens.len() - 1).to_vec())
    }
}

/// Arithmetic mean of each named parameter across checkpoints. Step and
/// epoch are taken from the last checkpoint in the list.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::InvalidArg("cannot average zero checkpoints".into()))?;
    let mut params = first.params.clone();
    for (i, ckpt) in ckpts.iter().enumerate().skip(1) {
        if ckpt.params.len() != first.params.len() {
            return Err(Error::InvalidArg(format!(
                "checkpoint {i} has {} parameters, expected {}",
                ckpt.params.len(),
                first.params.len()
            )));
        }
        for (name, tensor) in ckpt.params.iter() {
            let acc = params.get_mut(name)?;
            if acc.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "average_checkpoints",
                    lhs: acc.shape().to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            for (a, b) in acc.data_mut().iter_mut().zip(tensor.data()) {
                *a += b;
            }
        }
    }
    let n = ckpts.len() as f64;
    for (_, tensor) in params.iter_mut() {
        for v in tensor.data_mut() {
            *v /= n;
        }
    }
    let last = ckpts.last().expect("non-empty");
    Ok(Checkpoint::new(params, last.step, last.epoch))
}
