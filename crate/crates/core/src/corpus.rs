//! Deterministic synthetic code-switching corpus: every token id gets a
//! fixed prototype vector, utterances are Markov walks over the two
//! languages, and each token emits a few noisy copies of its prototype.
//! Also: the feature file format, manifest I/O, and spec-augment.
//!
//! Generation is a pure function of the [`SynthSpec`]: prototypes and the
//! three splits draw from disjoint ChaCha substreams of the master seed, so
//! the same spec always produces byte-identical corpora.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::vocab::{Lang, Vocabulary};

const FEATURE_MAGIC: &[u8; 4] = b"NATF";
const FEATURE_VERSION: u32 = 1;

const STREAM_DOMAIN_PROTO: u8 = 10;
const STREAM_DOMAIN_SPLIT: u8 = 11;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub en_vocab: usize,
    pub cn_vocab: usize,
    pub feat_dim: usize,
    pub frames_per_token: (usize, usize),
    pub noise_sigma: f64,
    pub switch_prob: f64,
    pub utt_len: (usize, usize),
    pub train_count: usize,
    pub valid_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.en_vocab == 0 || self.cn_vocab == 0 {
            return Err(Error::Config("both vocabularies must be non-empty".into()));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("feature dim must be positive".into()));
        }
        if self.frames_per_token.0 == 0 || self.frames_per_token.0 > self.frames_per_token.1 {
            return Err(Error::Config(format!(
                "bad frames-per-token range {:?}",
                self.frames_per_token
            )));
        }
        if self.utt_len.0 == 0 || self.utt_len.0 > self.utt_len.1 {
            return Err(Error::Config(format!("bad utterance length range {:?}", self.utt_len)));
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(Error::Config(format!(
                "switch probability {} not in [0,1]",
                self.switch_prob
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn split_count(&self, split: &str) -> Result<usize> {
        match split {
            "train" => Ok(self.train_count),
            "valid" => Ok(self.valid_count),
            "test" => Ok(self.test_count),
            other => Err(Error::InvalidArg(format!("unknown split {other:?}"))),
        }
    }

    fn vocabulary(&self) -> Vocabulary {
        let mut entries = Vec::with_capacity(self.en_vocab + self.cn_vocab);
        for i in 1..=self.en_vocab {
            entries.push((format!("en{i}"), Lang::En));
        }
        for i in 1..=self.cn_vocab {
            entries.push((format!("cn{i}"), Lang::Cn));
        }
        Vocabulary::new(entries).expect("generated surfaces are unique")
    }
}

/// One manifest line: utterance id, feature path relative to the manifest's
/// directory, transcript token ids, and the stored frame count.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub feature_path: String,
    pub tokens: LabelSeq,
    pub frames: usize,
}

/// Write features as `NATF`, version, T, d (u32 LE each) and a little-endian
/// f32 payload. Rejects empty matrices and non-finite values.
pub fn write_features(path: impl AsRef<Path>, features: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (frames, dim) = features.dims2();
    if features.rank() != 2 || frames == 0 || dim == 0 {
        return Err(Error::InvalidArg(format!(
            "feature matrix must be [T >= 1, d >= 1], got {:?}",
            features.shape()
        )));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite {
            op: "write_features".into(),
        });
    }
    let mut buf = Vec::with_capacity(16 + features.numel() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frames as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut header = [0u8; 16];
    file.read_exact(&mut header).map_err(|_| fmt("truncated header"))?;
    if &header[0..4] != FEATURE_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let frames = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if frames == 0 || dim == 0 {
        return Err(fmt("empty feature matrix"));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != frames * dim * 4 {
        return Err(fmt(&format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            frames * dim * 4
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![frames, dim], data)
}

/// Zero `count` random time bands (rows) and frequency bands (columns).
/// Each band's width is drawn uniformly from `[1, max_width]` and its start
/// uniformly over the valid range; `count == 0` or `max_width == 0` leaves
/// that axis untouched.
pub fn spec_augment(
    features: &Tensor,
    time_masks: (usize, usize),
    freq_masks: (usize, usize),
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let (frames, dim) = features.dims2();
    let (t_count, t_width) = time_masks;
    let (f_count, f_width) = freq_masks;
    if t_width > frames || f_width > dim {
        return Err(Error::InvalidArg(format!(
            "mask widths ({t_width}, {f_width}) exceed axes ({frames}, {dim})"
        )));
    }
    let mut out = features.clone();
    if t_count > 0 && t_width > 0 {
        for _ in 0..t_count {
            let width = rng.uniform_usize(1, t_width);
            let start = rng.uniform_usize(0, frames - width);
            for row in start..start + width {
                for col in 0..dim {
                    out.data_mut()[row * dim + col] = 0.0;
                }
            }
        }
    }
    if f_count > 0 && f_width > 0 {
        for _ in 0..f_count {
            let width = rng.uniform_usize(1, f_width);
            let start = rng.uniform_usize(0, dim - width);
            for row in 0..frames {
                for col in start..start + width {
                    out.data_mut()[row * dim + col] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

fn split_stream_index(split: &str) -> u32 {
    match split {
        "train" => 0,
        "valid" => 1,
        "test" => 2,
        _ => unreachable!("validated upstream"),
    }
}

/// Per-token prototype vectors, drawn once from the master seed.
fn prototypes(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::substream(spec.seed, STREAM_DOMAIN_PROTO, 0, 0);
    let vocab = spec.en_vocab + spec.cn_vocab;
    (0..vocab)
        .map(|_| (0..spec.feat_dim).map(|_| rng.normal()).collect())
        .collect()
}

/// One utterance: a Markov walk over languages (switch with probability p,
/// stay otherwise) with uniform token choice inside the current language;
/// each token emits a uniform-random number of prototype+noise frames.
fn gen_utterance(spec: &SynthSpec, protos: &[Vec<f64>], rng: &mut SeededRng) -> (LabelSeq, Tensor) {
    let len = rng.uniform_usize(spec.utt_len.0, spec.utt_len.1);
    let mut tokens = Vec::with_capacity(len);
    let mut lang_is_en = rng.bernoulli(0.5);
    for i in 0..len {
        if i > 0 && rng.bernoulli(spec.switch_prob) {
            lang_is_en = !lang_is_en;
        }
        let id = if lang_is_en {
            rng.uniform_usize(1, spec.en_vocab)
        } else {
            rng.uniform_usize(spec.en_vocab + 1, spec.en_vocab + spec.cn_vocab)
        };
        tokens.push(id);
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut frames = 0;
    for &id in &tokens {
        let emit = rng.uniform_usize(spec.frames_per_token.0, spec.frames_per_token.1);
        for _ in 0..emit {
            for proto in &protos[id - 1] {
                rows.push(proto + spec.noise_sigma * rng.normal());
            }
            frames += 1;
        }
    }
    let feats = Tensor::new(vec![frames, spec.feat_dim], rows).expect("consistent shape");
    (LabelSeq::new(tokens).expect("ids start at 1"), feats)
}

/// Generate the vocabulary file, per-split manifests and feature files under
/// `out_dir`. Layout: `vocab.tsv`, `{split}.tsv`, `feats/{split}/{id}.natf`.
pub fn gen_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<()> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vocab = spec.vocabulary();
    vocab.save(out_dir.join("vocab.tsv"))?;
    let protos = prototypes(spec);

    for split in SPLITS {
        let count = spec.split_count(split)?;
        let feat_dir = out_dir.join("feats").join(split);
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let mut rng =
            SeededRng::substream(spec.seed, STREAM_DOMAIN_SPLIT, split_stream_index(split), 0);
        let mut manifest = String::new();
        for i in 0..count {
            let (tokens, feats) = gen_utterance(spec, &protos, &mut rng);
            let utt_id = format!("{split}-{i:05}");
            let rel_path = format!("feats/{split}/{utt_id}.natf");
            write_features(out_dir.join(&rel_path), &feats)?;
            let surfaces: Vec<&str> = tokens
                .ids()
                .iter()
                .map(|&id| vocab.surface(id).expect("generated ids are in range"))
                .collect();
            manifest.push_str(&format!("{utt_id}\t{rel_path}\t{}\n", surfaces.join(" ")));
        }
        let manifest_path = out_dir.join(format!("{split}.tsv"));
        write_atomic(&manifest_path, manifest.as_bytes())?;
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a split manifest, mapping surfaces back to ids and checking stored
/// frame counts. Utterance ids must be unique.
pub fn load_manifest(
    data_dir: impl AsRef<Path>,
    split: &str,
    vocab: &Vocabulary,
) -> Result<Vec<ManifestEntry>> {
    let data_dir = data_dir.as_ref();
    let path = data_dir.join(format!("{split}.tsv"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fmt = |reason: String| Error::Format {
            path: path.display().to_string(),
            reason: format!("line {}: {reason}", lineno + 1),
        };
        let mut parts = line.splitn(3, '\t');
        let utt_id = parts.next().unwrap_or_default();
        let rel = parts
            .next()
            .ok_or_else(|| fmt("missing feature path".into()))?;
        let transcript = parts
            .next()
            .ok_or_else(|| fmt("missing transcript".into()))?;
        if !seen.insert(utt_id.to_string()) {
            return Err(Error::DuplicateId(utt_id.to_string()));
        }
        let mut ids = Vec::new();
        for surface in transcript.split_whitespace() {
            let id = vocab.id_of(surface).ok_or_else(|| {
                fmt(format!("token {surface:?} is not in the vocabulary"))
            })?;
            ids.push(id);
        }
        let feats = read_features(data_dir.join(rel))?;
        entries.push(ManifestEntry {
            utt_id: utt_id.to_string(),
            feature_path: rel.to_string(),
            tokens: LabelSeq::new(ids)?,
            frames: feats.dims2().0,
        });
    }
    Ok(entries)
}
