//! Run configuration: a flat key=value format with strict unknown-key
//! rejection, and a resolved-snapshot writer whose output parses back to the
//! identical configuration.
//!
//! Defaults that restate a constant of the published method (attention
//! heads, dropout, alpha, gamma, MWE epochs, N-best size, checkpoint-average
//! count, decode threshold, max iterations, beam size) are left unmarked in
//! the snapshot; every other default is this repo's own choice and carries a
//! `# repo default` flag.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::SynthSpec;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::masking::MaskStrategy;
use crate::model::{DecoderMode, ModelConfig};
use crate::vocab::Vocabulary;

/// Mask regime selected for CE training. `C` trains with a random plan plus
/// a second pass on its complement; the rest map directly onto
/// [`MaskStrategy`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TrainMask {
    R,
    C,
    E,
    M,
    S,
    F,
}

impl TrainMask {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "R" => Some(Self::R),
            "C" => Some(Self::C),
            "E" => Some(Self::E),
            "M" => Some(Self::M),
            "S" => Some(Self::S),
            "F" => Some(Self::F),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::R => "R",
            Self::C => "C",
            Self::E => "E",
            Self::M => "M",
            Self::S => "S",
            Self::F => "F",
        }
    }

    /// Planning strategy used for the primary decoder pass.
    pub fn plan_strategy(self) -> MaskStrategy {
        match self {
            Self::R | Self::C => MaskStrategy::Random,
            Self::E => MaskStrategy::English,
            Self::M => MaskStrategy::Mandarin,
            Self::S => MaskStrategy::Second,
            Self::F => MaskStrategy::First,
        }
    }

    /// Whether training adds the complement-pass term.
    pub fn is_complementary(self) -> bool {
        matches!(self, Self::C)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum NbestMode {
    Output,
    Input,
}

impl NbestMode {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "output" => Some(Self::Output),
            "input" => Some(Self::Input),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Output => "output",
            Self::Input => "input",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // paths
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    // synthetic corpus
    pub data_seed: u64,
    pub en_vocab: usize,
    pub cn_vocab: usize,
    pub feat_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub noise_sigma: f64,
    pub switch_prob: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub train_count: usize,
    pub valid_count: usize,
    pub test_count: usize,
    // model
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub decoder_mode: DecoderMode,
    // training
    pub mask_strategy: TrainMask,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: u64,
    pub lr_scale: f64,
    pub seed: u64,
    pub avg_last: usize,
    pub spec_augment: bool,
    pub sa_time_masks: usize,
    pub sa_time_width: usize,
    pub sa_freq_masks: usize,
    pub sa_freq_width: usize,
    // minimum-word-error fine-tuning
    pub mwe_epochs: usize,
    pub nbest: usize,
    pub gamma: f64,
    pub nbest_mode: NbestMode,
    // decoding
    pub threshold: f64,
    pub max_iterations: usize,
    pub beam_size: usize,
    pub max_len_factor: f64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "out".into(),
            data_seed: 0,
            en_vocab: 20,
            cn_vocab: 20,
            feat_dim: 16,
            frames_min: 2,
            frames_max: 4,
            noise_sigma: 0.3,
            switch_prob: 0.3,
            len_min: 3,
            len_max: 10,
            train_count: 2000,
            valid_count: 200,
            test_count: 200,
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 64,
            heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            decoder_mode: DecoderMode::Cmlm,
            mask_strategy: TrainMask::R,
            alpha: 0.3,
            epochs: 30,
            batch_size: 16,
            warmup: 1000,
            lr_scale: 1.0,
            seed: 0,
            avg_last: 5,
            spec_augment: false,
            sa_time_masks: 2,
            sa_time_width: 4,
            sa_freq_masks: 2,
            sa_freq_width: 4,
            mwe_epochs: 5,
            nbest: 4,
            gamma: 0.01,
            nbest_mode: NbestMode::Output,
            threshold: 0.9,
            max_iterations: 10,
            beam_size: 10,
            max_len_factor: 1.0,
            workers: 1,
        }
    }
}

/// Canonical key order for snapshots; the bool marks method constants
/// (unflagged in the snapshot).
const KEYS: &[(&str, bool)] = &[
    ("data_dir", false),
    ("out_dir", false),
    ("data_seed", false),
    ("en_vocab", false),
    ("cn_vocab", false),
    ("feat_dim", false),
    ("frames_min", false),
    ("frames_max", false),
    ("noise_sigma", false),
    ("switch_prob", false),
    ("len_min", false),
    ("len_max", false),
    ("train_count", false),
    ("valid_count", false),
    ("test_count", false),
    ("encoder_layers", false),
    ("decoder_layers", false),
    ("d_model", false),
    ("heads", true),
    ("ffn_dim", false),
    ("dropout", true),
    ("decoder_mode", false),
    ("mask_strategy", false),
    ("alpha", true),
    ("epochs", false),
    ("batch_size", false),
    ("warmup", false),
    ("lr_scale", false),
    ("seed", false),
    ("avg_last", true),
    ("spec_augment", false),
    ("sa_time_masks", false),
    ("sa_time_width", false),
    ("sa_freq_masks", false),
    ("sa_freq_width", false),
    ("mwe_epochs", true),
    ("nbest", true),
    ("gamma", true),
    ("nbest_mode", false),
    ("threshold", true),
    ("max_iterations", true),
    ("beam_size", true),
    ("max_len_factor", false),
    ("workers", false),
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Set one key from its textual value; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = value.into(),
            "out_dir" => self.out_dir = value.into(),
            "data_seed" => self.data_seed = parse_num(key, value)?,
            "en_vocab" => self.en_vocab = parse_num(key, value)?,
            "cn_vocab" => self.cn_vocab = parse_num(key, value)?,
            "feat_dim" => self.feat_dim = parse_num(key, value)?,
            "frames_min" => self.frames_min = parse_num(key, value)?,
            "frames_max" => self.frames_max = parse_num(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_num(key, value)?,
            "switch_prob" => self.switch_prob = parse_num(key, value)?,
            "len_min" => self.len_min = parse_num(key, value)?,
            "len_max" => self.len_max = parse_num(key, value)?,
            "train_count" => self.train_count = parse_num(key, value)?,
            "valid_count" => self.valid_count = parse_num(key, value)?,
            "test_count" => self.test_count = parse_num(key, value)?,
            "encoder_layers" => self.encoder_layers = parse_num(key, value)?,
            "decoder_layers" => self.decoder_layers = parse_num(key, value)?,
            "d_model" => self.d_model = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "ffn_dim" => self.ffn_dim = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "decoder_mode" => {
                self.decoder_mode = match value {
                    "cmlm" => DecoderMode::Cmlm,
                    "causal" => DecoderMode::Causal,
                    _ => {
                        return Err(Error::Config(format!(
                            "decoder_mode must be cmlm or causal, got {value:?}"
                        )))
                    }
                }
            }
            "mask_strategy" => {
                self.mask_strategy = TrainMask::parse(value).ok_or_else(|| {
                    Error::Config(format!(
                        "mask_strategy must be one of R C E M S F, got {value:?}"
                    ))
                })?
            }
            "alpha" => self.alpha = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "warmup" => self.warmup = parse_num(key, value)?,
            "lr_scale" => self.lr_scale = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "avg_last" => self.avg_last = parse_num(key, value)?,
            "spec_augment" => {
                self.spec_augment = match value {
                    "true" => true,
                    "false" => false,
                    _ => {
                        return Err(Error::Config(format!(
                            "spec_augment must be true or false, got {value:?}"
                        )))
                    }
                }
            }
            "sa_time_masks" => self.sa_time_masks = parse_num(key, value)?,
            "sa_time_width" => self.sa_time_width = parse_num(key, value)?,
            "sa_freq_masks" => self.sa_freq_masks = parse_num(key, value)?,
            "sa_freq_width" => self.sa_freq_width = parse_num(key, value)?,
            "mwe_epochs" => self.mwe_epochs = parse_num(key, value)?,
            "nbest" => self.nbest = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "nbest_mode" => {
                self.nbest_mode = NbestMode::parse(value).ok_or_else(|| {
                    Error::Config(format!("nbest_mode must be output or input, got {value:?}"))
                })?
            }
            "threshold" => self.threshold = parse_num(key, value)?,
            "max_iterations" => self.max_iterations = parse_num(key, value)?,
            "beam_size" => self.beam_size = parse_num(key, value)?,
            "max_len_factor" => self.max_len_factor = parse_num(key, value)?,
            "workers" => self.workers = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "data_seed" => self.data_seed.to_string(),
            "en_vocab" => self.en_vocab.to_string(),
            "cn_vocab" => self.cn_vocab.to_string(),
            "feat_dim" => self.feat_dim.to_string(),
            "frames_min" => self.frames_min.to_string(),
            "frames_max" => self.frames_max.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "switch_prob" => self.switch_prob.to_string(),
            "len_min" => self.len_min.to_string(),
            "len_max" => self.len_max.to_string(),
            "train_count" => self.train_count.to_string(),
            "valid_count" => self.valid_count.to_string(),
            "test_count" => self.test_count.to_string(),
            "encoder_layers" => self.encoder_layers.to_string(),
            "decoder_layers" => self.decoder_layers.to_string(),
            "d_model" => self.d_model.to_string(),
            "heads" => self.heads.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "dropout" => self.dropout.to_string(),
            "decoder_mode" => match self.decoder_mode {
                DecoderMode::Cmlm => "cmlm".into(),
                DecoderMode::Causal => "causal".into(),
            },
            "mask_strategy" => self.mask_strategy.as_str().into(),
            "alpha" => self.alpha.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "warmup" => self.warmup.to_string(),
            "lr_scale" => self.lr_scale.to_string(),
            "seed" => self.seed.to_string(),
            "avg_last" => self.avg_last.to_string(),
            "spec_augment" => self.spec_augment.to_string(),
            "sa_time_masks" => self.sa_time_masks.to_string(),
            "sa_time_width" => self.sa_time_width.to_string(),
            "sa_freq_masks" => self.sa_freq_masks.to_string(),
            "sa_freq_width" => self.sa_freq_width.to_string(),
            "mwe_epochs" => self.mwe_epochs.to_string(),
            "nbest" => self.nbest.to_string(),
            "gamma" => self.gamma.to_string(),
            "nbest_mode" => self.nbest_mode.as_str().into(),
            "threshold" => self.threshold.to_string(),
            "max_iterations" => self.max_iterations.to_string(),
            "beam_size" => self.beam_size.to_string(),
            "max_len_factor" => self.max_len_factor.to_string(),
            "workers" => self.workers.to_string(),
            _ => unreachable!("get over the KEYS table only"),
        }
    }

    /// Apply `key=value` lines from a file. `#` starts a comment; blank
    /// lines are ignored.
    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "{}:{}: expected key=value, got {raw:?}",
                path.display(),
                lineno + 1
            )))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved key=value dump; parses back to the same configuration.
    pub fn snapshot(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (key, method_constant) in KEYS {
            let _ = write!(out, "{key}={}", self.get(key));
            if !method_constant {
                out.push_str("  # repo default");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.snapshot()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_spec().validate()?;
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("alpha and gamma must lie in [0,1]".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.avg_last == 0 {
            return Err(Error::Config(
                "epochs, batch_size and avg_last must be >= 1".into(),
            ));
        }
        if self.warmup == 0 || self.lr_scale <= 0.0 {
            return Err(Error::Config("warmup must be >= 1 and lr_scale positive".into()));
        }
        if self.mwe_epochs == 0 || self.nbest < 2 {
            return Err(Error::Config("mwe_epochs must be >= 1 and nbest >= 2".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.decode_config().validate()?;
        // model-shape checks that do not need the vocabulary
        let probe = self.model_config_for_vocab_size(1);
        probe.validate()
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            en_vocab: self.en_vocab,
            cn_vocab: self.cn_vocab,
            feat_dim: self.feat_dim,
            frames_per_token: (self.frames_min, self.frames_max),
            noise_sigma: self.noise_sigma,
            switch_prob: self.switch_prob,
            utt_len: (self.len_min, self.len_max),
            train_count: self.train_count,
            valid_count: self.valid_count,
            test_count: self.test_count,
            seed: self.data_seed,
        }
    }

    fn model_config_for_vocab_size(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            d_model: self.d_model,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            feat_dim: self.feat_dim,
            vocab,
            decoder_mode: self.decoder_mode,
            mask_id: vocab + 1,
            eos_id: vocab + 2,
        }
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        self.model_config_for_vocab_size(vocab.size())
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            confidence_threshold: self.threshold,
            max_iterations: self.max_iterations,
            beam_size: self.beam_size,
            max_len_factor: self.max_len_factor,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.set("epochs", "7").unwrap();
        cfg.set("mask_strategy", "F").unwrap();
        cfg.set("gamma", "0.25").unwrap();
        cfg.set("decoder_mode", "causal").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        cfg.write_snapshot(&path).unwrap();
        let reparsed = RunConfig::from_file(&path).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("learning_rate", "0.1").unwrap_err();
        assert!(err.to_string().contains("unknown configuration key"));
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("epochs", "many").is_err());
        assert!(cfg.set("decoder_mode", "bidirectional").is_err());
        assert!(cfg.set("mask_strategy", "X").is_err());
    }

    #[test]
    fn every_key_is_settable_and_flagged_consistently() {
        let cfg = RunConfig::default();
        let snapshot = cfg.snapshot();
        for (key, method_constant) in KEYS {
            let line = snapshot
                .lines()
                .find(|l| l.starts_with(&format!("{key}=")))
                .unwrap_or_else(|| panic!("snapshot is missing {key}"));
            assert_eq!(
                !line.contains("# repo default"),
                *method_constant,
                "flag mismatch for {key}"
            );
        }
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let mut cfg = RunConfig::default();
        cfg.set("alpha", "1.5").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("nbest", "1").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("frames_min", "5").unwrap();
        cfg.set("frames_max", "3").unwrap();
        assert!(cfg.validate().is_err());
    }
}
