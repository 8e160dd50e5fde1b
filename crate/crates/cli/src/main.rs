//! Command-line driver: `gen-data`, `train`, `mwe-train`, `decode`, `score`
//! and `rtf` subcommands over the core pipeline.
//!
//! Every subcommand accepts `--config FILE` (key=value lines) plus one flag
//! per configuration key; flags override the file, which overrides the
//! defaults. Exit code is 0 on success; failures print a single
//! machine-readable line `error: category=<slug>: <message>` and exit 1.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use csnat_core::config::RunConfig;
use csnat_core::error::{Error, Result};
use csnat_core::model::DecoderMode;
use csnat_core::pipeline;

#[derive(Parser)]
#[command(
    name = "csnat",
    about = "CTC-mask non-autoregressive Transformer ASR for code-switching",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides mirroring the configuration keys (kebab-case flags for the
/// snake_case keys). Values are passed through the same parser as the file
/// format, so errors read identically.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    data_seed: Option<String>,
    #[arg(long)]
    en_vocab: Option<String>,
    #[arg(long)]
    cn_vocab: Option<String>,
    #[arg(long)]
    feat_dim: Option<String>,
    #[arg(long)]
    frames_min: Option<String>,
    #[arg(long)]
    frames_max: Option<String>,
    #[arg(long)]
    noise_sigma: Option<String>,
    #[arg(long)]
    switch_prob: Option<String>,
    #[arg(long)]
    len_min: Option<String>,
    #[arg(long)]
    len_max: Option<String>,
    #[arg(long)]
    train_count: Option<String>,
    #[arg(long)]
    valid_count: Option<String>,
    #[arg(long)]
    test_count: Option<String>,
    #[arg(long)]
    encoder_layers: Option<String>,
    #[arg(long)]
    decoder_layers: Option<String>,
    #[arg(long)]
    d_model: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    ffn_dim: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    decoder_mode: Option<String>,
    #[arg(long)]
    mask_strategy: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    warmup: Option<String>,
    #[arg(long)]
    lr_scale: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    avg_last: Option<String>,
    #[arg(long)]
    spec_augment: Option<String>,
    #[arg(long)]
    sa_time_masks: Option<String>,
    #[arg(long)]
    sa_time_width: Option<String>,
    #[arg(long)]
    sa_freq_masks: Option<String>,
    #[arg(long)]
    sa_freq_width: Option<String>,
    #[arg(long)]
    mwe_epochs: Option<String>,
    #[arg(long)]
    nbest: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    nbest_mode: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    max_iterations: Option<String>,
    #[arg(long)]
    beam_size: Option<String>,
    #[arg(long)]
    max_len_factor: Option<String>,
    #[arg(long)]
    workers: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let overrides: [(&str, &Option<String>); 44] = [
            ("data_dir", &self.data_dir),
            ("out_dir", &self.out_dir),
            ("data_seed", &self.data_seed),
            ("en_vocab", &self.en_vocab),
            ("cn_vocab", &self.cn_vocab),
            ("feat_dim", &self.feat_dim),
            ("frames_min", &self.frames_min),
            ("frames_max", &self.frames_max),
            ("noise_sigma", &self.noise_sigma),
            ("switch_prob", &self.switch_prob),
            ("len_min", &self.len_min),
            ("len_max", &self.len_max),
            ("train_count", &self.train_count),
            ("valid_count", &self.valid_count),
            ("test_count", &self.test_count),
            ("encoder_layers", &self.encoder_layers),
            ("decoder_layers", &self.decoder_layers),
            ("d_model", &self.d_model),
            ("heads", &self.heads),
            ("ffn_dim", &self.ffn_dim),
            ("dropout", &self.dropout),
            ("decoder_mode", &self.decoder_mode),
            ("mask_strategy", &self.mask_strategy),
            ("alpha", &self.alpha),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("warmup", &self.warmup),
            ("lr_scale", &self.lr_scale),
            ("seed", &self.seed),
            ("avg_last", &self.avg_last),
            ("spec_augment", &self.spec_augment),
            ("sa_time_masks", &self.sa_time_masks),
            ("sa_time_width", &self.sa_time_width),
            ("sa_freq_masks", &self.sa_freq_masks),
            ("sa_freq_width", &self.sa_freq_width),
            ("mwe_epochs", &self.mwe_epochs),
            ("nbest", &self.nbest),
            ("gamma", &self.gamma),
            ("nbest_mode", &self.nbest_mode),
            ("threshold", &self.threshold),
            ("max_iterations", &self.max_iterations),
            ("beam_size", &self.beam_size),
            ("max_len_factor", &self.max_len_factor),
            ("workers", &self.workers),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic code-switching corpus.
    GenData {
        #[command(flatten)]
        overrides: ConfigArgs,
    },
    /// Cross-entropy training with the configured mask strategy.
    Train {
        #[command(flatten)]
        overrides: ConfigArgs,
    },
    /// Minimum-word-error fine-tuning from a CE checkpoint.
    MweTrain {
        /// Initial checkpoint (usually the averaged CE model).
        #[arg(long)]
        init: PathBuf,
        #[command(flatten)]
        overrides: ConfigArgs,
    },
    /// Decode a split; writes hypotheses and an RTF report.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to decode: train, valid or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        overrides: ConfigArgs,
    },
    /// Score a hypothesis file against references (a manifest works too).
    Score {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        /// Vocabulary file (surface<TAB>lang).
        #[arg(long)]
        vocab: PathBuf,
        /// Optional report file; the report always prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-thread decode timing; optionally contrast a causal-mode
    /// checkpoint on the same split.
    Rtf {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Causal-mode checkpoint for the autoregressive contrast.
        #[arg(long)]
        at_checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        overrides: ConfigArgs,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { overrides } => {
            let cfg = overrides.resolve()?;
            pipeline::run_gen_data(&cfg)?;
            println!("corpus written to {}", cfg.data_dir.display());
        }
        Command::Train { overrides } => {
            let cfg = overrides.resolve()?;
            let report = pipeline::run_train(&cfg)?;
            let last = report.rows.last().expect("at least one epoch");
            println!(
                "trained {} epochs: valid acc {:.4}, valid loss {:.4}",
                report.rows.len(),
                last.valid_acc,
                last.valid_loss
            );
            println!("final checkpoint: {}", report.final_checkpoint.display());
            println!("curves: {}", report.curves.display());
        }
        Command::MweTrain { init, overrides } => {
            let cfg = overrides.resolve()?;
            let report = pipeline::run_mwe_train(&cfg, &init)?;
            println!(
                "mwe fine-tuning done ({} epochs, {} utterances skipped for empty greedy output)",
                report.epoch_losses.len(),
                report.skipped_empty_greedy
            );
            println!("checkpoint: {}", report.checkpoint.display());
            println!("n-best log: {}", report.nbest_log.display());
        }
        Command::Decode {
            checkpoint,
            split,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            let report = pipeline::run_decode(&cfg, &checkpoint, &split)?;
            println!(
                "decoded {} utterances with {} (rtf {:.4}, {})",
                report.utterances,
                report.decoder,
                report.rtf,
                if report.single_thread { "single-thread" } else { "worker pool" }
            );
            println!("hypotheses: {}", report.hyp_path.display());
        }
        Command::Score {
            refs,
            hyps,
            vocab,
            out,
        } => {
            let report = pipeline::run_score(&refs, &hyps, &vocab, out.as_deref())?;
            print!("{}", report.to_key_values());
        }
        Command::Rtf {
            checkpoint,
            at_checkpoint,
            split,
            overrides,
        } => {
            let mut cfg = overrides.resolve()?;
            cfg.workers = 1; // RTF numbers are single-thread by definition here
            let base_out = cfg.out_dir.clone();

            let mut nat_cfg = cfg.clone();
            nat_cfg.out_dir = base_out.join("rtf-nat");
            let nat = pipeline::run_decode(&nat_cfg, &checkpoint, &split)?;
            let mut lines = format!(
                "mode=single-thread\nsplit={split}\nrtf_{}={:.6}\n",
                nat.decoder.replace('-', "_"),
                nat.rtf
            );
            if let Some(at_ckpt) = at_checkpoint {
                let mut at_cfg = cfg.clone();
                at_cfg.decoder_mode = DecoderMode::Causal;
                at_cfg.out_dir = base_out.join("rtf-at");
                let at = pipeline::run_decode(&at_cfg, &at_ckpt, &split)?;
                lines.push_str(&format!("rtf_at_beam={:.6}\n", at.rtf));
                lines.push_str(&format!("speedup={:.4}\n", at.rtf / nat.rtf));
            }
            std::fs::create_dir_all(&base_out).map_err(|e| Error::io(&base_out, e))?;
            let report_path = base_out.join("rtf_report.txt");
            std::fs::write(&report_path, &lines).map_err(|e| Error::io(&report_path, e))?;
            print!("{lines}");
            println!("report: {}", report_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: category={}: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
