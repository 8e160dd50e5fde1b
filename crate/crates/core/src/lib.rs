//! Core library: CTC-mask non-autoregressive Transformer ASR for
//! code-switching, trained and decoded on a deterministic synthetic corpus.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod error;
pub mod graph;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use corpus::SynthSpec;
pub use ctc::{LabelSeq, PosteriorGrid, BLANK};
pub use decode::{DecodeConfig, TimedResult};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId, ParamSet};
pub use masking::{CsPair, MaskPlan, MaskStrategy, PairKind};
pub use model::{average_checkpoints, DecoderMode, Model, ModelConfig};
pub use objectives::NBestList;
pub use rng::SeededRng;
pub use scoring::Alignment;
pub use tensor::Tensor;
pub use vocab::{Lang, LanguageMap, Vocabulary};
