//! Single-utterance test-time adaptation for sequence-labeling models.
//!
//! A pre-trained model is adapted to each unlabeled test utterance on the
//! fly: beam search proposes the most plausible transcript, the logits it
//! selects feed a generalized-entropy objective plus a negative-sampling
//! penalty, and a handful of optimizer steps later the model transcribes
//! that one utterance better - then resets, keeping the source knowledge
//! intact for the next one.
//!
//! Module map:
//! - [`types`] / [`config`]: domain types and the adaptation configuration.
//! - [`acoustic`]: parameter store, checkpoints, the two reference models,
//!   and source-domain pre-training.
//! - [`lm`]: character n-gram language model for shallow fusion.
//! - [`decoding`]: greedy decoding, prefix beam search, forced alignment,
//!   and logit acquisition.
//! - [`objectives`]: the unsupervised losses and their gradients.
//! - [`adaptation`]: the episodic per-utterance loop and the ablation grid.
//! - [`corpus`]: synthetic corpora, shift injection, metrics and file I/O.

pub mod acoustic;
pub mod adaptation;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod lm;
pub mod mat;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod types;

pub use acoustic::{Mode, ModelError, ModelSnapshot, ReferenceModel};
pub use adaptation::{adapt_utterance, cosine_lr, run_ablation, AdaptationResult};
pub use config::{validate_config, AdaptationConfig, DecodeProtocol};
pub use corpus::{
    make_synthetic_corpus, mix_at_snr, wer, CorpusManifest, EmissionParams, ShiftKind,
};
pub use decoding::{
    acquire_logits, beam_search, beam_search_ctc, ctc_collapse, forced_align, greedy_decode_frames,
    Acquisition,
};
pub use lm::NGramLM;
pub use objectives::{gem_loss, ns_loss, renyi_entropy, temperature_softmax};
pub use types::{Hypothesis, LogitMatrix, TokenSequence, Utterance, Vocabulary};
