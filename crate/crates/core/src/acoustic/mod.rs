//! Acoustic-model abstraction: grouped parameters with snapshot/restore,
//! checkpoint I/O, two small reference models (frame-synchronous and
//! autoregressive), and source-domain pre-training.

pub mod ar_model;
pub mod ctc_model;
pub mod encoder;
pub mod params;
pub mod train;

pub use ar_model::{ArCache, ArModel, ArSession};
pub use ctc_model::{CtcCache, CtcModel};
pub use encoder::TrunkDims;
pub use params::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Gradients, ModelSnapshot,
    ParamArray, ParamGroup, ParamSet,
};
pub use train::{train_source, TrainingConfig, TrainingReport};

use crate::types::{LogitMatrix, TokenSequence, Utterance, Vocabulary};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("numerical overflow in forward pass")]
    NumericalOverflow,
    #[error("snapshot shape mismatch")]
    SnapshotShapeMismatch,
    #[error("blank not in AR output space")]
    BlankInPrefix,
    #[error("operation requires a {required} model")]
    WrongMode { required: &'static str },
    #[error(
        "vocabulary size mismatch: checkpoint has {checkpoint} classes, vocabulary has {vocab}"
    )]
    VocabSizeMismatch { checkpoint: usize, vocab: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model: {0}")]
    Invalid(String),
}

/// How the model emits scores: one row per encoder frame, or one row per
/// output token conditioned on the emitted prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    FrameSynchronous,
    Autoregressive,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::FrameSynchronous => write!(f, "frame_synchronous"),
            Mode::Autoregressive => write!(f, "autoregressive"),
        }
    }
}

/// Either reference model behind one interface.
#[derive(Clone, Debug)]
pub enum ReferenceModel {
    FrameSynchronous(CtcModel),
    Autoregressive(ArModel),
}

impl ReferenceModel {
    pub fn new_ctc(vocab: &Vocabulary, seed: u64) -> Self {
        ReferenceModel::FrameSynchronous(CtcModel::new(vocab, seed))
    }

    pub fn new_ar(vocab: &Vocabulary, seed: u64) -> Self {
        ReferenceModel::Autoregressive(ArModel::new(vocab, seed))
    }

    pub fn mode(&self) -> Mode {
        match self {
            ReferenceModel::FrameSynchronous(_) => Mode::FrameSynchronous,
            ReferenceModel::Autoregressive(_) => Mode::Autoregressive,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            ReferenceModel::FrameSynchronous(m) => m.vocab(),
            ReferenceModel::Autoregressive(m) => m.vocab(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            ReferenceModel::FrameSynchronous(m) => m.params(),
            ReferenceModel::Autoregressive(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            ReferenceModel::FrameSynchronous(m) => m.params_mut(),
            ReferenceModel::Autoregressive(m) => m.params_mut(),
        }
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        self.params().snapshot()
    }

    pub fn restore(&mut self, snapshot: &ModelSnapshot) -> Result<(), ModelError> {
        self.params_mut().restore(snapshot)
    }

    /// Frame logits; frame-synchronous models only.
    pub fn forward_frames(&self, utt: &Utterance) -> Result<LogitMatrix, ModelError> {
        match self {
            ReferenceModel::FrameSynchronous(m) => m.forward_frames(utt),
            ReferenceModel::Autoregressive(_) => Err(ModelError::WrongMode {
                required: "frame_synchronous",
            }),
        }
    }

    /// Next-token distribution after a prefix; autoregressive models only.
    pub fn score_step(
        &self,
        utt: &Utterance,
        prefix: &TokenSequence,
    ) -> Result<Vec<f64>, ModelError> {
        match self {
            ReferenceModel::Autoregressive(m) => m.score_step(utt, prefix),
            ReferenceModel::FrameSynchronous(_) => Err(ModelError::WrongMode {
                required: "autoregressive",
            }),
        }
    }

    /// Encoder output length for an input frame count.
    pub fn output_len(&self, frames: usize) -> usize {
        match self {
            ReferenceModel::FrameSynchronous(m) => m.output_len(frames),
            ReferenceModel::Autoregressive(m) => m.encoder_len(frames),
        }
    }

    /// Published group choice: adapt the feature extractor of a
    /// frame-synchronous model, the encoder of an autoregressive one.
    pub fn default_trainable_groups(&self) -> BTreeSet<String> {
        let name = match self.mode() {
            Mode::FrameSynchronous => "feature_extractor",
            Mode::Autoregressive => "encoder",
        };
        [name.to_string()].into_iter().collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        save_checkpoint(path, self.params())
    }

    /// Load a checkpoint, picking the model kind from its parameter groups.
    pub fn load(path: &std::path::Path, vocab: &Vocabulary) -> Result<Self, ModelError> {
        let params = load_checkpoint(path)?;
        Self::from_params(vocab, params)
    }

    pub fn from_params(vocab: &Vocabulary, params: ParamSet) -> Result<Self, ModelError> {
        if params.group("decoder").is_some() {
            Ok(ReferenceModel::Autoregressive(ArModel::from_params(
                vocab, params,
            )?))
        } else {
            Ok(ReferenceModel::FrameSynchronous(CtcModel::from_params(
                vocab, params,
            )?))
        }
    }
}
