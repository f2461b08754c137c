//! Domain types shared by every module: vocabulary, utterances, token
//! sequences, logit matrices and scored hypotheses.

use crate::mat::{logsumexp, Mat};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TypeError {
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("utterance {id}: {reason}")]
    Utterance { id: String, reason: String },
    #[error("token sequence: {0}")]
    TokenSequence(String),
    #[error("logit matrix: {0}")]
    LogitMatrix(String),
}

/// Token inventory with a designated blank token.
///
/// By convention the blank sits at index 0 in every vocabulary built by this
/// crate; the field stays explicit so externally defined inventories work too.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    blank_index: usize,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, blank_index: usize) -> Result<Self, TypeError> {
        if tokens.len() < 2 {
            return Err(TypeError::Vocabulary("size must be at least 2".into()));
        }
        if blank_index >= tokens.len() {
            return Err(TypeError::Vocabulary(format!(
                "blank_index {blank_index} out of range for size {}",
                tokens.len()
            )));
        }
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(TypeError::Vocabulary(format!("token {i} is empty")));
            }
            if tokens[..i].contains(t) {
                return Err(TypeError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            blank_index,
        })
    }

    /// The fixed inventory used by the reference models and synthetic corpora:
    /// blank, space, then ten letters.
    pub fn reference() -> Self {
        let mut tokens = vec!["_".to_string(), " ".to_string()];
        for c in 'a'..='j' {
            tokens.push(c.to_string());
        }
        Vocabulary::new(tokens, 0).expect("reference vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn blank_index(&self) -> usize {
        self.blank_index
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    /// Render a collapsed sequence as a transcript string.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.ids()
            .iter()
            .map(|&id| self.tokens[id].as_str())
            .collect()
    }

    /// Parse a transcript into token ids by greedy longest match.
    /// Fails on text not covered by the non-blank inventory.
    pub fn encode(&self, text: &str) -> Result<TokenSequence, TypeError> {
        let mut ids = Vec::new();
        let mut rest = text;
        'outer: while !rest.is_empty() {
            let mut best: Option<(usize, usize)> = None;
            for (id, tok) in self.tokens.iter().enumerate() {
                if id != self.blank_index
                    && rest.starts_with(tok.as_str())
                    && best.is_none_or(|(_, len)| tok.len() > len)
                {
                    best = Some((id, tok.len()));
                }
            }
            if let Some((id, len)) = best {
                ids.push(id);
                rest = &rest[len..];
                continue 'outer;
            }
            return Err(TypeError::TokenSequence(format!(
                "unencodable text at {:?}",
                rest.chars().next().unwrap()
            )));
        }
        Ok(TokenSequence::new(ids))
    }
}

/// A sequence of token indices. Collapsed transcripts never contain blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSequence { ids }
    }

    pub fn empty() -> Self {
        TokenSequence { ids: Vec::new() }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: usize) {
        self.ids.push(id);
    }

    pub fn validate(&self, vocab: &Vocabulary, allow_blank: bool) -> Result<(), TypeError> {
        for &id in &self.ids {
            if id >= vocab.size() {
                return Err(TypeError::TokenSequence(format!(
                    "id {id} out of range for vocabulary of size {}",
                    vocab.size()
                )));
            }
            if !allow_blank && id == vocab.blank_index() {
                return Err(TypeError::TokenSequence(
                    "blank not allowed in collapsed sequence".into(),
                ));
            }
        }
        Ok(())
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(ids: Vec<usize>) -> Self {
        TokenSequence::new(ids)
    }
}

/// One test utterance: precomputed acoustic features plus an optional
/// reference transcript used only for evaluation, never for adaptation.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub features: Mat,
    pub reference: Option<String>,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        features: Mat,
        reference: Option<String>,
    ) -> Result<Self, TypeError> {
        let id = id.into();
        if features.rows() == 0 || features.cols() == 0 {
            return Err(TypeError::Utterance {
                id,
                reason: "features must have at least one frame and one dimension".into(),
            });
        }
        if !features.all_finite() {
            return Err(TypeError::Utterance {
                id,
                reason: "non-finite feature value".into(),
            });
        }
        Ok(Utterance {
            id,
            features,
            reference,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// L x C matrix of log-domain scores. `normalized` marks that every row is a
/// log-probability vector (row logsumexp = 0 within 1e-6).
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix {
    pub values: Mat,
    pub normalized: bool,
}

impl LogitMatrix {
    /// Wrap raw scores without normalizing.
    pub fn raw(values: Mat) -> Self {
        LogitMatrix {
            values,
            normalized: false,
        }
    }

    /// Apply a row-wise log-softmax and mark the matrix normalized.
    pub fn normalize(mut values: Mat) -> Self {
        for i in 0..values.rows() {
            crate::mat::log_softmax_row(values.row_mut(i));
        }
        LogitMatrix {
            values,
            normalized: true,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn classes(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn check(&self) -> Result<(), TypeError> {
        if !self.values.all_finite() {
            return Err(TypeError::LogitMatrix("non-finite entry".into()));
        }
        if self.normalized {
            for i in 0..self.rows() {
                let z = logsumexp(self.row(i));
                if z.abs() > 1e-6 {
                    return Err(TypeError::LogitMatrix(format!(
                        "row {i} logsumexp = {z:e}, expected 0"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A candidate transcript with its acoustic score, language-model score and
/// the fused score used for ranking. The fusion weight is carried along so
/// the consistency fused = am + lambda_lm * lm stays checkable.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub sequence: TokenSequence,
    pub am_score: f64,
    pub lm_score: f64,
    pub lambda_lm: f64,
    pub fused_score: f64,
}

impl Hypothesis {
    pub fn new(sequence: TokenSequence, am_score: f64, lm_score: f64, lambda_lm: f64) -> Self {
        Hypothesis {
            sequence,
            am_score,
            lm_score,
            lambda_lm,
            fused_score: am_score + lambda_lm * lm_score,
        }
    }
}
