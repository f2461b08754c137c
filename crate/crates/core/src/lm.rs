//! Character-level n-gram language model for shallow fusion.
//!
//! The model scores the next token given up to n-1 preceding tokens with
//! add-k smoothed maximum-likelihood conditionals; contexts never seen in
//! training back off to the unigram distribution. End-of-sentence
//! probability is reported in the blank slot of the output row, since blank
//! never occurs in a transcript: an autoregressive consumer reads that slot
//! as the stop probability, a frame-synchronous one never queries it.

use crate::types::{TokenSequence, Vocabulary};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use thiserror::Error;

const MAGIC: &str = "SGEML1";
const LN_10: f64 = std::f64::consts::LN_10;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("lm fit: {0}")]
    Fit(String),
    #[error("lm file: {0}")]
    Format(String),
    #[error("lm io: {0}")]
    Io(#[from] std::io::Error),
}

/// N-gram LM over the non-blank vocabulary plus an end-of-sentence marker.
#[derive(Clone, Debug)]
pub struct NGramLM {
    order: usize,
    smoothing_k: f64,
    /// Log-probability row (length C) for the empty context, i.e. the
    /// smoothed unigram distribution over all training positions.
    unigram: Vec<f64>,
    /// Log-probability rows keyed by non-empty contexts of length < n.
    table: BTreeMap<Vec<usize>, Vec<f64>>,
    classes: usize,
    blank_index: usize,
}

impl NGramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing_k(&self) -> f64 {
        self.smoothing_k
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn contexts(&self) -> usize {
        self.table.len() + 1
    }

    /// Maximum-likelihood fit with additive smoothing (default k = 0.1).
    ///
    /// Each position contributes a count to the unigram row and, when it has
    /// at least one predecessor, to the row of its context: the last
    /// min(i, n-1) tokens. One end-of-sentence event is counted per
    /// transcript.
    pub fn fit(
        transcripts: &[TokenSequence],
        n: usize,
        vocab: &Vocabulary,
        smoothing_k: f64,
    ) -> Result<Self, LmError> {
        if n < 1 {
            return Err(LmError::Fit("order must be at least 1".into()));
        }
        if transcripts.is_empty() {
            return Err(LmError::Fit("no transcripts".into()));
        }
        if !(smoothing_k > 0.0 && smoothing_k < 1.0) {
            return Err(LmError::Fit("smoothing mass must lie in (0, 1)".into()));
        }
        let classes = vocab.size();
        let blank = vocab.blank_index();
        let mut uni = vec![0u64; classes];
        let mut counts: BTreeMap<Vec<usize>, Vec<u64>> = BTreeMap::new();
        for ts in transcripts {
            ts.validate(vocab, false)
                .map_err(|e| LmError::Fit(e.to_string()))?;
            let ids = ts.ids();
            for i in 0..=ids.len() {
                // Position len() is the end-of-sentence event.
                let target = if i == ids.len() { blank } else { ids[i] };
                uni[target] += 1;
                let ctx_len = i.min(n - 1);
                if ctx_len > 0 {
                    let ctx = ids[i - ctx_len..i].to_vec();
                    counts.entry(ctx).or_insert_with(|| vec![0; classes])[target] += 1;
                }
            }
        }
        let smooth = |cnt: &[u64]| -> Vec<f64> {
            let total: u64 = cnt.iter().sum();
            let denom = total as f64 + smoothing_k * classes as f64;
            cnt.iter()
                .map(|&c| ((c as f64 + smoothing_k) / denom).ln())
                .collect()
        };
        let unigram = smooth(&uni);
        let table = counts
            .into_iter()
            .map(|(ctx, cnt)| (ctx, smooth(&cnt)))
            .collect();
        Ok(NGramLM {
            order: n,
            smoothing_k,
            unigram,
            table,
            classes,
            blank_index: blank,
        })
    }

    /// Normalized log-distribution over next tokens given a context. Total
    /// function: the context is truncated to its last n-1 tokens and unseen
    /// contexts fall back to the unigram row.
    pub fn score_next(&self, context: &TokenSequence) -> &[f64] {
        let ids = context.ids();
        let ctx_len = ids.len().min(self.order - 1);
        if ctx_len == 0 {
            return &self.unigram;
        }
        self.table
            .get(&ids[ids.len() - ctx_len..])
            .map_or(&self.unigram, Vec::as_slice)
    }

    /// Log-probability of extending `context` with token `next`.
    pub fn score_token(&self, context: &TokenSequence, next: usize) -> f64 {
        self.score_next(context)[next]
    }

    /// End-of-sentence log-probability after `context`.
    pub fn score_end(&self, context: &TokenSequence) -> f64 {
        self.score_next(context)[self.blank_index]
    }

    /// Verify that every stored conditional row is a distribution.
    pub fn check_normalization(&self) -> Result<(), LmError> {
        let check = |row: &[f64]| -> Result<(), LmError> {
            let sum: f64 = row.iter().map(|lp| lp.exp()).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(LmError::Format(format!("row sums to {sum}, expected 1")));
            }
            Ok(())
        };
        check(&self.unigram)?;
        for row in self.table.values() {
            check(row)?;
        }
        Ok(())
    }

    /// Write the text format: a header line, then one `context \t token \t
    /// log10 prob` line per entry in lexicographic order. The empty context
    /// renders as an empty field; tokens use [`escape_token`].
    pub fn write_to(&self, w: &mut dyn Write, vocab: &Vocabulary) -> Result<(), LmError> {
        writeln!(w, "{MAGIC} n={} k={}", self.order, self.smoothing_k)?;
        let emit = |w: &mut dyn Write, ctx: &[usize], row: &[f64]| -> Result<(), LmError> {
            let ctx_str: Vec<String> = ctx
                .iter()
                .map(|&id| escape_token(vocab, id, self.blank_index))
                .collect();
            for (tok, lp) in row.iter().enumerate() {
                writeln!(
                    w,
                    "{}\t{}\t{}",
                    ctx_str.join(" "),
                    escape_token(vocab, tok, self.blank_index),
                    lp / LN_10
                )?;
            }
            Ok(())
        };
        emit(w, &[], &self.unigram)?;
        for (ctx, row) in &self.table {
            emit(w, ctx, row)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut dyn Read, vocab: &Vocabulary) -> Result<Self, LmError> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| LmError::Format("empty file".into()))??;
        let mut order = None;
        let mut smoothing_k = 0.1;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(LmError::Format(format!("bad magic in header {header:?}")));
        }
        for p in parts {
            if let Some(v) = p.strip_prefix("n=") {
                order = Some(v.parse().map_err(|_| LmError::Format("bad order".into()))?);
            } else if let Some(v) = p.strip_prefix("k=") {
                smoothing_k = v
                    .parse()
                    .map_err(|_| LmError::Format("bad smoothing".into()))?;
            }
        }
        let order: usize = order.ok_or_else(|| LmError::Format("missing order".into()))?;
        let classes = vocab.size();
        let blank = vocab.blank_index();
        let mut unigram = vec![f64::NEG_INFINITY; classes];
        let mut table: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
        for (no, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (ctx_field, tok_field, lp_field) =
                match (fields.next(), fields.next(), fields.next()) {
                    (Some(a), Some(b), Some(c)) => (a, b, c),
                    _ => {
                        return Err(LmError::Format(format!(
                            "line {}: expected 3 fields",
                            no + 2
                        )))
                    }
                };
            let lp10: f64 = lp_field
                .parse()
                .map_err(|_| LmError::Format(format!("line {}: bad log10 value", no + 2)))?;
            let tok = unescape_token(vocab, tok_field, blank).ok_or_else(|| {
                LmError::Format(format!("line {}: unknown token {tok_field:?}", no + 2))
            })?;
            let lp = lp10 * LN_10;
            if ctx_field.is_empty() {
                unigram[tok] = lp;
            } else {
                let mut ctx = Vec::new();
                for t in ctx_field.split(' ') {
                    let id = unescape_token(vocab, t, blank).ok_or_else(|| {
                        LmError::Format(format!("line {}: unknown context token {t:?}", no + 2))
                    })?;
                    ctx.push(id);
                }
                table
                    .entry(ctx)
                    .or_insert_with(|| vec![f64::NEG_INFINITY; classes])[tok] = lp;
            }
        }
        if unigram.contains(&f64::NEG_INFINITY) {
            return Err(LmError::Format("incomplete unigram row".into()));
        }
        Ok(NGramLM {
            order,
            smoothing_k,
            unigram,
            table,
            classes,
            blank_index: blank,
        })
    }

    pub fn save(&self, path: &std::path::Path, vocab: &Vocabulary) -> Result<(), LmError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f, vocab)
    }

    pub fn load(path: &std::path::Path, vocab: &Vocabulary) -> Result<Self, LmError> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f, vocab)
    }

    /// A vacuous uniform LM, useful wherever fusion is disabled.
    pub fn uniform(vocab: &Vocabulary) -> Self {
        let classes = vocab.size();
        let lp = -(classes as f64).ln();
        NGramLM {
            order: 1,
            smoothing_k: 0.5,
            unigram: vec![lp; classes],
            table: BTreeMap::new(),
            classes,
            blank_index: vocab.blank_index(),
        }
    }
}

/// File rendering of a token id: the end-of-sentence slot is `</s>`, the
/// space token `<sp>`, everything else its literal string.
fn escape_token(vocab: &Vocabulary, id: usize, blank: usize) -> String {
    if id == blank {
        "</s>".to_string()
    } else if vocab.token(id) == " " {
        "<sp>".to_string()
    } else {
        vocab.token(id).to_string()
    }
}

fn unescape_token(vocab: &Vocabulary, s: &str, blank: usize) -> Option<usize> {
    match s {
        "</s>" => Some(blank),
        "<sp>" => vocab.index_of(" "),
        other => vocab.index_of(other),
    }
}
