//! Source-domain pre-training for the reference models: lattice
//! marginal-likelihood loss for the frame-synchronous model, teacher-forced
//! cross-entropy for the autoregressive one.

use super::{ModelError, ReferenceModel};
use crate::corpus;
use crate::decoding::{greedy_decode_ar, greedy_decode_frames};
use crate::mat::{lse2, Mat};
use crate::optim::{adamw_step, AdamState, StepOutcome};
use crate::rng::Rng;
use crate::types::{LogitMatrix, TokenSequence, Utterance};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training: {0}")]
    Invalid(String),
    /// The model collapsed numerically: the target received zero
    /// probability mass. Treated as divergence by the training loop.
    #[error("degenerate model: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Negative log marginal likelihood of `target` under frame logits, with its
/// gradient in the normalized logits (forward-backward over the lattice).
pub fn ctc_loss_grad(
    logits: &LogitMatrix,
    target: &TokenSequence,
    blank: usize,
) -> Result<(f64, Mat), TrainError> {
    let frames = logits.rows();
    let u = target.len();
    let repeats = target.ids().windows(2).filter(|w| w[0] == w[1]).count();
    if frames < (u + repeats).max(1) {
        return Err(TrainError::Invalid(format!(
            "target of {u} tokens infeasible for {frames} frames"
        )));
    }
    let states = 2 * u + 1;
    let label_at = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            target.ids()[(s - 1) / 2]
        }
    };
    let skip_ok = |s: usize| s % 2 == 1 && s >= 2 && label_at(s) != label_at(s - 2);

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![vec![neg; states]; frames];
    alpha[0][0] = logits.row(0)[blank];
    if states > 1 {
        alpha[0][1] = logits.row(0)[label_at(1)];
    }
    for t in 1..frames {
        let row = logits.row(t);
        for s in 0..states {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = lse2(acc, alpha[t - 1][s - 1]);
            }
            if skip_ok(s) {
                acc = lse2(acc, alpha[t - 1][s - 2]);
            }
            if acc > neg {
                alpha[t][s] = acc + row[label_at(s)];
            }
        }
    }
    let log_z = if states == 1 {
        alpha[frames - 1][0]
    } else {
        lse2(alpha[frames - 1][states - 1], alpha[frames - 1][states - 2])
    };
    if !log_z.is_finite() {
        return Err(TrainError::Degenerate("zero-probability target".into()));
    }

    let mut beta = vec![vec![neg; states]; frames];
    beta[frames - 1][states - 1] = logits.row(frames - 1)[label_at(states - 1)];
    if states > 1 {
        beta[frames - 1][states - 2] = logits.row(frames - 1)[label_at(states - 2)];
    }
    for t in (0..frames - 1).rev() {
        let row = logits.row(t);
        for s in 0..states {
            let mut acc = beta[t + 1][s];
            if s + 1 < states {
                acc = lse2(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < states && skip_ok(s + 2) {
                acc = lse2(acc, beta[t + 1][s + 2]);
            }
            if acc > neg {
                beta[t][s] = acc + row[label_at(s)];
            }
        }
    }

    // State posteriors: alpha and beta both include the emission at t.
    let mut grad = Mat::zeros(frames, logits.classes());
    for t in 0..frames {
        let row = logits.row(t);
        for s in 0..states {
            if alpha[t][s] == neg || beta[t][s] == neg {
                continue;
            }
            let gamma = (alpha[t][s] + beta[t][s] - row[label_at(s)] - log_z).exp();
            let k = label_at(s);
            grad.set(t, k, grad.get(t, k) - gamma);
        }
    }
    Ok((-log_z, grad))
}

/// Teacher-forced cross-entropy over target tokens plus the stop event.
/// `rows` must include the final stop row; the stop class is `blank`.
pub fn ar_ce_grad(
    rows: &LogitMatrix,
    target: &TokenSequence,
    blank: usize,
) -> Result<(f64, Mat), TrainError> {
    if rows.rows() != target.len() + 1 {
        return Err(TrainError::Invalid(
            "row count must be targets + stop".into(),
        ));
    }
    let n = rows.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(rows.rows(), rows.classes());
    for (i, &tok) in target.ids().iter().enumerate() {
        loss -= rows.row(i)[tok];
        grad.set(i, tok, -1.0 / n);
    }
    loss -= rows.row(target.len())[blank];
    grad.set(target.len(), blank, -1.0 / n);
    Ok((loss / n, grad))
}

#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; cosine-annealed per epoch down to
    /// `final_learning_rate`.
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub seed: u64,
    /// Every k-th utterance is held out for the WER gate; 0 disables.
    pub heldout_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 2e-3,
            final_learning_rate: 2e-4,
            seed: 0,
            heldout_every: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub epochs_run: usize,
    pub train_utterances: usize,
    pub heldout_utterances: usize,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub heldout_wer: f64,
    pub diverged: bool,
}

/// Per-utterance loss and gradient under the model's training objective.
pub fn utterance_loss_grad(
    model: &ReferenceModel,
    utt: &Utterance,
    target: &TokenSequence,
) -> Result<(f64, super::params::Gradients), TrainError> {
    match model {
        ReferenceModel::FrameSynchronous(m) => {
            let (logits, cache) = m.forward_cached(&utt.features)?;
            let (nll, mut d) = ctc_loss_grad(&logits, target, m.vocab().blank_index())?;
            let scale = 1.0 / logits.rows() as f64;
            for v in d.data_mut() {
                *v *= scale;
            }
            Ok((nll * scale, m.backward(&cache, &d)))
        }
        ReferenceModel::Autoregressive(m) => {
            let (rows, cache) = m.forward_teacher_cached(&utt.features, target, true)?;
            let (ce, d) = ar_ce_grad(&rows, target, m.vocab().blank_index())?;
            Ok((ce, m.backward(&cache, &d)))
        }
    }
}

/// Greedy transcript under the model's native decoding.
pub fn greedy_transcript(model: &ReferenceModel, utt: &Utterance) -> Result<String, ModelError> {
    let vocab = model.vocab().clone();
    let seq = match model {
        ReferenceModel::FrameSynchronous(m) => {
            let logits = m.forward_frames(utt)?;
            greedy_decode_frames(&logits, &vocab)
        }
        ReferenceModel::Autoregressive(m) => {
            let session = m.session(utt)?;
            greedy_decode_ar(&session, vocab.blank_index())
        }
    };
    Ok(vocab.decode(&seq))
}

/// Pooled greedy word error rate over a set of utterances with references.
pub fn greedy_corpus_wer(model: &ReferenceModel, utts: &[&Utterance]) -> Result<f64, TrainError> {
    let mut dist = 0usize;
    let mut words = 0usize;
    for utt in utts {
        let reference = utt
            .reference
            .as_deref()
            .ok_or_else(|| TrainError::Invalid(format!("utterance {} has no reference", utt.id)))?;
        let hyp = greedy_transcript(model, utt)?;
        let (d, w) = corpus::word_edit_distance(reference, &hyp);
        if w == 0 {
            return Err(TrainError::Invalid(format!(
                "empty reference in {}",
                utt.id
            )));
        }
        dist += d;
        words += w;
    }
    if words == 0 {
        return Err(TrainError::Invalid("no reference words".into()));
    }
    Ok(dist as f64 / words as f64)
}

/// Minimize the training objective with Adam over all groups. On divergence
/// (non-finite loss or gradient) the last finite epoch checkpoint is
/// restored and the report is flagged.
pub fn train_source(
    model: &mut ReferenceModel,
    data: &[Utterance],
    cfg: &TrainingConfig,
) -> Result<TrainingReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Invalid("empty corpus".into()));
    }
    let vocab = model.vocab().clone();
    let mut encoded = Vec::with_capacity(data.len());
    for utt in data {
        let reference = utt
            .reference
            .as_deref()
            .ok_or_else(|| TrainError::Invalid(format!("utterance {} has no reference", utt.id)))?;
        let target = vocab
            .encode(reference)
            .map_err(|e| TrainError::Invalid(e.to_string()))?;
        if target.is_empty() {
            return Err(TrainError::Invalid(format!(
                "empty reference in {}",
                utt.id
            )));
        }
        encoded.push(target);
    }

    let mut train_idx = Vec::new();
    let mut held_idx = Vec::new();
    for i in 0..data.len() {
        if cfg.heldout_every > 0 && i % cfg.heldout_every == cfg.heldout_every - 1 {
            held_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if train_idx.is_empty() {
        return Err(TrainError::Invalid(
            "no training utterances after split".into(),
        ));
    }

    let mut rng = Rng::seed_from(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut last_good = model.params().snapshot();
    let mut epoch_losses = Vec::new();
    let mut diverged = false;
    let mut epochs_run = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = crate::adaptation::cosine_lr(
            epoch,
            cfg.learning_rate,
            cfg.final_learning_rate.min(cfg.learning_rate),
            cfg.epochs,
        );
        rng.shuffle(&mut train_idx);
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for batch in train_idx.chunks(cfg.batch_size.max(1)) {
            let mut acc = model.params().zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, grads) = match utterance_loss_grad(model, &data[i], &encoded[i]) {
                    Ok(pair) => pair,
                    // A blown-up model counts as divergence, not as a caller
                    // error: fall back to the last finite checkpoint.
                    Err(TrainError::Model(ModelError::NumericalOverflow))
                    | Err(TrainError::Degenerate(_)) => {
                        diverged = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    diverged = true;
                    break 'epochs;
                }
                batch_loss += loss;
                acc.add_scaled(&grads, 1.0);
            }
            acc.scale(1.0 / batch.len() as f64);
            if adamw_step(model.params_mut(), &acc, &mut adam, lr, 0.0, None)
                == StepOutcome::SkippedNonFinite
            {
                diverged = true;
                break 'epochs;
            }
            epoch_loss += batch_loss;
            counted += batch.len();
        }
        epochs_run += 1;
        epoch_losses.push(epoch_loss / counted.max(1) as f64);
        // Finite parameter values alone do not prove the checkpoint usable
        // (an overflow-scale step stays finite until the next forward pass);
        // probe one utterance before accepting it as the fallback.
        let probe = utterance_loss_grad(model, &data[train_idx[0]], &encoded[train_idx[0]]);
        match probe {
            Ok((loss, _)) if loss.is_finite() => last_good = model.params().snapshot(),
            _ => {
                diverged = true;
                break;
            }
        }
    }

    if diverged {
        model
            .params_mut()
            .restore(&last_good)
            .expect("snapshot from the same model");
    }

    let eval_set: Vec<&Utterance> = if held_idx.is_empty() {
        train_idx.iter().map(|&i| &data[i]).collect()
    } else {
        held_idx.iter().map(|&i| &data[i]).collect()
    };
    let heldout_wer = greedy_corpus_wer(model, &eval_set)?;

    Ok(TrainingReport {
        epochs_run,
        train_utterances: train_idx.len(),
        heldout_utterances: held_idx.len(),
        final_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        epoch_losses,
        heldout_wer,
        diverged,
    })
}
