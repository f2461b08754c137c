//! Episodic single-utterance adaptation: N optimizer steps on the combined
//! unsupervised objective over beam-acquired logits, cosine-annealed
//! learning rate, parameter-group filtering, and reset to the source
//! snapshot afterwards.

use crate::acoustic::{ModelError, ReferenceModel};
use crate::config::{AdaptationConfig, DecodeProtocol};
use crate::corpus;
use crate::decoding::{
    beam_search_ar, beam_search_ctc, ctc_acquisition_plan, greedy_decode_ar, greedy_decode_frames,
    DecodeError,
};
use crate::lm::NGramLM;
use crate::objectives::{blank_argmax_mask, combined_loss_grad, LossBreakdown, LossSettings};
use crate::optim::{adamw_step, AdamState, StepOutcome};
use crate::types::{TokenSequence, Utterance};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("adaptation: {0}")]
    Invalid(String),
}

/// Cosine-annealed learning rate over N steps with endpoints eta_i, eta_f:
/// eta(t) = eta_f + (eta_i - eta_f) (1 + cos(pi t / max(N-1, 1))) / 2.
pub fn cosine_lr(t: usize, eta_i: f64, eta_f: f64, n: usize) -> f64 {
    debug_assert!(n >= 1 && t < n);
    let denom = (n - 1).max(1) as f64;
    eta_f + 0.5 * (eta_i - eta_f) * (1.0 + (std::f64::consts::PI * t as f64 / denom).cos())
}

#[derive(Clone, Debug)]
pub struct AdaptationResult {
    pub utterance_id: String,
    pub transcript_before: String,
    pub transcript_after: String,
    /// One entry per adaptation iteration (exactly config.n of them).
    pub loss_trajectory: Vec<LossBreakdown>,
    pub fallback_used: bool,
    /// Optimizer steps skipped because of non-finite gradients.
    pub skipped_steps: usize,
    pub wall_time: f64,
}

/// Transcribe under the configured inference protocol.
pub fn transcribe(
    model: &ReferenceModel,
    lm: &NGramLM,
    utt: &Utterance,
    config: &AdaptationConfig,
) -> Result<String, AdaptError> {
    let vocab = model.vocab().clone();
    let seq = match (model, config.decode) {
        (ReferenceModel::FrameSynchronous(m), DecodeProtocol::Greedy) => {
            let logits = m.forward_frames(utt)?;
            greedy_decode_frames(&logits, &vocab)
        }
        (ReferenceModel::FrameSynchronous(m), DecodeProtocol::Beam) => {
            let logits = m.forward_frames(utt)?;
            beam_search_ctc(
                &logits,
                &vocab,
                lm,
                config.beam_width,
                config.lambda_lm,
                None,
            )?
            .sequence
        }
        (ReferenceModel::Autoregressive(m), DecodeProtocol::Greedy) => {
            let session = m.session(utt)?;
            greedy_decode_ar(&session, vocab.blank_index())
        }
        (ReferenceModel::Autoregressive(m), DecodeProtocol::Beam) => {
            let session = m.session(utt)?;
            beam_search_ar(
                &session,
                &vocab,
                lm,
                config.beam_width,
                config.lambda_lm,
                None,
            )?
            .sequence
        }
    };
    Ok(vocab.decode(&seq))
}

/// Trainable groups for this run: the config's set, or the model's
/// mode-specific default when the config leaves it empty.
pub fn resolved_trainable_groups(
    model: &ReferenceModel,
    config: &AdaptationConfig,
) -> Result<BTreeSet<String>, AdaptError> {
    let groups = if config.trainable_groups.is_empty() {
        model.default_trainable_groups()
    } else {
        config.trainable_groups.clone()
    };
    for g in &groups {
        if model.params().group(g).is_none() {
            return Err(AdaptError::Invalid(format!(
                "unknown trainable group {g:?}; model has {:?}",
                model.params().group_names()
            )));
        }
    }
    Ok(groups)
}

fn zero_breakdown(config: &AdaptationConfig) -> LossBreakdown {
    LossBreakdown {
        gem: 0.0,
        ns: 0.0,
        total: 0.0,
        lambda_ns: config.lambda_ns,
        frames_used: 0,
        masked_frames: 0,
        all_masked: true,
    }
}

fn and_mask(base: &[bool], extra: &[bool]) -> Vec<bool> {
    base.iter().zip(extra).map(|(a, b)| a & b).collect()
}

#[cfg(not(target_arch = "wasm32"))]
fn now_seconds() -> f64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[cfg(target_arch = "wasm32")]
fn now_seconds() -> f64 {
    0.0
}

/// Adapt the model to one utterance for N iterations, record before/after
/// transcripts, then restore the source parameters. The model comes back
/// bit-identical to its state at entry; optimizer state never outlives the
/// call. Deterministic for a fixed (config, utterance) pair.
pub fn adapt_utterance(
    model: &mut ReferenceModel,
    lm: &NGramLM,
    utt: &Utterance,
    config: &AdaptationConfig,
) -> Result<AdaptationResult, AdaptError> {
    let start = now_seconds();
    let vocab = model.vocab().clone();
    let blank = vocab.blank_index();
    let settings = LossSettings::from_config(config, vocab.size());
    let trainable = resolved_trainable_groups(model, config)?;
    let snapshot = model.snapshot();

    let transcript_before = transcribe(model, lm, utt, config)?;

    let mut adam = AdamState::new(model.params());
    let mut trajectory = Vec::with_capacity(config.n);
    let mut fallback_used = false;
    let mut skipped_steps = 0usize;
    // The decoded sequence is frozen after the first estimate when
    // reacquisition is disabled.
    let mut frozen_decoded: Option<TokenSequence> = None;

    let outcome = (|| -> Result<(), AdaptError> {
        for t in 0..config.n {
            if !config.use_gem && !config.use_ns {
                trajectory.push(zero_breakdown(config));
                continue;
            }
            let (breakdown, grads) = match model {
                ReferenceModel::FrameSynchronous(m) => {
                    let (logits, cache) = m.forward_cached(&utt.features)?;
                    let (base_mask, decoded, fallback) = match &frozen_decoded {
                        Some(seq) if !config.reacquire_every_step => {
                            if seq.is_empty() {
                                (blank_argmax_mask(&logits, &vocab), seq.clone(), true)
                            } else {
                                let align = crate::decoding::forced_align(&logits, seq, &vocab)?;
                                let mask: Vec<bool> = align.iter().map(|&l| l != blank).collect();
                                (mask, seq.clone(), false)
                            }
                        }
                        _ => ctc_acquisition_plan(&logits, &vocab, lm, config),
                    };
                    if frozen_decoded.is_none() {
                        frozen_decoded = Some(decoded.clone());
                    }
                    fallback_used |= fallback;
                    let blank_mask = blank_argmax_mask(&logits, &vocab);
                    let mask_gem = if config.blank_mask_gem {
                        and_mask(&base_mask, &blank_mask)
                    } else {
                        base_mask.clone()
                    };
                    let mask_ns = if config.blank_mask_ns {
                        and_mask(&base_mask, &blank_mask)
                    } else {
                        base_mask.clone()
                    };
                    let (breakdown, d_logits) =
                        combined_loss_grad(&logits, &mask_gem, &mask_ns, &settings);
                    if breakdown.all_masked {
                        trajectory.push(breakdown);
                        continue;
                    }
                    (breakdown, m.backward(&cache, &d_logits))
                }
                ReferenceModel::Autoregressive(m) => {
                    let decoded = match &frozen_decoded {
                        Some(seq) if !config.reacquire_every_step => seq.clone(),
                        _ => {
                            let session = m.session(utt)?;
                            if config.use_beam_search {
                                beam_search_ar(
                                    &session,
                                    &vocab,
                                    lm,
                                    config.beam_width,
                                    config.lambda_lm,
                                    None,
                                )?
                                .sequence
                            } else {
                                greedy_decode_ar(&session, blank)
                            }
                        }
                    };
                    if frozen_decoded.is_none() {
                        frozen_decoded = Some(decoded.clone());
                    }
                    // Teacher-force the estimate; an empty estimate falls
                    // back to the single start-state row.
                    let fallback = decoded.is_empty();
                    fallback_used |= fallback;
                    let (rows, cache) =
                        m.forward_teacher_cached(&utt.features, &decoded, fallback)?;
                    let mask = vec![true; rows.rows()];
                    let (breakdown, d_rows) = combined_loss_grad(&rows, &mask, &mask, &settings);
                    if breakdown.all_masked {
                        trajectory.push(breakdown);
                        continue;
                    }
                    (breakdown, m.backward(&cache, &d_rows))
                }
            };
            let lr = cosine_lr(t, config.eta_i, config.eta_f, config.n);
            let step = adamw_step(
                model.params_mut(),
                &grads,
                &mut adam,
                lr,
                config.weight_decay,
                Some(&trainable),
            );
            if step == StepOutcome::SkippedNonFinite {
                skipped_steps += 1;
            }
            trajectory.push(breakdown);
        }
        Ok(())
    })();

    // Episodic reset happens even when a step failed midway.
    let transcript_after = match &outcome {
        Ok(()) => transcribe(model, lm, utt, config)?,
        Err(_) => transcript_before.clone(),
    };
    model
        .restore(&snapshot)
        .expect("snapshot taken from this model");
    outcome?;

    Ok(AdaptationResult {
        utterance_id: utt.id.clone(),
        transcript_before,
        transcript_after,
        loss_trajectory: trajectory,
        fallback_used,
        skipped_steps,
        wall_time: now_seconds() - start,
    })
}

/// Pooled corpus WER of plain inference (no adaptation).
pub fn corpus_wer(
    model: &ReferenceModel,
    lm: &NGramLM,
    utts: &[Utterance],
    config: &AdaptationConfig,
) -> Result<f64, AdaptError> {
    let mut dist = 0usize;
    let mut words = 0usize;
    for utt in utts {
        let reference = utt
            .reference
            .as_deref()
            .ok_or_else(|| AdaptError::Invalid(format!("utterance {} has no reference", utt.id)))?;
        let hyp = transcribe(model, lm, utt, config)?;
        let (d, w) = corpus::word_edit_distance(reference, &hyp);
        if w == 0 {
            return Err(AdaptError::Invalid(format!(
                "empty reference in {}",
                utt.id
            )));
        }
        dist += d;
        words += w;
    }
    if words == 0 {
        return Err(AdaptError::Invalid("no reference words".into()));
    }
    Ok(dist as f64 / words as f64)
}

/// Adapt every utterance and report pooled before/after WER plus the
/// per-utterance records.
pub fn adapt_corpus(
    model: &mut ReferenceModel,
    lm: &NGramLM,
    utts: &[Utterance],
    config: &AdaptationConfig,
) -> Result<(Vec<AdaptationResult>, f64, f64), AdaptError> {
    let mut results = Vec::with_capacity(utts.len());
    let mut dist_before = 0usize;
    let mut dist_after = 0usize;
    let mut words = 0usize;
    for utt in utts {
        let reference = utt
            .reference
            .as_deref()
            .ok_or_else(|| AdaptError::Invalid(format!("utterance {} has no reference", utt.id)))?
            .to_string();
        let result = adapt_utterance(model, lm, utt, config)?;
        let (db, w) = corpus::word_edit_distance(&reference, &result.transcript_before);
        let (da, _) = corpus::word_edit_distance(&reference, &result.transcript_after);
        dist_before += db;
        dist_after += da;
        words += w;
        results.push(result);
    }
    if words == 0 {
        return Err(AdaptError::Invalid("no reference words".into()));
    }
    Ok((
        results,
        dist_before as f64 / words as f64,
        dist_after as f64 / words as f64,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub use_beam_search: bool,
    pub use_gem: bool,
    pub use_ns: bool,
    pub wer: f64,
}

/// The six-row toggle grid: unadapted, each loss alone, both losses, and
/// beam acquisition with and without the entropy term.
pub const ABLATION_GRID: [(bool, bool, bool); 6] = [
    (false, false, false),
    (false, true, false),
    (false, false, true),
    (false, true, true),
    (true, false, true),
    (true, true, true),
];

pub fn run_ablation(
    model: &mut ReferenceModel,
    lm: &NGramLM,
    utts: &[Utterance],
    base_config: &AdaptationConfig,
) -> Result<Vec<AblationRow>, AdaptError> {
    let mut rows = Vec::with_capacity(ABLATION_GRID.len());
    for &(bs, gem, ns) in &ABLATION_GRID {
        let wer = if !gem && !ns {
            corpus_wer(model, lm, utts, base_config)?
        } else {
            let cfg = AdaptationConfig {
                use_beam_search: bs,
                use_gem: gem,
                use_ns: ns,
                ..base_config.clone()
            };
            let (_, _, after) = adapt_corpus(model, lm, utts, &cfg)?;
            after
        };
        rows.push(AblationRow {
            use_beam_search: bs,
            use_gem: gem,
            use_ns: ns,
            wer,
        });
    }
    Ok(rows)
}
