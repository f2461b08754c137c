//! Unsupervised adaptation losses: temperature softmax, blank masking,
//! generalized (Renyi) entropy minimization, negative sampling, and the
//! combined objective, together with their gradients with respect to the
//! raw logit rows.
//!
//! Probabilities are floored at 1e-12 inside logs and powers; the
//! negative-class indicator is computed on unscaled probabilities and frozen
//! during differentiation.

use crate::mat::{softmax_row, Mat};
use crate::types::{LogitMatrix, Vocabulary};

pub const PROB_FLOOR: f64 = 1e-12;

/// softmax(row / t), positive and summing to one.
pub fn temperature_softmax(row: &[f64], t: f64) -> Vec<f64> {
    softmax_row(row, t)
}

/// Row mask that drops frames whose argmax class is blank.
/// A tie with the blank class counts as blank, so the frame is dropped.
pub fn blank_argmax_mask(logits: &LogitMatrix, vocab: &Vocabulary) -> Vec<bool> {
    let blank = vocab.blank_index();
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row[blank] != m
        })
        .collect()
}

/// Renyi entropy of order `alpha` of a probability vector, in nats.
/// `alpha = 1` dispatches to Shannon entropy.
pub fn renyi_entropy(p: &[f64], alpha: f64) -> f64 {
    debug_assert!(alpha > 0.0);
    if alpha == 1.0 {
        return shannon_entropy(p);
    }
    let s: f64 = p
        .iter()
        .map(|&v| (alpha * v.max(PROB_FLOOR).ln()).exp())
        .sum();
    (s.ln() / (1.0 - alpha)).max(0.0)
}

pub fn shannon_entropy(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.max(PROB_FLOOR).ln())
        .sum();
    h.max(0.0)
}

/// Per-row loss value and gradient with respect to that row's raw logits.
struct RowGrad {
    value: f64,
    grad: Vec<f64>,
}

/// Renyi entropy of softmax(o/T) and its gradient in o.
///
/// d/do_k [ log(sum_j p_j^alpha) / (1-alpha) ]
///   = alpha / (T (1-alpha)) * (p_k^alpha / S - p_k),   S = sum_j p_j^alpha.
/// The uniform row is a critical point: p_k^alpha / S = p_k there.
fn gem_row(row: &[f64], alpha: f64, t: f64) -> RowGrad {
    let p = temperature_softmax(row, t);
    let c = p.len();
    if alpha == 1.0 {
        // Shannon case: d/do_k = -p_k (log p_k + H) / T.
        let h = shannon_entropy(&p);
        let grad = (0..c)
            .map(|k| -(p[k] * (h + p[k].max(PROB_FLOOR).ln())) / t)
            .collect();
        return RowGrad { value: h, grad };
    }
    let pow: Vec<f64> = p
        .iter()
        .map(|&v| (alpha * v.max(PROB_FLOOR).ln()).exp())
        .collect();
    let s: f64 = pow.iter().sum();
    let value = (s.ln() / (1.0 - alpha)).max(0.0);
    let coef = alpha / (t * (1.0 - alpha));
    let grad = (0..c).map(|k| coef * (pow[k] / s - p[k])).collect();
    RowGrad { value, grad }
}

/// Negative-sampling penalty of one row and its gradient in o.
///
/// Negatives are classes with unscaled probability p' below tau; the
/// penalized mass uses the temperature-scaled p. With s = sum of penalized
/// mass, the term is -log(1 - s) and
/// d/do_k = p_k (m_k - s) / (T (1 - s)),  m_k the frozen indicator.
fn ns_row(row: &[f64], tau: f64, t: f64) -> RowGrad {
    let p_unscaled = temperature_softmax(row, 1.0);
    let p = temperature_softmax(row, t);
    let c = p.len();
    let negatives: Vec<bool> = p_unscaled.iter().map(|&v| v < tau).collect();
    let s: f64 = (0..c).filter(|&k| negatives[k]).map(|k| p[k]).sum();
    let denom = (1.0 - s).max(PROB_FLOOR);
    let value = -denom.ln();
    let grad = (0..c)
        .map(|k| {
            let m = if negatives[k] { 1.0 } else { 0.0 };
            p[k] * (m - s) / (t * denom)
        })
        .collect();
    RowGrad { value, grad }
}

/// Mean Renyi entropy over masked-in rows. Returns `(loss, all_masked)`;
/// with every row masked out the loss is 0 and the flag is set.
pub fn gem_loss(logits: &LogitMatrix, mask: &[bool], alpha: f64, t: f64) -> (f64, bool) {
    let (value, _, all_masked) = gem_loss_grad(logits, mask, alpha, t);
    (value, all_masked)
}

/// As [`gem_loss`], also returning d(loss)/d(logits); masked-out rows get a
/// zero gradient row.
pub fn gem_loss_grad(logits: &LogitMatrix, mask: &[bool], alpha: f64, t: f64) -> (f64, Mat, bool) {
    assert_eq!(mask.len(), logits.rows(), "mask length mismatch");
    let used = mask.iter().filter(|&&m| m).count();
    let mut grad = Mat::zeros(logits.rows(), logits.classes());
    if used == 0 {
        return (0.0, grad, true);
    }
    let inv = 1.0 / used as f64;
    let mut total = 0.0;
    for i in 0..logits.rows() {
        if !mask[i] {
            continue;
        }
        let rg = gem_row(logits.row(i), alpha, t);
        total += rg.value;
        for (k, g) in rg.grad.iter().enumerate() {
            grad.set(i, k, g * inv);
        }
    }
    (total * inv, grad, false)
}

/// Mean negative-sampling penalty over masked-in rows.
pub fn ns_loss(logits: &LogitMatrix, mask: &[bool], tau: f64, t: f64) -> (f64, bool) {
    let (value, _, all_masked) = ns_loss_grad(logits, mask, tau, t);
    (value, all_masked)
}

pub fn ns_loss_grad(logits: &LogitMatrix, mask: &[bool], tau: f64, t: f64) -> (f64, Mat, bool) {
    assert_eq!(mask.len(), logits.rows(), "mask length mismatch");
    let used = mask.iter().filter(|&&m| m).count();
    let mut grad = Mat::zeros(logits.rows(), logits.classes());
    if used == 0 {
        return (0.0, grad, true);
    }
    let inv = 1.0 / used as f64;
    let mut total = 0.0;
    for i in 0..logits.rows() {
        if !mask[i] {
            continue;
        }
        let rg = ns_row(logits.row(i), tau, t);
        total += rg.value;
        for (k, g) in rg.grad.iter().enumerate() {
            grad.set(i, k, g * inv);
        }
    }
    (total * inv, grad, false)
}

/// Value of the combined objective, split by term.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub gem: f64,
    pub ns: f64,
    pub total: f64,
    pub lambda_ns: f64,
    /// Rows that contributed to the entropy term (or to the penalty term
    /// when the entropy term is disabled).
    pub frames_used: usize,
    pub masked_frames: usize,
    pub all_masked: bool,
}

/// Settings the combined objective needs; a slice of the full adaptation config.
#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    pub alpha: f64,
    pub temperature: f64,
    pub tau: f64,
    pub lambda_ns: f64,
    pub use_gem: bool,
    pub use_ns: bool,
}

impl LossSettings {
    pub fn from_config(cfg: &crate::config::AdaptationConfig, classes: usize) -> Self {
        LossSettings {
            alpha: cfg.alpha,
            temperature: cfg.temperature,
            tau: cfg.tau(classes),
            lambda_ns: cfg.lambda_ns,
            use_gem: cfg.use_gem,
            use_ns: cfg.use_ns,
        }
    }
}

/// total = gem + lambda_ns * ns, with disabled terms contributing zero.
pub fn combined_loss(
    logits: &LogitMatrix,
    mask_gem: &[bool],
    mask_ns: &[bool],
    settings: &LossSettings,
) -> LossBreakdown {
    combined_loss_grad(logits, mask_gem, mask_ns, settings).0
}

/// As [`combined_loss`], also returning d(total)/d(logits).
pub fn combined_loss_grad(
    logits: &LogitMatrix,
    mask_gem: &[bool],
    mask_ns: &[bool],
    settings: &LossSettings,
) -> (LossBreakdown, Mat) {
    let rows = logits.rows();
    let mut grad = Mat::zeros(rows, logits.classes());
    let mut gem = 0.0;
    let mut ns = 0.0;
    let mut gem_all_masked = false;
    let mut ns_all_masked = false;

    if settings.use_gem {
        let (v, g, flag) = gem_loss_grad(logits, mask_gem, settings.alpha, settings.temperature);
        gem = v;
        gem_all_masked = flag;
        for (dst, src) in grad.data_mut().iter_mut().zip(g.data()) {
            *dst += src;
        }
    }
    if settings.use_ns {
        let (v, g, flag) = ns_loss_grad(logits, mask_ns, settings.tau, settings.temperature);
        ns = v;
        ns_all_masked = flag;
        for (dst, src) in grad.data_mut().iter_mut().zip(g.data()) {
            *dst += settings.lambda_ns * src;
        }
    }

    let counting_mask = if settings.use_gem { mask_gem } else { mask_ns };
    let frames_used = counting_mask.iter().filter(|&&m| m).count();
    let all_masked = match (settings.use_gem, settings.use_ns) {
        (true, true) => gem_all_masked && ns_all_masked,
        (true, false) => gem_all_masked,
        (false, true) => ns_all_masked,
        (false, false) => true,
    };
    let breakdown = LossBreakdown {
        gem,
        ns,
        total: gem + settings.lambda_ns * ns,
        lambda_ns: settings.lambda_ns,
        frames_used,
        masked_frames: rows - frames_used,
        all_masked,
    };
    (breakdown, grad)
}
