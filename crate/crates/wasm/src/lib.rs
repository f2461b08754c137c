//! Browser bindings for the adaptation engine. Three operations back the
//! demo page: a loss explorer over synthetic logits, a beam-search viewer,
//! and a full in-browser adaptation episode on the bundled checkpoint.
//! Every function takes plain numbers and returns a JSON string.

use serde::Serialize;
use sgem_core::acoustic::{read_checkpoint, ReferenceModel};
use sgem_core::adaptation::{adapt_utterance, cosine_lr};
use sgem_core::config::AdaptationConfig;
use sgem_core::corpus::{
    class_means, mix_at_snr, noise_texture, reference_lexicon, sample_sentence, sigma_clean,
    tile_noise, wer, EmissionParams, TEXTURE_NAMES,
};
use sgem_core::decoding::{beam_search_ctc, greedy_decode_frames};
use sgem_core::lm::NGramLM;
use sgem_core::mat::Mat;
use sgem_core::objectives::{
    blank_argmax_mask, combined_loss_grad, renyi_entropy, temperature_softmax, LossSettings,
};
use sgem_core::rng::Rng;
use sgem_core::types::{LogitMatrix, Utterance, Vocabulary};
use wasm_bindgen::prelude::wasm_bindgen;

static CKPT_BYTES: &[u8] = include_bytes!("../../../golden/reference_ctc.ckpt");
static LM_BYTES: &[u8] = include_bytes!("../../../golden/lm4.sgeml");

fn bundled_model() -> ReferenceModel {
    let vocab = Vocabulary::reference();
    let params = read_checkpoint(&mut &CKPT_BYTES[..]).expect("bundled checkpoint");
    ReferenceModel::from_params(&vocab, params).expect("bundled checkpoint")
}

fn bundled_lm() -> NGramLM {
    NGramLM::read_from(&mut &LM_BYTES[..], &Vocabulary::reference()).expect("bundled lm")
}

/// One synthetic utterance under the standard emission model, with optional
/// texture noise mixed in at the requested SNR.
fn synth_utterance(seed: u64, texture: usize, snr_db: f64) -> Utterance {
    let vocab = Vocabulary::reference();
    let emission = EmissionParams::default();
    let means = class_means(&vocab, &emission);
    let sigma = sigma_clean(&vocab, &emission, &means);
    let lexicon = reference_lexicon(&vocab);
    let mut rng = Rng::seed_from(seed);
    let sentence = sample_sentence(&mut rng, &lexicon, 10, 32);
    let tokens = vocab.encode(&sentence).unwrap();
    let mut rows = Vec::new();
    for &tok in tokens.ids() {
        for _ in
            0..rng.range_inclusive(emission.min_frames_per_token, emission.max_frames_per_token)
        {
            let mut row = vec![0.0; emission.feature_dim];
            for (d, v) in row.iter_mut().enumerate() {
                *v = means[tok][d] + sigma * rng.normal();
            }
            rows.push(row);
        }
    }
    let clean = Mat::from_rows(&rows);
    let features = if snr_db >= 100.0 {
        clean
    } else {
        let noise = tile_noise(
            &noise_texture(texture, 257, emission.feature_dim),
            clean.rows(),
        );
        mix_at_snr(&clean, &noise, snr_db).unwrap()
    };
    Utterance::new("demo", features, Some(sentence)).unwrap()
}

#[derive(Serialize)]
struct LossExplorerOut {
    classes: usize,
    blank_index: usize,
    probabilities: Vec<Vec<f64>>,
    row_entropy: Vec<f64>,
    blank_masked: Vec<bool>,
    gem: f64,
    ns: f64,
    total: f64,
    frames_used: usize,
    entropy_curve_alpha: Vec<f64>,
    entropy_curve_value: Vec<f64>,
}

/// Generalized-entropy and negative-sampling losses over a random logit
/// matrix, plus the per-row temperature-softmax distributions and the mean
/// entropy as a function of the order alpha.
#[wasm_bindgen]
pub fn loss_explorer(
    seed: u64,
    rows: usize,
    sharpness: f64,
    alpha: f64,
    temperature: f64,
    tau_scale: f64,
    lambda_ns: f64,
) -> String {
    let vocab = Vocabulary::reference();
    let c = vocab.size();
    let rows = rows.clamp(1, 64);
    let mut rng = Rng::seed_from(seed);
    let mut m = Mat::zeros(rows, c);
    for v in m.data_mut() {
        *v = sharpness.clamp(0.0, 8.0) * rng.normal();
    }
    let logits = LogitMatrix::normalize(m);
    // Blank-argmax masking on the entropy term, full timesteps for the
    // penalty term, matching the default configuration.
    let mask_gem = blank_argmax_mask(&logits, &vocab);
    let mask_ns = vec![true; rows];
    let blank_masked: Vec<bool> = mask_gem.iter().map(|kept| !kept).collect();
    let settings = LossSettings {
        alpha,
        temperature,
        tau: tau_scale / c as f64,
        lambda_ns,
        use_gem: true,
        use_ns: true,
    };
    let (breakdown, _) = combined_loss_grad(&logits, &mask_gem, &mask_ns, &settings);
    let probabilities: Vec<Vec<f64>> = (0..rows)
        .map(|i| temperature_softmax(logits.row(i), temperature))
        .collect();
    let row_entropy: Vec<f64> = probabilities
        .iter()
        .map(|p| renyi_entropy(p, alpha))
        .collect();

    let mut curve_alpha = Vec::new();
    let mut curve_value = Vec::new();
    for i in 0..=40 {
        let a = 0.25 + i as f64 * 0.125;
        let a = if (a - 1.0).abs() < 1e-9 { 1.0 } else { a };
        let mean: f64 = probabilities
            .iter()
            .map(|p| renyi_entropy(p, a))
            .sum::<f64>()
            / rows as f64;
        curve_alpha.push(a);
        curve_value.push(mean);
    }

    serde_json::to_string(&LossExplorerOut {
        classes: c,
        blank_index: vocab.blank_index(),
        probabilities,
        row_entropy,
        blank_masked,
        gem: breakdown.gem,
        ns: breakdown.ns,
        total: breakdown.total,
        frames_used: breakdown.frames_used,
        entropy_curve_alpha: curve_alpha,
        entropy_curve_value: curve_value,
    })
    .unwrap()
}

#[derive(Serialize)]
struct BeamDemoOut {
    reference: String,
    greedy: String,
    beam: String,
    beam_am: f64,
    beam_lm: f64,
    beam_fused: f64,
    frames: usize,
    classes: usize,
    tokens: Vec<String>,
    /// Per-frame class probabilities (temperature 1) for the heatmap.
    probabilities: Vec<Vec<f64>>,
    aligned_mask: Vec<bool>,
    greedy_wer: f64,
    beam_wer: f64,
}

/// Decode one noisy synthetic utterance with the bundled model: greedy
/// versus prefix beam search with shallow fusion, plus the frame posteriors
/// and the alignment-selected frames.
#[wasm_bindgen]
pub fn beam_demo(
    seed: u64,
    texture: usize,
    snr_db: f64,
    beam_width: usize,
    lambda_lm: f64,
) -> String {
    let vocab = Vocabulary::reference();
    let model = bundled_model();
    let lm = bundled_lm();
    let utt = synth_utterance(seed, texture % TEXTURE_NAMES.len(), snr_db);
    let logits = model.forward_frames(&utt).unwrap();
    let greedy = vocab.decode(&greedy_decode_frames(&logits, &vocab));
    let hyp = beam_search_ctc(
        &logits,
        &vocab,
        &lm,
        beam_width.clamp(1, 64),
        lambda_lm,
        None,
    )
    .unwrap();
    let beam = vocab.decode(&hyp.sequence);
    let reference = utt.reference.clone().unwrap();

    let config = AdaptationConfig {
        beam_width: beam_width.clamp(1, 64),
        lambda_lm,
        ..Default::default()
    };
    let (mask, _, _) = sgem_core::decoding::ctc_acquisition_plan(&logits, &vocab, &lm, &config);
    let probabilities: Vec<Vec<f64>> = (0..logits.rows())
        .map(|i| logits.row(i).iter().map(|v| v.exp()).collect())
        .collect();

    serde_json::to_string(&BeamDemoOut {
        greedy_wer: wer(&reference, &greedy).unwrap(),
        beam_wer: wer(&reference, &beam).unwrap(),
        reference,
        greedy,
        beam,
        beam_am: hyp.am_score,
        beam_lm: hyp.lm_score,
        beam_fused: hyp.fused_score,
        frames: logits.rows(),
        classes: logits.classes(),
        tokens: (0..vocab.size())
            .map(|i| vocab.token(i).to_string())
            .collect(),
        probabilities,
        aligned_mask: mask,
    })
    .unwrap()
}

#[derive(Serialize)]
struct AdaptDemoOut {
    reference: String,
    before: String,
    after: String,
    wer_before: f64,
    wer_after: f64,
    losses: Vec<f64>,
    gem: Vec<f64>,
    ns: Vec<f64>,
    learning_rates: Vec<f64>,
    fallback: bool,
}

/// One full episodic adaptation on a noisy synthetic utterance with the
/// bundled checkpoint: N optimizer steps on the combined objective, then
/// reset. Returns transcripts, error rates and the loss trajectory.
#[wasm_bindgen]
pub fn adapt_demo(seed: u64, texture: usize, snr_db: f64, steps: usize) -> String {
    let mut model = bundled_model();
    let lm = bundled_lm();
    let utt = synth_utterance(seed, texture % TEXTURE_NAMES.len(), snr_db);
    let config = AdaptationConfig {
        n: steps.clamp(0, 40),
        ..Default::default()
    };
    let result = adapt_utterance(&mut model, &lm, &utt, &config).unwrap();
    let reference = utt.reference.clone().unwrap();
    serde_json::to_string(&AdaptDemoOut {
        wer_before: wer(&reference, &result.transcript_before).unwrap(),
        wer_after: wer(&reference, &result.transcript_after).unwrap(),
        reference,
        before: result.transcript_before,
        after: result.transcript_after,
        losses: result.loss_trajectory.iter().map(|b| b.total).collect(),
        gem: result.loss_trajectory.iter().map(|b| b.gem).collect(),
        ns: result.loss_trajectory.iter().map(|b| b.ns).collect(),
        learning_rates: (0..config.n)
            .map(|t| cosine_lr(t, config.eta_i, config.eta_f, config.n))
            .collect(),
        fallback: result.fallback_used,
    })
    .unwrap()
}

/// Names of the built-in noise textures, for the demo page dropdown.
#[wasm_bindgen]
pub fn texture_names() -> String {
    serde_json::to_string(&TEXTURE_NAMES).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_explorer_returns_consistent_json() {
        let out = loss_explorer(7, 12, 2.0, 1.5, 2.5, 0.4, 1.0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["classes"], 12);
        assert_eq!(v["probabilities"].as_array().unwrap().len(), 12);
        let total = v["total"].as_f64().unwrap();
        let gem = v["gem"].as_f64().unwrap();
        let ns = v["ns"].as_f64().unwrap();
        assert!((total - (gem + ns)).abs() < 1e-9);
        // Rows sum to one.
        for row in v["probabilities"].as_array().unwrap() {
            let s: f64 = row
                .as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_f64().unwrap())
                .sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_demo_decodes_reasonably_on_clean_input() {
        let out = beam_demo(3, 0, 300.0, 5, 0.3);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        // On effectively clean input the trained model should be near-exact.
        assert!(v["greedy_wer"].as_f64().unwrap() <= 0.2, "{out}");
        assert_eq!(
            v["probabilities"].as_array().unwrap().len(),
            v["frames"].as_u64().unwrap() as usize
        );
    }

    #[test]
    fn adapt_demo_runs_an_episode() {
        let out = adapt_demo(11, 7, 10.0, 10);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["losses"].as_array().unwrap().len(), 10);
        assert_eq!(v["learning_rates"].as_array().unwrap().len(), 10);
        let lrs = v["learning_rates"].as_array().unwrap();
        assert_eq!(lrs[0].as_f64().unwrap(), 4e-5);
        assert_eq!(lrs[9].as_f64().unwrap(), 2e-5);
    }

    #[test]
    fn demo_outputs_are_deterministic() {
        assert_eq!(adapt_demo(5, 7, 10.0, 4), adapt_demo(5, 7, 10.0, 4));
        assert_eq!(beam_demo(5, 2, 10.0, 5, 0.3), beam_demo(5, 2, 10.0, 5, 0.3));
    }
}
