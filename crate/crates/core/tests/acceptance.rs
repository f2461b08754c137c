//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//! Criterion 8 trains the source model from scratch and is the slow one
//! (about a minute on a laptop).

use sgem_core::acoustic::train::{train_source, TrainingConfig};
use sgem_core::acoustic::ReferenceModel;
use sgem_core::adaptation::{adapt_corpus, adapt_utterance, corpus_wer, run_ablation};
use sgem_core::config::AdaptationConfig;
use sgem_core::corpus::{
    load_manifest, load_utterance, make_synthetic_corpus, mix_at_snr, noise_texture, tile_noise,
    wer, EmissionParams, ShiftKind,
};
use sgem_core::decoding::{beam_search_ctc, ctc_collapse, forced_align, greedy_decode_frames};
use sgem_core::lm::NGramLM;
use sgem_core::mat::{lse2, Mat};
use sgem_core::objectives::{
    combined_loss_grad, gem_loss, renyi_entropy, shannon_entropy, LossSettings,
};
use sgem_core::rng::Rng;
use sgem_core::types::{LogitMatrix, TokenSequence, Utterance, Vocabulary};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../golden")
}

fn load_golden_corpus(name: &str) -> Vec<Utterance> {
    let manifest_path = golden_dir().join(name).join("manifest.jsonl");
    let manifest = load_manifest(&manifest_path).expect("golden manifest");
    manifest
        .entries
        .iter()
        .map(|e| load_utterance(&manifest_path, e).expect("golden features"))
        .collect()
}

fn load_golden_model() -> ReferenceModel {
    ReferenceModel::load(
        &golden_dir().join("reference_ctc.ckpt"),
        &Vocabulary::reference(),
    )
    .expect("golden checkpoint")
}

fn load_golden_lm() -> NGramLM {
    NGramLM::load(&golden_dir().join("lm4.sgeml"), &Vocabulary::reference()).expect("golden lm")
}

fn random_logits(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> LogitMatrix {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        *v = scale * rng.normal();
    }
    LogitMatrix::normalize(m)
}

fn dirichlet(rng: &mut Rng, c: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..c).map(|_| -rng.f64().max(1e-300).ln()).collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

#[test]
fn criterion_01_loss_closed_forms() {
    for c in [2usize, 12, 40] {
        let uniform = LogitMatrix::normalize(Mat::zeros(7, c));
        let (loss, _) = gem_loss(&uniform, &vec![true; 7], 1.5, 2.5);
        assert!(
            (loss - (c as f64).ln()).abs() < 1e-9,
            "uniform gem loss {loss} vs ln {c}"
        );
    }
    let mut hot = Mat::from_vec(4, 6, vec![-1e4; 24]);
    for i in 0..4 {
        hot.set(i, i + 1, 0.0);
    }
    let (loss, _) = gem_loss(&LogitMatrix::raw(hot), &vec![true; 4], 1.5, 1.0);
    assert!(loss.abs() < 1e-9, "one-hot gem loss {loss}");

    let h = renyi_entropy(&[0.5, 0.5], 2.0);
    assert!(
        (h - 2f64.ln()).abs() < 1e-12,
        "renyi alpha=2 of (1/2,1/2): {h}"
    );
    println!("[PASS] criterion 1: loss closed forms (uniform=log C, one-hot=0, H2(1/2,1/2)=log 2)");
}

#[test]
fn criterion_02_shannon_limit() {
    let mut rng = Rng::seed_from(0xACC2);
    for _ in 0..100 {
        let c = rng.range_inclusive(2, 50);
        let p = dirichlet(&mut rng, c);
        let diff = (renyi_entropy(&p, 1.001) - shannon_entropy(&p)).abs();
        assert!(diff < 1e-3, "alpha=1.001 diff {diff:e} at C={c}");
    }
    println!("[PASS] criterion 2: Renyi entropy at alpha=1.001 within 1e-3 of Shannon on 100 random distributions");
}

#[test]
fn criterion_03_gradient_correctness() {
    // Part 1: combined objective versus central differences on random 5x6
    // logit matrices, every coordinate.
    let mut rng = Rng::seed_from(0xACC3);
    let h = 1e-4;
    for case in 0..4 {
        let logits = random_logits(&mut rng, 5, 6, 1.3);
        let mask = vec![true; 5];
        let settings = LossSettings {
            alpha: if case % 2 == 0 { 1.5 } else { 2.0 },
            temperature: 2.5,
            tau: 0.4 / 6.0,
            lambda_ns: 1.0,
            use_gem: true,
            use_ns: true,
        };
        let (_, grad) = combined_loss_grad(&logits, &mask, &mask, &settings);
        for i in 0..5 {
            for k in 0..6 {
                let mut plus = logits.values.clone();
                plus.set(i, k, plus.get(i, k) + h);
                let mut minus = logits.values.clone();
                minus.set(i, k, minus.get(i, k) - h);
                let fp = combined_loss_grad(&LogitMatrix::raw(plus), &mask, &mask, &settings)
                    .0
                    .total;
                let fm = combined_loss_grad(&LogitMatrix::raw(minus), &mask, &mask, &settings)
                    .0
                    .total;
                let fd = (fp - fm) / (2.0 * h);
                let a = grad.get(i, k);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-3, "logit ({i},{k}): analytic {a:e} fd {fd:e}");
            }
        }
    }

    // Part 2: 50 sampled parameters of the reference model under the full
    // objective, with the acquisition (decoded sequence and mask) frozen.
    let model = load_golden_model();
    let lm = load_golden_lm();
    let utts = load_golden_corpus("corpus_shifted");
    let utt = &utts[0];
    let config = AdaptationConfig::default();
    let vocab = model.vocab().clone();
    let settings = LossSettings::from_config(&config, vocab.size());
    let ctc = match &model {
        ReferenceModel::FrameSynchronous(m) => m,
        _ => unreachable!(),
    };
    let (logits, _) = ctc.forward_cached(&utt.features).unwrap();
    let (mask, _, _) = sgem_core::decoding::ctc_acquisition_plan(&logits, &vocab, &lm, &config);
    let blank_mask = sgem_core::objectives::blank_argmax_mask(&logits, &vocab);
    let mask_gem: Vec<bool> = mask.iter().zip(&blank_mask).map(|(a, b)| a & b).collect();

    let loss_of = |m: &ReferenceModel| -> f64 {
        let c = match m {
            ReferenceModel::FrameSynchronous(c) => c,
            _ => unreachable!(),
        };
        let (lg, _) = c.forward_cached(&utt.features).unwrap();
        combined_loss_grad(&lg, &mask_gem, &mask, &settings).0.total
    };
    let (breakdown, d_logits) = combined_loss_grad(&logits, &mask_gem, &mask, &settings);
    assert!(breakdown.total.is_finite());
    let (_, cache) = ctc.forward_cached(&utt.features).unwrap();
    let grads = ctc.backward(&cache, &d_logits);

    let mut rng = Rng::seed_from(0xACC3 + 1);
    let n = model.params().flat_len();
    for _ in 0..50 {
        let idx = rng.below(n);
        let orig = model.params().get_flat(idx);
        let mut plus = model.clone();
        plus.params_mut().set_flat(idx, orig + h);
        let mut minus = model.clone();
        minus.params_mut().set_flat(idx, orig - h);
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        let a = grads.get_flat(idx);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        assert!(
            rel < 1e-3,
            "param {idx}: analytic {a:e} fd {fd:e} rel {rel:e}"
        );
    }
    println!("[PASS] criterion 3: analytic gradients match central differences (logits and 50 model parameters)");
}

/// Exhaustive alignment-marginalized search: every frame path, collapsed,
/// mass accumulated per labeling, best labeling by (score, lexicographic).
fn exhaustive_best(logits: &LogitMatrix, vocab: &Vocabulary) -> (TokenSequence, f64) {
    let frames = logits.rows();
    let classes = logits.classes();
    let mut acc: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut path = vec![0usize; frames];
    loop {
        let mass: f64 = (0..frames).map(|t| logits.row(t)[path[t]]).sum();
        let lab = ctc_collapse(&TokenSequence::new(path.clone()), vocab);
        let slot = acc.entry(lab.ids().to_vec()).or_insert(f64::NEG_INFINITY);
        *slot = lse2(*slot, mass);
        // Odometer increment.
        let mut t = 0;
        loop {
            if t == frames {
                let mut best: Option<(Vec<usize>, f64)> = None;
                for (lab, score) in acc {
                    let replace = match &best {
                        None => true,
                        Some((blab, bscore)) => {
                            score > *bscore || (score == *bscore && lab < *blab)
                        }
                    };
                    if replace {
                        best = Some((lab, score));
                    }
                }
                let (lab, score) = best.unwrap();
                return (TokenSequence::new(lab), score);
            }
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

#[test]
fn criterion_04_decoder_oracles() {
    let mut rng = Rng::seed_from(0xACC4);

    // Width-1 beam equals greedy decoding on 500 random matrices.
    for i in 0..500 {
        let c = rng.range_inclusive(3, 9);
        let l = rng.range_inclusive(2, 24);
        let tokens: Vec<String> = (0..c)
            .map(|k| {
                if k == 0 {
                    "_".to_string()
                } else {
                    char::from(b'a' + (k - 1) as u8).to_string()
                }
            })
            .collect();
        let vocab = Vocabulary::new(tokens, 0).unwrap();
        let lm = NGramLM::uniform(&vocab);
        let logits = random_logits(&mut rng, l, c, 1.6);
        let hyp = beam_search_ctc(&logits, &vocab, &lm, 1, 0.0, None).unwrap();
        assert_eq!(
            hyp.sequence,
            greedy_decode_frames(&logits, &vocab),
            "case {i}"
        );
        assert!((hyp.fused_score - (hyp.am_score + hyp.lambda_lm * hyp.lm_score)).abs() < 1e-9);
    }

    // Full-width beam equals exhaustive marginalized search for C <= 4,
    // L <= 5, sequence and score.
    for c in 2..=4usize {
        let tokens: Vec<String> = (0..c)
            .map(|k| {
                if k == 0 {
                    "_".to_string()
                } else {
                    char::from(b'a' + (k - 1) as u8).to_string()
                }
            })
            .collect();
        let vocab = Vocabulary::new(tokens, 0).unwrap();
        let lm = NGramLM::uniform(&vocab);
        for l in 1..=5usize {
            let width = c.pow(l as u32);
            for case in 0..30 {
                let logits = if case == 0 {
                    // All-tied rows exercise the lexicographic tie-break.
                    LogitMatrix::normalize(Mat::zeros(l, c))
                } else {
                    random_logits(&mut rng, l, c, 1.4)
                };
                let hyp = beam_search_ctc(&logits, &vocab, &lm, width, 0.0, None).unwrap();
                let (best_seq, best_score) = exhaustive_best(&logits, &vocab);
                assert_eq!(hyp.sequence, best_seq, "C={c} L={l} case={case}");
                assert!(
                    (hyp.am_score - best_score).abs() < 1e-9,
                    "C={c} L={l} case={case}: beam {} vs exhaustive {}",
                    hyp.am_score,
                    best_score
                );
            }
        }
    }
    println!("[PASS] criterion 4: width-1 beam = greedy on 500 matrices; full-width beam = exhaustive marginalized search");
}

/// Sample a random valid lattice path for `target` over `frames`, using an
/// exact minimum-remaining-frames table to keep every prefix completable.
fn sample_valid_path(
    rng: &mut Rng,
    frames: usize,
    target: &TokenSequence,
    blank: usize,
) -> Vec<usize> {
    let u = target.len();
    let states = 2 * u + 1;
    let label_at = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            target.ids()[(s - 1) / 2]
        }
    };
    let skip_ok = |s: usize| s % 2 == 1 && s >= 2 && label_at(s) != label_at(s - 2);
    // min_f[s]: transitions needed to reach a final state from s.
    let mut min_f = vec![usize::MAX; states];
    min_f[states - 1] = 0;
    if states > 1 {
        min_f[states - 2] = 0;
    }
    for s in (0..states.saturating_sub(2)).rev() {
        let mut best = min_f[s + 1];
        if s + 2 < states && skip_ok(s + 2) {
            best = best.min(min_f[s + 2]);
        }
        min_f[s] = best.saturating_add(1);
    }

    let mut starts = Vec::new();
    if min_f[0] <= frames - 1 {
        starts.push(0);
    }
    if states > 1 && min_f[1] <= frames - 1 {
        starts.push(1);
    }
    let mut s = starts[rng.below(starts.len())];
    let mut path = Vec::with_capacity(frames);
    for t in 0..frames {
        path.push(label_at(s));
        if t + 1 == frames {
            break;
        }
        let budget = frames - t - 2; // transitions remaining after this one
        let mut options = Vec::new();
        for next in [s, s + 1, s + 2] {
            if next >= states {
                continue;
            }
            if next == s + 2 && !skip_ok(next) {
                continue;
            }
            if min_f[next] <= budget {
                options.push(next);
            }
        }
        s = options[rng.below(options.len())];
    }
    path
}

#[test]
fn criterion_05_forced_alignment() {
    let vocab = Vocabulary::reference();
    let mut rng = Rng::seed_from(0xACC5);

    // collapse(forced_align(.)) = target on 200 random feasible cases.
    for _ in 0..200 {
        let frames = rng.range_inclusive(5, 24);
        let len = rng.range_inclusive(0, frames / 2);
        let target = TokenSequence::new((0..len).map(|_| rng.range_inclusive(1, 11)).collect());
        let logits = random_logits(&mut rng, frames, vocab.size(), 1.5);
        let align = forced_align(&logits, &target, &vocab).unwrap();
        assert_eq!(ctc_collapse(&TokenSequence::new(align), &vocab), target);
    }

    // The alignment's path score dominates 1000 sampled valid paths.
    for case in 0..10 {
        let frames = rng.range_inclusive(8, 16);
        let len = rng.range_inclusive(1, 4);
        let target = TokenSequence::new((0..len).map(|_| rng.range_inclusive(1, 11)).collect());
        let logits = random_logits(&mut rng, frames, vocab.size(), 1.5);
        let align = forced_align(&logits, &target, &vocab).unwrap();
        let score: f64 = (0..frames).map(|t| logits.row(t)[align[t]]).sum();
        for _ in 0..1000 {
            let path = sample_valid_path(&mut rng, frames, &target, vocab.blank_index());
            assert_eq!(
                ctc_collapse(&TokenSequence::new(path.clone()), &vocab),
                target,
                "sampler produced an invalid path"
            );
            let ps: f64 = (0..frames).map(|t| logits.row(t)[path[t]]).sum();
            assert!(
                score >= ps - 1e-12,
                "case {case}: sampled path beats the alignment ({ps} > {score})"
            );
        }
    }
    println!("[PASS] criterion 5: forced alignment collapses to target (200 cases) and dominates 1000 sampled paths");
}

#[test]
fn criterion_06_episodic_reset_and_order_independence() {
    let mut model = load_golden_model();
    let lm = load_golden_lm();
    let utts: Vec<Utterance> = load_golden_corpus("corpus_shifted")
        .into_iter()
        .take(12)
        .collect();
    let config = AdaptationConfig::default();

    let snap = model.snapshot();
    let run =
        |model: &mut ReferenceModel, order: &[usize]| -> Vec<(String, String, Vec<f64>, bool)> {
            order
                .iter()
                .map(|&i| {
                    let r = adapt_utterance(model, &lm, &utts[i], &config).unwrap();
                    assert!(
                        model.params().bits_equal(snap.params()),
                        "reset not bit-exact"
                    );
                    (
                        r.transcript_before,
                        r.transcript_after,
                        r.loss_trajectory.iter().map(|b| b.total).collect(),
                        r.fallback_used,
                    )
                })
                .collect()
        };
    let order_a: Vec<usize> = (0..utts.len()).collect();
    let mut order_b = order_a.clone();
    let mut rng = Rng::seed_from(0xACC6);
    rng.shuffle(&mut order_b);

    let res_a = run(&mut model, &order_a);
    let res_b = run(&mut model, &order_b);
    for (pos, &i) in order_b.iter().enumerate() {
        assert_eq!(res_a[i], res_b[pos], "utterance {i} differs across orders");
    }
    println!("[PASS] criterion 6: parameters bit-equal after every adaptation; results identical under corpus permutation");
}

#[test]
fn criterion_07_snr_mixing() {
    let mut rng = Rng::seed_from(0xACC7);
    let mut signal = Mat::zeros(80, 16);
    for v in signal.data_mut() {
        *v = 3.0 + 2.0 * rng.normal();
    }
    for (k, snr) in [(0usize, 0.0), (4, 10.0), (7, 20.0)] {
        let noise = tile_noise(&noise_texture(k, 57, 16), 80);
        let mixed = mix_at_snr(&signal, &noise, snr).unwrap();
        let mut delta = mixed.clone();
        for (d, s) in delta.data_mut().iter_mut().zip(signal.data()) {
            *d -= s;
        }
        let measured = 10.0 * (signal.mean_power() / delta.mean_power()).log10();
        assert!(
            (measured - snr).abs() < 0.01,
            "requested {snr} dB, measured {measured} dB"
        );
    }
    println!("[PASS] criterion 7: measured post-mix SNR within 0.01 dB of request at 0/10/20 dB");
}

#[test]
fn criterion_08_end_to_end_synthetic_analogue() {
    let vocab = Vocabulary::reference();
    let scratch = std::env::temp_dir().join(format!("sgem-acc8-{}", std::process::id()));
    std::fs::create_dir_all(&scratch).unwrap();

    // Source-train the frame-synchronous reference model on clean data.
    let train_manifest = make_synthetic_corpus(
        &vocab,
        2000,
        (8, 40),
        &EmissionParams::default(),
        11,
        ShiftKind::None,
        &scratch,
    )
    .unwrap();
    let manifest_path = scratch.join("manifest.jsonl");
    let train_utts: Vec<Utterance> = train_manifest
        .entries
        .iter()
        .map(|e| load_utterance(&manifest_path, e).unwrap())
        .collect();
    let mut model = ReferenceModel::new_ctc(&vocab, 7);
    let report = train_source(
        &mut model,
        &train_utts,
        &TrainingConfig {
            epochs: 20,
            seed: 7,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!report.diverged);
    assert!(
        report.heldout_wer <= 0.15,
        "clean heldout WER {:.4} exceeds the 0.15 gate",
        report.heldout_wer
    );

    // Default configuration on the shipped shifted corpus.
    let lm = load_golden_lm();
    let shifted = load_golden_corpus("corpus_shifted");
    assert!(shifted.len() >= 100, "shipped shifted corpus too small");
    let config = AdaptationConfig::default();
    let (_, before, after) = adapt_corpus(&mut model, &lm, &shifted, &config).unwrap();
    let relative = (before - after) / before;
    assert!(
        relative >= 0.05,
        "relative WER reduction {relative:.4} below the 0.05 gate (before {before:.4}, after {after:.4})"
    );

    // Toggle grid: the full row must not exceed the unadapted row.
    let rows = run_ablation(&mut model, &lm, &shifted, &config).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(
        (rows[0].use_beam_search, rows[0].use_gem, rows[0].use_ns),
        (false, false, false)
    );
    assert_eq!(
        (rows[5].use_beam_search, rows[5].use_gem, rows[5].use_ns),
        (true, true, true)
    );
    assert!(
        rows[5].wer <= rows[0].wer,
        "full row {:.4} exceeds unadapted {:.4}",
        rows[5].wer,
        rows[0].wer
    );

    std::fs::remove_dir_all(&scratch).ok();
    println!(
        "[PASS] criterion 8: clean WER {:.3} <= 0.15; shifted {:.3} -> {:.3} ({:.1}% relative, gate 5%); full ablation row {:.3} <= unadapted {:.3}",
        report.heldout_wer,
        before,
        after,
        100.0 * relative,
        rows[5].wer,
        rows[0].wer
    );
}

#[test]
fn criterion_09_noop_configurations() {
    let mut model = load_golden_model();
    let lm = load_golden_lm();
    let utts = load_golden_corpus("corpus_shifted");

    let n_zero = AdaptationConfig {
        n: 0,
        ..Default::default()
    };
    let toggles_off = AdaptationConfig {
        use_gem: false,
        use_ns: false,
        ..Default::default()
    };
    for cfg in [&n_zero, &toggles_off] {
        for utt in &utts {
            let r = adapt_utterance(&mut model, &lm, utt, cfg).unwrap();
            assert_eq!(
                r.transcript_before, r.transcript_after,
                "utterance {} changed under a no-op config",
                utt.id
            );
            assert_eq!(r.loss_trajectory.len(), cfg.n);
        }
    }
    println!("[PASS] criterion 9: N=0 and disabled-loss configs leave every transcript exactly unchanged");
}

#[test]
fn criterion_10_wer_metric() {
    let a = wer("a b c", "a x c").unwrap();
    assert_eq!(a, 1.0 / 3.0, "single substitution must be exactly 1/3");
    let b = wer("a", "a b c d").unwrap();
    assert_eq!(b, 3.0, "insertion-heavy case must be exactly 3.0");
    assert!(b > 1.0, "WER may exceed 1");
    println!(
        "[PASS] criterion 10: WER 1/3 for one substitution in three; 3.0 for insertion-heavy case"
    );
}

#[test]
fn shipped_corpus_wer_is_in_the_adaptable_regime() {
    // Companion sanity for criterion 8: the shipped shift must hurt (no
    // trivial pass) but leave usable pseudo-labels.
    let model = load_golden_model();
    let lm = load_golden_lm();
    let shifted = load_golden_corpus("corpus_shifted");
    let cfg = AdaptationConfig::default();
    let w = corpus_wer(&model, &lm, &shifted, &cfg).unwrap();
    assert!(w > 0.15, "shift too mild: {w:.3}");
    assert!(w < 0.75, "shift too destructive: {w:.3}");
}
