//! Command implementations.

use anyhow::{anyhow, bail, Context, Result};
use sgem_core::acoustic::{train_source as run_training, TrainingConfig};
use sgem_core::adaptation::{adapt_utterance, corpus_wer, run_ablation as run_ablation_grid};
use sgem_core::config::{AdaptationConfig, DecodeProtocol};
use sgem_core::corpus::{
    self, bucket_by_length, load_manifest, load_utterance, make_synthetic_corpus, save_features,
    CorpusManifest, EmissionParams, ResultRecord, ShiftKind,
};
use sgem_core::decoding::{beam_search_ctc, BeamTrace};
use sgem_core::lm::NGramLM;
use sgem_core::{ReferenceModel, Utterance, Vocabulary};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

/// Seed precedence: explicit flag, then SGEM_SEED, then zero.
fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("SGEM_SEED").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}

fn parse_decode(s: &str) -> Result<DecodeProtocol> {
    s.parse::<DecodeProtocol>().map_err(|e| anyhow!(e))
}

fn load_config(path: Option<&Path>) -> Result<AdaptationConfig> {
    let cfg = match path {
        Some(p) => AdaptationConfig::load(p).with_context(|| format!("loading config {p:?}"))?,
        None => AdaptationConfig::default(),
    };
    Ok(cfg)
}

fn load_corpus(manifest_path: &Path) -> Result<(CorpusManifest, Vec<Utterance>)> {
    let manifest = load_manifest(manifest_path)
        .with_context(|| format!("loading manifest {manifest_path:?}"))?;
    let mut utts = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        utts.push(load_utterance(manifest_path, entry)?);
    }
    Ok((manifest, utts))
}

pub fn make_corpus(
    out: &Path,
    n: usize,
    seed: Option<u64>,
    shift: &str,
    snr_db: f64,
    min_tokens: usize,
    max_tokens: usize,
) -> Result<()> {
    let vocab = Vocabulary::reference();
    let shift = ShiftKind::parse(shift, snr_db)?;
    let manifest = make_synthetic_corpus(
        &vocab,
        n,
        (min_tokens, max_tokens),
        &EmissionParams::default(),
        resolve_seed(seed),
        shift,
        out,
    )?;
    let frames: usize = manifest.entries.iter().map(|e| e.frames).sum();
    println!(
        "make-corpus out={} utterances={} frames={}",
        out.display(),
        manifest.len(),
        frames
    );
    Ok(())
}

pub fn train_source(
    manifest: &Path,
    out: &Path,
    mode: &str,
    seed: Option<u64>,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
) -> Result<()> {
    let vocab = Vocabulary::reference();
    let seed = resolve_seed(seed);
    let (_, utts) = load_corpus(manifest)?;
    let mut model = match mode {
        "ctc" => ReferenceModel::new_ctc(&vocab, seed),
        "ar" => ReferenceModel::new_ar(&vocab, seed),
        other => bail!("unknown mode {other:?} (expected ctc|ar)"),
    };
    let cfg = TrainingConfig {
        epochs,
        batch_size,
        learning_rate,
        seed,
        ..Default::default()
    };
    let report = run_training(&mut model, &utts, &cfg)?;
    println!(
        "train-source mode={mode} epochs={} train={} heldout={} final_loss={:.6} heldout_wer={:.4} diverged={}",
        report.epochs_run,
        report.train_utterances,
        report.heldout_utterances,
        report.final_loss,
        report.heldout_wer,
        report.diverged
    );
    if report.diverged {
        let partial = out.with_extension(
            out.extension()
                .map(|e| format!("{}.partial", e.to_string_lossy()))
                .unwrap_or_else(|| "partial".into()),
        );
        model.save(&partial)?;
        bail!("training diverged; last finite checkpoint kept at {partial:?}");
    }
    model.save(out)?;
    println!("checkpoint={}", out.display());
    Ok(())
}

pub fn fit_lm(manifest: &Path, out: &Path, order: usize, smoothing_k: f64) -> Result<()> {
    let vocab = Vocabulary::reference();
    let m = load_manifest(manifest)?;
    let mut transcripts = Vec::new();
    for e in &m.entries {
        let text = e
            .reference
            .as_deref()
            .ok_or_else(|| anyhow!("utterance {} has no reference", e.id))?;
        transcripts.push(vocab.encode(text)?);
    }
    let lm = NGramLM::fit(&transcripts, order, &vocab, smoothing_k)?;
    lm.save(out, &vocab)?;
    println!(
        "fit-lm order={order} contexts={} out={}",
        lm.contexts(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn adapt(
    model_path: &Path,
    lm_path: &Path,
    manifest: &Path,
    config: Option<&Path>,
    out: &Path,
    decode: Option<&str>,
    jobs: usize,
    seed: Option<u64>,
) -> Result<()> {
    let vocab = Vocabulary::reference();
    let model = ReferenceModel::load(model_path, &vocab)?;
    let lm = NGramLM::load(lm_path, &vocab)?;
    let mut cfg = load_config(config)?;
    if let Some(d) = decode {
        cfg.decode = parse_decode(d)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (_, utts) = load_corpus(manifest)?;
    for u in &utts {
        if u.reference.is_none() {
            bail!("utterance {} has no reference", u.id);
        }
    }

    let jobs = jobs.max(1).min(utts.len().max(1));
    let mut slots: Vec<Option<ResultRecord>> = vec![None; utts.len()];
    let (tx, rx) = mpsc::channel::<(usize, Result<ResultRecord>)>();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            let tx = tx.clone();
            let model = &model;
            let lm = &lm;
            let cfg = &cfg;
            let utts = &utts;
            let next = &next;
            scope.spawn(move || {
                let mut local = model.clone();
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= utts.len() {
                        break;
                    }
                    let record = adapt_one(&mut local, lm, &utts[i], cfg);
                    if tx.send((i, record)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        for (i, record) in rx {
            slots[i] = Some(record?);
        }
        anyhow::Ok(())
    })?;

    let records: Vec<ResultRecord> = slots
        .into_iter()
        .map(|r| r.expect("all slots filled"))
        .collect();
    corpus::write_results(out, &records)?;

    let mut dist_before = 0usize;
    let mut dist_after = 0usize;
    let mut words = 0usize;
    let mut fallbacks = 0usize;
    for r in &records {
        let (db, w) = corpus::word_edit_distance(&r.reference, &r.hyp_before);
        let (da, _) = corpus::word_edit_distance(&r.reference, &r.hyp_after);
        dist_before += db;
        dist_after += da;
        words += w;
        fallbacks += usize::from(r.fallback);
    }
    let wer_before = dist_before as f64 / words.max(1) as f64;
    let wer_after = dist_after as f64 / words.max(1) as f64;
    let relative = if wer_before > 0.0 {
        (wer_before - wer_after) / wer_before
    } else {
        0.0
    };
    println!(
        "adapt utterances={} wer_before={:.4} wer_after={:.4} relative_reduction={:.4} fallbacks={} out={}",
        records.len(),
        wer_before,
        wer_after,
        relative,
        fallbacks,
        out.display()
    );
    Ok(())
}

fn adapt_one(
    model: &mut ReferenceModel,
    lm: &NGramLM,
    utt: &Utterance,
    cfg: &AdaptationConfig,
) -> Result<ResultRecord> {
    let reference = utt
        .reference
        .clone()
        .ok_or_else(|| anyhow!("utterance {} has no reference", utt.id))?;
    let r = adapt_utterance(model, lm, utt, cfg)?;
    Ok(ResultRecord {
        id: r.utterance_id,
        wer_before: corpus::wer(&reference, &r.transcript_before)?,
        wer_after: corpus::wer(&reference, &r.transcript_after)?,
        reference,
        hyp_before: r.transcript_before,
        hyp_after: r.transcript_after,
        losses: r.loss_trajectory.iter().map(|b| b.total).collect(),
        fallback: r.fallback_used,
    })
}

pub fn evaluate(
    model_path: &Path,
    manifest: &Path,
    decode: Option<&str>,
    lm_path: Option<&Path>,
    buckets: Option<&str>,
    beam_trace: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    let vocab = Vocabulary::reference();
    let model = ReferenceModel::load(model_path, &vocab)?;
    let lm = match lm_path {
        Some(p) => NGramLM::load(p, &vocab)?,
        None => NGramLM::uniform(&vocab),
    };
    let mut cfg = load_config(config)?;
    if let Some(d) = decode {
        cfg.decode = parse_decode(d)?;
    }
    let (manifest_data, utts) = load_corpus(manifest)?;
    for u in &utts {
        if u.reference.is_none() {
            bail!("utterance {} has no reference", u.id);
        }
    }

    if let Some(dir) = beam_trace {
        if cfg.decode != DecodeProtocol::Beam {
            bail!("--beam-trace requires --decode beam");
        }
        std::fs::create_dir_all(dir)?;
        for u in &utts {
            if let ReferenceModel::FrameSynchronous(m) = &model {
                let logits = m.forward_frames(u)?;
                let mut trace = BeamTrace::new();
                beam_search_ctc(
                    &logits,
                    &vocab,
                    &lm,
                    cfg.beam_width,
                    cfg.lambda_lm,
                    Some(&mut trace),
                )?;
                std::fs::write(dir.join(format!("{}.trace", u.id)), trace.render())?;
            }
        }
    }

    let overall = corpus_wer(&model, &lm, &utts, &cfg)?;
    println!(
        "evaluate utterances={} decode={} wer={:.4}",
        utts.len(),
        cfg.decode,
        overall
    );

    let edges: Vec<usize> = match buckets {
        Some(spec) => spec
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<usize>().context("bad bucket edge"))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    if !edges.is_empty() {
        let groups = bucket_by_length(&manifest_data, &edges)?;
        let mut bounds = Vec::new();
        let mut lo = "-inf".to_string();
        for e in &edges {
            bounds.push((lo.clone(), e.to_string()));
            lo = e.to_string();
        }
        bounds.push((lo, "+inf".to_string()));
        for (bucket, (lo, hi)) in groups.iter().zip(&bounds) {
            let ids: std::collections::HashSet<&str> =
                bucket.entries.iter().map(|e| e.id.as_str()).collect();
            let subset: Vec<Utterance> = utts
                .iter()
                .filter(|u| ids.contains(u.id.as_str()))
                .cloned()
                .collect();
            if subset.is_empty() {
                println!("bucket=[{lo},{hi}) utterances=0 wer=n/a");
            } else {
                let w = corpus_wer(&model, &lm, &subset, &cfg)?;
                println!(
                    "bucket=[{lo},{hi}) utterances={} wer={:.4}",
                    subset.len(),
                    w
                );
            }
        }
    }
    Ok(())
}

pub fn ablate(
    model_path: &Path,
    lm_path: &Path,
    manifest: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let vocab = Vocabulary::reference();
    let mut model = ReferenceModel::load(model_path, &vocab)?;
    let lm = NGramLM::load(lm_path, &vocab)?;
    let cfg = load_config(config)?;
    cfg.validate()?;
    let (_, utts) = load_corpus(manifest)?;
    let rows = run_ablation_grid(&mut model, &lm, &utts, &cfg)?;
    println!("BS   GEM  NS   WER");
    let mark = |b: bool| if b { "x" } else { "-" };
    for r in &rows {
        println!(
            "{:<4} {:<4} {:<4} {:.4}",
            mark(r.use_beam_search),
            mark(r.use_gem),
            mark(r.use_ns),
            r.wer
        );
    }
    for (i, r) in rows.iter().enumerate() {
        println!(
            "ablate row={} bs={} gem={} ns={} wer={:.4}",
            i, r.use_beam_search, r.use_gem, r.use_ns, r.wer
        );
    }
    Ok(())
}

pub fn dump_logits(
    model_path: &Path,
    manifest: &Path,
    out: &Path,
    limit: Option<usize>,
) -> Result<()> {
    let vocab = Vocabulary::reference();
    let model = ReferenceModel::load(model_path, &vocab)?;
    let (_, utts) = load_corpus(manifest)?;
    std::fs::create_dir_all(out)?;
    let take = limit.unwrap_or(utts.len());
    let mut written = 0usize;
    for u in utts.iter().take(take) {
        let logits = model.forward_frames(u)?;
        save_features(&out.join(format!("{}.logits", u.id)), &logits.values)?;
        written += 1;
    }
    println!("dump-logits utterances={written} out={}", out.display());
    Ok(())
}
