//! Synthetic corpora and evaluation plumbing: token-emission feature
//! generation, SNR-controlled shift injection, manifest/feature/results
//! file formats, word/character error rates and length bucketing.
//!
//! Feature geometry: every non-blank token owns a Gaussian class mean
//! `carrier + offset_c`. The carrier is a large vector shared by all
//! classes, so at a fixed SNR the injected noise is sized against total
//! signal power, not against the (much smaller) class separation - which is
//! what makes a 10 dB shift genuinely hurt recognition. Class geometry is
//! derived from fixed seeds, independent of the corpus seed, so every
//! generated corpus speaks the same language.

use crate::mat::Mat;
use crate::rng::Rng;
use crate::types::{Utterance, Vocabulary};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

const FEATURE_MAGIC: &[u8; 6] = b"SGEMF1";
const CLASS_GEOMETRY_SEED: u64 = 0x5EED_C1A5;
const LEXICON_SEED: u64 = 0x5EED_1E0C;
const TEXTURE_SEED: u64 = 0x5EED_7E87;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("corpus format: {0}")]
    Format(String),
    #[error("corpus: {0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Emission model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EmissionParams {
    pub feature_dim: usize,
    /// Norm of the carrier vector every class mean shares.
    pub carrier_norm: f64,
    /// Norm of each per-class offset from the carrier.
    pub class_offset_norm: f64,
    /// Minimum pairwise class-mean separation divided by the clean noise
    /// standard deviation.
    pub separation_over_sigma: f64,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
}

impl Default for EmissionParams {
    fn default() -> Self {
        EmissionParams {
            feature_dim: 16,
            carrier_norm: 110.0,
            class_offset_norm: 44.0,
            separation_over_sigma: 4.0,
            min_frames_per_token: 2,
            max_frames_per_token: 4,
        }
    }
}

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Per-token class means, indexed by token id (the blank row is zero and
/// never emitted). Deterministic for a given vocabulary size and emission
/// geometry.
pub fn class_means(vocab: &Vocabulary, emission: &EmissionParams) -> Vec<Vec<f64>> {
    let mut rng = Rng::seed_from(CLASS_GEOMETRY_SEED);
    let dim = emission.feature_dim;
    let carrier: Vec<f64> = unit_vector(&mut rng, dim)
        .into_iter()
        .map(|v| v * emission.carrier_norm)
        .collect();
    let mut means = vec![vec![0.0; dim]; vocab.size()];
    for (id, mean) in means.iter_mut().enumerate() {
        if id == vocab.blank_index() {
            continue;
        }
        let offset = unit_vector(&mut rng, dim);
        for d in 0..dim {
            mean[d] = carrier[d] + emission.class_offset_norm * offset[d];
        }
    }
    means
}

/// Clean emission noise derived from the class geometry: minimum pairwise
/// mean distance divided by `separation_over_sigma`.
pub fn sigma_clean(vocab: &Vocabulary, emission: &EmissionParams, means: &[Vec<f64>]) -> f64 {
    let blank = vocab.blank_index();
    let mut min_dist = f64::INFINITY;
    for i in 0..means.len() {
        for j in (i + 1)..means.len() {
            if i == blank || j == blank {
                continue;
            }
            let d: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    min_dist / emission.separation_over_sigma
}

// ---------------------------------------------------------------------------
// Language prior
// ---------------------------------------------------------------------------

/// Fixed synthetic lexicon over the letter tokens: 40 words of two to five
/// letters with no doubled letters (doubled letters would need separating
/// blanks that a short emission cannot always afford).
pub fn reference_lexicon(vocab: &Vocabulary) -> Vec<String> {
    let letters: Vec<&str> = (0..vocab.size())
        .filter(|&id| id != vocab.blank_index() && vocab.token(id) != " ")
        .map(|id| vocab.token(id))
        .collect();
    let mut rng = Rng::seed_from(LEXICON_SEED);
    let mut words = Vec::new();
    while words.len() < 40 {
        let len = rng.range_inclusive(2, 5);
        let mut word = String::new();
        let mut last = usize::MAX;
        for _ in 0..len {
            let mut pick = rng.below(letters.len());
            while pick == last {
                pick = rng.below(letters.len());
            }
            word.push_str(letters[pick]);
            last = pick;
        }
        if !words.contains(&word) {
            words.push(word);
        }
    }
    words
}

/// Sample a sentence from the lexicon prior (Zipf-weighted words joined by
/// spaces), keeping the token count within the inclusive range.
pub fn sample_sentence(
    rng: &mut Rng,
    lexicon: &[String],
    min_tokens: usize,
    max_tokens: usize,
) -> String {
    debug_assert!(min_tokens >= 1 && min_tokens <= max_tokens);
    let weights: Vec<f64> = (0..lexicon.len()).map(|i| 1.0 / (i + 1) as f64).collect();
    let total: f64 = weights.iter().sum();
    let pick_word = |rng: &mut Rng| -> &str {
        let mut x = rng.f64() * total;
        for (i, w) in weights.iter().enumerate() {
            x -= w;
            if x <= 0.0 {
                return &lexicon[i];
            }
        }
        &lexicon[lexicon.len() - 1]
    };
    let mut sentence = String::new();
    let mut tokens = 0usize;
    loop {
        let word = pick_word(rng);
        let cost = word.chars().count() + usize::from(tokens > 0);
        if tokens + cost > max_tokens {
            if tokens >= min_tokens {
                break;
            }
            // Cannot fit another word but still below the minimum: retry.
            continue;
        }
        if tokens > 0 {
            sentence.push(' ');
        }
        sentence.push_str(word);
        tokens += cost;
        if tokens >= max_tokens {
            break;
        }
    }
    sentence
}

// ---------------------------------------------------------------------------
// Shift injection
// ---------------------------------------------------------------------------

pub const TEXTURE_NAMES: [&str; 8] = [
    "hum", "buzz", "drift", "pulse", "hiss", "crackle", "wobble", "bands",
];

/// One of eight fixed structured noise patterns, generated at unit-ish power
/// and rescaled by [`mix_at_snr`]. Deterministic per index.
pub fn noise_texture(index: usize, frames: usize, dim: usize) -> Mat {
    let mut rng = Rng::seed_from(TEXTURE_SEED.wrapping_add(index as u64 * 0x9E37));
    let mut m = Mat::zeros(frames, dim);
    match index % 8 {
        0 => {
            // hum: slow sinusoids plus a per-dim offset
            let offs: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let freqs: Vec<f64> = (0..dim).map(|_| rng.uniform(0.01, 0.05)).collect();
            let phases: Vec<f64> = (0..dim)
                .map(|_| rng.uniform(0.0, std::f64::consts::TAU))
                .collect();
            for t in 0..frames {
                for d in 0..dim {
                    let v =
                        offs[d] + (std::f64::consts::TAU * freqs[d] * t as f64 + phases[d]).sin();
                    m.set(t, d, v);
                }
            }
        }
        1 => {
            // buzz: fast sinusoids
            let freqs: Vec<f64> = (0..dim).map(|_| rng.uniform(0.25, 0.45)).collect();
            let phases: Vec<f64> = (0..dim)
                .map(|_| rng.uniform(0.0, std::f64::consts::TAU))
                .collect();
            for t in 0..frames {
                for d in 0..dim {
                    m.set(
                        t,
                        d,
                        (std::f64::consts::TAU * freqs[d] * t as f64 + phases[d]).sin(),
                    );
                }
            }
        }
        2 => {
            // drift: smoothed random walk
            let mut state: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            for t in 0..frames {
                for d in 0..dim {
                    state[d] = 0.97 * state[d] + 0.25 * rng.normal();
                    m.set(t, d, state[d]);
                }
            }
        }
        3 => {
            // pulse: periodic bursts
            let period = rng.range_inclusive(12, 24);
            let width = period / 3;
            for t in 0..frames {
                let on = t % period < width;
                for d in 0..dim {
                    m.set(
                        t,
                        d,
                        if on {
                            1.2 + 0.3 * rng.normal()
                        } else {
                            0.05 * rng.normal()
                        },
                    );
                }
            }
        }
        4 => {
            // hiss: white noise
            for t in 0..frames {
                for d in 0..dim {
                    m.set(t, d, rng.normal());
                }
            }
        }
        5 => {
            // crackle: sparse spikes on a quiet floor
            for t in 0..frames {
                for d in 0..dim {
                    let v = if rng.f64() < 0.04 {
                        4.0 * rng.normal()
                    } else {
                        0.08 * rng.normal()
                    };
                    m.set(t, d, v);
                }
            }
        }
        6 => {
            // wobble: amplitude-modulated mid-band tone
            let carrier: Vec<f64> = (0..dim).map(|_| rng.uniform(0.10, 0.20)).collect();
            let lfo = rng.uniform(0.005, 0.02);
            for t in 0..frames {
                let env = 0.5 * (1.0 + (std::f64::consts::TAU * lfo * t as f64).sin());
                for d in 0..dim {
                    m.set(
                        t,
                        d,
                        env * (std::f64::consts::TAU * carrier[d] * t as f64).sin(),
                    );
                }
            }
        }
        _ => {
            // bands: near-stationary per-dim offsets with rare level shifts
            let mut level: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            for t in 0..frames {
                for d in 0..dim {
                    if rng.f64() < 0.004 {
                        level[d] = rng.uniform(-1.0, 1.0);
                    }
                    m.set(t, d, level[d] + 0.1 * rng.normal());
                }
            }
        }
    }
    m
}

/// Repeat or truncate `noise` rows to `frames`.
pub fn tile_noise(noise: &Mat, frames: usize) -> Mat {
    let mut out = Mat::zeros(frames, noise.cols());
    for t in 0..frames {
        out.row_mut(t).copy_from_slice(noise.row(t % noise.rows()));
    }
    out
}

/// signal + g * noise, with g chosen so the post-mix SNR (mean-square power
/// ratio) equals `snr_db`.
pub fn mix_at_snr(signal: &Mat, noise: &Mat, snr_db: f64) -> Result<Mat, CorpusError> {
    if signal.rows() != noise.rows() || signal.cols() != noise.cols() {
        return Err(CorpusError::Invalid("signal/noise shape mismatch".into()));
    }
    let p_signal = signal.mean_power();
    let p_noise = noise.mean_power();
    if p_noise <= 0.0 {
        return Err(CorpusError::Invalid("noise has zero power".into()));
    }
    if p_signal <= 0.0 {
        return Err(CorpusError::Invalid("signal has zero power".into()));
    }
    let g = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut out = signal.clone();
    for (o, n) in out.data_mut().iter_mut().zip(noise.data()) {
        *o += g * n;
    }
    Ok(out)
}

/// Shift applied to generated features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShiftKind {
    None,
    Gauss { snr_db: f64 },
    Texture { index: usize, snr_db: f64 },
}

impl ShiftKind {
    /// Parse the CLI syntax `none | gauss | texture:K` plus an SNR.
    pub fn parse(spec: &str, snr_db: f64) -> Result<Self, CorpusError> {
        if spec == "none" {
            return Ok(ShiftKind::None);
        }
        if spec == "gauss" {
            return Ok(ShiftKind::Gauss { snr_db });
        }
        if let Some(k) = spec.strip_prefix("texture:") {
            let index: usize = k
                .parse()
                .map_err(|_| CorpusError::Invalid(format!("bad texture index {k:?}")))?;
            if index >= TEXTURE_NAMES.len() {
                return Err(CorpusError::Invalid(format!(
                    "texture index {index} out of range (0..{})",
                    TEXTURE_NAMES.len()
                )));
            }
            return Ok(ShiftKind::Texture { index, snr_db });
        }
        Err(CorpusError::Invalid(format!(
            "unknown shift {spec:?} (expected none|gauss|texture:K)"
        )))
    }
}

// ---------------------------------------------------------------------------
// Manifests and generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Feature file path, relative to the manifest's directory.
    pub features: String,
    pub reference: Option<String>,
    pub frames: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Quantize every entry to f32 precision, matching the feature-file payload.
pub fn quantize_f32(m: &mut Mat) {
    for v in m.data_mut() {
        *v = *v as f32 as f64;
    }
}

pub fn write_features(w: &mut dyn Write, m: &Mat) -> Result<(), CorpusError> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for &v in m.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features(r: &mut dyn Read) -> Result<Mat, CorpusError> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(CorpusError::Format("bad feature-file magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rows = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let cols = u32::from_le_bytes(b4) as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(CorpusError::Format(
            "unreasonable feature-file shape".into(),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4) as f64);
    }
    Ok(Mat::from_vec(rows, cols, data))
}

pub fn save_features(path: &Path, m: &Mat) -> Result<(), CorpusError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_features(&mut f, m)
}

pub fn load_features(path: &Path) -> Result<Mat, CorpusError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_features(&mut f)
}

pub fn save_manifest(path: &Path, manifest: &CorpusManifest) -> Result<(), CorpusError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in &manifest.entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Load a manifest and verify its invariants: unique ids, every referenced
/// feature file present with a readable header.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest, CorpusError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (no, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Format(format!("manifest line {}: {e}", no + 1)))?;
        if !seen.insert(entry.id.clone()) {
            return Err(CorpusError::Format(format!("duplicate id {:?}", entry.id)));
        }
        let fpath = dir.join(&entry.features);
        let mut fh = std::fs::File::open(&fpath).map_err(|e| {
            CorpusError::Format(format!("feature file {:?} unreadable: {e}", fpath))
        })?;
        let mut header = [0u8; 14];
        fh.read_exact(&mut header)
            .map_err(|_| CorpusError::Format(format!("feature file {fpath:?} truncated")))?;
        if &header[..6] != FEATURE_MAGIC {
            return Err(CorpusError::Format(format!(
                "feature file {fpath:?} has bad magic"
            )));
        }
        entries.push(entry);
    }
    Ok(CorpusManifest { entries })
}

pub fn load_utterance(
    manifest_path: &Path,
    entry: &ManifestEntry,
) -> Result<Utterance, CorpusError> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let features = load_features(&dir.join(&entry.features))?;
    Utterance::new(entry.id.clone(), features, entry.reference.clone())
        .map_err(|e| CorpusError::Invalid(e.to_string()))
}

/// Generate `n_utterances` synthetic utterances under the emission model and
/// optional shift, writing feature files and the manifest under `out_dir`.
/// Fully determined by `seed`.
pub fn make_synthetic_corpus(
    vocab: &Vocabulary,
    n_utterances: usize,
    token_range: (usize, usize),
    emission: &EmissionParams,
    seed: u64,
    shift: ShiftKind,
    out_dir: &Path,
) -> Result<CorpusManifest, CorpusError> {
    let (min_tokens, max_tokens) = token_range;
    if min_tokens < 1 || max_tokens > 100 || min_tokens > max_tokens {
        return Err(CorpusError::Invalid(
            "token range must satisfy 1 <= min <= max <= 100".into(),
        ));
    }
    std::fs::create_dir_all(out_dir.join("features"))?;
    let means = class_means(vocab, emission);
    let sigma = sigma_clean(vocab, emission, &means);
    let lexicon = reference_lexicon(vocab);
    let texture = match shift {
        ShiftKind::Texture { index, .. } => Some(noise_texture(index, 257, emission.feature_dim)),
        _ => None,
    };
    let mut rng = Rng::seed_from(seed);
    let mut entries = Vec::with_capacity(n_utterances);
    for i in 0..n_utterances {
        let id = format!("utt{i:05}");
        let sentence = sample_sentence(&mut rng, &lexicon, min_tokens, max_tokens);
        let tokens = vocab
            .encode(&sentence)
            .map_err(|e| CorpusError::Invalid(e.to_string()))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for &tok in tokens.ids() {
            let dur =
                rng.range_inclusive(emission.min_frames_per_token, emission.max_frames_per_token);
            for _ in 0..dur {
                let mut row = vec![0.0; emission.feature_dim];
                for (d, v) in row.iter_mut().enumerate() {
                    *v = means[tok][d] + sigma * rng.normal();
                }
                rows.push(row);
            }
        }
        let clean = Mat::from_rows(&rows);
        let mut features = match shift {
            ShiftKind::None => clean,
            ShiftKind::Gauss { snr_db } => {
                let mut noise = Mat::zeros(clean.rows(), clean.cols());
                for v in noise.data_mut() {
                    *v = rng.normal();
                }
                mix_at_snr(&clean, &noise, snr_db)?
            }
            ShiftKind::Texture { snr_db, .. } => {
                let tiled = tile_noise(texture.as_ref().unwrap(), clean.rows());
                mix_at_snr(&clean, &tiled, snr_db)?
            }
        };
        quantize_f32(&mut features);
        let rel = format!("features/{id}.feat");
        save_features(&out_dir.join(&rel), &features)?;
        entries.push(ManifestEntry {
            id,
            features: rel,
            reference: Some(sentence),
            frames: features.rows(),
        });
    }
    let manifest = CorpusManifest { entries };
    save_manifest(&out_dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    if n == 0 {
        return m;
    }
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Word-level edit distance and reference word count.
pub fn word_edit_distance(reference: &str, hypothesis: &str) -> (usize, usize) {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    (levenshtein(&r, &h), r.len())
}

/// Word error rate: Levenshtein over whitespace-delimited words divided by
/// the reference length. Unbounded above; an empty reference is rejected.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64, CorpusError> {
    let (dist, words) = word_edit_distance(reference, hypothesis);
    if words == 0 {
        return Err(CorpusError::Invalid("empty reference".into()));
    }
    Ok(dist as f64 / words as f64)
}

/// Character error rate over raw tokens (trimmed), the secondary metric.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64, CorpusError> {
    let r: Vec<char> = reference.trim().chars().collect();
    if r.is_empty() {
        return Err(CorpusError::Invalid("empty reference".into()));
    }
    let h: Vec<char> = hypothesis.trim().chars().collect();
    Ok(levenshtein(&r, &h) as f64 / r.len() as f64)
}

/// Partition by `duration_frames` into half-open buckets: (-inf, e1), [e1,
/// e2), ..., [ek, inf). No edges means a single bucket.
pub fn bucket_by_length(
    manifest: &CorpusManifest,
    edges: &[usize],
) -> Result<Vec<CorpusManifest>, CorpusError> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CorpusError::Invalid(
            "bucket edges must be strictly increasing".into(),
        ));
    }
    let mut buckets = vec![CorpusManifest::default(); edges.len() + 1];
    for e in &manifest.entries {
        let idx = edges.partition_point(|&edge| edge <= e.frames);
        buckets[idx].entries.push(e.clone());
    }
    Ok(buckets)
}

// ---------------------------------------------------------------------------
// Results file
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ResultRecord {
    pub id: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub hyp_before: String,
    pub hyp_after: String,
    pub wer_before: f64,
    pub wer_after: f64,
    /// Per-iteration total loss values.
    pub losses: Vec<f64>,
    pub fallback: bool,
}

pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<(), CorpusError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>, CorpusError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("sgem-corpus-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn wer_basic_cases() {
        assert_eq!(wer("a b c", "a b c").unwrap(), 0.0);
        assert!((wer("a b c", "a x c").unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer("a", "a b c d").unwrap(), 3.0);
        assert!(wer("   ", "a").is_err());
        // Whitespace-invariant.
        assert_eq!(wer("  a b ", "a b").unwrap(), 0.0);
    }

    #[test]
    fn wer_triangle_style_bound() {
        let mut rng = Rng::seed_from(12);
        let lex = ["ab", "cd", "efg", "h"];
        for _ in 0..200 {
            let mk = |rng: &mut Rng| -> String {
                let n = rng.range_inclusive(1, 6);
                (0..n)
                    .map(|_| lex[rng.below(4)])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let r = mk(&mut rng);
            let h = mk(&mut rng);
            let w = wer(&r, &h).unwrap();
            let rw = r.split_whitespace().count() as f64;
            let hw = h.split_whitespace().count() as f64;
            assert!(w <= (rw + hw) / rw + 1e-12);
        }
    }

    #[test]
    fn cer_counts_characters() {
        assert!((cer("abc", "abd").unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn snr_gain_is_unity_at_equal_power() {
        let mut rng = Rng::seed_from(3);
        let mut s = Mat::zeros(40, 8);
        let mut n = Mat::zeros(40, 8);
        for v in s.data_mut() {
            *v = 2.0 * rng.normal();
        }
        for v in n.data_mut() {
            *v = rng.normal();
        }
        // Normalize both to the same power, then the 0 dB gain is 1.
        let scale = (s.mean_power() / n.mean_power()).sqrt();
        for v in n.data_mut() {
            *v *= scale;
        }
        let mixed = mix_at_snr(&s, &n, 0.0).unwrap();
        for ((m, sv), nv) in mixed.data().iter().zip(s.data()).zip(n.data()) {
            assert!((m - (sv + nv)).abs() < 1e-9);
        }
    }

    #[test]
    fn snr_measured_matches_request() {
        let mut rng = Rng::seed_from(4);
        let mut s = Mat::zeros(64, 16);
        let mut n = Mat::zeros(64, 16);
        for v in s.data_mut() {
            *v = 3.0 * rng.normal();
        }
        for v in n.data_mut() {
            *v = 0.7 * rng.normal();
        }
        for snr in [0.0, 10.0, 20.0] {
            let mixed = mix_at_snr(&s, &n, snr).unwrap();
            let mut noise_part = mixed.clone();
            for (np, sv) in noise_part.data_mut().iter_mut().zip(s.data()) {
                *np -= sv;
            }
            let measured = 10.0 * (s.mean_power() / noise_part.mean_power()).log10();
            assert!(
                (measured - snr).abs() < 0.01,
                "snr {snr}: measured {measured}"
            );
        }
    }

    #[test]
    fn snr_large_request_keeps_signal() {
        let mut s = Mat::zeros(10, 4);
        for (i, v) in s.data_mut().iter_mut().enumerate() {
            *v = (i % 7) as f64 - 3.0;
        }
        let n = noise_texture(4, 10, 4);
        let mixed = mix_at_snr(&s, &n, 300.0).unwrap();
        for (m, sv) in mixed.data().iter().zip(s.data()) {
            assert!((m - sv).abs() < 1e-6);
        }
    }

    #[test]
    fn snr_rejects_zero_power_noise() {
        let mut s = Mat::zeros(4, 2);
        s.set(0, 0, 1.0);
        let z = Mat::zeros(4, 2);
        assert!(mix_at_snr(&s, &z, 10.0).is_err());
    }

    #[test]
    fn mix_is_linear_in_signal_for_fixed_scaled_noise() {
        let mut rng = Rng::seed_from(5);
        let mut s = Mat::zeros(12, 3);
        for v in s.data_mut() {
            *v = rng.normal() * 2.0;
        }
        let n = noise_texture(0, 12, 3);
        let mixed = mix_at_snr(&s, &n, 10.0).unwrap();
        // Extract the scaled noise, then signal-linearity is exact.
        let mut scaled = mixed.clone();
        for (v, sv) in scaled.data_mut().iter_mut().zip(s.data()) {
            *v -= sv;
        }
        let mut doubled = s.clone();
        for v in doubled.data_mut() {
            *v *= 2.0;
        }
        for ((sv, nv), dv) in s.data().iter().zip(scaled.data()).zip(doubled.data()) {
            let lhs = 2.0 * (sv + nv) - (dv + nv);
            assert!((lhs - *nv).abs() < 1e-9);
        }
    }

    #[test]
    fn textures_are_deterministic_and_distinct() {
        for k in 0..8 {
            let a = noise_texture(k, 50, 6);
            let b = noise_texture(k, 50, 6);
            assert_eq!(a, b);
            assert!(a.mean_power() > 0.0);
        }
        assert_ne!(noise_texture(0, 50, 6), noise_texture(1, 50, 6));
    }

    #[test]
    fn corpus_generation_is_deterministic() {
        let vocab = Vocabulary::reference();
        let d1 = tmpdir("det1");
        let d2 = tmpdir("det2");
        let em = EmissionParams::default();
        let m1 = make_synthetic_corpus(&vocab, 5, (8, 30), &em, 42, ShiftKind::None, &d1).unwrap();
        let m2 = make_synthetic_corpus(&vocab, 5, (8, 30), &em, 42, ShiftKind::None, &d2).unwrap();
        assert_eq!(m1, m2);
        for e in &m1.entries {
            let a = std::fs::read(d1.join(&e.features)).unwrap();
            let b = std::fs::read(d2.join(&e.features)).unwrap();
            assert_eq!(a, b, "feature bytes differ for {}", e.id);
        }
        std::fs::remove_dir_all(&d1).ok();
        std::fs::remove_dir_all(&d2).ok();
    }

    #[test]
    fn empty_corpus_is_fine() {
        let vocab = Vocabulary::reference();
        let dir = tmpdir("empty");
        let m = make_synthetic_corpus(
            &vocab,
            0,
            (8, 30),
            &EmissionParams::default(),
            1,
            ShiftKind::None,
            &dir,
        )
        .unwrap();
        assert!(m.is_empty());
        assert!(load_manifest(&dir.join("manifest.jsonl"))
            .unwrap()
            .is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn shifted_corpus_shares_references_differs_in_features() {
        let vocab = Vocabulary::reference();
        let d1 = tmpdir("clean");
        let d2 = tmpdir("shift");
        let em = EmissionParams::default();
        let clean =
            make_synthetic_corpus(&vocab, 4, (8, 30), &em, 9, ShiftKind::None, &d1).unwrap();
        let shifted = make_synthetic_corpus(
            &vocab,
            4,
            (8, 30),
            &em,
            9,
            ShiftKind::Texture {
                index: 3,
                snr_db: 10.0,
            },
            &d2,
        )
        .unwrap();
        for (a, b) in clean.entries.iter().zip(&shifted.entries) {
            assert_eq!(a.reference, b.reference);
            let fa = std::fs::read(d1.join(&a.features)).unwrap();
            let fb = std::fs::read(d2.join(&b.features)).unwrap();
            assert_ne!(fa, fb);
        }
        std::fs::remove_dir_all(&d1).ok();
        std::fs::remove_dir_all(&d2).ok();
    }

    #[test]
    fn feature_file_round_trip_bit_exact() {
        let mut rng = Rng::seed_from(6);
        let mut m = Mat::zeros(9, 5);
        for v in m.data_mut() {
            *v = 100.0 * rng.normal();
        }
        quantize_f32(&mut m);
        let mut buf = Vec::new();
        write_features(&mut buf, &m).unwrap();
        let back = read_features(&mut buf.as_slice()).unwrap();
        assert_eq!(m, back);
        let mut buf2 = Vec::new();
        write_features(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let vocab = Vocabulary::reference();
        let dir = tmpdir("manifest");
        let m = make_synthetic_corpus(
            &vocab,
            3,
            (8, 20),
            &EmissionParams::default(),
            2,
            ShiftKind::None,
            &dir,
        )
        .unwrap();
        let loaded = load_manifest(&dir.join("manifest.jsonl")).unwrap();
        assert_eq!(m, loaded);
        let utt = load_utterance(&dir.join("manifest.jsonl"), &loaded.entries[0]).unwrap();
        assert_eq!(utt.frames(), loaded.entries[0].frames);
        // Deleting a feature file breaks validation.
        std::fs::remove_file(dir.join(&loaded.entries[1].features)).unwrap();
        assert!(load_manifest(&dir.join("manifest.jsonl")).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn buckets_partition_everything() {
        let entries: Vec<ManifestEntry> = (0..20)
            .map(|i| ManifestEntry {
                id: format!("u{i}"),
                features: "x".into(),
                reference: None,
                frames: i * 7 % 50,
            })
            .collect();
        let manifest = CorpusManifest { entries };
        let buckets = bucket_by_length(&manifest, &[10, 30]).unwrap();
        assert_eq!(buckets.len(), 3);
        let total: usize = buckets.iter().map(CorpusManifest::len).sum();
        assert_eq!(total, manifest.len());
        for e in &buckets[0].entries {
            assert!(e.frames < 10);
        }
        for e in &buckets[1].entries {
            assert!((10..30).contains(&e.frames));
        }
        for e in &buckets[2].entries {
            assert!(e.frames >= 30);
        }
        // Single bucket with no edges is the identity partition.
        let single = bucket_by_length(&manifest, &[]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0], manifest);
        // Edges excluding everything leave an empty bucket.
        let skewed = bucket_by_length(&manifest, &[1000]).unwrap();
        assert!(skewed[1].is_empty());
        assert!(bucket_by_length(&manifest, &[5, 5]).is_err());
    }

    #[test]
    fn results_round_trip() {
        let dir = tmpdir("results");
        let recs = vec![ResultRecord {
            id: "u1".into(),
            reference: "ab cd".into(),
            hyp_before: "ab cc".into(),
            hyp_after: "ab cd".into(),
            wer_before: 0.5,
            wer_after: 0.0,
            losses: vec![1.0, 0.5],
            fallback: false,
        }];
        let p = dir.join("results.jsonl");
        write_results(&p, &recs).unwrap();
        let back = read_results(&p).unwrap();
        assert_eq!(recs, back);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"ref\":"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn lexicon_is_fixed_and_wellformed() {
        let vocab = Vocabulary::reference();
        let lex = reference_lexicon(&vocab);
        assert_eq!(lex, reference_lexicon(&vocab));
        assert_eq!(lex.len(), 40);
        for w in &lex {
            assert!((2..=5).contains(&w.chars().count()));
            let chars: Vec<char> = w.chars().collect();
            assert!(
                chars.windows(2).all(|p| p[0] != p[1]),
                "doubled letter in {w}"
            );
        }
    }

    #[test]
    fn sentences_respect_token_range() {
        let vocab = Vocabulary::reference();
        let lex = reference_lexicon(&vocab);
        let mut rng = Rng::seed_from(8);
        for _ in 0..200 {
            let s = sample_sentence(&mut rng, &lex, 8, 30);
            let tokens = s.chars().count();
            assert!((8..=30).contains(&tokens), "{s:?} has {tokens} tokens");
            assert!(vocab.encode(&s).is_ok());
        }
    }
}
