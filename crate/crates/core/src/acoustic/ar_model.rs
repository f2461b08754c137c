//! Autoregressive reference model: the shared trunk feeds a recurrent
//! decoder with token embeddings. Each step is conditioned on two context
//! views of the encoder output: the global mean and a fixed-rate monotonic
//! window centered near the step's expected time position. The blank slot
//! of each output row serves as the end-of-sequence class, since blank
//! never appears in a transcript.

use super::encoder::{trunk_backward, trunk_forward, TrunkCache, TrunkDims, TrunkParams};
use super::params::{Gradients, ParamArray, ParamGroup, ParamSet};
use super::ModelError;
use crate::decoding::StepSession;
use crate::mat::{log_softmax_row, Mat};
use crate::rng::Rng;
use crate::types::{LogitMatrix, TokenSequence, Utterance, Vocabulary};

const FE: usize = 0;
const ENC: usize = 1;
const DEC: usize = 2;
const HEAD: usize = 3;

/// Encoder frames advanced per emitted token (tokens span two to four input
/// frames at stride two).
const CTX_RATE: f64 = 1.5;
/// Half-width of the monotonic context window, in encoder frames.
const CTX_HALF_WINDOW: usize = 3;

#[derive(Clone, Debug)]
pub struct ArModel {
    vocab: Vocabulary,
    dims: TrunkDims,
    dec_hidden: usize,
    embed: usize,
    params: ParamSet,
}

pub struct ArCache {
    trunk: TrunkCache,
    /// Per-step context rows [global mean ; window mean], rows x 4H.
    ctx: Mat,
    /// Window bounds per step (inclusive).
    windows: Vec<(usize, usize)>,
    dec_h: Mat,
    /// Embedding row consumed at each step (start symbol first).
    inputs: Vec<usize>,
    p: Mat,
}

/// Decoding session holding the encoded utterance. States carry the decoder
/// hidden vector and the step index (which positions the context window).
pub struct ArSession<'a> {
    model: &'a ArModel,
    enc: EncSummary,
}

struct EncSummary {
    h_fw: Mat,
    h_bw: Mat,
    global: Vec<f64>,
    len: usize,
}

#[derive(Clone)]
pub struct ArState {
    hidden: Vec<f64>,
    step: usize,
}

impl ArModel {
    pub const DEFAULT_DIMS: TrunkDims = TrunkDims {
        feat_dim: 16,
        channels: 32,
        kernel: 7,
        stride: 2,
        hidden: 48,
    };
    pub const DEFAULT_DEC_HIDDEN: usize = 64;
    pub const DEFAULT_EMBED: usize = 32;

    pub fn new(vocab: &Vocabulary, seed: u64) -> Self {
        Self::with_dims(
            vocab,
            Self::DEFAULT_DIMS,
            Self::DEFAULT_DEC_HIDDEN,
            Self::DEFAULT_EMBED,
            seed,
        )
    }

    pub fn with_dims(
        vocab: &Vocabulary,
        dims: TrunkDims,
        dec_hidden: usize,
        embed: usize,
        seed: u64,
    ) -> Self {
        let c = vocab.size();
        let (d, m, k, h) = (dims.feat_dim, dims.channels, dims.kernel, dims.hidden);
        let hd = dec_hidden;
        let mut rng = Rng::seed_from(seed);
        let mut init = |name: &str, shape: &[usize], fan_in: usize| {
            let mut a = ParamArray::zeros(name, shape);
            let lim = 1.0 / (fan_in as f64).sqrt();
            for v in &mut a.data {
                *v = rng.uniform(-lim, lim);
            }
            a
        };
        let params = ParamSet {
            groups: vec![
                ParamGroup {
                    name: "feature_extractor".into(),
                    arrays: vec![
                        init("conv_w", &[m, d, k], d * k),
                        ParamArray::zeros("conv_b", &[m]),
                    ],
                },
                ParamGroup {
                    name: "encoder".into(),
                    arrays: vec![
                        init("fw_in", &[h, m], m),
                        init("fw_rec", &[h, h], h),
                        ParamArray::zeros("fw_b", &[h]),
                        init("bw_in", &[h, m], m),
                        init("bw_rec", &[h, h], h),
                        ParamArray::zeros("bw_b", &[h]),
                    ],
                },
                ParamGroup {
                    name: "decoder".into(),
                    arrays: vec![
                        // Row `c` (one past the vocabulary) is the start symbol.
                        init("emb", &[c + 1, embed], embed),
                        init("dec_in", &[hd, embed], embed),
                        init("dec_rec", &[hd, hd], hd),
                        init("dec_ctx", &[hd, 4 * h], 4 * h),
                        ParamArray::zeros("dec_b", &[hd]),
                    ],
                },
                ParamGroup {
                    name: "head".into(),
                    arrays: vec![
                        init("head_w", &[c, hd], hd),
                        ParamArray::zeros("head_b", &[c]),
                    ],
                },
            ],
        };
        ArModel {
            vocab: vocab.clone(),
            dims,
            dec_hidden,
            embed,
            params,
        }
    }

    pub fn from_params(vocab: &Vocabulary, params: ParamSet) -> Result<Self, ModelError> {
        let conv_w = params
            .array("feature_extractor", "conv_w")
            .ok_or_else(|| ModelError::Checkpoint("missing feature_extractor/conv_w".into()))?;
        let fw_in = params
            .array("encoder", "fw_in")
            .ok_or_else(|| ModelError::Checkpoint("missing encoder/fw_in".into()))?;
        let emb = params
            .array("decoder", "emb")
            .ok_or_else(|| ModelError::Checkpoint("missing decoder/emb".into()))?;
        let dec_in = params
            .array("decoder", "dec_in")
            .ok_or_else(|| ModelError::Checkpoint("missing decoder/dec_in".into()))?;
        let head_w = params
            .array("head", "head_w")
            .ok_or_else(|| ModelError::Checkpoint("missing head/head_w".into()))?;
        let dims = TrunkDims {
            feat_dim: conv_w.dims[1],
            channels: conv_w.dims[0],
            kernel: conv_w.dims[2],
            stride: 2,
            hidden: fw_in.dims[0],
        };
        let c = head_w.dims[0];
        if c != vocab.size() {
            return Err(ModelError::VocabSizeMismatch {
                checkpoint: c,
                vocab: vocab.size(),
            });
        }
        if emb.dims[0] != c + 1 {
            return Err(ModelError::Checkpoint(
                "embedding table size mismatch".into(),
            ));
        }
        let model = ArModel {
            vocab: vocab.clone(),
            dims,
            dec_hidden: dec_in.dims[0],
            embed: dec_in.dims[1],
            params,
        };
        let tmpl = ArModel::with_dims(vocab, model.dims, model.dec_hidden, model.embed, 0);
        if !tmpl.params.same_shape(&model.params) {
            return Err(ModelError::Checkpoint(
                "parameter layout does not match an autoregressive model".into(),
            ));
        }
        Ok(model)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoder_len(&self, frames: usize) -> usize {
        self.dims.out_len(frames)
    }

    fn trunk_params(&self) -> TrunkParams<'_> {
        let fe = &self.params.groups[FE].arrays;
        let enc = &self.params.groups[ENC].arrays;
        TrunkParams {
            conv_w: &fe[0].data,
            conv_b: &fe[1].data,
            fw_in: &enc[0].data,
            fw_rec: &enc[1].data,
            fw_b: &enc[2].data,
            bw_in: &enc[3].data,
            bw_rec: &enc[4].data,
            bw_b: &enc[5].data,
        }
    }

    fn start_symbol(&self) -> usize {
        self.vocab.size()
    }

    fn summarize(&self, trunk: &TrunkCache) -> Result<EncSummary, ModelError> {
        let l = trunk.act.rows();
        let h = self.dims.hidden;
        let mut global = vec![0.0; 2 * h];
        for t in 0..l {
            for (i, v) in trunk.h_fw.row(t).iter().enumerate() {
                global[i] += v;
            }
            for (i, v) in trunk.h_bw.row(t).iter().enumerate() {
                global[h + i] += v;
            }
        }
        for v in &mut global {
            *v /= l as f64;
            if !v.is_finite() {
                return Err(ModelError::NumericalOverflow);
            }
        }
        Ok(EncSummary {
            h_fw: trunk.h_fw.clone(),
            h_bw: trunk.h_bw.clone(),
            global,
            len: l,
        })
    }

    /// Inclusive window bounds for decode step `i`.
    fn window(len: usize, step: usize) -> (usize, usize) {
        let center = ((step as f64 * CTX_RATE).round() as usize).min(len - 1);
        let lo = center.saturating_sub(CTX_HALF_WINDOW);
        let hi = (center + CTX_HALF_WINDOW).min(len - 1);
        (lo, hi)
    }

    /// Context row for a step: [global mean ; window mean], length 4H.
    fn context_row(&self, enc: &EncSummary, step: usize) -> (Vec<f64>, (usize, usize)) {
        let h = self.dims.hidden;
        let (lo, hi) = Self::window(enc.len, step);
        let mut ctx = vec![0.0; 4 * h];
        ctx[..2 * h].copy_from_slice(&enc.global);
        let span = (hi - lo + 1) as f64;
        for t in lo..=hi {
            for (i, v) in enc.h_fw.row(t).iter().enumerate() {
                ctx[2 * h + i] += v / span;
            }
            for (i, v) in enc.h_bw.row(t).iter().enumerate() {
                ctx[3 * h + i] += v / span;
            }
        }
        (ctx, (lo, hi))
    }

    /// One decoder cell step: tanh(dec_in emb + dec_rec h + dec_ctx ctx + b).
    fn cell(&self, token: usize, h_prev: &[f64], ctx: &[f64]) -> Vec<f64> {
        let dec = &self.params.groups[DEC].arrays;
        let (emb, dec_in, dec_rec, dec_ctx, dec_b) = (
            &dec[0].data,
            &dec[1].data,
            &dec[2].data,
            &dec[3].data,
            &dec[4].data,
        );
        let hd = self.dec_hidden;
        let cw = 4 * self.dims.hidden;
        let e = &emb[token * self.embed..(token + 1) * self.embed];
        let mut pre = dec_b.clone();
        for r in 0..hd {
            let mut acc = 0.0;
            let wi = &dec_in[r * self.embed..(r + 1) * self.embed];
            for (a, b) in wi.iter().zip(e) {
                acc += a * b;
            }
            let wr = &dec_rec[r * hd..(r + 1) * hd];
            for (a, b) in wr.iter().zip(h_prev) {
                acc += a * b;
            }
            let wc = &dec_ctx[r * cw..(r + 1) * cw];
            for (a, b) in wc.iter().zip(ctx) {
                acc += a * b;
            }
            pre[r] += acc;
        }
        pre.iter().map(|v| v.tanh()).collect()
    }

    fn head_row(&self, h: &[f64]) -> Vec<f64> {
        let head = &self.params.groups[HEAD].arrays;
        let (head_w, head_b) = (&head[0].data, &head[1].data);
        let c = self.vocab.size();
        let hd = self.dec_hidden;
        let mut row = head_b.clone();
        for cc in 0..c {
            let w = &head_w[cc * hd..(cc + 1) * hd];
            let mut acc = 0.0;
            for (a, b) in w.iter().zip(h) {
                acc += a * b;
            }
            row[cc] += acc;
        }
        log_softmax_row(&mut row);
        row
    }

    pub fn session(&self, utt: &Utterance) -> Result<ArSession<'_>, ModelError> {
        if utt.features.rows() == 0 || utt.features.cols() != self.dims.feat_dim {
            return Err(ModelError::Invalid("bad feature shape".into()));
        }
        let trunk = trunk_forward(&self.dims, &self.trunk_params(), &utt.features);
        let enc = self.summarize(&trunk)?;
        Ok(ArSession { model: self, enc })
    }

    /// Normalized next-token distribution after consuming `prefix`.
    pub fn score_step(
        &self,
        utt: &Utterance,
        prefix: &TokenSequence,
    ) -> Result<Vec<f64>, ModelError> {
        if prefix.ids().contains(&self.vocab.blank_index()) {
            return Err(ModelError::BlankInPrefix);
        }
        let session = self.session(utt)?;
        let mut state = session.initial_state();
        for &tok in prefix.ids() {
            state = session.advance(&state, tok);
        }
        let row = session.step_row(&state);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NumericalOverflow);
        }
        Ok(row)
    }

    /// Teacher-forced pass: row i is the distribution over token i given the
    /// target prefix before it. With `include_end_row` an extra final row
    /// conditioned on the full target is appended (used by training to score
    /// the stop event).
    pub fn forward_teacher_cached(
        &self,
        features: &Mat,
        target: &TokenSequence,
        include_end_row: bool,
    ) -> Result<(LogitMatrix, ArCache), ModelError> {
        if target.ids().contains(&self.vocab.blank_index()) {
            return Err(ModelError::BlankInPrefix);
        }
        if features.rows() == 0 || features.cols() != self.dims.feat_dim {
            return Err(ModelError::Invalid("bad feature shape".into()));
        }
        let trunk = trunk_forward(&self.dims, &self.trunk_params(), features);
        let enc = self.summarize(&trunk)?;
        let rows = target.len() + usize::from(include_end_row);
        let c = self.vocab.size();
        let hd = self.dec_hidden;
        let h = self.dims.hidden;
        let mut inputs = Vec::with_capacity(rows);
        let mut dec_h = Mat::zeros(rows, hd);
        let mut ctx = Mat::zeros(rows, 4 * h);
        let mut windows = Vec::with_capacity(rows);
        let mut out = Mat::zeros(rows, c);
        let mut p = Mat::zeros(rows, c);
        let mut state = vec![0.0; hd];
        for i in 0..rows {
            let token = if i == 0 {
                self.start_symbol()
            } else {
                target.ids()[i - 1]
            };
            inputs.push(token);
            let (crow, win) = self.context_row(&enc, i);
            ctx.row_mut(i).copy_from_slice(&crow);
            windows.push(win);
            state = self.cell(token, &state, &crow);
            dec_h.row_mut(i).copy_from_slice(&state);
            let row = self.head_row(&state);
            out.row_mut(i).copy_from_slice(&row);
            for (dst, lv) in p.row_mut(i).iter_mut().zip(&row) {
                *dst = lv.exp();
            }
        }
        if !out.all_finite() {
            return Err(ModelError::NumericalOverflow);
        }
        Ok((
            LogitMatrix {
                values: out,
                normalized: true,
            },
            ArCache {
                trunk,
                ctx,
                windows,
                dec_h,
                inputs,
                p,
            },
        ))
    }

    pub fn backward(&self, cache: &ArCache, d_rows: &Mat) -> Gradients {
        let rows = cache.dec_h.rows();
        let c = self.vocab.size();
        let hd = self.dec_hidden;
        let h = self.dims.hidden;
        let cw = 4 * h;
        let e_dim = self.embed;
        let dec = &self.params.groups[DEC].arrays;
        let (emb, dec_in, dec_rec, dec_ctx) =
            (&dec[0].data, &dec[1].data, &dec[2].data, &dec[3].data);
        let head_w = &self.params.groups[HEAD].arrays[0].data;

        let l = cache.trunk.act.rows();
        let mut g = self.params.zeros_like();
        let mut d_fw = Mat::zeros(l, h);
        let mut d_bw = Mat::zeros(l, h);
        let mut carry = vec![0.0; hd];

        for i in (0..rows).rev() {
            let dout = d_rows.row(i);
            let p = cache.p.row(i);
            let s: f64 = dout.iter().sum();
            let dz: Vec<f64> = (0..c).map(|k| dout[k] - p[k] * s).collect();
            let hrow = cache.dec_h.row(i);
            let mut dh = carry.clone();
            {
                let g_head = &mut g.groups[HEAD].arrays;
                for cc in 0..c {
                    let dv = dz[cc];
                    if dv == 0.0 {
                        continue;
                    }
                    g_head[1].data[cc] += dv;
                    let grow = &mut g_head[0].data[cc * hd..(cc + 1) * hd];
                    for j in 0..hd {
                        grow[j] += dv * hrow[j];
                    }
                    let w = &head_w[cc * hd..(cc + 1) * hd];
                    for j in 0..hd {
                        dh[j] += dv * w[j];
                    }
                }
            }
            let dpre: Vec<f64> = dh
                .iter()
                .zip(hrow)
                .map(|(d, hv)| d * (1.0 - hv * hv))
                .collect();
            let token = cache.inputs[i];
            let e = &emb[token * e_dim..(token + 1) * e_dim];
            let ctx_row = cache.ctx.row(i);
            let mut d_ctx = vec![0.0; cw];
            {
                let g_dec = &mut g.groups[DEC].arrays;
                for r in 0..hd {
                    let dv = dpre[r];
                    if dv == 0.0 {
                        continue;
                    }
                    for (gv, ev) in g_dec[1].data[r * e_dim..(r + 1) * e_dim].iter_mut().zip(e) {
                        *gv += dv * ev;
                    }
                    if i > 0 {
                        let prev = cache.dec_h.row(i - 1);
                        for (gv, hv) in g_dec[2].data[r * hd..(r + 1) * hd].iter_mut().zip(prev) {
                            *gv += dv * hv;
                        }
                    }
                    for (gv, cv) in g_dec[3].data[r * cw..(r + 1) * cw].iter_mut().zip(ctx_row) {
                        *gv += dv * cv;
                    }
                    g_dec[4].data[r] += dv;
                    let wi = &dec_in[r * e_dim..(r + 1) * e_dim];
                    let gemb = &mut g_dec[0].data[token * e_dim..(token + 1) * e_dim];
                    for (gv, wv) in gemb.iter_mut().zip(wi) {
                        *gv += dv * wv;
                    }
                    let wc = &dec_ctx[r * cw..(r + 1) * cw];
                    for (dc, wv) in d_ctx.iter_mut().zip(wc) {
                        *dc += dv * wv;
                    }
                }
            }
            // Global half spreads over all frames; window half over its span.
            let (lo, hi) = cache.windows[i];
            let span = (hi - lo + 1) as f64;
            for t in 0..l {
                for j in 0..h {
                    let v = d_ctx[j] / l as f64;
                    d_fw.set(t, j, d_fw.get(t, j) + v);
                    let v = d_ctx[h + j] / l as f64;
                    d_bw.set(t, j, d_bw.get(t, j) + v);
                }
            }
            for t in lo..=hi {
                for j in 0..h {
                    let v = d_ctx[2 * h + j] / span;
                    d_fw.set(t, j, d_fw.get(t, j) + v);
                    let v = d_ctx[3 * h + j] / span;
                    d_bw.set(t, j, d_bw.get(t, j) + v);
                }
            }
            carry.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..hd {
                let dv = dpre[r];
                if dv == 0.0 {
                    continue;
                }
                let wr = &dec_rec[r * hd..(r + 1) * hd];
                for (cv, wv) in carry.iter_mut().zip(wr) {
                    *cv += dv * wv;
                }
            }
        }

        let tg = trunk_backward(&self.dims, &self.trunk_params(), &cache.trunk, &d_fw, &d_bw);
        g.groups[FE].arrays[0].data = tg.conv_w;
        g.groups[FE].arrays[1].data = tg.conv_b;
        g.groups[ENC].arrays[0].data = tg.fw_in;
        g.groups[ENC].arrays[1].data = tg.fw_rec;
        g.groups[ENC].arrays[2].data = tg.fw_b;
        g.groups[ENC].arrays[3].data = tg.bw_in;
        g.groups[ENC].arrays[4].data = tg.bw_rec;
        g.groups[ENC].arrays[5].data = tg.bw_b;
        g
    }
}

impl StepSession for ArSession<'_> {
    type State = ArState;

    fn initial_state(&self) -> ArState {
        let zeros = vec![0.0; self.model.dec_hidden];
        let (ctx, _) = self.model.context_row(&self.enc, 0);
        ArState {
            hidden: self.model.cell(self.model.start_symbol(), &zeros, &ctx),
            step: 0,
        }
    }

    fn step_row(&self, state: &ArState) -> Vec<f64> {
        self.model.head_row(&state.hidden)
    }

    fn advance(&self, state: &ArState, token: usize) -> ArState {
        let (ctx, _) = self.model.context_row(&self.enc, state.step + 1);
        ArState {
            hidden: self.model.cell(token, &state.hidden, &ctx),
            step: state.step + 1,
        }
    }

    fn encoder_len(&self) -> usize {
        self.enc.len
    }
}
