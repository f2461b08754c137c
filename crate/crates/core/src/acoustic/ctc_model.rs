//! Frame-synchronous reference model: strided temporal convolution
//! (feature_extractor), bidirectional tanh recurrence (encoder), affine
//! projection with log-softmax (head).

use super::encoder::{trunk_backward, trunk_forward, TrunkCache, TrunkDims, TrunkParams};
use super::params::{Gradients, ParamArray, ParamGroup, ParamSet};
use super::ModelError;
use crate::mat::{log_softmax_row, Mat};
use crate::rng::Rng;
use crate::types::{LogitMatrix, Utterance, Vocabulary};

const FE: usize = 0;
const ENC: usize = 1;
const HEAD: usize = 2;

#[derive(Clone, Debug)]
pub struct CtcModel {
    vocab: Vocabulary,
    dims: TrunkDims,
    params: ParamSet,
}

pub struct CtcCache {
    trunk: TrunkCache,
    /// Row-wise softmax of the head outputs, kept for the log-softmax backward.
    p: Mat,
}

impl CtcModel {
    pub const DEFAULT_DIMS: TrunkDims = TrunkDims {
        feat_dim: 16,
        channels: 32,
        kernel: 7,
        stride: 2,
        hidden: 48,
    };

    pub fn new(vocab: &Vocabulary, seed: u64) -> Self {
        Self::with_dims(vocab, Self::DEFAULT_DIMS, seed)
    }

    /// Deterministic initialization: uniform fan-in scaling for weights,
    /// zeros for biases.
    pub fn with_dims(vocab: &Vocabulary, dims: TrunkDims, seed: u64) -> Self {
        let c = vocab.size();
        let (d, m, k, h) = (dims.feat_dim, dims.channels, dims.kernel, dims.hidden);
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
                    name: "head".into(),
                    arrays: vec![
                        init("head_w", &[c, 2 * h], 2 * h),
                        ParamArray::zeros("head_b", &[c]),
                    ],
                },
            ],
        };
        CtcModel {
            vocab: vocab.clone(),
            dims,
            params,
        }
    }

    /// Rebuild a model around externally loaded parameters, inferring the
    /// dimensions from array shapes.
    pub fn from_params(vocab: &Vocabulary, params: ParamSet) -> Result<Self, ModelError> {
        let conv_w = params
            .array("feature_extractor", "conv_w")
            .ok_or_else(|| ModelError::Checkpoint("missing feature_extractor/conv_w".into()))?;
        let fw_in = params
            .array("encoder", "fw_in")
            .ok_or_else(|| ModelError::Checkpoint("missing encoder/fw_in".into()))?;
        let head_w = params
            .array("head", "head_w")
            .ok_or_else(|| ModelError::Checkpoint("missing head/head_w".into()))?;
        if conv_w.dims.len() != 3 || fw_in.dims.len() != 2 || head_w.dims.len() != 2 {
            return Err(ModelError::Checkpoint("unexpected array rank".into()));
        }
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
        let model = CtcModel {
            vocab: vocab.clone(),
            dims,
            params,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<(), ModelError> {
        let tmpl = CtcModel::with_dims(&self.vocab, self.dims, 0);
        if !tmpl.params.same_shape(&self.params) {
            return Err(ModelError::Checkpoint(
                "parameter layout does not match a frame-synchronous model".into(),
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dims(&self) -> &TrunkDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn output_len(&self, frames: usize) -> usize {
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

    /// Normalized frame logits plus the cache needed for [`CtcModel::backward`].
    pub fn forward_cached(&self, features: &Mat) -> Result<(LogitMatrix, CtcCache), ModelError> {
        if features.rows() == 0 {
            return Err(ModelError::Invalid("empty utterance".into()));
        }
        if features.cols() != self.dims.feat_dim {
            return Err(ModelError::Invalid(format!(
                "feature dim {} does not match model dim {}",
                features.cols(),
                self.dims.feat_dim
            )));
        }
        let trunk = trunk_forward(&self.dims, &self.trunk_params(), features);
        let l = trunk.act.rows();
        let c = self.vocab.size();
        let h = self.dims.hidden;
        let head = &self.params.groups[HEAD].arrays;
        let (head_w, head_b) = (&head[0].data, &head[1].data);

        let mut out = Mat::zeros(l, c);
        let mut p = Mat::zeros(l, c);
        for t in 0..l {
            let row = out.row_mut(t);
            row.copy_from_slice(head_b);
            let hf = trunk.h_fw.row(t);
            let hb = trunk.h_bw.row(t);
            for cc in 0..c {
                let w = &head_w[cc * 2 * h..(cc + 1) * 2 * h];
                let mut acc = 0.0;
                for i in 0..h {
                    acc += w[i] * hf[i] + w[h + i] * hb[i];
                }
                row[cc] += acc;
            }
            log_softmax_row(row);
            for (dst, lv) in p.row_mut(t).iter_mut().zip(row.iter()) {
                *dst = lv.exp();
            }
        }
        if !out.all_finite() {
            return Err(ModelError::NumericalOverflow);
        }
        let logits = LogitMatrix {
            values: out,
            normalized: true,
        };
        Ok((logits, CtcCache { trunk, p }))
    }

    pub fn forward_frames(&self, utt: &Utterance) -> Result<LogitMatrix, ModelError> {
        Ok(self.forward_cached(&utt.features)?.0)
    }

    /// Gradients of a scalar loss given its gradient `d_logits` with respect
    /// to the normalized output rows.
    pub fn backward(&self, cache: &CtcCache, d_logits: &Mat) -> Gradients {
        let l = cache.p.rows();
        let c = cache.p.cols();
        let h = self.dims.hidden;
        let head = &self.params.groups[HEAD].arrays;
        let head_w = &head[0].data;

        let mut g_head_w = vec![0.0; c * 2 * h];
        let mut g_head_b = vec![0.0; c];
        let mut d_fw = Mat::zeros(l, h);
        let mut d_bw = Mat::zeros(l, h);

        for t in 0..l {
            let dout = d_logits.row(t);
            let p = cache.p.row(t);
            let s: f64 = dout.iter().sum();
            // Through log-softmax: dz_k = dout_k - p_k * sum(dout).
            let dz: Vec<f64> = (0..c).map(|k| dout[k] - p[k] * s).collect();
            let hf = cache.trunk.h_fw.row(t);
            let hb = cache.trunk.h_bw.row(t);
            for cc in 0..c {
                let dv = dz[cc];
                if dv == 0.0 {
                    continue;
                }
                g_head_b[cc] += dv;
                let grow = &mut g_head_w[cc * 2 * h..(cc + 1) * 2 * h];
                for i in 0..h {
                    grow[i] += dv * hf[i];
                    grow[h + i] += dv * hb[i];
                }
                let w = &head_w[cc * 2 * h..(cc + 1) * 2 * h];
                let dfw = d_fw.row_mut(t);
                for i in 0..h {
                    dfw[i] += dv * w[i];
                }
                let dbw = d_bw.row_mut(t);
                for i in 0..h {
                    dbw[i] += dv * w[h + i];
                }
            }
        }

        let tg = trunk_backward(&self.dims, &self.trunk_params(), &cache.trunk, &d_fw, &d_bw);
        let mut grads = self.params.zeros_like();
        grads.groups[FE].arrays[0].data = tg.conv_w;
        grads.groups[FE].arrays[1].data = tg.conv_b;
        grads.groups[ENC].arrays[0].data = tg.fw_in;
        grads.groups[ENC].arrays[1].data = tg.fw_rec;
        grads.groups[ENC].arrays[2].data = tg.fw_b;
        grads.groups[ENC].arrays[3].data = tg.bw_in;
        grads.groups[ENC].arrays[4].data = tg.bw_rec;
        grads.groups[ENC].arrays[5].data = tg.bw_b;
        grads.groups[HEAD].arrays[0].data = g_head_w;
        grads.groups[HEAD].arrays[1].data = g_head_b;
        grads
    }
}
