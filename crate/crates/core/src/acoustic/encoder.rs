//! Shared model trunk: a linear strided temporal convolution over rescaled
//! inputs, followed by a bidirectional tanh recurrence. Both reference
//! models use this front end with identical parameter layouts, so the
//! forward/backward math lives in one place.
//!
//! The convolution stays linear on purpose: gradients reach the front end
//! at full strength no matter how large the raw features are, which is what
//! lets a handful of small test-time updates re-shape the input projection.

use crate::mat::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrunkDims {
    pub feat_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub hidden: usize,
}

impl TrunkDims {
    /// Output frames for a given input length (symmetric zero padding of
    /// (kernel-1)/2 on both sides).
    pub fn out_len(&self, frames: usize) -> usize {
        let pad = (self.kernel - 1) / 2;
        (frames + 2 * pad - self.kernel) / self.stride + 1
    }
}

/// Borrowed views of the trunk parameter arrays.
pub struct TrunkParams<'a> {
    pub conv_w: &'a [f64],
    pub conv_b: &'a [f64],
    pub fw_in: &'a [f64],
    pub fw_rec: &'a [f64],
    pub fw_b: &'a [f64],
    pub bw_in: &'a [f64],
    pub bw_rec: &'a [f64],
    pub bw_b: &'a [f64],
}

pub struct TrunkCache {
    pub x: Mat,
    /// Linear convolution output, the recurrence input.
    pub act: Mat,
    pub h_fw: Mat,
    pub h_bw: Mat,
}

#[derive(Default)]
pub struct TrunkGrads {
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub fw_in: Vec<f64>,
    pub fw_rec: Vec<f64>,
    pub fw_b: Vec<f64>,
    pub bw_in: Vec<f64>,
    pub bw_rec: Vec<f64>,
    pub bw_b: Vec<f64>,
}

/// out += w[rows x cols] . x
fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        out[r] += acc;
    }
}

/// out += w^T . x  (w is rows x cols, x has rows entries, out has cols)
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let xv = x[r];
        if xv == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * xv;
        }
    }
}

/// grad[rows x cols] += d (outer) x
fn outer_acc(grad: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, dv) in d.iter().enumerate() {
        if *dv == 0.0 {
            continue;
        }
        let row = &mut grad[r * cols..(r + 1) * cols];
        for (g, xv) in row.iter_mut().zip(x) {
            *g += dv * xv;
        }
    }
}

pub fn trunk_forward(dims: &TrunkDims, p: &TrunkParams, raw: &Mat) -> TrunkCache {
    let (d_in, m, k, h) = (dims.feat_dim, dims.channels, dims.kernel, dims.hidden);
    debug_assert_eq!(raw.cols(), d_in);
    let frames = raw.rows();
    let l = dims.out_len(frames);
    let pad = (k - 1) / 2;

    let x = raw.clone();
    let mut act = Mat::zeros(l, m);
    for t in 0..l {
        let start = (t * dims.stride) as isize - pad as isize;
        let out = act.row_mut(t);
        out.copy_from_slice(p.conv_b);
        for kk in 0..k {
            let src = start + kk as isize;
            if src < 0 || src >= frames as isize {
                continue;
            }
            let xin = x.row(src as usize);
            for mm in 0..m {
                let wrow = &p.conv_w[mm * d_in * k + kk..];
                // conv_w is laid out [channel][dim][tap]
                let mut acc = 0.0;
                for dd in 0..d_in {
                    acc += wrow[dd * k] * xin[dd];
                }
                out[mm] += acc;
            }
        }
    }

    let mut h_fw = Mat::zeros(l, h);
    let mut prev = vec![0.0; h];
    for t in 0..l {
        let mut pre = p.fw_b.to_vec();
        matvec_acc(p.fw_in, h, m, act.row(t), &mut pre);
        matvec_acc(p.fw_rec, h, h, &prev, &mut pre);
        for (dst, v) in h_fw.row_mut(t).iter_mut().zip(&pre) {
            *dst = v.tanh();
        }
        prev.copy_from_slice(h_fw.row(t));
    }

    let mut h_bw = Mat::zeros(l, h);
    let mut next = vec![0.0; h];
    for t in (0..l).rev() {
        let mut pre = p.bw_b.to_vec();
        matvec_acc(p.bw_in, h, m, act.row(t), &mut pre);
        matvec_acc(p.bw_rec, h, h, &next, &mut pre);
        for (dst, v) in h_bw.row_mut(t).iter_mut().zip(&pre) {
            *dst = v.tanh();
        }
        next.copy_from_slice(h_bw.row(t));
    }

    TrunkCache { x, act, h_fw, h_bw }
}

/// Backpropagate `d_fw`/`d_bw` (gradients at the two recurrence outputs)
/// through the trunk. Returns parameter gradients; input gradients are not
/// needed because features are never trained.
pub fn trunk_backward(
    dims: &TrunkDims,
    p: &TrunkParams,
    cache: &TrunkCache,
    d_fw: &Mat,
    d_bw: &Mat,
) -> TrunkGrads {
    let (d_in, m, k, h) = (dims.feat_dim, dims.channels, dims.kernel, dims.hidden);
    let l = cache.act.rows();
    let frames = cache.x.rows();
    let pad = (k - 1) / 2;

    let mut g = TrunkGrads {
        conv_w: vec![0.0; m * d_in * k],
        conv_b: vec![0.0; m],
        fw_in: vec![0.0; h * m],
        fw_rec: vec![0.0; h * h],
        fw_b: vec![0.0; h],
        bw_in: vec![0.0; h * m],
        bw_rec: vec![0.0; h * h],
        bw_b: vec![0.0; h],
    };
    let mut d_act = Mat::zeros(l, m);

    // Forward-direction recurrence: walk time backwards.
    let mut carry = vec![0.0; h];
    for t in (0..l).rev() {
        let mut dh: Vec<f64> = d_fw.row(t).to_vec();
        for (a, b) in dh.iter_mut().zip(&carry) {
            *a += b;
        }
        let hrow = cache.h_fw.row(t);
        let dpre: Vec<f64> = dh
            .iter()
            .zip(hrow)
            .map(|(d, hv)| d * (1.0 - hv * hv))
            .collect();
        outer_acc(&mut g.fw_in, &dpre, cache.act.row(t));
        if t > 0 {
            outer_acc(&mut g.fw_rec, &dpre, cache.h_fw.row(t - 1));
        }
        for (b, d) in g.fw_b.iter_mut().zip(&dpre) {
            *b += d;
        }
        matvec_t_acc(p.fw_in, h, m, &dpre, d_act.row_mut(t));
        carry.iter_mut().for_each(|c| *c = 0.0);
        matvec_t_acc(p.fw_rec, h, h, &dpre, &mut carry);
    }

    // Backward-direction recurrence: walk time forwards.
    let mut carry = vec![0.0; h];
    for t in 0..l {
        let mut dh: Vec<f64> = d_bw.row(t).to_vec();
        for (a, b) in dh.iter_mut().zip(&carry) {
            *a += b;
        }
        let hrow = cache.h_bw.row(t);
        let dpre: Vec<f64> = dh
            .iter()
            .zip(hrow)
            .map(|(d, hv)| d * (1.0 - hv * hv))
            .collect();
        outer_acc(&mut g.bw_in, &dpre, cache.act.row(t));
        if t + 1 < l {
            outer_acc(&mut g.bw_rec, &dpre, cache.h_bw.row(t + 1));
        }
        for (b, d) in g.bw_b.iter_mut().zip(&dpre) {
            *b += d;
        }
        matvec_t_acc(p.bw_in, h, m, &dpre, d_act.row_mut(t));
        carry.iter_mut().for_each(|c| *c = 0.0);
        matvec_t_acc(p.bw_rec, h, h, &dpre, &mut carry);
    }

    // Into the linear convolution kernel.
    for t in 0..l {
        let start = (t * dims.stride) as isize - pad as isize;
        let dout = d_act.row(t);
        for (b, d) in g.conv_b.iter_mut().zip(dout) {
            *b += d;
        }
        for kk in 0..k {
            let src = start + kk as isize;
            if src < 0 || src >= frames as isize {
                continue;
            }
            let xin = cache.x.row(src as usize);
            for mm in 0..m {
                let dv = dout[mm];
                if dv == 0.0 {
                    continue;
                }
                let wrow = &mut g.conv_w[mm * d_in * k + kk..];
                for dd in 0..d_in {
                    wrow[dd * k] += dv * xin[dd];
                }
            }
        }
    }
    g
}
