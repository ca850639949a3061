//! 2-D convolution with grouping, plus the padding op it composes with.
//!
//! `conv2d` is "same"-style: it pads by `(k - 1) / 2` in the requested mode
//! and then runs a valid convolution, so stride-1 output extents equal the
//! input extents. Depthwise convolution is `groups == channels`.

use crate::error::{Error, Result};
use crate::tensor::tape::{OpRecord, Tape, Var};
use crate::tensor::PaddingMode;

impl Tape {
    /// Grouped 2-D convolution over a BCHW tensor.
    ///
    /// `weight` is `[out_c, in_c / groups, k, k]` with odd `k`; padding is
    /// `(k - 1) / 2` per side in `padding` mode. Differentiable with respect
    /// to the input, the weight, and the optional `[out_c]` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: PaddingMode,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects BCHW input and OIKK weight, got {:?} and {:?}",
                xs, ws
            )));
        }
        let (in_c, kh, kw) = (xs[1], ws[2], ws[3]);
        let out_c = ws[0];
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel must be square with odd side, got {kh}x{kw}"
            )));
        }
        if groups == 0 || in_c % groups != 0 || out_c % groups != 0 {
            return Err(Error::invalid(format!(
                "conv2d groups={groups} must divide in_c={in_c} and out_c={out_c}"
            )));
        }
        if ws[1] != in_c / groups {
            return Err(Error::shape(format!(
                "conv2d weight {:?} inconsistent with in_c={in_c}, groups={groups}",
                ws
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_c] {
                return Err(Error::shape(format!(
                    "conv2d bias {:?} does not match out_c={out_c}",
                    self.shape(b)
                )));
            }
        }
        let pad = (kh - 1) / 2;
        let padded = if pad == 0 { x } else { self.pad2d(x, pad, padding)? };
        self.conv_valid(padded, weight, bias, stride, groups)
    }

    /// Pad the two spatial axes of a BCHW tensor by `pad` on every side.
    pub fn pad2d(&mut self, x: Var, pad: usize, mode: PaddingMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("pad2d expects BCHW, got {:?}", xs)));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if mode == PaddingMode::Reflect && (pad >= h || pad >= w) {
            return Err(Error::invalid(format!(
                "reflect pad {pad} needs spatial extents > pad, got {h}x{w}"
            )));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let src = self.data(x);
        let mut data = vec![0.0; b * c * hp * wp];
        let row_map = pad_index_map(h, pad, mode);
        let col_map = pad_index_map(w, pad, mode);
        for plane in 0..b * c {
            let sp = &src[plane * h * w..][..h * w];
            let dp = &mut data[plane * hp * wp..][..hp * wp];
            for i in 0..hp {
                let out_row = &mut dp[i * wp..][..wp];
                match row_map[i] {
                    Some(si) => {
                        let in_row = &sp[si * w..][..w];
                        for (j, slot) in out_row.iter_mut().enumerate() {
                            if let Some(sj) = col_map[j] {
                                *slot = in_row[sj];
                            }
                        }
                    }
                    None => {} // zero row
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(
            vec![b, c, hp, wp],
            data,
            OpRecord::Pad2d { x, pad, mode },
            tracked,
            "pad2d",
        )
    }

    /// Valid (no padding) grouped convolution; invoked through `conv2d`.
    fn conv_valid(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (b, in_c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_c, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if h < kh || w < kw {
            return Err(Error::shape(format!(
                "conv input {h}x{w} smaller than kernel {kh}x{kw}"
            )));
        }
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;
        let opg = out_c / groups;
        let bias_data = bias.map(|bv| self.data(bv).to_vec());
        let src = self.data(x);
        let wd = self.data(weight);
        let mut out = vec![0.0; b * out_c * ho * wo];
        for bi in 0..b {
            for g in 0..groups {
                for ocg in 0..opg {
                    let oc = g * opg + ocg;
                    let out_plane = &mut out[(bi * out_c + oc) * ho * wo..][..ho * wo];
                    if let Some(bd) = &bias_data {
                        out_plane.fill(bd[oc]);
                    }
                    for icg in 0..cpg {
                        let ic = g * cpg + icg;
                        let x_plane = &src[(bi * in_c + ic) * h * w..][..h * w];
                        for u in 0..kh {
                            for v in 0..kw {
                                let wt = wd[((oc * cpg + icg) * kh + u) * kw + v];
                                accumulate_taps(out_plane, x_plane, wt, u, v, w, ho, wo, stride);
                            }
                        }
                    }
                }
            }
        }
        let tracked =
            self.tracked(x) || self.tracked(weight) || bias.map_or(false, |bv| self.tracked(bv));
        self.push(
            vec![b, out_c, ho, wo],
            out,
            OpRecord::ConvValid {
                x,
                w: weight,
                bias,
                stride,
                groups,
            },
            tracked,
            "conv2d",
        )
    }

    pub(crate) fn backward_conv(&mut self, op: &OpRecord, id: usize, g: &[f64]) {
        let (x, weight, bias, stride, groups) = match op {
            OpRecord::ConvValid {
                x,
                w,
                bias,
                stride,
                groups,
            } => (*x, *w, *bias, *stride, *groups),
            _ => unreachable!(),
        };
        let os = self.nodes[id].shape.clone();
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (b, in_c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_c, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (ho, wo) = (os[2], os[3]);
        let opg = out_c / groups;

        if self.tracked(x) {
            let wd = self.data(weight);
            let mut dx = vec![0.0; b * in_c * h * w];
            for bi in 0..b {
                for gi in 0..groups {
                    for ocg in 0..opg {
                        let oc = gi * opg + ocg;
                        let g_plane = &g[(bi * out_c + oc) * ho * wo..][..ho * wo];
                        for icg in 0..cpg {
                            let ic = gi * cpg + icg;
                            let dx_plane = &mut dx[(bi * in_c + ic) * h * w..][..h * w];
                            for u in 0..kh {
                                for v in 0..kw {
                                    let wt = wd[((oc * cpg + icg) * kh + u) * kw + v];
                                    scatter_taps(dx_plane, g_plane, wt, u, v, w, ho, wo, stride);
                                }
                            }
                        }
                    }
                }
            }
            self.acc_grad(x, &dx);
        }

        if self.tracked(weight) {
            let src = self.data(x);
            let mut dw = vec![0.0; out_c * cpg * kh * kw];
            for bi in 0..b {
                for gi in 0..groups {
                    for ocg in 0..opg {
                        let oc = gi * opg + ocg;
                        let g_plane = &g[(bi * out_c + oc) * ho * wo..][..ho * wo];
                        for icg in 0..cpg {
                            let ic = gi * cpg + icg;
                            let x_plane = &src[(bi * in_c + ic) * h * w..][..h * w];
                            for u in 0..kh {
                                for v in 0..kw {
                                    dw[((oc * cpg + icg) * kh + u) * kw + v] +=
                                        dot_taps(x_plane, g_plane, u, v, w, ho, wo, stride);
                                }
                            }
                        }
                    }
                }
            }
            self.acc_grad(weight, &dw);
        }

        if let Some(bv) = bias {
            if self.tracked(bv) {
                let mut db = vec![0.0; out_c];
                for bi in 0..b {
                    for oc in 0..out_c {
                        let g_plane = &g[(bi * out_c + oc) * ho * wo..][..ho * wo];
                        db[oc] += g_plane.iter().sum::<f64>();
                    }
                }
                self.acc_grad(bv, &db);
            }
        }
    }

    pub(crate) fn backward_pad(&mut self, op: &OpRecord, id: usize, g: &[f64]) {
        let (x, pad, mode) = match op {
            OpRecord::Pad2d { x, pad, mode } => (*x, *pad, *mode),
            _ => unreachable!(),
        };
        if !self.tracked(x) {
            return;
        }
        let os = self.nodes[id].shape.clone();
        let xs = self.shape(x).to_vec();
        let (h, w) = (xs[2], xs[3]);
        let (hp, wp) = (os[2], os[3]);
        let planes = xs[0] * xs[1];
        let row_map = pad_index_map(h, pad, mode);
        let col_map = pad_index_map(w, pad, mode);
        let mut dx = vec![0.0; planes * h * w];
        for plane in 0..planes {
            let gp = &g[plane * hp * wp..][..hp * wp];
            let dp = &mut dx[plane * h * w..][..h * w];
            for i in 0..hp {
                if let Some(si) = row_map[i] {
                    let g_row = &gp[i * wp..][..wp];
                    for (j, &gv) in g_row.iter().enumerate() {
                        if let Some(sj) = col_map[j] {
                            dp[si * w + sj] += gv;
                        }
                    }
                }
            }
        }
        self.acc_grad(x, &dx);
    }
}

/// `out[oh][ow] += wt * x[oh*stride + u][ow*stride + v]` over the output plane.
#[inline]
fn accumulate_taps(
    out_plane: &mut [f64],
    x_plane: &[f64],
    wt: f64,
    u: usize,
    v: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
) {
    for oh in 0..ho {
        let x_off = (oh * stride + u) * w + v;
        let o_row = &mut out_plane[oh * wo..][..wo];
        if stride == 1 {
            let x_row = &x_plane[x_off..][..wo];
            for (ov, &xv) in o_row.iter_mut().zip(x_row) {
                *ov += wt * xv;
            }
        } else {
            for (j, ov) in o_row.iter_mut().enumerate() {
                *ov += wt * x_plane[x_off + j * stride];
            }
        }
    }
}

/// Adjoint of `accumulate_taps`: scatter output gradient back to the input.
#[inline]
fn scatter_taps(
    dx_plane: &mut [f64],
    g_plane: &[f64],
    wt: f64,
    u: usize,
    v: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
) {
    for oh in 0..ho {
        let x_off = (oh * stride + u) * w + v;
        let g_row = &g_plane[oh * wo..][..wo];
        if stride == 1 {
            let dx_row = &mut dx_plane[x_off..][..wo];
            for (dv, &gv) in dx_row.iter_mut().zip(g_row) {
                *dv += wt * gv;
            }
        } else {
            for (j, &gv) in g_row.iter().enumerate() {
                dx_plane[x_off + j * stride] += wt * gv;
            }
        }
    }
}

/// `sum_{oh,ow} x[oh*stride + u][ow*stride + v] * g[oh][ow]`.
#[inline]
fn dot_taps(
    x_plane: &[f64],
    g_plane: &[f64],
    u: usize,
    v: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
) -> f64 {
    let mut acc = 0.0;
    for oh in 0..ho {
        let x_off = (oh * stride + u) * w + v;
        let g_row = &g_plane[oh * wo..][..wo];
        if stride == 1 {
            let x_row = &x_plane[x_off..][..wo];
            for (&xv, &gv) in x_row.iter().zip(g_row) {
                acc += xv * gv;
            }
        } else {
            for (j, &gv) in g_row.iter().enumerate() {
                acc += x_plane[x_off + j * stride] * gv;
            }
        }
    }
    acc
}

/// Source index for every padded position; `None` marks a zero-filled slot.
fn pad_index_map(n: usize, pad: usize, mode: PaddingMode) -> Vec<Option<usize>> {
    (0..n + 2 * pad)
        .map(|i| {
            let s = i as isize - pad as isize;
            match mode {
                PaddingMode::Zero => {
                    if s < 0 || s >= n as isize {
                        None
                    } else {
                        Some(s as usize)
                    }
                }
                PaddingMode::Reflect => {
                    let m = if s < 0 {
                        -s
                    } else if s >= n as isize {
                        2 * (n as isize - 1) - s
                    } else {
                        s
                    };
                    Some(m as usize)
                }
            }
        })
        .collect()
}
