//! Value-preserving layout operations: reshape, permute, concat, narrow,
//! and the pixel shuffle / unshuffle pair used for resampling.

use crate::error::{Error, Result};
use crate::tensor::tape::{OpRecord, Tape, Var};

impl Tape {
    /// Reinterpret `x` with a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let data = self.data(x).to_vec();
        let tracked = self.tracked(x);
        self.push(shape, data, OpRecord::Reshape(x), tracked, "reshape")
    }

    /// Reorder axes; `perm` maps output axis -> input axis.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let rank = in_shape.len();
        if perm.len() != rank {
            return Err(Error::invalid(format!(
                "permute {:?} does not match rank {rank}",
                perm
            )));
        }
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(Error::invalid(format!("permute {:?} is not a permutation", perm)));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_data(self.data(x), &in_shape, perm);
        let tracked = self.tracked(x);
        self.push(
            out_shape,
            data,
            OpRecord::Permute {
                x,
                perm: perm.to_vec(),
            },
            tracked,
            "permute",
        )
    }

    /// Swap two axes (transpose).
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return Err(Error::invalid(format!(
                "transpose axes ({a}, {b}) out of range for rank {rank}"
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut cat_len = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() {
                return Err(Error::shape("concat rank mismatch"));
            }
            for (ax, (&got, &want)) in s.iter().zip(&first).enumerate() {
                if ax != axis && got != want {
                    return Err(Error::shape(format!(
                        "concat extent mismatch at axis {ax}: {got} vs {want}"
                    )));
                }
            }
            cat_len += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = cat_len;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * cat_len * inner];
        let mut offset = 0;
        for &v in xs {
            let len = self.shape(v)[axis];
            let src = self.data(v);
            for o in 0..outer {
                let dst = &mut data[(o * cat_len + offset) * inner..][..len * inner];
                dst.copy_from_slice(&src[o * len * inner..][..len * inner]);
            }
            offset += len;
        }
        let tracked = xs.iter().any(|&v| self.tracked(v));
        self.push(
            out_shape,
            data,
            OpRecord::Concat {
                xs: xs.to_vec(),
                axis,
            },
            tracked,
            "concat",
        )
    }

    /// Slice `len` extents of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "narrow axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        if start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "narrow [{start}, {start}+{len}) exceeds extent {}",
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let src = self.data(x);
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let dst = &mut data[o * len * inner..][..len * inner];
            dst.copy_from_slice(&src[(o * full + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let tracked = self.tracked(x);
        self.push(
            out_shape,
            data,
            OpRecord::Narrow { x, axis, start },
            tracked,
            "narrow",
        )
    }

    /// Space-to-depth: `(B, C, H, W) -> (B, C r^2, H/r, W/r)`.
    ///
    /// `out[b, c r^2 + i r + j, y, x] = in[b, c, y r + i, x r + j]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("pixel_unshuffle expects BCHW, got {:?}", s)));
        }
        if r == 0 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(Error::invalid(format!(
                "pixel_unshuffle: H={}, W={} not divisible by r={r}",
                s[2], s[3]
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / r, w / r);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let oc = ci * r * r + i * r + j;
                        for y in 0..ho {
                            let src_row = (bi * c + ci) * h * w + (y * r + i) * w + j;
                            let dst_row = (bi * c * r * r + oc) * ho * wo + y * wo;
                            for xo in 0..wo {
                                data[dst_row + xo] = src[src_row + xo * r];
                            }
                        }
                    }
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(
            vec![b, c * r * r, ho, wo],
            data,
            OpRecord::PixelUnshuffle { x, r },
            tracked,
            "pixel_unshuffle",
        )
    }

    /// Depth-to-space, the exact inverse of [`Tape::pixel_unshuffle`].
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("pixel_shuffle expects BCHW, got {:?}", s)));
        }
        if r == 0 || s[1] % (r * r) != 0 {
            return Err(Error::invalid(format!(
                "pixel_shuffle: C={} not divisible by r^2={}",
                s[1],
                r * r
            )));
        }
        let (b, c_in, h, w) = (s[0], s[1], s[2], s[3]);
        let c = c_in / (r * r);
        let (ho, wo) = (h * r, w * r);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let ic = ci * r * r + i * r + j;
                        for y in 0..h {
                            let src_row = (bi * c_in + ic) * h * w + y * w;
                            let dst_row = (bi * c + ci) * ho * wo + (y * r + i) * wo + j;
                            for xo in 0..w {
                                data[dst_row + xo * r] = src[src_row + xo];
                            }
                        }
                    }
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(
            vec![b, c, ho, wo],
            data,
            OpRecord::PixelShuffle { x, r },
            tracked,
            "pixel_shuffle",
        )
    }

    pub(crate) fn backward_shape_op(&mut self, op: &OpRecord, id: usize, g: &[f64]) {
        match op {
            OpRecord::Reshape(x) => {
                let x = *x;
                if self.tracked(x) {
                    self.acc_grad(x, g);
                }
            }
            OpRecord::Permute { x, perm } => {
                let x = *x;
                if self.tracked(x) {
                    // Invert the permutation and push the gradient back.
                    let out_shape = self.nodes[id].shape.clone();
                    let mut inv = vec![0usize; perm.len()];
                    for (o, &p) in perm.iter().enumerate() {
                        inv[p] = o;
                    }
                    let dx = permute_data(g, &out_shape, &inv);
                    self.acc_grad(x, &dx);
                }
            }
            OpRecord::Concat { xs, axis } => {
                let axis = *axis;
                let out_shape = self.nodes[id].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let cat_len = out_shape[axis];
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[axis];
                    if self.tracked(v) {
                        let mut dv = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            let src = &g[(o * cat_len + offset) * inner..][..len * inner];
                            dv[o * len * inner..][..len * inner].copy_from_slice(src);
                        }
                        self.acc_grad(v, &dv);
                    }
                    offset += len;
                }
            }
            OpRecord::Narrow { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                if self.tracked(x) {
                    let in_shape = self.shape(x).to_vec();
                    let out_shape = self.nodes[id].shape.clone();
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let (full, len) = (in_shape[axis], out_shape[axis]);
                    let mut dx = vec![0.0; self.numel(x)];
                    for o in 0..outer {
                        let dst = &mut dx[(o * full + start) * inner..][..len * inner];
                        dst.copy_from_slice(&g[o * len * inner..][..len * inner]);
                    }
                    self.acc_grad(x, &dx);
                }
            }
            OpRecord::PixelUnshuffle { x, r } => {
                let (x, r) = (*x, *r);
                if self.tracked(x) {
                    // The adjoint of a permutation is its inverse.
                    let out_shape = self.nodes[id].shape.clone();
                    let dx = shuffle_data(g, &out_shape, r);
                    self.acc_grad(x, &dx);
                }
            }
            OpRecord::PixelShuffle { x, r } => {
                let (x, r) = (*x, *r);
                if self.tracked(x) {
                    let out_shape = self.nodes[id].shape.clone();
                    let dx = unshuffle_data(g, &out_shape, r);
                    self.acc_grad(x, &dx);
                }
            }
            _ => unreachable!(),
        }
    }
}

pub(crate) fn permute_data(src: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src_flat = 0;
        for (o, &p) in perm.iter().enumerate() {
            src_flat += idx[o] * in_strides[p];
        }
        *slot = src[src_flat];
        // Odometer increment over the output shape.
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Raw pixel-shuffle of a flat `[B, C r^2, H, W]` buffer.
fn shuffle_data(src: &[f64], s: &[usize], r: usize) -> Vec<f64> {
    let (b, c_in, h, w) = (s[0], s[1], s[2], s[3]);
    let c = c_in / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ic = ci * r * r + i * r + j;
                    for y in 0..h {
                        let src_row = (bi * c_in + ic) * h * w + y * w;
                        let dst_row = (bi * c + ci) * ho * wo + (y * r + i) * wo + j;
                        for xo in 0..w {
                            out[dst_row + xo * r] = src[src_row + xo];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Raw pixel-unshuffle of a flat `[B, C, H, W]` buffer.
fn unshuffle_data(src: &[f64], s: &[usize], r: usize) -> Vec<f64> {
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let oc = ci * r * r + i * r + j;
                    for y in 0..ho {
                        let src_row = (bi * c + ci) * h * w + (y * r + i) * w + j;
                        let dst_row = (bi * c * r * r + oc) * ho * wo + y * wo;
                        for xo in 0..wo {
                            out[dst_row + xo] = src[src_row + xo * r];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn unshuffle_of_2x2_keeps_all_values() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.pixel_unshuffle(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 1, 1]);
        let mut vals = tape.data(y).to_vec();
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shuffle_inverts_unshuffle_bitwise() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..64).map(|v| (v as f64) * 0.1 - 3.0).collect();
        let x = tape.constant(&Tensor::new(vec![1, 4, 4, 4], data.clone()).unwrap());
        let u = tape.pixel_unshuffle(x, 2).unwrap();
        let back = tape.pixel_shuffle(u, 2).unwrap();
        assert_eq!(tape.data(back), data.as_slice());
    }

    #[test]
    fn shuffle_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![1, 4, 2, 2], 0.5), true);
        let y = tape.pixel_shuffle(x, 2).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 16]);
    }

    #[test]
    fn divisibility_violations_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(tape.pixel_unshuffle(x, 2).is_err());
        let y = tape.constant(&Tensor::zeros(vec![1, 6, 2, 2]));
        assert!(tape.pixel_shuffle(y, 2).is_err());
    }

    #[test]
    fn narrow_then_concat_round_trips() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = tape.constant(&Tensor::new(vec![2, 4, 3], data.clone()).unwrap());
        let a = tape.narrow(x, 1, 0, 2).unwrap();
        let b = tape.narrow(x, 1, 2, 2).unwrap();
        let back = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.data(back), data.as_slice());
    }

    #[test]
    fn transpose_swaps_extents() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap());
        let t = tape.transpose(x, 0, 1).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.data(t), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
