//! Batched matrix multiplication with optional operand transposes.
//!
//! Operands are rank 2 (`[m, k]`) or rank 3 (`[n, m, k]`, a stack of
//! matrices). Transposed flags apply to the trailing two axes only; the
//! attention path uses them to avoid materializing transposes.

use crate::error::{Error, Result};
use crate::tensor::tape::{OpRecord, Tape, Var};

impl Tape {
    /// `a @ b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false)
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, true)
    }

    /// `a^T @ b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, true, false)
    }

    pub fn matmul_ext(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(Error::shape(format!(
                "matmul expects equal-rank 2-D or 3-D operands, got {:?} and {:?}",
                sa, sb
            )));
        }
        let batch = if sa.len() == 3 {
            if sa[0] != sb[0] {
                return Err(Error::shape(format!(
                    "matmul batch mismatch: {} vs {}",
                    sa[0], sb[0]
                )));
            }
            sa[0]
        } else {
            1
        };
        let (ra, ca) = trailing(&sa);
        let (rb, cb) = trailing(&sb);
        let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {ka} vs {kb} (shapes {:?} x {:?}, ta={ta}, tb={tb})",
                sa, sb
            )));
        }
        let k = ka;
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm_acc(
                &mut out[i * m * n..][..m * n],
                &ad[i * ra * ca..][..ra * ca],
                &bd[i * rb * cb..][..rb * cb],
                m,
                k,
                n,
                ta,
                tb,
            );
        }
        let out_shape = if sa.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            out_shape,
            out,
            OpRecord::MatMul { a, b, ta, tb },
            tracked,
            "matmul",
        )
    }

    pub(crate) fn backward_matmul(&mut self, op: &OpRecord, g: &[f64]) {
        let (a, b, ta, tb) = match op {
            OpRecord::MatMul { a, b, ta, tb } => (*a, *b, *ta, *tb),
            _ => unreachable!(),
        };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let batch = if sa.len() == 3 { sa[0] } else { 1 };
        let (ra, ca) = trailing(&sa);
        let (rb, cb) = trailing(&sb);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let n = if tb { rb } else { cb };

        // With C = op(A) op(B):
        //   dA = dC B'^T  (A untransposed)   or   B' dC^T  (A transposed)
        //   dB = A'^T dC  (B untransposed)   or   dC^T A'  (B transposed)
        // where A' = op(A), B' = op(B); expressed below directly on the
        // stored (possibly pre-transpose) operands via flag combinations.
        if self.tracked(a) {
            let bd = self.data(b);
            let mut da = vec![0.0; self.numel(a)];
            for i in 0..batch {
                let gb = &g[i * m * n..][..m * n];
                let bb = &bd[i * rb * cb..][..rb * cb];
                let slot = &mut da[i * ra * ca..][..ra * ca];
                if !ta {
                    // dA = dC op(B)^T: [m,n] x [n,k]
                    gemm_acc(slot, gb, bb, m, n, k, false, !tb);
                } else {
                    // dA = op(B) dC^T: [k,n] x [n,m]
                    gemm_acc(slot, bb, gb, k, n, m, tb, true);
                }
            }
            self.acc_grad(a, &da);
        }
        if self.tracked(b) {
            let ad = self.data(a);
            let mut db = vec![0.0; self.numel(b)];
            for i in 0..batch {
                let gb = &g[i * m * n..][..m * n];
                let ab = &ad[i * ra * ca..][..ra * ca];
                let slot = &mut db[i * rb * cb..][..rb * cb];
                if !tb {
                    // dB = op(A)^T dC: [k,m] x [m,n]
                    gemm_acc(slot, ab, gb, k, m, n, !ta, false);
                } else {
                    // dB = dC^T op(A): [n,m] x [m,k]
                    gemm_acc(slot, gb, ab, n, m, k, true, ta);
                }
            }
            self.acc_grad(b, &db);
        }
    }
}

fn trailing(shape: &[usize]) -> (usize, usize) {
    (shape[shape.len() - 2], shape[shape.len() - 1])
}

/// `out[m x n] += op(a) op(b)` for row-major `a`, `b`.
///
/// `a` is stored `[m, k]` (or `[k, m]` when `ta`), `b` is `[k, n]` (or
/// `[n, k]` when `tb`). Loop orders keep the innermost access contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    out: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let o_row = &mut out[i * n..][..n];
                for l in 0..k {
                    let av = a[i * k + l];
                    let b_row = &b[l * n..][..n];
                    for (ov, &bv) in o_row.iter_mut().zip(b_row) {
                        *ov += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let a_row = &a[i * k..][..k];
                let o_row = &mut out[i * n..][..n];
                for (j, ov) in o_row.iter_mut().enumerate() {
                    let b_row = &b[j * k..][..k];
                    let mut acc = 0.0;
                    for (&av, &bv) in a_row.iter().zip(b_row) {
                        acc += av * bv;
                    }
                    *ov += acc;
                }
            }
        }
        (true, false) => {
            for l in 0..k {
                let a_row = &a[l * m..][..m];
                let b_row = &b[l * n..][..n];
                for (i, &av) in a_row.iter().enumerate() {
                    let o_row = &mut out[i * n..][..n];
                    for (ov, &bv) in o_row.iter_mut().zip(b_row) {
                        *ov += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            // out[i][j] += sum_l a[l][i] * b[j][l]
            for j in 0..n {
                let b_row = &b[j * k..][..k];
                for (l, &bv) in b_row.iter().enumerate() {
                    let a_row = &a[l * m..][..m];
                    for (i, &av) in a_row.iter().enumerate() {
                        out[i * n + j] += av * bv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn small_matmul_matches_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(&t(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_flags_agree_with_explicit_permute() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]));
        let b = tape.constant(&t(vec![2, 3], vec![2.0, 1.0, 0.0, -3.0, 5.0, 2.5]));
        let nt = tape.matmul_nt(a, b).unwrap();
        let bt = tape.transpose(b, 0, 1).unwrap();
        let explicit = tape.matmul(a, bt).unwrap();
        assert_eq!(tape.data(nt), tape.data(explicit));

        let tn = tape.matmul_tn(a, b).unwrap();
        let at = tape.transpose(a, 0, 1).unwrap();
        let explicit2 = tape.matmul(at, b).unwrap();
        assert_eq!(tape.data(tn), tape.data(explicit2));
    }

    #[test]
    fn batched_matmul_is_per_slice() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(vec![2, 2, 1], vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1, 1]);
        assert_eq!(tape.data(c), &[17.0, 53.0]);
    }

    #[test]
    fn inner_extent_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![4, 2]));
        assert!(tape.matmul(a, b).is_err());
    }
}
