//! Matrix multiply kernel plus the linear / batched-matmul ops built on it.

use rayon::prelude::*;

use super::{op_result, Tensor};
use crate::error::{Error, Result};

/// out[m,n] = a[m,k] @ b[k,n]. Rows of the output are computed independently
/// (parallelized over row blocks), accumulation within a row is sequential,
/// so results do not depend on the thread count.
pub fn matmul_slices(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |ai: &[f32], oi: &mut [f32]| {
        oi.fill(0.0);
        for (kk, &av) in ai.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in oi.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= 32_768 {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(oi, ai)| row(ai, oi));
    } else {
        for (oi, ai) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(ai, oi);
        }
    }
}

/// a[m,k] @ b[k,n] with `b` accessed transposed: b_t is [n,k].
fn matmul_bt(a: &[f32], b_t: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    let row = |ai: &[f32], oi: &mut [f32]| {
        for (j, o) in oi.iter_mut().enumerate() {
            let brow = &b_t[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in ai.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= 32_768 {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(oi, ai)| row(ai, oi));
    } else {
        for (oi, ai) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(ai, oi);
        }
    }
}

fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

impl Tensor {
    /// 2-D matrix product: [m,k] @ [k,n] -> [m,n].
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("expected 2-D operands, got {:?} @ {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} @ {:?}", self.shape(), rhs.shape()),
            ));
        }
        let mut data = vec![0.0f32; m * n];
        matmul_slices(&self.data(), &rhs.data(), m, k, n, &mut data);
        op_result(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), rhs.clone()],
            move |parents, _, go| {
                let a = parents[0].data();
                let b = parents[1].data();
                // ga = go @ b^T ; gb = a^T @ go
                let mut ga = vec![0.0f32; m * k];
                matmul_bt(go, &b, m, n, k, &mut ga);
                let a_t = transpose(&a, m, k);
                let mut gb = vec![0.0f32; k * n];
                matmul_slices(&a_t, go, k, m, n, &mut gb);
                Ok(vec![Some(ga), Some(gb)])
            },
        )
    }

    /// Fully-connected layer: x[...,in] @ w[out,in]^T + b[out].
    /// Accepts 2-D [N,in] or 3-D [B,N,in] inputs.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        if weight.rank() != 2 {
            return Err(Error::shape("linear", format!("weight must be 2-D, got {:?}", weight.shape())));
        }
        let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
        let last = *self.shape().last().ok_or_else(|| Error::shape("linear", "scalar input".to_string()))?;
        if last != in_f {
            return Err(Error::shape(
                "linear",
                format!("input last dim {last} != weight in dim {in_f}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [out_f] {
                return Err(Error::shape("linear", format!("bias {:?} != [{out_f}]", b.shape())));
            }
        }
        let rows = self.numel() / in_f;
        let mut data = vec![0.0f32; rows * out_f];
        // x @ w^T via the transposed kernel
        matmul_bt(&self.data(), &weight.data(), rows, in_f, out_f, &mut data);
        if let Some(b) = bias {
            let bd = b.data();
            for r in 0..rows {
                for (o, &bv) in data[r * out_f..(r + 1) * out_f].iter_mut().zip(bd.iter()) {
                    *o += bv;
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = out_f;

        let mut parents = vec![self.clone(), weight.clone()];
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        op_result("linear", out_shape, data, parents, move |parents, _, go| {
            let x = parents[0].data();
            let w = parents[1].data();
            // gx = go @ w ; gw = go^T @ x ; gb = column sums of go
            let mut gx = vec![0.0f32; rows * in_f];
            matmul_slices(go, &w, rows, out_f, in_f, &mut gx);
            let go_t = transpose(go, rows, out_f);
            let mut gw = vec![0.0f32; out_f * in_f];
            matmul_slices(&go_t, &x, out_f, rows, in_f, &mut gw);
            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                let mut gb = vec![0.0f32; out_f];
                for r in 0..rows {
                    for (g, &v) in gb.iter_mut().zip(go[r * out_f..(r + 1) * out_f].iter()) {
                        *g += v;
                    }
                }
                grads.push(Some(gb));
            }
            Ok(grads)
        })
    }

    /// Batched matrix product: [B,m,k] @ [B,k,n] -> [B,m,n].
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 || rhs.rank() != 3 {
            return Err(Error::shape(
                "bmm",
                format!("expected 3-D operands, got {:?} @ {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (b, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (b2, k2, n) = (rhs.shape()[0], rhs.shape()[1], rhs.shape()[2]);
        if b != b2 || k != k2 {
            return Err(Error::shape(
                "bmm",
                format!("incompatible batches: {:?} @ {:?}", self.shape(), rhs.shape()),
            ));
        }
        let mut data = vec![0.0f32; b * m * n];
        {
            let a = self.data();
            let bb = rhs.data();
            for i in 0..b {
                matmul_slices(
                    &a[i * m * k..(i + 1) * m * k],
                    &bb[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut data[i * m * n..(i + 1) * m * n],
                );
            }
        }
        op_result(
            "bmm",
            vec![b, m, n],
            data,
            vec![self.clone(), rhs.clone()],
            move |parents, _, go| {
                let a = parents[0].data();
                let bb = parents[1].data();
                let mut ga = vec![0.0f32; b * m * k];
                let mut gb = vec![0.0f32; b * k * n];
                for i in 0..b {
                    let goi = &go[i * m * n..(i + 1) * m * n];
                    matmul_bt(
                        goi,
                        &bb[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                    let a_t = transpose(&a[i * m * k..(i + 1) * m * k], m, k);
                    matmul_slices(&a_t, goi, k, m, n, &mut gb[i * k * n..(i + 1) * k * n]);
                }
                Ok(vec![Some(ga), Some(gb)])
            },
        )
    }

    /// Swaps the last two axes of a 3-D tensor.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::shape(
                "transpose_last2",
                format!("expected 3-D, got {:?}", self.shape()),
            ));
        }
        let (b, m, n) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let src = self.data();
        let mut data = vec![0.0f32; b * m * n];
        for i in 0..b {
            for r in 0..m {
                for c in 0..n {
                    data[i * m * n + c * m + r] = src[i * m * n + r * n + c];
                }
            }
        }
        drop(src);
        op_result(
            "transpose_last2",
            vec![b, n, m],
            data,
            vec![self.clone()],
            move |_, _, go| {
                let mut g = vec![0.0f32; b * m * n];
                for i in 0..b {
                    for r in 0..n {
                        for c in 0..m {
                            g[i * m * n + c * n + r] = go[i * m * n + r * m + c];
                        }
                    }
                }
                Ok(vec![Some(g)])
            },
        )
    }
}
