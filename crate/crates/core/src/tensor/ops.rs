//! Elementwise ops, reductions, and shape surgery (reshape/concat/split/gather).

use super::{op_result, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "add")?;
        let data: Vec<f32> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        op_result(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            |_, _, go| Ok(vec![Some(go.to_vec()), Some(go.to_vec())]),
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "sub")?;
        let data: Vec<f32> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        op_result(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            |_, _, go| {
                Ok(vec![
                    Some(go.to_vec()),
                    Some(go.iter().map(|g| -g).collect()),
                ])
            },
        )
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "mul")?;
        let data: Vec<f32> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        op_result(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            |parents, _, go| {
                let a = parents[0].data();
                let b = parents[1].data();
                let ga = go.iter().zip(b.iter()).map(|(g, y)| g * y).collect();
                let gb = go.iter().zip(a.iter()).map(|(g, x)| g * x).collect();
                Ok(vec![Some(ga), Some(gb)])
            },
        )
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "div")?;
        let data: Vec<f32> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x / y).collect()
        };
        op_result(
            "div",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            |parents, _, go| {
                let a = parents[0].data();
                let b = parents[1].data();
                let ga = go.iter().zip(b.iter()).map(|(g, y)| g / y).collect();
                let gb = go
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                Ok(vec![Some(ga), Some(gb)])
            },
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|x| -x).collect();
        op_result("neg", self.shape().to_vec(), data, vec![self.clone()], |_, _, go| {
            Ok(vec![Some(go.iter().map(|g| -g).collect())])
        })
    }

    pub fn add_scalar(&self, c: f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|x| x + c).collect();
        op_result("add_scalar", self.shape().to_vec(), data, vec![self.clone()], |_, _, go| {
            Ok(vec![Some(go.to_vec())])
        })
    }

    pub fn mul_scalar(&self, c: f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|x| x * c).collect();
        op_result(
            "mul_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |_, _, go| Ok(vec![Some(go.iter().map(|g| g * c).collect())]),
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|x| x.exp()).collect();
        op_result("exp", self.shape().to_vec(), data, vec![self.clone()], |_, out, go| {
            Ok(vec![Some(go.iter().zip(out.iter()).map(|(g, y)| g * y).collect())])
        })
    }

    pub fn log(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|x| x.ln()).collect();
        op_result("log", self.shape().to_vec(), data, vec![self.clone()], |parents, _, go| {
            let x = parents[0].data();
            Ok(vec![Some(go.iter().zip(x.iter()).map(|(g, x)| g / x).collect())])
        })
    }

    /// Sums over the last axis: [..., C] -> [...].
    pub fn sum_last(&self) -> Result<Tensor> {
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("sum_last", "scalar input".to_string()))?;
        let rows = self.numel() / c;
        let mut data = vec![0.0f32; rows];
        {
            let x = self.data();
            for r in 0..rows {
                data[r] = x[r * c..(r + 1) * c].iter().sum();
            }
        }
        let out_shape: Vec<usize> = self.shape()[..self.rank() - 1].to_vec();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        op_result("sum_last", out_shape, data, vec![self.clone()], move |_, _, go| {
            let mut g = vec![0.0f32; rows * c];
            for r in 0..rows {
                g[r * c..(r + 1) * c].fill(go[r]);
            }
            Ok(vec![Some(g)])
        })
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|x| x.tanh()).collect();
        op_result("tanh", self.shape().to_vec(), data, vec![self.clone()], |_, out, go| {
            Ok(vec![Some(
                go.iter().zip(out.iter()).map(|(g, y)| g * (1.0 - y * y)).collect(),
            )])
        })
    }

    /// Subgradient convention: zero outside the clamped range.
    pub fn clamp(&self, lo: f32, hi: f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|x| x.clamp(lo, hi)).collect();
        op_result(
            "clamp",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |parents, _, go| {
                let x = parents[0].data();
                Ok(vec![Some(
                    go.iter()
                        .zip(x.iter())
                        .map(|(g, &v)| if v >= lo && v <= hi { *g } else { 0.0 })
                        .collect(),
                )])
            },
        )
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f32 = self.data().iter().sum();
        let n = self.numel();
        op_result("sum_all", vec![1], vec![s], vec![self.clone()], move |_, _, go| {
            Ok(vec![Some(vec![go[0]; n])])
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s: f32 = self.data().iter().sum::<f32>() / n as f32;
        op_result("mean_all", vec![1], vec![s], vec![self.clone()], move |_, _, go| {
            Ok(vec![Some(vec![go[0] / n as f32; n])])
        })
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), new_shape),
            ));
        }
        let old_numel = self.numel();
        op_result(
            "reshape",
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            move |_, _, go| {
                debug_assert_eq!(go.len(), old_numel);
                Ok(vec![Some(go.to_vec())])
            },
        )
    }

    /// Concatenates tensors along `axis`. All other axes must agree.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        if tensors.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let rank = tensors[0].rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of rank {rank}")));
        }
        for t in tensors {
            if t.rank() != rank {
                return Err(Error::shape("concat", "rank mismatch".to_string()));
            }
            for d in 0..rank {
                if d != axis && t.shape()[d] != tensors[0].shape()[d] {
                    return Err(Error::shape(
                        "concat",
                        format!(
                            "axis {d} differs: {:?} vs {:?}",
                            t.shape(),
                            tensors[0].shape()
                        ),
                    ));
                }
            }
        }
        let mut out_shape = tensors[0].shape().to_vec();
        out_shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();

        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total: usize = out_shape.iter().product();
        let mut data = vec![0.0f32; total];
        let out_ax = out_shape[axis];

        let mut offset = 0usize;
        for t in tensors {
            let ax = t.shape()[axis];
            let src = t.data();
            for o in 0..outer {
                let dst_base = (o * out_ax + offset) * inner;
                let src_base = o * ax * inner;
                data[dst_base..dst_base + ax * inner]
                    .copy_from_slice(&src[src_base..src_base + ax * inner]);
            }
            offset += ax;
        }

        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        op_result(
            "concat",
            out_shape,
            data,
            tensors.to_vec(),
            move |parents, _, go| {
                let mut grads = Vec::with_capacity(parents.len());
                let mut offset = 0usize;
                for (p, &ax) in parents.iter().zip(sizes.iter()) {
                    let mut g = vec![0.0f32; p.numel()];
                    for o in 0..outer {
                        let src_base = (o * out_ax + offset) * inner;
                        let dst_base = o * ax * inner;
                        g[dst_base..dst_base + ax * inner]
                            .copy_from_slice(&go[src_base..src_base + ax * inner]);
                    }
                    grads.push(Some(g));
                    offset += ax;
                }
                Ok(grads)
            },
        )
    }

    /// Splits along `axis` into chunks of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::shape("split", format!("axis {axis} out of rank {rank}")));
        }
        let total: usize = sizes.iter().sum();
        if total != self.shape()[axis] {
            return Err(Error::shape(
                "split",
                format!("sizes {:?} do not sum to axis length {}", sizes, self.shape()[axis]),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let src_ax = self.shape()[axis];
        let src = self.data();

        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0usize;
        for &ax in sizes {
            let mut shape = self.shape().to_vec();
            shape[axis] = ax;
            let mut data = vec![0.0f32; outer * ax * inner];
            for o in 0..outer {
                let src_base = (o * src_ax + offset) * inner;
                let dst_base = o * ax * inner;
                data[dst_base..dst_base + ax * inner]
                    .copy_from_slice(&src[src_base..src_base + ax * inner]);
            }
            let this_offset = offset;
            let piece = op_result(
                "split",
                shape,
                data,
                vec![self.clone()],
                move |parents, _, go| {
                    let mut g = vec![0.0f32; parents[0].numel()];
                    for o in 0..outer {
                        let dst_base = (o * src_ax + this_offset) * inner;
                        let src_base = o * ax * inner;
                        g[dst_base..dst_base + ax * inner]
                            .copy_from_slice(&go[src_base..src_base + ax * inner]);
                    }
                    Ok(vec![Some(g)])
                },
            )?;
            out.push(piece);
            offset += ax;
        }
        Ok(out)
    }

    /// Gathers rows along axis 0. Backward scatter-adds (indices may repeat).
    pub fn index_select0(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = self.shape().first().copied().unwrap_or(0);
        for &i in indices {
            if i >= rows {
                return Err(Error::Contract(format!(
                    "index_select0 index {i} out of bounds for {rows} rows"
                )));
            }
        }
        let row_len: usize = self.shape()[1..].iter().product();
        let src = self.data();
        let mut data = vec![0.0f32; indices.len() * row_len];
        for (k, &i) in indices.iter().enumerate() {
            data[k * row_len..(k + 1) * row_len]
                .copy_from_slice(&src[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let idx = indices.to_vec();
        op_result("index_select0", shape, data, vec![self.clone()], move |parents, _, go| {
            let mut g = vec![0.0f32; parents[0].numel()];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..row_len {
                    g[i * row_len + j] += go[k * row_len + j];
                }
            }
            Ok(vec![Some(g)])
        })
    }

    /// x[B, N, C] + y[N, C] broadcast over the leading axis.
    pub fn add_broadcast_nc(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 || rhs.rank() != 2 {
            return Err(Error::shape(
                "add_broadcast_nc",
                format!("expected [B,N,C] + [N,C], got {:?} + {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (b, n, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if rhs.shape() != [n, c] {
            return Err(Error::shape(
                "add_broadcast_nc",
                format!("rhs {:?} does not match [{n},{c}]", rhs.shape()),
            ));
        }
        let data: Vec<f32> = {
            let x = self.data();
            let y = rhs.data();
            let mut out = vec![0.0f32; b * n * c];
            for bi in 0..b {
                for j in 0..n * c {
                    out[bi * n * c + j] = x[bi * n * c + j] + y[j];
                }
            }
            out
        };
        op_result(
            "add_broadcast_nc",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            move |_, _, go| {
                let gx = go.to_vec();
                let mut gy = vec![0.0f32; n * c];
                for bi in 0..b {
                    for j in 0..n * c {
                        gy[j] += go[bi * n * c + j];
                    }
                }
                Ok(vec![Some(gx), Some(gy)])
            },
        )
    }
}
