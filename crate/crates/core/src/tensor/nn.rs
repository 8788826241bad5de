//! Neural-net primitives: convolutions, normalization, activations,
//! attention, pooling, resampling, padding and the Gaussian blur helper.

use rayon::prelude::*;

use super::linalg::matmul_slices;
use super::{op_result, Tensor};
use crate::error::{Error, Result};

fn conv2d_out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// Lowers one image [C,H,W] into a [C*kh*kw, Hout*Wout] column matrix.
fn im2col(
    src: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f32],
) {
    let hout = conv2d_out_dim(h, kh, stride, pad);
    let wout = conv2d_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * hout * wout);
    let hw_out = hout * wout;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * hw_out;
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[row + oy * wout..row + (oy + 1) * wout];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &src[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-adds a column matrix back into an image.
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dst: &mut [f32],
) {
    let hout = conv2d_out_dim(h, kh, stride, pad);
    let wout = conv2d_out_dim(w, kw, stride, pad);
    let hw_out = hout * wout;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * hw_out;
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wout {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[(ci * h + iy as usize) * w + ix as usize] += cols[row + oy * wout + ox];
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation: input [B,C,H,W] * kernel [O,C,kh,kw] -> [B,O,H',W'].
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        if self.rank() != 4 || kernel.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-D input/kernel, got {:?} and {:?}", self.shape(), kernel.shape()),
            ));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (o, ck, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
        if c != ck {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c} != kernel channels {ck}"),
            ));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"),
            ));
        }
        if let Some(bt) = bias {
            if bt.shape() != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?} != [{o}]", bt.shape())));
            }
        }
        let hout = conv2d_out_dim(h, kh, stride, padding);
        let wout = conv2d_out_dim(w, kw, stride, padding);
        let ckk = c * kh * kw;
        let hw_out = hout * wout;

        let mut data = vec![0.0f32; b * o * hw_out];
        {
            let src_guard = self.data();
            let src: &[f32] = &src_guard;
            let w_guard = kernel.data();
            let wmat: &[f32] = &w_guard;
            let bd = bias.map(|bt| bt.to_vec());
            data.par_chunks_mut(o * hw_out)
                .zip(src.par_chunks(c * h * w))
                .for_each(|(out_b, src_b)| {
                    let mut cols = vec![0.0f32; ckk * hw_out];
                    im2col(src_b, c, h, w, kh, kw, stride, padding, &mut cols);
                    matmul_slices(wmat, &cols, o, ckk, hw_out, out_b);
                    if let Some(bd) = &bd {
                        for oi in 0..o {
                            let bv = bd[oi];
                            for v in out_b[oi * hw_out..(oi + 1) * hw_out].iter_mut() {
                                *v += bv;
                            }
                        }
                    }
                });
        }

        let mut parents = vec![self.clone(), kernel.clone()];
        let has_bias = bias.is_some();
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        op_result("conv2d", vec![b, o, hout, wout], data, parents, move |parents, _, go| {
            let src = parents[0].data();
            let wmat = parents[1].data();
            // weight transpose [CKK, O] used for grad wrt input columns
            let mut w_t = vec![0.0f32; ckk * o];
            for oi in 0..o {
                for j in 0..ckk {
                    w_t[j * o + oi] = wmat[oi * ckk + j];
                }
            }
            let mut gx = vec![0.0f32; b * c * h * w];
            let mut gw = vec![0.0f32; o * ckk];
            let mut gb = vec![0.0f32; o];
            let mut cols = vec![0.0f32; ckk * hw_out];
            let mut gcols = vec![0.0f32; ckk * hw_out];
            for bi in 0..b {
                let go_b = &go[bi * o * hw_out..(bi + 1) * o * hw_out];
                let src_b = &src[bi * c * h * w..(bi + 1) * c * h * w];
                im2col(src_b, c, h, w, kh, kw, stride, padding, &mut cols);
                // gw += go_b [O,HW'] @ cols^T [HW',CKK]
                for oi in 0..o {
                    let gr = &go_b[oi * hw_out..(oi + 1) * hw_out];
                    let gwr = &mut gw[oi * ckk..(oi + 1) * ckk];
                    for j in 0..ckk {
                        let cr = &cols[j * hw_out..(j + 1) * hw_out];
                        let mut acc = 0.0f32;
                        for (&g, &cv) in gr.iter().zip(cr.iter()) {
                            acc += g * cv;
                        }
                        gwr[j] += acc;
                    }
                }
                // gcols = w^T @ go_b
                matmul_slices(&w_t, go_b, ckk, o, hw_out, &mut gcols);
                col2im(&gcols, c, h, w, kh, kw, stride, padding, &mut gx[bi * c * h * w..(bi + 1) * c * h * w]);
                if has_bias {
                    for oi in 0..o {
                        gb[oi] += go_b[oi * hw_out..(oi + 1) * hw_out].iter().sum::<f32>();
                    }
                }
            }
            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                grads.push(Some(gb));
            }
            Ok(grads)
        })
    }

    /// 1-D cross-correlation across the last axis: [B,C,N] * [O,C,k] -> [B,O,N].
    /// Stride is 1; zero padding keeps length when padding = (k-1)/2.
    pub fn conv1d(&self, kernel: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
        if self.rank() != 3 || kernel.rank() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("expected 3-D input/kernel, got {:?} and {:?}", self.shape(), kernel.shape()),
            ));
        }
        let (b, c, n) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (o, ck, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        if c != ck {
            return Err(Error::shape("conv1d", format!("input channels {c} != kernel channels {ck}")));
        }
        if n + 2 * padding < k {
            return Err(Error::shape("conv1d", format!("kernel {k} larger than padded length {n}")));
        }
        if let Some(bt) = bias {
            if bt.shape() != [o] {
                return Err(Error::shape("conv1d", format!("bias {:?} != [{o}]", bt.shape())));
            }
        }
        let nout = n + 2 * padding - k + 1;
        let mut data = vec![0.0f32; b * o * nout];
        {
            let src_guard = self.data();
            let src: &[f32] = &src_guard;
            let w_guard = kernel.data();
            let wd: &[f32] = &w_guard;
            let bd = bias.map(|bt| bt.to_vec());
            data.par_chunks_mut(o * nout)
                .zip(src.par_chunks(c * n))
                .for_each(|(out_b, src_b)| {
                    for oi in 0..o {
                        for t in 0..nout {
                            let mut acc = bd.as_ref().map(|bd| bd[oi]).unwrap_or(0.0);
                            for ci in 0..c {
                                for kk in 0..k {
                                    let idx = (t + kk) as isize - padding as isize;
                                    if idx < 0 || idx >= n as isize {
                                        continue;
                                    }
                                    acc += src_b[ci * n + idx as usize] * wd[(oi * c + ci) * k + kk];
                                }
                            }
                            out_b[oi * nout + t] = acc;
                        }
                    }
                });
        }
        let mut parents = vec![self.clone(), kernel.clone()];
        let has_bias = bias.is_some();
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        op_result("conv1d", vec![b, o, nout], data, parents, move |parents, _, go| {
            let src = parents[0].data();
            let wd = parents[1].data();
            let mut gx = vec![0.0f32; b * c * n];
            let mut gw = vec![0.0f32; o * c * k];
            let mut gb = vec![0.0f32; o];
            for bi in 0..b {
                for oi in 0..o {
                    for t in 0..nout {
                        let g = go[(bi * o + oi) * nout + t];
                        if has_bias {
                            gb[oi] += g;
                        }
                        for ci in 0..c {
                            for kk in 0..k {
                                let idx = (t + kk) as isize - padding as isize;
                                if idx < 0 || idx >= n as isize {
                                    continue;
                                }
                                gx[(bi * c + ci) * n + idx as usize] += g * wd[(oi * c + ci) * k + kk];
                                gw[(oi * c + ci) * k + kk] += g * src[(bi * c + ci) * n + idx as usize];
                            }
                        }
                    }
                }
            }
            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                grads.push(Some(gb));
            }
            Ok(grads)
        })
    }

    /// Transposed 2-D convolution: input [B,C,H,W] * kernel [C,O,kh,kw]
    /// -> [B,O,(H-1)s-2p+kh, (W-1)s-2p+kw].
    pub fn conv_transpose2d(
        &self,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        if self.rank() != 4 || kernel.rank() != 4 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("expected 4-D input/kernel, got {:?} and {:?}", self.shape(), kernel.shape()),
            ));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (ck, o, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
        if c != ck {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input channels {c} != kernel channels {ck}"),
            ));
        }
        let hout = (h - 1) * stride + kh - 2 * padding;
        let wout = (w - 1) * stride + kw - 2 * padding;
        if let Some(bt) = bias {
            if bt.shape() != [o] {
                return Err(Error::shape("conv_transpose2d", format!("bias {:?} != [{o}]", bt.shape())));
            }
        }
        let mut data = vec![0.0f32; b * o * hout * wout];
        {
            let src_guard = self.data();
            let src: &[f32] = &src_guard;
            let w_guard = kernel.data();
            let wd: &[f32] = &w_guard;
            let bd = bias.map(|bt| bt.to_vec());
            data.par_chunks_mut(o * hout * wout)
                .zip(src.par_chunks(c * h * w))
                .for_each(|(out_b, src_b)| {
                    if let Some(bd) = &bd {
                        for oi in 0..o {
                            out_b[oi * hout * wout..(oi + 1) * hout * wout].fill(bd[oi]);
                        }
                    }
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let v = src_b[(ci * h + y) * w + x];
                                if v == 0.0 {
                                    continue;
                                }
                                for oi in 0..o {
                                    for ky in 0..kh {
                                        let oy = (y * stride + ky) as isize - padding as isize;
                                        if oy < 0 || oy >= hout as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ox = (x * stride + kx) as isize - padding as isize;
                                            if ox < 0 || ox >= wout as isize {
                                                continue;
                                            }
                                            out_b[(oi * hout + oy as usize) * wout + ox as usize] +=
                                                v * wd[((ci * o + oi) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
        }
        let mut parents = vec![self.clone(), kernel.clone()];
        let has_bias = bias.is_some();
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        op_result(
            "conv_transpose2d",
            vec![b, o, hout, wout],
            data,
            parents,
            move |parents, _, go| {
                let src = parents[0].data();
                let wd = parents[1].data();
                let mut gx = vec![0.0f32; b * c * h * w];
                let mut gw = vec![0.0f32; c * o * kh * kw];
                let mut gb = vec![0.0f32; o];
                for bi in 0..b {
                    let go_b = &go[bi * o * hout * wout..(bi + 1) * o * hout * wout];
                    let src_b = &src[bi * c * h * w..(bi + 1) * c * h * w];
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let xin = src_b[(ci * h + y) * w + x];
                                let mut acc = 0.0f32;
                                for oi in 0..o {
                                    for ky in 0..kh {
                                        let oy = (y * stride + ky) as isize - padding as isize;
                                        if oy < 0 || oy >= hout as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ox = (x * stride + kx) as isize - padding as isize;
                                            if ox < 0 || ox >= wout as isize {
                                                continue;
                                            }
                                            let g = go_b[(oi * hout + oy as usize) * wout + ox as usize];
                                            acc += g * wd[((ci * o + oi) * kh + ky) * kw + kx];
                                            gw[((ci * o + oi) * kh + ky) * kw + kx] += g * xin;
                                        }
                                    }
                                }
                                gx[((bi * c + ci) * h + y) * w + x] = acc;
                            }
                        }
                    }
                    if has_bias {
                        for oi in 0..o {
                            gb[oi] += go_b[oi * hout * wout..(oi + 1) * hout * wout].iter().sum::<f32>();
                        }
                    }
                }
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    grads.push(Some(gb));
                }
                Ok(grads)
            },
        )
    }

    /// Group normalization over [B,C,H,W].
    pub fn group_norm(&self, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f32) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::shape("group_norm", format!("expected 4-D, got {:?}", self.shape())));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        if c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("channels {c} not divisible by groups {groups}"),
            ));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "group_norm",
                format!("gamma/beta {:?}/{:?} != [{c}]", gamma.shape(), beta.shape()),
            ));
        }
        let cg = c / groups;
        let m = cg * h * w;
        let hw = h * w;
        let mut data = vec![0.0f32; b * c * hw];
        let mut stats = vec![0.0f32; b * groups * 2]; // mean, inv_std per (b, g)
        {
            let x = self.data();
            let gd = gamma.data();
            let bd = beta.data();
            for bi in 0..b {
                for g in 0..groups {
                    let base = (bi * c + g * cg) * hw;
                    let chunk = &x[base..base + m];
                    let mean = chunk.iter().sum::<f32>() / m as f32;
                    let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / m as f32;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    stats[(bi * groups + g) * 2] = mean;
                    stats[(bi * groups + g) * 2 + 1] = inv_std;
                    for ci in 0..cg {
                        let ch = g * cg + ci;
                        let (ga, be) = (gd[ch], bd[ch]);
                        let off = (bi * c + ch) * hw;
                        for j in 0..hw {
                            data[off + j] = (x[off + j] - mean) * inv_std * ga + be;
                        }
                    }
                }
            }
        }
        op_result(
            "group_norm",
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |parents, _, go| {
                let x = parents[0].data();
                let gd = parents[1].data();
                let mut gx = vec![0.0f32; b * c * hw];
                let mut gg = vec![0.0f32; c];
                let mut gb = vec![0.0f32; c];
                for bi in 0..b {
                    for g in 0..groups {
                        let mean = stats[(bi * groups + g) * 2];
                        let inv_std = stats[(bi * groups + g) * 2 + 1];
                        // sums of gamma*go and gamma*go*xhat over the group
                        let mut sum1 = 0.0f32;
                        let mut sum2 = 0.0f32;
                        for ci in 0..cg {
                            let ch = g * cg + ci;
                            let off = (bi * c + ch) * hw;
                            let ga = gd[ch];
                            for j in 0..hw {
                                let xh = (x[off + j] - mean) * inv_std;
                                let gh = go[off + j] * ga;
                                sum1 += gh;
                                sum2 += gh * xh;
                                gg[ch] += go[off + j] * xh;
                                gb[ch] += go[off + j];
                            }
                        }
                        let inv_m = 1.0 / m as f32;
                        for ci in 0..cg {
                            let ch = g * cg + ci;
                            let off = (bi * c + ch) * hw;
                            let ga = gd[ch];
                            for j in 0..hw {
                                let xh = (x[off + j] - mean) * inv_std;
                                let gh = go[off + j] * ga;
                                gx[off + j] = (gh - sum1 * inv_m - xh * sum2 * inv_m) * inv_std;
                            }
                        }
                    }
                }
                Ok(vec![Some(gx), Some(gg), Some(gb)])
            },
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input".to_string()))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma/beta {:?}/{:?} != [{c}]", gamma.shape(), beta.shape()),
            ));
        }
        let rows = self.numel() / c;
        let mut data = vec![0.0f32; rows * c];
        let mut stats = vec![0.0f32; rows * 2];
        {
            let x = self.data();
            let gd = gamma.data();
            let bd = beta.data();
            for r in 0..rows {
                let chunk = &x[r * c..(r + 1) * c];
                let mean = chunk.iter().sum::<f32>() / c as f32;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
                let inv_std = 1.0 / (var + eps).sqrt();
                stats[r * 2] = mean;
                stats[r * 2 + 1] = inv_std;
                for j in 0..c {
                    data[r * c + j] = (chunk[j] - mean) * inv_std * gd[j] + bd[j];
                }
            }
        }
        op_result(
            "layer_norm",
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |parents, _, go| {
                let x = parents[0].data();
                let gd = parents[1].data();
                let mut gx = vec![0.0f32; rows * c];
                let mut gg = vec![0.0f32; c];
                let mut gb = vec![0.0f32; c];
                for r in 0..rows {
                    let mean = stats[r * 2];
                    let inv_std = stats[r * 2 + 1];
                    let mut sum1 = 0.0f32;
                    let mut sum2 = 0.0f32;
                    for j in 0..c {
                        let xh = (x[r * c + j] - mean) * inv_std;
                        let gh = go[r * c + j] * gd[j];
                        sum1 += gh;
                        sum2 += gh * xh;
                        gg[j] += go[r * c + j] * xh;
                        gb[j] += go[r * c + j];
                    }
                    let inv_c = 1.0 / c as f32;
                    for j in 0..c {
                        let xh = (x[r * c + j] - mean) * inv_std;
                        let gh = go[r * c + j] * gd[j];
                        gx[r * c + j] = (gh - sum1 * inv_c - xh * sum2 * inv_c) * inv_std;
                    }
                }
                Ok(vec![Some(gx), Some(gg), Some(gb)])
            },
        )
    }

    /// Softmax along the last axis. Rows sum to 1.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input".to_string()))?;
        let rows = self.numel() / c;
        let mut data = vec![0.0f32; rows * c];
        {
            let x = self.data();
            for r in 0..rows {
                let chunk = &x[r * c..(r + 1) * c];
                let max = chunk.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for j in 0..c {
                    let e = (chunk[j] - max).exp();
                    data[r * c + j] = e;
                    sum += e;
                }
                for j in 0..c {
                    data[r * c + j] /= sum;
                }
            }
        }
        op_result("softmax", self.shape().to_vec(), data, vec![self.clone()], move |_, out, go| {
            let mut gx = vec![0.0f32; rows * c];
            for r in 0..rows {
                let y = &out[r * c..(r + 1) * c];
                let g = &go[r * c..(r + 1) * c];
                let dot: f32 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[r * c + j] = y[j] * (g[j] - dot);
                }
            }
            Ok(vec![Some(gx)])
        })
    }

    /// SiLU activation x * sigmoid(x).
    pub fn silu(&self) -> Result<Tensor> {
        let data: Vec<f32> = self
            .data()
            .iter()
            .map(|&x| {
                let s = 1.0 / (1.0 + (-x).exp());
                x * s
            })
            .collect();
        op_result("silu", self.shape().to_vec(), data, vec![self.clone()], |parents, _, go| {
            let x = parents[0].data();
            Ok(vec![Some(
                go.iter()
                    .zip(x.iter())
                    .map(|(g, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect(),
            )])
        })
    }

    /// Non-overlapping average pooling with window `k`. Ragged tails use a
    /// smaller window so any input size (down to 1x1) pools cleanly.
    pub fn avgpool2d(&self, k: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::shape("avgpool2d", format!("expected 4-D, got {:?}", self.shape())));
        }
        if k == 0 {
            return Err(Error::Contract("avgpool2d window must be >= 1".into()));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let hout = h.div_ceil(k);
        let wout = w.div_ceil(k);
        let mut data = vec![0.0f32; b * c * hout * wout];
        {
            let x = self.data();
            for bc in 0..b * c {
                let src = &x[bc * h * w..(bc + 1) * h * w];
                let dst = &mut data[bc * hout * wout..(bc + 1) * hout * wout];
                for oy in 0..hout {
                    let y0 = oy * k;
                    let y1 = (y0 + k).min(h);
                    for ox in 0..wout {
                        let x0 = ox * k;
                        let x1 = (x0 + k).min(w);
                        let mut acc = 0.0f32;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                acc += src[y * w + xx];
                            }
                        }
                        dst[oy * wout + ox] = acc / ((y1 - y0) * (x1 - x0)) as f32;
                    }
                }
            }
        }
        op_result(
            "avgpool2d",
            vec![b, c, hout, wout],
            data,
            vec![self.clone()],
            move |_, _, go| {
                let mut gx = vec![0.0f32; b * c * h * w];
                for bc in 0..b * c {
                    let gsrc = &go[bc * hout * wout..(bc + 1) * hout * wout];
                    let gdst = &mut gx[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..hout {
                        let y0 = oy * k;
                        let y1 = (y0 + k).min(h);
                        for ox in 0..wout {
                            let x0 = ox * k;
                            let x1 = (x0 + k).min(w);
                            let g = gsrc[oy * wout + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    gdst[y * w + xx] += g;
                                }
                            }
                        }
                    }
                }
                Ok(vec![Some(gx)])
            },
        )
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest2d(&self, factor: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::shape("upsample_nearest2d", format!("expected 4-D, got {:?}", self.shape())));
        }
        if factor == 0 {
            return Err(Error::Contract("upsample factor must be >= 1".into()));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (hout, wout) = (h * factor, w * factor);
        let mut data = vec![0.0f32; b * c * hout * wout];
        {
            let x = self.data();
            for bc in 0..b * c {
                let src = &x[bc * h * w..(bc + 1) * h * w];
                let dst = &mut data[bc * hout * wout..(bc + 1) * hout * wout];
                for oy in 0..hout {
                    for ox in 0..wout {
                        dst[oy * wout + ox] = src[(oy / factor) * w + ox / factor];
                    }
                }
            }
        }
        op_result(
            "upsample_nearest2d",
            vec![b, c, hout, wout],
            data,
            vec![self.clone()],
            move |_, _, go| {
                let mut gx = vec![0.0f32; b * c * h * w];
                for bc in 0..b * c {
                    let gsrc = &go[bc * hout * wout..(bc + 1) * hout * wout];
                    let gdst = &mut gx[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..hout {
                        for ox in 0..wout {
                            gdst[(oy / factor) * w + ox / factor] += gsrc[oy * wout + ox];
                        }
                    }
                }
                Ok(vec![Some(gx)])
            },
        )
    }

    /// Replicate (clamp-to-edge) padding of the two spatial axes.
    pub fn pad_replicate2d(&self, pad: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::shape("pad_replicate2d", format!("expected 4-D, got {:?}", self.shape())));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (hout, wout) = (h + 2 * pad, w + 2 * pad);
        let mut data = vec![0.0f32; b * c * hout * wout];
        {
            let x = self.data();
            for bc in 0..b * c {
                let src = &x[bc * h * w..(bc + 1) * h * w];
                let dst = &mut data[bc * hout * wout..(bc + 1) * hout * wout];
                for oy in 0..hout {
                    let sy = oy.saturating_sub(pad).min(h - 1);
                    for ox in 0..wout {
                        let sx = ox.saturating_sub(pad).min(w - 1);
                        dst[oy * wout + ox] = src[sy * w + sx];
                    }
                }
            }
        }
        op_result(
            "pad_replicate2d",
            vec![b, c, hout, wout],
            data,
            vec![self.clone()],
            move |_, _, go| {
                let mut gx = vec![0.0f32; b * c * h * w];
                for bc in 0..b * c {
                    let gsrc = &go[bc * hout * wout..(bc + 1) * hout * wout];
                    let gdst = &mut gx[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..hout {
                        let sy = oy.saturating_sub(pad).min(h - 1);
                        for ox in 0..wout {
                            let sx = ox.saturating_sub(pad).min(w - 1);
                            gdst[sy * w + sx] += gsrc[oy * wout + ox];
                        }
                    }
                }
                Ok(vec![Some(gx)])
            },
        )
    }

    /// Gaussian blur with clamp-to-edge padding, applied per channel.
    /// Built from pad + conv so gradients come from the primitives.
    pub fn gaussian_blur2d(&self, ksize: usize, sigma: f32) -> Result<Tensor> {
        if ksize % 2 == 0 {
            return Err(Error::Contract("gaussian_blur2d kernel size must be odd".into()));
        }
        let kernel = Tensor::new(&[1, 1, ksize, ksize], gaussian_kernel2d(ksize, sigma))?;
        let pad = (ksize - 1) / 2;
        let c = self.shape()[1];
        let channels = self.split(1, &vec![1; c])?;
        let blurred: Vec<Tensor> = channels
            .iter()
            .map(|ch| ch.pad_replicate2d(pad)?.conv2d(&kernel, None, 1, 0))
            .collect::<Result<_>>()?;
        Tensor::concat(&blurred, 1)
    }

    /// Scaled dot-product attention. q [B,N,d], k [B,M,d], v [B,M,d] -> [B,N,d].
    pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
            return Err(Error::shape(
                "attention",
                format!("expected 3-D q/k/v, got {:?}/{:?}/{:?}", q.shape(), k.shape(), v.shape()),
            ));
        }
        let d = q.shape()[2];
        if k.shape()[2] != d {
            return Err(Error::shape(
                "attention",
                format!("q feature dim {d} != k feature dim {}", k.shape()[2]),
            ));
        }
        if k.shape()[1] != v.shape()[1] || k.shape()[0] != v.shape()[0] || q.shape()[0] != k.shape()[0] {
            return Err(Error::shape(
                "attention",
                format!("batch/sequence mismatch: q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
            ));
        }
        let scale = 1.0 / (d as f32).sqrt();
        let scores = q.bmm(&k.transpose_last2()?)?.mul_scalar(scale)?;
        let weights = scores.softmax_last()?;
        weights.bmm(v)
    }

    /// Global mean over the spatial axes: [B,C,H,W] -> [B,C].
    pub fn mean_hw(&self) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::shape("mean_hw", format!("expected 4-D, got {:?}", self.shape())));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let hw = h * w;
        let mut data = vec![0.0f32; b * c];
        {
            let x = self.data();
            for bc in 0..b * c {
                data[bc] = x[bc * hw..(bc + 1) * hw].iter().sum::<f32>() / hw as f32;
            }
        }
        op_result("mean_hw", vec![b, c], data, vec![self.clone()], move |_, _, go| {
            let mut gx = vec![0.0f32; b * c * hw];
            for bc in 0..b * c {
                let g = go[bc] / hw as f32;
                gx[bc * hw..(bc + 1) * hw].fill(g);
            }
            Ok(vec![Some(gx)])
        })
    }

    /// Row-wise L2 normalization of [B,D] to unit length.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("l2_normalize_rows", format!("expected 2-D, got {:?}", self.shape())));
        }
        let (b, d) = (self.shape()[0], self.shape()[1]);
        let mut data = vec![0.0f32; b * d];
        let mut norms = vec![0.0f32; b];
        {
            let x = self.data();
            for r in 0..b {
                let row = &x[r * d..(r + 1) * d];
                let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
                norms[r] = n;
                for j in 0..d {
                    data[r * d + j] = row[j] / n;
                }
            }
        }
        op_result("l2_normalize_rows", vec![b, d], data, vec![self.clone()], move |_, out, go| {
            let mut gx = vec![0.0f32; b * d];
            for r in 0..b {
                let y = &out[r * d..(r + 1) * d];
                let g = &go[r * d..(r + 1) * d];
                let dot: f32 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    gx[r * d + j] = (g[j] - y[j] * dot) / norms[r];
                }
            }
            Ok(vec![Some(gx)])
        })
    }
}

/// Normalized 2-D Gaussian kernel values, row-major.
pub(crate) fn gaussian_kernel2d(ksize: usize, sigma: f32) -> Vec<f32> {
    let half = (ksize / 2) as isize;
    let mut k = vec![0.0f32; ksize * ksize];
    let mut sum = 0.0f32;
    for y in 0..ksize {
        for x in 0..ksize {
            let dy = (y as isize - half) as f32;
            let dx = (x as isize - half) as f32;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            k[y * ksize + x] = v;
            sum += v;
        }
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Standard sinusoidal embedding of integer steps, one row per entry.
pub fn time_embedding(steps: &[f32], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; steps.len() * dim];
    for (r, &t) in steps.iter().enumerate() {
        for i in 0..half {
            let freq = if half > 1 {
                (-(10000.0f32).ln() * i as f32 / (half - 1) as f32).exp()
            } else {
                1.0
            };
            data[r * dim + i] = (t * freq).sin();
            data[r * dim + half + i] = (t * freq).cos();
        }
    }
    Tensor::from_parts_pub(vec![steps.len(), dim], data)
}

impl Tensor {
    pub(crate) fn from_parts_pub(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(&shape, data).expect("internal shape/data mismatch")
    }
}
