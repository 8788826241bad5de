//! Video tensor rearrangement between the 5-axis layout [b,n,c,h,w] and the
//! layouts consumed by spatial layers, temporal convolutions and temporal
//! attention. Each mode is a bijection with an exact inverse.

use super::{op_result, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RearrangeMode {
    /// [b,n,c,h,w] -> [(b*n), c, h, w]
    Spatial,
    /// [b,n,c,h,w] -> [(b*h*w), c, n]
    TemporalConv,
    /// [b,n,c,h,w] -> [(b*h*w), n, c]
    TemporalAttn,
}

fn dims5(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
    if t.rank() != 5 {
        return Err(Error::shape(op, format!("expected 5-D [b,n,c,h,w], got {:?}", t.shape())));
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3], s[4]))
}

// Flat-index permutations shared by forward and inverse so the pair is exact.

fn scatter_spatial(src: &[f32], dst: &mut [f32], _b: usize, _n: usize, _c: usize, _h: usize, _w: usize, invert: bool) {
    // [b,n,c,h,w] and [(b*n),c,h,w] share the same flat layout.
    if invert || !invert {
        dst.copy_from_slice(src);
    }
}

fn scatter_temporal_conv(src: &[f32], dst: &mut [f32], b: usize, n: usize, c: usize, h: usize, w: usize, invert: bool) {
    let hw = h * w;
    for bi in 0..b {
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..hw {
                    let five = (((bi * n + ni) * c + ci) * hw) + p;
                    let flat = ((bi * hw + p) * c + ci) * n + ni;
                    if invert {
                        dst[five] = src[flat];
                    } else {
                        dst[flat] = src[five];
                    }
                }
            }
        }
    }
}

fn scatter_temporal_attn(src: &[f32], dst: &mut [f32], b: usize, n: usize, c: usize, h: usize, w: usize, invert: bool) {
    let hw = h * w;
    for bi in 0..b {
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..hw {
                    let five = (((bi * n + ni) * c + ci) * hw) + p;
                    let flat = ((bi * hw + p) * n + ni) * c + ci;
                    if invert {
                        dst[five] = src[flat];
                    } else {
                        dst[flat] = src[five];
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Rearranges a 5-axis video tensor for the given layer family.
    pub fn rearrange_video(&self, mode: RearrangeMode) -> Result<Tensor> {
        let (b, n, c, h, w) = dims5(self, "rearrange_video")?;
        let out_shape = match mode {
            RearrangeMode::Spatial => vec![b * n, c, h, w],
            RearrangeMode::TemporalConv => vec![b * h * w, c, n],
            RearrangeMode::TemporalAttn => vec![b * h * w, n, c],
        };
        let mut data = vec![0.0f32; self.numel()];
        {
            let src = self.data();
            match mode {
                RearrangeMode::Spatial => scatter_spatial(&src, &mut data, b, n, c, h, w, false),
                RearrangeMode::TemporalConv => scatter_temporal_conv(&src, &mut data, b, n, c, h, w, false),
                RearrangeMode::TemporalAttn => scatter_temporal_attn(&src, &mut data, b, n, c, h, w, false),
            }
        }
        op_result("rearrange_video", out_shape, data, vec![self.clone()], move |_, _, go| {
            let mut g = vec![0.0f32; go.len()];
            match mode {
                RearrangeMode::Spatial => scatter_spatial(go, &mut g, b, n, c, h, w, true),
                RearrangeMode::TemporalConv => scatter_temporal_conv(go, &mut g, b, n, c, h, w, true),
                RearrangeMode::TemporalAttn => scatter_temporal_attn(go, &mut g, b, n, c, h, w, true),
            }
            Ok(vec![Some(g)])
        })
    }

    /// Exact inverse of `rearrange_video` given the original five dims.
    pub fn rearrange_video_inverse(
        &self,
        mode: RearrangeMode,
        dims: (usize, usize, usize, usize, usize),
    ) -> Result<Tensor> {
        let (b, n, c, h, w) = dims;
        let expected = match mode {
            RearrangeMode::Spatial => vec![b * n, c, h, w],
            RearrangeMode::TemporalConv => vec![b * h * w, c, n],
            RearrangeMode::TemporalAttn => vec![b * h * w, n, c],
        };
        if self.shape() != expected.as_slice() {
            return Err(Error::shape(
                "rearrange_video_inverse",
                format!("expected {:?} for mode {:?}, got {:?}", expected, mode, self.shape()),
            ));
        }
        let mut data = vec![0.0f32; self.numel()];
        {
            let src = self.data();
            match mode {
                RearrangeMode::Spatial => scatter_spatial(&src, &mut data, b, n, c, h, w, true),
                RearrangeMode::TemporalConv => scatter_temporal_conv(&src, &mut data, b, n, c, h, w, true),
                RearrangeMode::TemporalAttn => scatter_temporal_attn(&src, &mut data, b, n, c, h, w, true),
            }
        }
        op_result(
            "rearrange_video_inverse",
            vec![b, n, c, h, w],
            data,
            vec![self.clone()],
            move |_, _, go| {
                let mut g = vec![0.0f32; go.len()];
                match mode {
                    RearrangeMode::Spatial => scatter_spatial(go, &mut g, b, n, c, h, w, false),
                    RearrangeMode::TemporalConv => scatter_temporal_conv(go, &mut g, b, n, c, h, w, false),
                    RearrangeMode::TemporalAttn => scatter_temporal_attn(go, &mut g, b, n, c, h, w, false),
                }
                Ok(vec![Some(g)])
            },
        )
    }
}
