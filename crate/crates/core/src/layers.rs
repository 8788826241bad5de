//! Small layer structs shared by the codec, the content encoder and the UNet.
//! Each layer owns its parameters and registers them under a stable name so
//! checkpoints stay readable.

use crate::error::Result;
use crate::tensor::{Rng, Tensor};

pub type NamedParams = Vec<(String, Tensor)>;

pub fn push_params(out: &mut NamedParams, prefix: &str, pairs: &[(&str, &Tensor)]) {
    for (name, t) in pairs {
        out.push((format!("{prefix}.{name}"), (*t).clone()));
    }
}

#[derive(Clone)]
pub struct Conv2dLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new(rng: &mut Rng, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Conv2dLayer {
        let fan_in = cin * k * k;
        Conv2dLayer {
            w: rng.kaiming_param(&[cout, cin, k, k], fan_in),
            b: Tensor::param(&[cout], vec![0.0; cout]).unwrap(),
            stride,
            padding,
        }
    }

    /// All-zero weights; used for output projections that must start silent.
    pub fn zeroed(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Conv2dLayer {
        Conv2dLayer {
            w: Tensor::param(&[cout, cin, k, k], vec![0.0; cout * cin * k * k]).unwrap(),
            b: Tensor::param(&[cout], vec![0.0; cout]).unwrap(),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.w, Some(&self.b), self.stride, self.padding)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        push_params(out, prefix, &[("w", &self.w), ("b", &self.b)]);
    }
}

#[derive(Clone)]
pub struct ConvT2dLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvT2dLayer {
    pub fn new(rng: &mut Rng, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> ConvT2dLayer {
        let fan_in = cin * k * k;
        ConvT2dLayer {
            w: rng.kaiming_param(&[cin, cout, k, k], fan_in),
            b: Tensor::param(&[cout], vec![0.0; cout]).unwrap(),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv_transpose2d(&self.w, Some(&self.b), self.stride, self.padding)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        push_params(out, prefix, &[("w", &self.w), ("b", &self.b)]);
    }
}

#[derive(Clone)]
pub struct Conv1dLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub padding: usize,
}

impl Conv1dLayer {
    /// Identity-initialized temporal convolution: center tap of each
    /// channel's own kernel is 1, everything else 0, so the layer is an
    /// exact no-op over time until training moves it.
    pub fn identity(channels: usize, k: usize) -> Conv1dLayer {
        let mut w = vec![0.0f32; channels * channels * k];
        for c in 0..channels {
            w[(c * channels + c) * k + k / 2] = 1.0;
        }
        Conv1dLayer {
            w: Tensor::param(&[channels, channels, k], w).unwrap(),
            b: Tensor::param(&[channels], vec![0.0; channels]).unwrap(),
            padding: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv1d(&self.w, Some(&self.b), self.padding)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        push_params(out, prefix, &[("w", &self.w), ("b", &self.b)]);
    }
}

#[derive(Clone)]
pub struct GroupNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
}

impl GroupNormLayer {
    pub fn new(channels: usize, groups: usize) -> GroupNormLayer {
        GroupNormLayer {
            gamma: Tensor::param(&[channels], vec![1.0; channels]).unwrap(),
            beta: Tensor::param(&[channels], vec![0.0; channels]).unwrap(),
            groups: groups.min(channels),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.group_norm(&self.gamma, &self.beta, self.groups, 1e-5)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        push_params(out, prefix, &[("gamma", &self.gamma), ("beta", &self.beta)]);
    }
}

#[derive(Clone)]
pub struct LayerNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormLayer {
    pub fn new(dim: usize) -> LayerNormLayer {
        LayerNormLayer {
            gamma: Tensor::param(&[dim], vec![1.0; dim]).unwrap(),
            beta: Tensor::param(&[dim], vec![0.0; dim]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, 1e-5)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        push_params(out, prefix, &[("gamma", &self.gamma), ("beta", &self.beta)]);
    }
}

#[derive(Clone)]
pub struct LinearLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearLayer {
    pub fn new(rng: &mut Rng, cin: usize, cout: usize) -> LinearLayer {
        LinearLayer {
            w: rng.kaiming_param(&[cout, cin], cin),
            b: Tensor::param(&[cout], vec![0.0; cout]).unwrap(),
        }
    }

    pub fn zeroed(cin: usize, cout: usize) -> LinearLayer {
        LinearLayer {
            w: Tensor::param(&[cout, cin], vec![0.0; cout * cin]).unwrap(),
            b: Tensor::param(&[cout], vec![0.0; cout]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.w, Some(&self.b))
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        push_params(out, prefix, &[("w", &self.w), ("b", &self.b)]);
    }
}

/// FNV-1a over the raw parameter bytes, in registration order. Used to assert
/// that frozen modules stay frozen.
pub fn params_checksum(params: &NamedParams) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut feed = |b: u8| {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    };
    for (name, t) in params {
        for b in name.as_bytes() {
            feed(*b);
        }
        for v in t.data().iter() {
            for b in v.to_le_bytes() {
                feed(b);
            }
        }
    }
    hash
}
