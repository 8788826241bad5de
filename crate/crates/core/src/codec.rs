//! Fixed convolutional autoencoder mapping pixel frames to the latent space
//! where diffusion runs. Applied frame-wise; frozen after its own training.

use serde::{Deserialize, Serialize};

use crate::datagen::ClipRecord;
use crate::error::{Error, Result};
use crate::layers::{params_checksum, Conv2dLayer, ConvT2dLayer, GroupNormLayer, NamedParams};
use crate::tensor::{backward, Adam, Checkpoint, RearrangeMode, Rng, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Spatial downsampling factor; 4 or 8.
    pub factor: usize,
    pub latent_channels: usize,
    pub base: usize,
    pub groups: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { factor: 4, latent_channels: 4, base: 32, groups: 8 }
    }
}

pub struct Codec {
    pub cfg: CodecConfig,
    enc_in: Conv2dLayer,
    enc_downs: Vec<(GroupNormLayer, Conv2dLayer)>,
    enc_norm: GroupNormLayer,
    enc_out: Conv2dLayer,
    dec_in: Conv2dLayer,
    dec_ups: Vec<(GroupNormLayer, ConvT2dLayer)>,
    dec_norm: GroupNormLayer,
    dec_out: Conv2dLayer,
    /// Held-out reconstruction MSE threshold recorded by train_codec.
    pub recon_threshold: Option<f32>,
}

impl Codec {
    pub fn new(cfg: &CodecConfig, rng: &Rng) -> Result<Codec> {
        if !cfg.factor.is_power_of_two() || cfg.factor < 2 {
            return Err(Error::Config(format!("codec factor must be a power of two >= 2, got {}", cfg.factor)));
        }
        let mut rng = rng.substream("codec.init");
        let levels = cfg.factor.trailing_zeros() as usize;
        let base = cfg.base;

        let enc_in = Conv2dLayer::new(&mut rng, 3, base, 3, 1, 1);
        let mut enc_downs = Vec::with_capacity(levels);
        let mut ch = base;
        for l in 0..levels {
            let next = if l + 1 == levels { base * 2 } else { base };
            enc_downs.push((
                GroupNormLayer::new(ch, cfg.groups),
                Conv2dLayer::new(&mut rng, ch, next, 3, 2, 1),
            ));
            ch = next;
        }
        let enc_norm = GroupNormLayer::new(ch, cfg.groups);
        let enc_out = Conv2dLayer::new(&mut rng, ch, cfg.latent_channels, 3, 1, 1);

        let dec_in = Conv2dLayer::new(&mut rng, cfg.latent_channels, ch, 3, 1, 1);
        let mut dec_ups = Vec::with_capacity(levels);
        for l in 0..levels {
            let next = if l + 1 == levels { base } else { base };
            let cur = if l == 0 { ch } else { base };
            dec_ups.push((
                GroupNormLayer::new(cur, cfg.groups),
                ConvT2dLayer::new(&mut rng, cur, next, 4, 2, 1),
            ));
        }
        let dec_norm = GroupNormLayer::new(base, cfg.groups);
        let dec_out = Conv2dLayer::new(&mut rng, base, 3, 3, 1, 1);

        Ok(Codec {
            cfg: cfg.clone(),
            enc_in,
            enc_downs,
            enc_norm,
            enc_out,
            dec_in,
            dec_ups,
            dec_norm,
            dec_out,
            recon_threshold: None,
        })
    }

    /// Encodes flat frames [N,3,H,W] -> [N,c_z,H/f,W/f].
    pub fn encode_frames(&self, frames: &Tensor) -> Result<Tensor> {
        if frames.rank() != 4 || frames.shape()[1] != 3 {
            return Err(Error::shape(
                "encode",
                format!("expected [N,3,H,W], got {:?}", frames.shape()),
            ));
        }
        let (h, w) = (frames.shape()[2], frames.shape()[3]);
        if h % self.cfg.factor != 0 || w % self.cfg.factor != 0 {
            return Err(Error::Config(format!(
                "frame dims {h}x{w} not divisible by codec factor {}",
                self.cfg.factor
            )));
        }
        let mut x = self.enc_in.forward(frames)?;
        for (norm, down) in &self.enc_downs {
            x = down.forward(&norm.forward(&x)?.silu()?)?;
        }
        self.enc_out.forward(&self.enc_norm.forward(&x)?.silu()?)
    }

    /// Decodes flat latents [N,c_z,h,w] -> [N,3,H,W] in [-1,1] (tanh output).
    pub fn decode_frames(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 4 || z.shape()[1] != self.cfg.latent_channels {
            return Err(Error::shape(
                "decode",
                format!(
                    "expected [N,{},h,w], got {:?}",
                    self.cfg.latent_channels,
                    z.shape()
                ),
            ));
        }
        let mut x = self.dec_in.forward(z)?;
        for (norm, up) in &self.dec_ups {
            x = up.forward(&norm.forward(&x)?.silu()?)?;
        }
        self.dec_out.forward(&self.dec_norm.forward(&x)?.silu()?)?.tanh()
    }

    /// Encodes a video batch [b,n,3,H,W] frame-wise -> [b,n,c_z,H/f,W/f].
    pub fn encode(&self, video: &Tensor) -> Result<Tensor> {
        if video.rank() != 5 {
            return Err(Error::shape("encode", format!("expected [b,n,3,H,W], got {:?}", video.shape())));
        }
        let (b, n, _, h, w) = (
            video.shape()[0],
            video.shape()[1],
            video.shape()[2],
            video.shape()[3],
            video.shape()[4],
        );
        let flat = video.rearrange_video(RearrangeMode::Spatial)?;
        let z = self.encode_frames(&flat)?;
        z.rearrange_video_inverse(
            RearrangeMode::Spatial,
            (b, n, self.cfg.latent_channels, h / self.cfg.factor, w / self.cfg.factor),
        )
    }

    /// Decodes a latent video [b,n,c_z,h,w] frame-wise -> [b,n,3,H,W].
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 5 {
            return Err(Error::shape("decode", format!("expected [b,n,c,h,w], got {:?}", z.shape())));
        }
        let (b, n, h, w) = (z.shape()[0], z.shape()[1], z.shape()[3], z.shape()[4]);
        let flat = z.rearrange_video(RearrangeMode::Spatial)?;
        let frames = self.decode_frames(&flat)?;
        frames.rearrange_video_inverse(
            RearrangeMode::Spatial,
            (b, n, 3, h * self.cfg.factor, w * self.cfg.factor),
        )
    }

    pub fn params(&self) -> NamedParams {
        let mut out = Vec::new();
        self.enc_in.params("enc_in", &mut out);
        for (i, (norm, down)) in self.enc_downs.iter().enumerate() {
            norm.params(&format!("enc_down{i}.norm"), &mut out);
            down.params(&format!("enc_down{i}.conv"), &mut out);
        }
        self.enc_norm.params("enc_norm", &mut out);
        self.enc_out.params("enc_out", &mut out);
        self.dec_in.params("dec_in", &mut out);
        for (i, (norm, up)) in self.dec_ups.iter().enumerate() {
            norm.params(&format!("dec_up{i}.norm"), &mut out);
            up.params(&format!("dec_up{i}.conv"), &mut out);
        }
        self.dec_norm.params("dec_norm", &mut out);
        self.dec_out.params("dec_out", &mut out);
        out
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(&self.params())
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        for (name, t) in self.params() {
            ck.insert(format!("codec.{name}"), &t);
        }
        if let Some(thr) = self.recon_threshold {
            ck.insert_raw("codec.meta.recon_threshold", vec![1], vec![thr]);
        }
    }

    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, t) in self.params() {
            ck.load_into(&format!("codec.{name}"), &t)?;
        }
        if let Ok((_, v)) = ck.get("codec.meta.recon_threshold") {
            self.recon_threshold = Some(v[0]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CodecTrainReport {
    pub initial_train_loss: f32,
    pub final_train_loss: f32,
    pub initial_val_mse: f32,
    pub final_val_mse: f32,
}

/// Trains the codec with plain MSE reconstruction on random frames from the
/// corpus. Every eighth clip is held out for validation; the recorded
/// reconstruction threshold is 1.25x the final held-out MSE.
pub fn train_codec(
    codec: &mut Codec,
    corpus: &[ClipRecord],
    steps: usize,
    batch_size: usize,
    lr: f32,
    rng: &Rng,
) -> Result<CodecTrainReport> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot train codec on an empty corpus".into()));
    }
    let train_clips: Vec<&ClipRecord> = corpus
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 8 != 0 || corpus.len() < 8)
        .map(|(_, c)| c)
        .collect();
    let val_clips: Vec<&ClipRecord> = if corpus.len() < 8 {
        corpus.iter().collect()
    } else {
        corpus.iter().step_by(8).collect()
    };

    let mut data_rng = rng.substream("codec.data");
    let sample_batch = |clips: &[&ClipRecord], rng: &mut Rng, b: usize| -> Result<Tensor> {
        let shape = clips[0].frames.shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let mut out = Vec::with_capacity(b * 3 * h * w);
        for _ in 0..b {
            let clip = clips[rng.below(clips.len())];
            let n = clip.frames.shape()[0];
            let f = rng.below(n);
            let fd = clip.frames.data();
            out.extend_from_slice(&fd[f * 3 * h * w..(f + 1) * 3 * h * w]);
        }
        Tensor::new(&[b, 3, h, w], out)
    };

    let val_mse = |codec: &Codec, rng: &mut Rng| -> Result<f32> {
        crate::tensor::no_grad(|| -> Result<f32> {
            let batch = sample_batch(&val_clips, rng, batch_size.max(8))?;
            let recon = codec.decode_frames(&codec.encode_frames(&batch)?)?;
            let diff = recon.sub(&batch)?;
            diff.mul(&diff)?.mean_all()?.item()
        })
    };

    let params: Vec<Tensor> = codec.params().into_iter().map(|(_, t)| t).collect();
    let mut opt = Adam::new(&params, lr);

    let mut val_rng = rng.substream("codec.val");
    let initial_val = val_mse(codec, &mut val_rng)?;
    let mut initial_train = 0.0f32;
    let mut final_train = 0.0f32;

    for step in 0..steps {
        let batch = sample_batch(&train_clips, &mut data_rng, batch_size)?;
        let recon = codec.decode_frames(&codec.encode_frames(&batch)?)?;
        let diff = recon.sub(&batch)?;
        let loss = diff.mul(&diff)?.mean_all()?;
        let lv = loss.item()?;
        if step == 0 {
            initial_train = lv;
        }
        final_train = lv;
        opt.zero_grad(&params);
        backward(&loss)?;
        opt.step(&params)?;
    }

    let mut val_rng = rng.substream("codec.val");
    let final_val = if steps > 0 { val_mse(codec, &mut val_rng)? } else { initial_val };
    if steps > 0 {
        codec.recon_threshold = Some(final_val * 1.25);
    }
    Ok(CodecTrainReport {
        initial_train_loss: initial_train,
        final_train_loss: final_train,
        initial_val_mse: initial_val,
        final_val_mse: final_val,
    })
}
