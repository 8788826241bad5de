//! Conditioning signals: the trainable content embedder (CLIP stand-in),
//! style prototypes, the blur-corruption chain for depth, the structure
//! signal fed to the UNet, and external depth ingestion.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::datagen::ClipRecord;
use crate::error::{Error, Result};
use crate::layers::{params_checksum, Conv2dLayer, GroupNormLayer, LinearLayer, NamedParams};
use crate::tensor::{backward, no_grad, Adam, Checkpoint, Rng, Tensor};

/// Where a content embedding came from. `Null` stands for the learned
/// unconditional token (owned by the UNet); its vector here is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContentSource {
    Frame,
    StylePrototype,
    Null,
}

/// Unit-norm content vector c, or the null marker.
#[derive(Debug, Clone)]
pub struct ContentEmbedding {
    pub values: Vec<f32>,
    pub source: ContentSource,
}

impl ContentEmbedding {
    pub fn null() -> ContentEmbedding {
        ContentEmbedding { values: Vec::new(), source: ContentSource::Null }
    }

    pub fn is_null(&self) -> bool {
        self.source == ContentSource::Null
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Depth frames [n,1,H,W], values in [0,1], larger = nearer.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub values: Tensor,
}

impl DepthMap {
    pub fn new(values: Tensor) -> Result<DepthMap> {
        if values.rank() != 4 || values.shape()[1] != 1 {
            return Err(Error::shape(
                "DepthMap",
                format!("expected [n,1,H,W], got {:?}", values.shape()),
            ));
        }
        for &v in values.data().iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("depth value {v} outside [0,1]")));
            }
        }
        Ok(DepthMap { values })
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.values.shape()[2], self.values.shape()[3])
    }
}

/// Blur-corrupted, latent-encoded depth plus the corruption level embedding.
#[derive(Debug, Clone)]
pub struct StructureSignal {
    /// [b, n, c_z, h, w]
    pub s_latent: Tensor,
    pub t_s: usize,
    /// [b, n, 4, h, w]; constant over space and frames for fixed t_s.
    pub ts_channels: Tensor,
}

impl StructureSignal {
    /// All-zero signal used before the structure-conditioning training stage.
    pub fn zeros(b: usize, n: usize, c_z: usize, h: usize, w: usize) -> StructureSignal {
        StructureSignal {
            s_latent: Tensor::zeros(&[b, n, c_z, h, w]),
            t_s: 0,
            ts_channels: Tensor::zeros(&[b, n, 4, h, w]),
        }
    }

    /// Stacks single-clip signals (b=1 each) into one batch.
    pub fn stack(signals: &[StructureSignal]) -> Result<StructureSignal> {
        let lat: Vec<Tensor> = signals.iter().map(|s| s.s_latent.clone()).collect();
        let ts: Vec<Tensor> = signals.iter().map(|s| s.ts_channels.clone()).collect();
        Ok(StructureSignal {
            s_latent: Tensor::concat(&lat, 0)?,
            t_s: signals.first().map(|s| s.t_s).unwrap_or(0),
            ts_channels: Tensor::concat(&ts, 0)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentConfig {
    /// Embedding dimension d.
    pub dim: usize,
    pub base: usize,
    pub groups: usize,
    pub temperature: f32,
}

impl Default for ContentConfig {
    fn default() -> Self {
        ContentConfig { dim: 64, base: 16, groups: 4, temperature: 0.07 }
    }
}

/// Small CNN mapping a frame to a unit-norm embedding.
pub struct ContentEncoder {
    pub cfg: ContentConfig,
    convs: Vec<(Conv2dLayer, GroupNormLayer)>,
    head: LinearLayer,
    trained: Cell<bool>,
}

impl ContentEncoder {
    pub fn new(cfg: &ContentConfig, rng: &Rng) -> ContentEncoder {
        let mut rng = rng.substream("content.init");
        let b = cfg.base;
        let convs = vec![
            (Conv2dLayer::new(&mut rng, 3, b, 3, 2, 1), GroupNormLayer::new(b, cfg.groups)),
            (Conv2dLayer::new(&mut rng, b, 2 * b, 3, 2, 1), GroupNormLayer::new(2 * b, cfg.groups)),
            (Conv2dLayer::new(&mut rng, 2 * b, 2 * b, 3, 2, 1), GroupNormLayer::new(2 * b, cfg.groups)),
        ];
        let head = LinearLayer::new(&mut rng, 2 * b, cfg.dim);
        ContentEncoder { cfg: cfg.clone(), convs, head, trained: Cell::new(false) }
    }

    pub fn is_trained(&self) -> bool {
        self.trained.get()
    }

    pub fn set_trained(&self, trained: bool) {
        self.trained.set(trained);
    }

    /// Raw forward: frames [B,3,H,W] -> unit-norm rows [B,d].
    pub fn embed(&self, frames: &Tensor) -> Result<Tensor> {
        if frames.rank() != 4 || frames.shape()[1] != 3 {
            return Err(Error::shape(
                "embed",
                format!("expected [B,3,H,W], got {:?}", frames.shape()),
            ));
        }
        let mut x = frames.clone();
        for (conv, norm) in &self.convs {
            x = norm.forward(&conv.forward(&x)?)?.silu()?;
        }
        self.head.forward(&x.mean_hw()?)?.l2_normalize_rows()
    }

    /// Contract surface: embeds one frame [3,H,W]. Requires training.
    pub fn embed_content(&self, frame: &Tensor) -> Result<ContentEmbedding> {
        if !self.trained.get() {
            return Err(Error::Contract(
                "content encoder is untrained; run train-content first".into(),
            ));
        }
        if frame.rank() != 3 || frame.shape()[0] != 3 {
            return Err(Error::shape(
                "embed_content",
                format!("expected [3,H,W], got {:?}", frame.shape()),
            ));
        }
        let (h, w) = (frame.shape()[1], frame.shape()[2]);
        let batch = frame.reshape(&[1, 3, h, w])?;
        let emb = no_grad(|| self.embed(&batch))?;
        Ok(ContentEmbedding { values: emb.to_vec(), source: ContentSource::Frame })
    }

    pub fn params(&self) -> NamedParams {
        let mut out = Vec::new();
        for (i, (conv, norm)) in self.convs.iter().enumerate() {
            conv.params(&format!("conv{i}"), &mut out);
            norm.params(&format!("norm{i}"), &mut out);
        }
        self.head.params("head", &mut out);
        out
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(&self.params())
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        for (name, t) in self.params() {
            ck.insert(format!("content.{name}"), &t);
        }
        ck.insert_raw(
            "content.meta.trained",
            vec![1],
            vec![if self.trained.get() { 1.0 } else { 0.0 }],
        );
    }

    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, t) in self.params() {
            ck.load_into(&format!("content.{name}"), &t)?;
        }
        if let Ok((_, v)) = ck.get("content.meta.trained") {
            self.trained.set(v[0] > 0.5);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContentTrainReport {
    pub initial_loss: f32,
    pub final_loss: f32,
    pub retrieval_accuracy: f32,
}

/// Supervised contrastive training: frames of the same style are positives.
/// Fails fast on a single-style corpus (the loss is undefined there).
pub fn train_content_encoder(
    enc: &mut ContentEncoder,
    corpus: &[ClipRecord],
    steps: usize,
    batch_size: usize,
    lr: f32,
    rng: &Rng,
) -> Result<ContentTrainReport> {
    let styles: std::collections::BTreeSet<usize> = corpus.iter().map(|c| c.style_id).collect();
    if styles.len() < 2 {
        return Err(Error::Contract(
            "contrastive training needs at least two styles in the corpus".into(),
        ));
    }
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let b = batch_size.max(4);
    let tau = enc.cfg.temperature;
    let params: Vec<Tensor> = enc.params().into_iter().map(|(_, t)| t).collect();
    let mut opt = Adam::new(&params, lr);
    let mut data_rng = rng.substream("content.data");

    let shape = corpus[0].frames.shape().to_vec();
    let (h, w) = (shape[2], shape[3]);

    let mut initial_loss = 0.0f32;
    let mut final_loss = 0.0f32;
    for step in 0..steps {
        // sample frames in style pairs so every anchor has a positive
        let mut frames = Vec::with_capacity(b * 3 * h * w);
        let mut labels = Vec::with_capacity(b);
        while labels.len() < b {
            let clip = &corpus[data_rng.below(corpus.len())];
            let fd = clip.frames.data();
            let n = clip.frames.shape()[0];
            // last frame of each clip is held out for retrieval eval
            let train_n = if n > 1 { n - 1 } else { n };
            for _ in 0..2 {
                if labels.len() == b {
                    break;
                }
                let f = data_rng.below(train_n);
                frames.extend_from_slice(&fd[f * 3 * h * w..(f + 1) * 3 * h * w]);
                labels.push(clip.style_id);
            }
        }
        let batch = Tensor::new(&[b, 3, h, w], frames)?;
        let emb = enc.embed(&batch)?;
        let sim = emb.matmul(&emb.transpose_last2_2d()?)?.mul_scalar(1.0 / tau)?;

        // mask the diagonal out of the denominator
        let mut diag = vec![0.0f32; b * b];
        for i in 0..b {
            diag[i * b + i] = -1e9;
        }
        let masked = sim.add(&Tensor::new(&[b, b], diag)?)?;

        // positives mask, rows scaled by 1/|P(i)|
        let mut pos = vec![0.0f32; b * b];
        let mut has_pos = vec![0.0f32; b];
        for i in 0..b {
            let count = (0..b).filter(|&j| j != i && labels[j] == labels[i]).count();
            if count == 0 {
                continue;
            }
            has_pos[i] = 1.0;
            for j in 0..b {
                if j != i && labels[j] == labels[i] {
                    pos[i * b + j] = 1.0 / count as f32;
                }
            }
        }
        let anchors: f32 = has_pos.iter().sum();
        if anchors == 0.0 {
            continue;
        }
        let log_denom = masked.exp()?.sum_last()?.log()?;
        let pos_sim = masked.mul(&Tensor::new(&[b, b], pos)?)?.sum_last()?;
        let per_anchor = log_denom.sub(&pos_sim)?;
        let weights = Tensor::new(&[b], has_pos)?;
        let loss = per_anchor.mul(&weights)?.sum_all()?.mul_scalar(1.0 / anchors)?;

        let lv = loss.item()?;
        if step == 0 {
            initial_loss = lv;
        }
        final_loss = lv;
        opt.zero_grad(&params);
        backward(&loss)?;
        opt.step(&params)?;
    }
    if steps > 0 {
        enc.set_trained(true);
    }

    // style retrieval accuracy on each clip's held-out last frame, against
    // prototypes built from training frames only
    let min_len = corpus.iter().map(|c| c.frames.shape()[0]).min().unwrap_or(1);
    let per_style = if min_len > 1 { min_len - 1 } else { 1 };
    let protos = build_prototypes(enc, corpus, per_style)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut eval_rng = rng.substream("content.eval");
    no_grad(|| -> Result<()> {
        for _ in 0..64 {
            let clip = &corpus[eval_rng.below(corpus.len())];
            let n = clip.frames.shape()[0];
            let f = n - 1;
            let fd = clip.frames.data();
            let frame = Tensor::new(&[1, 3, h, w], fd[f * 3 * h * w..(f + 1) * 3 * h * w].to_vec())?;
            let e = enc.embed(&frame)?.to_vec();
            let mut best = (f32::NEG_INFINITY, String::new());
            for (name, proto) in &protos.map {
                let cos: f32 = e.iter().zip(proto.iter()).map(|(a, b)| a * b).sum();
                if cos > best.0 {
                    best = (cos, name.clone());
                }
            }
            if best.1 == clip.style_name {
                correct += 1;
            }
            total += 1;
        }
        Ok(())
    })?;
    Ok(ContentTrainReport {
        initial_loss,
        final_loss,
        retrieval_accuracy: correct as f32 / total.max(1) as f32,
    })
}

impl Tensor {
    /// 2-D transpose helper for the similarity matrix.
    fn transpose_last2_2d(&self) -> Result<Tensor> {
        let (r, c) = (self.shape()[0], self.shape()[1]);
        self.reshape(&[1, r, c])?.transpose_last2()?.reshape(&[c, r])
    }
}

/// Named style prototypes: renormalized mean embeddings of training frames.
#[derive(Debug, Clone, Default)]
pub struct StylePrototypes {
    pub map: BTreeMap<String, Vec<f32>>,
}

impl StylePrototypes {
    /// Prototype lookup by style name; unknown names list the known styles.
    pub fn get(&self, name: &str) -> Result<ContentEmbedding> {
        match self.map.get(name) {
            Some(v) => Ok(ContentEmbedding {
                values: v.clone(),
                source: ContentSource::StylePrototype,
            }),
            None => {
                let known: Vec<&str> = self.map.keys().map(|s| s.as_str()).collect();
                Err(Error::Data(format!(
                    "unknown style '{name}'; known styles: {}",
                    known.join(", ")
                )))
            }
        }
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        for (name, v) in &self.map {
            ck.insert_raw(format!("content.proto.{name}"), vec![v.len()], v.clone());
        }
    }

    pub fn load_from(ck: &Checkpoint) -> StylePrototypes {
        let mut map = BTreeMap::new();
        for name in ck.names_with_prefix("content.proto.") {
            let key = name.trim_start_matches("content.proto.").to_string();
            if let Ok((_, v)) = ck.get(name) {
                map.insert(key, v.clone());
            }
        }
        StylePrototypes { map }
    }
}

/// Mean embedding per style over up to `per_style` frames, renormalized.
pub fn build_prototypes(
    enc: &ContentEncoder,
    corpus: &[ClipRecord],
    per_style: usize,
) -> Result<StylePrototypes> {
    let mut sums: BTreeMap<String, (Vec<f32>, usize)> = BTreeMap::new();
    no_grad(|| -> Result<()> {
        for clip in corpus {
            let entry = sums
                .entry(clip.style_name.clone())
                .or_insert_with(|| (vec![0.0; enc.cfg.dim], 0));
            if entry.1 >= per_style {
                continue;
            }
            let (n, h, w) = (clip.frames.shape()[0], clip.frames.shape()[2], clip.frames.shape()[3]);
            let fd = clip.frames.data();
            let take = (per_style - entry.1).min(n);
            for f in 0..take {
                let frame = Tensor::new(&[1, 3, h, w], fd[f * 3 * h * w..(f + 1) * 3 * h * w].to_vec())?;
                let e = enc.embed(&frame)?.to_vec();
                for (s, v) in entry.0.iter_mut().zip(e.iter()) {
                    *s += v;
                }
                entry.1 += 1;
            }
        }
        Ok(())
    })?;
    let mut map = BTreeMap::new();
    for (name, (sum, count)) in sums {
        if count == 0 {
            continue;
        }
        let norm = sum.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        map.insert(name, sum.iter().map(|v| v / norm).collect());
    }
    Ok(StylePrototypes { map })
}

/// Information-destroying corruption: `t_s` iterations of Gaussian blur
/// (5x5, sigma 1) followed by 2x average-pool downsampling, then bilinear
/// resampling back to the original resolution. t_s = 0 is the identity.
pub fn blur_chain(depth: &DepthMap, t_s: usize, max_level: usize) -> Result<DepthMap> {
    if t_s > max_level {
        return Err(Error::Contract(format!("t_s {t_s} outside [0, {max_level}]")));
    }
    if t_s == 0 {
        return Ok(depth.clone());
    }
    let (h, w) = depth.dims();
    let out = no_grad(|| -> Result<Tensor> {
        let mut x = depth.values.clone();
        for _ in 0..t_s {
            x = x.gaussian_blur2d(5, 1.0)?.avgpool2d(2)?;
        }
        Ok(bilinear_resize(&x, h, w))
    })?;
    DepthMap::new(out.clamp(0.0, 1.0)?.detach())
}

/// Bilinear resize of [B,C,h,w] to (out_h, out_w). Plain data op, no tape.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let src = x.data();
    let mut out = vec![0.0f32; b * c * out_h * out_w];
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for bc in 0..b * c {
        let plane = &src[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * out_h * out_w..(bc + 1) * out_h * out_w];
        for oy in 0..out_h {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, h as f32 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, w as f32 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f32;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                dst[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::new(&[b, c, out_h, out_w], out).expect("shape/data agree")
}

/// Sinusoidal embedding channels of t_s at frequencies {1, 1/4}:
/// (sin t_s, cos t_s, sin t_s/4, cos t_s/4), constant over space and frames.
pub fn ts_embedding_channels(t_s: usize, b: usize, n: usize, h: usize, w: usize) -> Tensor {
    let t = t_s as f32;
    let vals = [t.sin(), t.cos(), (t / 4.0).sin(), (t / 4.0).cos()];
    let mut data = vec![0.0f32; b * n * 4 * h * w];
    for bi in 0..b {
        for ni in 0..n {
            for (c, &v) in vals.iter().enumerate() {
                let base = (((bi * n + ni) * 4) + c) * h * w;
                data[base..base + h * w].fill(v);
            }
        }
    }
    Tensor::new(&[b, n, 4, h, w], data).expect("shape/data agree")
}

/// Builds the structure signal for one clip: blur-corrupt the depth,
/// replicate to 3 channels, map [0,1] -> [-1,1], encode with the frozen
/// codec, and attach the t_s embedding channels at latent resolution.
pub fn make_structure_signal(
    depth: &DepthMap,
    t_s: usize,
    max_level: usize,
    codec: &Codec,
) -> Result<StructureSignal> {
    let corrupted = blur_chain(depth, t_s, max_level)?;
    let (h, w) = corrupted.dims();
    if h % codec.cfg.factor != 0 || w % codec.cfg.factor != 0 {
        return Err(Error::Config(format!(
            "depth dims {h}x{w} not divisible by codec factor {}",
            codec.cfg.factor
        )));
    }
    let n = corrupted.n_frames();
    let s_latent = no_grad(|| -> Result<Tensor> {
        // replicate the single depth channel to RGB and rescale to [-1,1]
        let d = corrupted.values.data();
        let mut rgb = vec![0.0f32; n * 3 * h * w];
        for f in 0..n {
            for c in 0..3 {
                for i in 0..h * w {
                    rgb[(f * 3 + c) * h * w + i] = d[f * h * w + i] * 2.0 - 1.0;
                }
            }
        }
        drop(d);
        let frames = Tensor::new(&[1, n, 3, h, w], rgb)?;
        codec.encode(&frames)
    })?;
    let (lh, lw) = (h / codec.cfg.factor, w / codec.cfg.factor);
    Ok(StructureSignal {
        s_latent: s_latent.detach(),
        t_s,
        ts_channels: ts_embedding_channels(t_s, 1, n, lh, lw),
    })
}

/// Reads a directory of 16-bit grayscale depth PNGs (depth_%05d.png,
/// lexicographic order) and min-max normalizes per clip. A degenerate
/// (constant) clip maps to all 0.5.
pub fn ingest_depth(dir: impl AsRef<Path>) -> Result<DepthMap> {
    let (planes, h, w) = crate::datagen::load_depth_raw(dir.as_ref())?;
    let n = planes.len();
    let mut lo = u16::MAX;
    let mut hi = u16::MIN;
    for plane in &planes {
        for &v in plane {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let mut data = Vec::with_capacity(n * h * w);
    if hi == lo {
        data.resize(n * h * w, 0.5);
    } else {
        let range = (hi - lo) as f32;
        for plane in &planes {
            data.extend(plane.iter().map(|&v| (v - lo) as f32 / range));
        }
    }
    DepthMap::new(Tensor::new(&[n, 1, h, w], data)?)
}

/// Total variation (sum of absolute forward differences), the contraction
/// measure for the blur chain.
pub fn total_variation(depth: &DepthMap) -> f32 {
    let (h, w) = depth.dims();
    let n = depth.n_frames();
    let d = depth.values.data();
    let mut tv = 0.0f32;
    for f in 0..n {
        let plane = &d[f * h * w..(f + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    tv += (plane[y * w + x + 1] - plane[y * w + x]).abs();
                }
                if y + 1 < h {
                    tv += (plane[(y + 1) * w + x] - plane[y * w + x]).abs();
                }
            }
        }
    }
    tv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::datagen::{generate_corpus, CorpusConfig};

    fn corpus(seed: u64, styles: usize) -> Vec<ClipRecord> {
        let cfg = CorpusConfig {
            clips: 8,
            frames_per_clip: 4,
            width: 16,
            height: 16,
            styles,
            min_shapes: 1,
            max_shapes: 1,
        };
        generate_corpus(&cfg, &Rng::new(seed)).unwrap().0
    }

    fn encoder() -> ContentEncoder {
        let cfg = ContentConfig { dim: 16, base: 8, groups: 4, temperature: 0.07 };
        ContentEncoder::new(&cfg, &Rng::new(0))
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let enc = encoder();
        enc.set_trained(true);
        let mut rng = Rng::new(1);
        let frame = rng.normal_tensor(&[3, 16, 16]);
        let a = enc.embed_content(&frame).unwrap();
        let b = enc.embed_content(&frame).unwrap();
        assert_eq!(a.values, b.values);
        let norm: f32 = a.values.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn untrained_encoder_is_rejected() {
        let enc = encoder();
        let frame = Tensor::zeros(&[3, 16, 16]);
        assert!(enc.embed_content(&frame).is_err());
    }

    #[test]
    fn single_style_corpus_is_contract_error() {
        let clips = corpus(2, 1);
        let mut enc = encoder();
        assert!(train_content_encoder(&mut enc, &clips, 10, 8, 1e-3, &Rng::new(3)).is_err());
    }

    #[test]
    fn zero_steps_leaves_params_unchanged() {
        let clips = corpus(3, 2);
        let mut enc = encoder();
        let before = enc.checksum();
        train_content_encoder(&mut enc, &clips, 0, 8, 1e-3, &Rng::new(4)).unwrap();
        assert_eq!(enc.checksum(), before);
    }

    #[test]
    fn two_separable_styles_retrieve_above_95_percent() {
        let clips = corpus(5, 2);
        let mut enc = encoder();
        let report = train_content_encoder(&mut enc, &clips, 120, 16, 2e-3, &Rng::new(6)).unwrap();
        assert!(
            report.retrieval_accuracy > 0.95,
            "accuracy {}",
            report.retrieval_accuracy
        );
        assert!(report.final_loss < report.initial_loss);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        let mut clips = corpus(7, 2);
        // reassign labels by parity of index, destroying the style signal
        // only in the labels (frames keep their true style)
        let mut rng = Rng::new(8);
        for clip in clips.iter_mut() {
            clip.style_id = rng.below(2);
            clip.style_name = format!("style{:02}", clip.style_id);
        }
        let mut enc = encoder();
        let report = train_content_encoder(&mut enc, &clips, 120, 16, 2e-3, &Rng::new(9)).unwrap();
        // two balanced classes: chance is 0.5; allow wide slack, must not
        // approach the separable-styles accuracy
        assert!(
            report.retrieval_accuracy < 0.85,
            "accuracy {} suspiciously high for shuffled labels",
            report.retrieval_accuracy
        );
    }

    #[test]
    fn prototypes_retrieve_and_unknown_style_errors() {
        let clips = corpus(10, 3);
        let mut enc = encoder();
        train_content_encoder(&mut enc, &clips, 120, 16, 2e-3, &Rng::new(11)).unwrap();
        let protos = build_prototypes(&enc, &clips, 8).unwrap();
        assert_eq!(protos.map.len(), 3);
        let a = protos.get("style00").unwrap();
        let norm: f32 = a.values.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        let b = protos.get("style01").unwrap();
        assert_ne!(a.values, b.values);
        let err = protos.get("nope").unwrap_err();
        assert!(err.to_string().contains("style00"), "{err}");
    }

    #[test]
    fn prototype_of_single_frame_style_is_that_embedding() {
        let clips = corpus(12, 2);
        let enc = encoder();
        enc.set_trained(true);
        // build a one-frame corpus for one style
        let c0 = &clips[0];
        let (h, w) = (c0.frames.shape()[2], c0.frames.shape()[3]);
        let fd = c0.frames.data();
        let single = ClipRecord {
            id: "one".into(),
            frames: Tensor::new(&[1, 3, h, w], fd[..3 * h * w].to_vec()).unwrap(),
            depth: None,
            style_id: c0.style_id,
            style_name: "solo".into(),
            spec: None,
        };
        drop(fd);
        let protos = build_prototypes(&enc, &[single.clone()], 8).unwrap();
        let frame = Tensor::new(&[3, h, w], single.frames.to_vec()).unwrap();
        let emb = enc.embed_content(&frame).unwrap();
        let proto = protos.get("solo").unwrap();
        for (a, b) in emb.values.iter().zip(proto.values.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_chain_identity_and_constant_invariance() {
        let mut rng = Rng::new(13);
        let vals: Vec<f32> = (0..4 * 16 * 16).map(|_| rng.uniform()).collect();
        let depth = DepthMap::new(Tensor::new(&[4, 1, 16, 16], vals).unwrap()).unwrap();
        let same = blur_chain(&depth, 0, 7).unwrap();
        assert_eq!(same.values.to_vec(), depth.values.to_vec());

        let constant = DepthMap::new(Tensor::full(&[2, 1, 16, 16], 0.42)).unwrap();
        for ts in 0..=7 {
            let blurred = blur_chain(&constant, ts, 7).unwrap();
            for &v in blurred.values.to_vec().iter() {
                assert!((v - 0.42).abs() < 1e-6, "t_s={ts}: {v}");
            }
        }
        assert!(blur_chain(&depth, 8, 7).is_err());
    }

    #[test]
    fn blur_chain_contracts_total_variation_on_step_edge() {
        // vertical step edge; large enough that every level stays nontrivial
        let (h, w) = (128, 128);
        let mut vals = vec![0.0f32; h * w];
        for y in 0..h {
            for x in w / 2..w {
                vals[y * w + x] = 1.0;
            }
        }
        let depth = DepthMap::new(Tensor::new(&[1, 1, h, w], vals).unwrap()).unwrap();
        let mut prev_tv = f32::INFINITY;
        for ts in 0..=7 {
            let blurred = blur_chain(&depth, ts, 7).unwrap();
            let tv = total_variation(&blurred);
            assert!(
                tv < prev_tv,
                "t_s={ts}: tv {tv} did not strictly decrease from {prev_tv}"
            );
            prev_tv = tv;
        }
    }

    #[test]
    fn ts_channels_at_zero_are_0101() {
        let ch = ts_embedding_channels(0, 1, 2, 3, 3);
        let d = ch.to_vec();
        for ni in 0..2 {
            for (c, expect) in [0.0f32, 1.0, 0.0, 1.0].iter().enumerate() {
                for i in 0..9 {
                    assert_eq!(d[(ni * 4 + c) * 9 + i], *expect);
                }
            }
        }
    }

    #[test]
    fn structure_signal_shapes_and_determinism() {
        let codec_cfg = CodecConfig { factor: 4, latent_channels: 4, base: 8, groups: 4 };
        let codec = Codec::new(&codec_cfg, &Rng::new(14)).unwrap();
        let clips = corpus(15, 2);
        let d = clips[0].depth.as_ref().unwrap().clone();
        let depth = DepthMap::new(d).unwrap();
        let a = make_structure_signal(&depth, 0, 7, &codec).unwrap();
        let b = make_structure_signal(&depth, 0, 7, &codec).unwrap();
        assert_eq!(a.s_latent.to_vec(), b.s_latent.to_vec());
        assert_eq!(a.s_latent.shape(), &[1, 4, 4, 4, 4]);
        assert_eq!(a.ts_channels.shape(), &[1, 4, 4, 4, 4]);

        let c7 = make_structure_signal(&depth, 7, 7, &codec).unwrap();
        let dist: f32 = a
            .s_latent
            .to_vec()
            .iter()
            .zip(c7.s_latent.to_vec().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(dist > 0.0, "t_s=7 must differ from t_s=0 on textured depth");
    }

    #[test]
    fn ingest_depth_normalizes_and_guards_degenerate() {
        let dir = tempfile::tempdir().unwrap();
        // two 4x4 frames with values {0, 65535}
        for f in 0..2 {
            let mut img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
                image::ImageBuffer::new(4, 4);
            for y in 0..4 {
                for x in 0..4 {
                    let v = if (x + y + f) % 2 == 0 { 0u16 } else { 65535 };
                    img.put_pixel(x, y, image::Luma([v]));
                }
            }
            img.save(dir.path().join(format!("depth_{f:05}.png"))).unwrap();
        }
        let depth = ingest_depth(dir.path()).unwrap();
        let d = depth.values.to_vec();
        assert!(d.iter().all(|&v| v == 0.0 || v == 1.0));

        // degenerate: all-equal values -> all 0.5
        let dir2 = tempfile::tempdir().unwrap();
        let mut img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> = image::ImageBuffer::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                img.put_pixel(x, y, image::Luma([12345u16]));
            }
        }
        img.save(dir2.path().join("depth_00000.png")).unwrap();
        let flat = ingest_depth(dir2.path()).unwrap();
        assert!(flat.values.to_vec().iter().all(|&v| v == 0.5));

        // missing depth entirely
        let dir3 = tempfile::tempdir().unwrap();
        assert!(ingest_depth(dir3.path()).is_err());
    }

    #[test]
    fn ingest_depth_round_trips_with_exporter() {
        let clips = corpus(16, 2);
        let dir = tempfile::tempdir().unwrap();
        let cd = dir.path().join("c");
        crate::datagen::export_clip(&clips[0], &cd).unwrap();
        // raw u16 values read back must equal what the exporter wrote
        let (planes, h, w) = crate::datagen::load_depth_raw(&cd).unwrap();
        let orig = clips[0].depth.as_ref().unwrap().data();
        for (f, plane) in planes.iter().enumerate() {
            for i in 0..h * w {
                let expect = (orig[f * h * w + i].clamp(0.0, 1.0) * 65535.0).round() as u16;
                assert_eq!(plane[i], expect);
            }
        }
    }
}
