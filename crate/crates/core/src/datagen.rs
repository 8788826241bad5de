//! Procedural moving-shapes video corpus with ground-truth depth and style
//! labels, clip export/import, and training batch assembly.
//!
//! Styles are palettes plus background textures, so content (appearance) and
//! structure (silhouettes and motion) are separable by construction. Depth is
//! rendered from z-order: nearer shapes get larger depth values, background
//! is exactly zero, which makes depth a valid silhouette oracle.

use std::path::Path;
use std::sync::Once;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Half extent in pixels.
    pub half: f32,
    /// Center position at frame 0.
    pub pos: (f32, f32),
    /// Velocity in pixels per frame.
    pub vel: (f32, f32),
    /// Z-order; larger is nearer. Distinct per scene.
    pub z: usize,
    /// Index into the style palette.
    pub color_idx: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<ShapeSpec>,
    pub style_id: usize,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgTexture {
    Plain,
    Checker,
    HStripes,
    VStripes,
    Dots,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Style {
    pub name: String,
    pub shape_colors: Vec<[u8; 3]>,
    pub bg_primary: [u8; 3],
    pub bg_secondary: [u8; 3],
    pub texture: BgTexture,
    /// Texture cell size in pixels.
    pub cell: usize,
}

/// One clip: frames in [-1,1], depth in [0,1] (background exactly 0).
#[derive(Debug, Clone)]
pub struct ClipRecord {
    pub id: String,
    pub frames: Tensor,        // [n, 3, H, W]
    pub depth: Option<Tensor>, // [n, 1, H, W]
    pub style_id: usize,
    pub style_name: String,
    pub spec: Option<SceneSpec>,
}

pub fn px_to_f32(u: u8) -> f32 {
    u as f32 / 127.5 - 1.0
}

pub fn f32_to_px(f: f32) -> u8 {
    ((f + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Deterministic style table. Golden-ratio hue stepping keeps palettes
/// distinct; shapes are bright and saturated, backgrounds dark, so style
/// (content) never hides the silhouettes (structure).
pub fn default_styles(count: usize) -> Vec<Style> {
    let textures = [
        BgTexture::Plain,
        BgTexture::Checker,
        BgTexture::HStripes,
        BgTexture::VStripes,
        BgTexture::Dots,
    ];
    (0..count)
        .map(|i| {
            let hue = (i as f32 * 0.618_034) % 1.0;
            let shape_colors = vec![
                hsv_to_rgb(hue, 0.9, 1.0),
                hsv_to_rgb((hue + 0.12) % 1.0, 0.8, 0.95),
                hsv_to_rgb((hue + 0.24) % 1.0, 0.95, 0.85),
            ];
            let bg_primary = hsv_to_rgb((hue + 0.5) % 1.0, 0.55, 0.22);
            let bg_secondary = hsv_to_rgb((hue + 0.58) % 1.0, 0.45, 0.12);
            Style {
                name: format!("style{i:02}"),
                shape_colors,
                bg_primary,
                bg_secondary,
                texture: textures[i % textures.len()],
                cell: 4 + (i % 3) * 2,
            }
        })
        .collect()
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let h6 = h * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

fn bg_color(style: &Style, x: usize, y: usize) -> [u8; 3] {
    let c = style.cell.max(1);
    match style.texture {
        BgTexture::Plain => style.bg_primary,
        BgTexture::Checker => {
            if (x / c + y / c) % 2 == 0 {
                style.bg_primary
            } else {
                style.bg_secondary
            }
        }
        BgTexture::HStripes => {
            if (y / c) % 2 == 0 {
                style.bg_primary
            } else {
                style.bg_secondary
            }
        }
        BgTexture::VStripes => {
            if (x / c) % 2 == 0 {
                style.bg_primary
            } else {
                style.bg_secondary
            }
        }
        BgTexture::Dots => {
            let (mx, my) = (x % (2 * c), y % (2 * c));
            if mx < c && my < c {
                style.bg_secondary
            } else {
                style.bg_primary
            }
        }
    }
}

impl ShapeSpec {
    pub fn center_at(&self, frame: usize) -> (f32, f32) {
        (
            self.pos.0 + self.vel.0 * frame as f32,
            self.pos.1 + self.vel.1 * frame as f32,
        )
    }

    /// Point-in-shape at pixel center coordinates.
    pub fn contains(&self, frame: usize, px: f32, py: f32) -> bool {
        let (cx, cy) = self.center_at(frame);
        let h = self.half;
        match self.kind {
            ShapeKind::Circle => {
                let (dx, dy) = (px - cx, py - cy);
                dx * dx + dy * dy <= h * h
            }
            ShapeKind::Square => (px - cx).abs() <= h && (py - cy).abs() <= h,
            ShapeKind::Triangle => {
                let top = cy - h;
                let bottom = cy + h;
                py >= top && py <= bottom && (px - cx).abs() <= (py - top) * 0.5
            }
        }
    }
}

impl SceneSpec {
    /// Checks the invariants: distinct z-orders, shapes inside the frame for
    /// the whole clip.
    pub fn validate(&self) -> Result<()> {
        let mut zs: Vec<usize> = self.shapes.iter().map(|s| s.z).collect();
        zs.sort_unstable();
        zs.dedup();
        if zs.len() != self.shapes.len() {
            return Err(Error::Data("scene spec has duplicate z-orders".into()));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            for f in [0, self.n_frames.saturating_sub(1)] {
                let (cx, cy) = s.center_at(f);
                if cx - s.half < 0.0
                    || cx + s.half > self.width as f32 - 1.0
                    || cy - s.half < 0.0
                    || cy + s.half > self.height as f32 - 1.0
                {
                    return Err(Error::Data(format!(
                        "shape {i} escapes the frame at frame {f} (center ({cx:.1},{cy:.1}), half {})",
                        s.half
                    )));
                }
            }
        }
        Ok(())
    }

    /// Depth value assigned to a shape: z-rank mapped into (0,1], nearer
    /// (larger z) gets a larger value. Background stays at exactly 0.
    pub fn depth_of(&self, shape_idx: usize) -> f32 {
        let mut order: Vec<usize> = (0..self.shapes.len()).collect();
        order.sort_by_key(|&i| self.shapes[i].z);
        let rank = order.iter().position(|&i| i == shape_idx).unwrap();
        (rank + 1) as f32 / self.shapes.len() as f32
    }

    /// Index of the topmost shape covering a pixel, if any.
    pub fn owner(&self, frame: usize, px: f32, py: f32) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, s) in self.shapes.iter().enumerate() {
            if s.contains(frame, px, py) {
                best = match best {
                    Some(j) if self.shapes[j].z > s.z => Some(j),
                    _ => Some(i),
                };
            }
        }
        best
    }
}

/// Renders a clip deterministically from its spec.
pub fn generate_clip(spec: &SceneSpec, styles: &[Style]) -> Result<ClipRecord> {
    spec.validate()?;
    let style = styles
        .get(spec.style_id)
        .ok_or_else(|| Error::Data(format!("style id {} out of range", spec.style_id)))?;
    let (w, h, n) = (spec.width, spec.height, spec.n_frames);
    let mut frames = vec![0.0f32; n * 3 * h * w];
    let mut depth = vec![0.0f32; n * h * w];
    for f in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let (color, d) = match spec.owner(f, px, py) {
                    Some(i) => {
                        let s = &spec.shapes[i];
                        (
                            style.shape_colors[s.color_idx % style.shape_colors.len()],
                            spec.depth_of(i),
                        )
                    }
                    None => (bg_color(style, x, y), 0.0),
                };
                for c in 0..3 {
                    frames[((f * 3 + c) * h + y) * w + x] = px_to_f32(color[c]);
                }
                depth[(f * h + y) * w + x] = d;
            }
        }
    }
    Ok(ClipRecord {
        id: format!("clip_{:08x}", spec.seed),
        frames: Tensor::new(&[n, 3, h, w], frames)?,
        depth: Some(Tensor::new(&[n, 1, h, w], depth)?),
        style_id: spec.style_id,
        style_name: style.name.clone(),
        spec: Some(spec.clone()),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub clips: usize,
    pub frames_per_clip: usize,
    pub width: usize,
    pub height: usize,
    pub styles: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            clips: 512,
            frames_per_clip: 32,
            width: 64,
            height: 64,
            styles: 8,
            min_shapes: 1,
            max_shapes: 3,
        }
    }
}

/// Samples a valid scene: positions and velocities are chosen so every shape
/// stays inside the frame for the whole clip.
pub fn sample_scene(cfg: &CorpusConfig, style_id: usize, seed: u64, rng: &mut Rng) -> SceneSpec {
    let n_shapes = if cfg.max_shapes > cfg.min_shapes {
        cfg.min_shapes + rng.below(cfg.max_shapes - cfg.min_shapes + 1)
    } else {
        cfg.min_shapes
    };
    let kinds = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
    let dur = (cfg.frames_per_clip - 1).max(1) as f32;
    let mut shapes = Vec::with_capacity(n_shapes);
    for z in 0..n_shapes {
        let kind = kinds[rng.below(kinds.len())];
        let min_half = cfg.width as f32 * 0.12;
        let max_half = cfg.width as f32 * 0.22;
        let half = min_half + rng.uniform() * (max_half - min_half);
        // velocity bounded so a centered start can always satisfy the bounds
        let vmax = ((cfg.width as f32 - 1.0) / 2.0 - half).max(0.0) / dur * 0.9;
        let vel = (
            (rng.uniform() * 2.0 - 1.0) * vmax,
            (rng.uniform() * 2.0 - 1.0) * vmax,
        );
        let lo_x = half + (-vel.0 * dur).max(0.0);
        let hi_x = cfg.width as f32 - 1.0 - half - (vel.0 * dur).max(0.0);
        let lo_y = half + (-vel.1 * dur).max(0.0);
        let hi_y = cfg.height as f32 - 1.0 - half - (vel.1 * dur).max(0.0);
        let pos = (
            lo_x + rng.uniform() * (hi_x - lo_x).max(0.0),
            lo_y + rng.uniform() * (hi_y - lo_y).max(0.0),
        );
        shapes.push(ShapeSpec { kind, half, pos, vel, z, color_idx: rng.below(3) });
    }
    SceneSpec {
        shapes,
        style_id,
        n_frames: cfg.frames_per_clip,
        width: cfg.width,
        height: cfg.height,
        seed,
    }
}

/// Generates the full corpus. Styles are assigned round-robin so every style
/// has equal support.
pub fn generate_corpus(cfg: &CorpusConfig, rng: &Rng) -> Result<(Vec<ClipRecord>, Vec<Style>)> {
    let styles = default_styles(cfg.styles);
    let mut clips = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips {
        let mut crng = rng.substream_indexed("datagen.clip", i as u64);
        let style_id = i % cfg.styles;
        let spec = sample_scene(cfg, style_id, (rng.seed() << 16) ^ i as u64, &mut crng);
        let mut clip = generate_clip(&spec, &styles)?;
        clip.id = format!("clip_{i:05}");
        clips.push(clip);
    }
    Ok((clips, styles))
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    id: String,
    style_id: usize,
    style_name: String,
    width: usize,
    height: usize,
    n_frames: usize,
    seed: u64,
    spec: Option<SceneSpec>,
}

/// Writes frames as 8-bit RGB PNGs, depth as 16-bit grayscale PNGs, and
/// metadata as clip.json.
pub fn export_clip(record: &ClipRecord, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let shape = record.frames.shape().to_vec();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let data = record.frames.data();
    for f in 0..n {
        let mut img: RgbImage = ImageBuffer::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = Rgb([
                    f32_to_px(data[((f * 3) * h + y) * w + x]),
                    f32_to_px(data[((f * 3 + 1) * h + y) * w + x]),
                    f32_to_px(data[((f * 3 + 2) * h + y) * w + x]),
                ]);
                img.put_pixel(x as u32, y as u32, px);
            }
        }
        img.save(dir.join(format!("frame_{f:05}.png")))?;
    }
    if let Some(depth) = &record.depth {
        let dd = depth.data();
        for f in 0..n {
            let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let v = (dd[(f * h + y) * w + x].clamp(0.0, 1.0) * 65535.0).round() as u16;
                    img.put_pixel(x as u32, y as u32, Luma([v]));
                }
            }
            img.save(dir.join(format!("depth_{f:05}.png")))?;
        }
    }
    let meta = ClipMeta {
        id: record.id.clone(),
        style_id: record.style_id,
        style_name: record.style_name.clone(),
        width: w,
        height: h,
        n_frames: n,
        seed: record.spec.as_ref().map(|s| s.seed).unwrap_or(0),
        spec: record.spec.clone(),
    };
    let f = std::fs::File::create(dir.join("clip.json"))?;
    serde_json::to_writer_pretty(f, &meta)?;
    Ok(())
}

fn sorted_files(dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with(prefix) && name.ends_with(".png") {
            found.push(entry.path());
        }
    }
    found.sort();
    Ok(found)
}

/// Loads 8-bit RGB frames into an [n,3,H,W] tensor in [-1,1].
pub fn load_frames(dir: impl AsRef<Path>) -> Result<Tensor> {
    let dir = dir.as_ref();
    let files = sorted_files(dir, "frame_")?;
    if files.is_empty() {
        return Err(Error::Data(format!("no frame_*.png files in {}", dir.display())));
    }
    let mut frames: Vec<f32> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for path in &files {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::Data(format!(
                    "inconsistent frame dims in {} ({}x{} vs {}x{})",
                    path.display(),
                    w,
                    h,
                    d.1,
                    d.0
                )));
            }
            _ => {}
        }
        let mut chan = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    chan[(c * h + y) * w + x] = px_to_f32(px.0[c]);
                }
            }
        }
        frames.extend_from_slice(&chan);
    }
    let (h, w) = dims.unwrap();
    Tensor::new(&[files.len(), 3, h, w], frames)
}

/// Loads 16-bit grayscale depth PNGs as raw u16 planes (no normalization).
pub fn load_depth_raw(dir: impl AsRef<Path>) -> Result<(Vec<Vec<u16>>, usize, usize)> {
    let dir = dir.as_ref();
    let files = sorted_files(dir, "depth_")?;
    if files.is_empty() {
        return Err(Error::Data(format!("no depth_*.png files in {}", dir.display())));
    }
    let mut planes = Vec::with_capacity(files.len());
    let mut dims: Option<(usize, usize)> = None;
    for path in &files {
        let img = image::open(path)?;
        let gray = match img {
            image::DynamicImage::ImageLuma16(g) => g,
            image::DynamicImage::ImageLuma8(g) => {
                // widen 8-bit grayscale; everything else is rejected
                let mut wide: ImageBuffer<Luma<u16>, Vec<u16>> =
                    ImageBuffer::new(g.width(), g.height());
                for (x, y, p) in g.enumerate_pixels() {
                    wide.put_pixel(x, y, Luma([p.0[0] as u16 * 257]));
                }
                wide
            }
            _ => {
                return Err(Error::Data(format!(
                    "{} is not grayscale (depth must be 16-bit gray PNG)",
                    path.display()
                )));
            }
        };
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::Data(format!(
                    "inconsistent depth dims in {}",
                    path.display()
                )));
            }
            _ => {}
        }
        planes.push(gray.into_raw());
    }
    let (h, w) = dims.unwrap();
    Ok((planes, h, w))
}

/// Reads a clip directory back. Depth is optional; a clip without depth
/// imports fine and is marked accordingly.
pub fn import_clip(dir: impl AsRef<Path>) -> Result<ClipRecord> {
    let dir = dir.as_ref();
    let meta_path = dir.join("clip.json");
    let meta: ClipMeta = serde_json::from_reader(
        std::fs::File::open(&meta_path)
            .map_err(|e| Error::Data(format!("missing clip.json in {}: {e}", dir.display())))?,
    )?;
    let frames = load_frames(dir)?;
    if frames.shape()[0] != meta.n_frames {
        return Err(Error::Data(format!(
            "{}: clip.json says {} frames, found {}",
            dir.display(),
            meta.n_frames,
            frames.shape()[0]
        )));
    }
    let depth = match load_depth_raw(dir) {
        Ok((planes, h, w)) => {
            let n = planes.len();
            if n != meta.n_frames {
                return Err(Error::Data(format!(
                    "{}: found {} depth frames for {} rgb frames",
                    dir.display(),
                    n,
                    meta.n_frames
                )));
            }
            let mut data = Vec::with_capacity(n * h * w);
            for plane in &planes {
                data.extend(plane.iter().map(|&v| v as f32 / 65535.0));
            }
            Some(Tensor::new(&[n, 1, h, w], data)?)
        }
        Err(_) => None,
    };
    Ok(ClipRecord {
        id: meta.id,
        frames,
        depth,
        style_id: meta.style_id,
        style_name: meta.style_name,
        spec: meta.spec,
    })
}

/// One training batch. Video batches stack `n_frames` frames sampled
/// `stride` apart; image batches are single-frame (n = 1).
#[derive(Debug)]
pub struct Batch {
    pub frames: Tensor, // [b, n, 3, H, W]
    pub depth: Tensor,  // [b, n, 1, H, W]
    pub style_ids: Vec<usize>,
    pub clip_indices: Vec<usize>,
    pub is_image: bool,
}

static SHORT_CLIP_WARN: Once = Once::new();

/// Assembles a batch. With probability `image_prob` the whole batch is
/// single-frame; otherwise each element is an `n_frames`-frame window with
/// the given stride at a random start offset.
pub fn make_batch(
    corpus: &[ClipRecord],
    batch_size: usize,
    image_prob: f32,
    n_frames: usize,
    stride: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let need = (n_frames - 1) * stride + 1;
    let eligible: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus[i].frames.shape()[0] >= need)
        .collect();
    if eligible.len() < corpus.len() {
        let skipped = corpus.len() - eligible.len();
        SHORT_CLIP_WARN.call_once(|| {
            eprintln!(
                "warning: {skipped} clip(s) shorter than {need} frames skipped for video batches"
            );
        });
    }
    let is_image = rng.uniform() < image_prob;
    if !is_image && eligible.is_empty() {
        return Err(Error::Data(format!(
            "no clip is long enough for {n_frames} frames at stride {stride}"
        )));
    }

    let shape = corpus[0].frames.shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let n = if is_image { 1 } else { n_frames };
    let mut frames = Vec::with_capacity(batch_size * n * 3 * h * w);
    let mut depth = Vec::with_capacity(batch_size * n * h * w);
    let mut style_ids = Vec::with_capacity(batch_size);
    let mut clip_indices = Vec::with_capacity(batch_size);

    for _ in 0..batch_size {
        let ci = if is_image {
            rng.below(corpus.len())
        } else {
            eligible[rng.below(eligible.len())]
        };
        let clip = &corpus[ci];
        let clip_len = clip.frames.shape()[0];
        let d = clip
            .depth
            .as_ref()
            .ok_or_else(|| Error::Data(format!("clip {} has no depth", clip.id)))?;
        let idxs: Vec<usize> = if is_image {
            vec![rng.below(clip_len)]
        } else {
            let start = rng.below(clip_len - need + 1);
            (0..n_frames).map(|k| start + k * stride).collect()
        };
        let fd = clip.frames.data();
        let dd = d.data();
        for &fi in &idxs {
            frames.extend_from_slice(&fd[fi * 3 * h * w..(fi + 1) * 3 * h * w]);
            depth.extend_from_slice(&dd[fi * h * w..(fi + 1) * h * w]);
        }
        style_ids.push(clip.style_id);
        clip_indices.push(ci);
    }
    Ok(Batch {
        frames: Tensor::new(&[batch_size, n, 3, h, w], frames)?,
        depth: Tensor::new(&[batch_size, n, 1, h, w], depth)?,
        style_ids,
        clip_indices,
        is_image,
    })
}

/// Foreground mask from a depth frame: anything above the background zero.
pub fn silhouette_from_depth(depth: &[f32]) -> Vec<bool> {
    depth.iter().map(|&d| d > 1e-4).collect()
}

/// Foreground masks for rendered/output frames. Background colors are
/// estimated by clustering the border pixels of each frame (textures have at
/// most two colors); a pixel is foreground when it is far from every
/// background cluster.
pub fn silhouette_from_frames(frames: &Tensor) -> Result<Vec<Vec<bool>>> {
    if frames.rank() != 4 || frames.shape()[1] != 3 {
        return Err(Error::shape(
            "silhouette_from_frames",
            format!("expected [n,3,H,W], got {:?}", frames.shape()),
        ));
    }
    let (n, h, w) = (frames.shape()[0], frames.shape()[2], frames.shape()[3]);
    let data = frames.data();
    let px = |f: usize, y: usize, x: usize| -> [f32; 3] {
        [
            data[((f * 3) * h + y) * w + x],
            data[((f * 3 + 1) * h + y) * w + x],
            data[((f * 3 + 2) * h + y) * w + x],
        ]
    };
    let dist2 = |a: &[f32; 3], b: &[f32; 3]| -> f32 {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };
    let mut masks = Vec::with_capacity(n);
    for f in 0..n {
        // greedy clustering of border pixels
        let mut centers: Vec<([f32; 3], usize)> = Vec::new();
        let mut border = Vec::new();
        for x in 0..w {
            border.push(px(f, 0, x));
            border.push(px(f, h - 1, x));
        }
        for y in 0..h {
            border.push(px(f, y, 0));
            border.push(px(f, y, w - 1));
        }
        for p in &border {
            match centers.iter_mut().find(|(c, _)| dist2(p, c) < 0.15) {
                Some((c, cnt)) => {
                    let k = *cnt as f32;
                    for i in 0..3 {
                        c[i] = (c[i] * k + p[i]) / (k + 1.0);
                    }
                    *cnt += 1;
                }
                None => centers.push((*p, 1)),
            }
        }
        let min_support = border.len() / 20;
        let bg: Vec<[f32; 3]> = centers
            .iter()
            .filter(|(_, cnt)| *cnt >= min_support.max(2))
            .map(|(c, _)| *c)
            .collect();
        let mut mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let p = px(f, y, x);
                let near_bg = bg.iter().any(|c| dist2(&p, c) < 0.25);
                mask[y * w + x] = !near_bg;
            }
        }
        masks.push(mask);
    }
    Ok(masks)
}

/// Intersection-over-union of two masks. Empty union counts as 1.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f32 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f32 / union as f32
    }
}

/// Mean squared error between frame k+1 and frame k warped by the
/// ground-truth motion of the scene (the optical-flow analog on synthetic
/// data). For each pixel of frame k+1, the source pixel in frame k is found
/// by subtracting the owning shape's velocity; background pixels are static.
pub fn warped_mse(frames: &Tensor, spec: &SceneSpec) -> Result<f32> {
    if frames.rank() != 4 || frames.shape()[1] != 3 {
        return Err(Error::shape(
            "warped_mse",
            format!("expected [n,3,H,W], got {:?}", frames.shape()),
        ));
    }
    let (n, h, w) = (frames.shape()[0], frames.shape()[2], frames.shape()[3]);
    if n < 2 {
        return Err(Error::Contract("warped_mse needs at least 2 frames".into()));
    }
    let data = frames.data();
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for f in 1..n {
        for y in 0..h {
            for x in 0..w {
                let (pxc, pyc) = (x as f32 + 0.5, y as f32 + 0.5);
                let (dx, dy) = match spec.owner(f, pxc, pyc) {
                    Some(i) => spec.shapes[i].vel,
                    None => (0.0, 0.0),
                };
                let sx = (pxc - dx - 0.5).round() as isize;
                let sy = (pyc - dy - 0.5).round() as isize;
                if sx < 0 || sx >= w as isize || sy < 0 || sy >= h as isize {
                    continue;
                }
                for c in 0..3 {
                    let cur = data[((f * 3 + c) * h + y) * w + x];
                    let prev = data[(((f - 1) * 3 + c) * h + sy as usize) * w + sx as usize];
                    acc += ((cur - prev) as f64).powi(2);
                    count += 1;
                }
            }
        }
    }
    Ok((acc / count.max(1) as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> CorpusConfig {
        CorpusConfig {
            clips: 4,
            frames_per_clip: 6,
            width: 24,
            height: 24,
            styles: 3,
            min_shapes: 1,
            max_shapes: 2,
        }
    }

    #[test]
    fn zero_velocity_clip_has_identical_frames() {
        let styles = default_styles(2);
        let spec = SceneSpec {
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Circle,
                half: 4.0,
                pos: (12.0, 12.0),
                vel: (0.0, 0.0),
                z: 0,
                color_idx: 0,
            }],
            style_id: 1,
            n_frames: 4,
            width: 24,
            height: 24,
            seed: 7,
        };
        let clip = generate_clip(&spec, &styles).unwrap();
        let data = clip.frames.to_vec();
        let frame_len = 3 * 24 * 24;
        for f in 1..4 {
            assert_eq!(&data[..frame_len], &data[f * frame_len..(f + 1) * frame_len]);
        }
    }

    #[test]
    fn same_seed_generates_bit_identical_clips() {
        let cfg = tiny_cfg();
        let (a, _) = generate_corpus(&cfg, &Rng::new(5)).unwrap();
        let (b, _) = generate_corpus(&cfg, &Rng::new(5)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.frames.to_vec(), y.frames.to_vec());
            assert_eq!(
                x.depth.as_ref().unwrap().to_vec(),
                y.depth.as_ref().unwrap().to_vec()
            );
        }
    }

    #[test]
    fn occlusion_follows_z_order_everywhere() {
        let styles = default_styles(1);
        // two overlapping squares, shape 1 on top
        let spec = SceneSpec {
            shapes: vec![
                ShapeSpec { kind: ShapeKind::Square, half: 5.0, pos: (10.0, 12.0), vel: (0.2, 0.0), z: 0, color_idx: 0 },
                ShapeSpec { kind: ShapeKind::Square, half: 5.0, pos: (14.0, 12.0), vel: (-0.2, 0.0), z: 1, color_idx: 1 },
            ],
            style_id: 0,
            n_frames: 5,
            width: 24,
            height: 24,
            seed: 1,
        };
        let clip = generate_clip(&spec, &styles).unwrap();
        let fd = clip.frames.data();
        let dd = clip.depth.as_ref().unwrap().data();
        let (h, w) = (24, 24);
        let mut overlap_pixels = 0;
        for f in 0..5 {
            for y in 0..h {
                for x in 0..w {
                    let (pxc, pyc) = (x as f32 + 0.5, y as f32 + 0.5);
                    let in0 = spec.shapes[0].contains(f, pxc, pyc);
                    let in1 = spec.shapes[1].contains(f, pxc, pyc);
                    if in0 && in1 {
                        overlap_pixels += 1;
                        // top shape (z=1) wins: color 1 and its depth value
                        let expect_color = styles[0].shape_colors[1];
                        for c in 0..3 {
                            assert_eq!(
                                fd[((f * 3 + c) * h + y) * w + x],
                                px_to_f32(expect_color[c])
                            );
                        }
                        assert_eq!(dd[(f * h + y) * w + x], spec.depth_of(1));
                    }
                }
            }
        }
        assert!(overlap_pixels > 0, "test scene must actually overlap");
    }

    #[test]
    fn export_import_round_trip_exact() {
        let cfg = tiny_cfg();
        let (clips, _) = generate_corpus(&cfg, &Rng::new(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cd = dir.path().join(&clips[0].id);
        export_clip(&clips[0], &cd).unwrap();
        let back = import_clip(&cd).unwrap();
        // frames: renderer colors sit on the u8 grid, so the trip is exact
        assert_eq!(back.frames.to_vec(), clips[0].frames.to_vec());
        // depth: error bounded by one quantization step
        let orig = clips[0].depth.as_ref().unwrap().to_vec();
        let re = back.depth.as_ref().unwrap().to_vec();
        for (a, b) in orig.iter().zip(re.iter()) {
            assert!((a - b).abs() <= 1.0 / 65535.0 + 1e-7);
        }
        assert_eq!(back.style_id, clips[0].style_id);
    }

    #[test]
    fn import_without_depth_marks_it_absent() {
        let cfg = tiny_cfg();
        let (clips, _) = generate_corpus(&cfg, &Rng::new(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cd = dir.path().join("c");
        export_clip(&clips[0], &cd).unwrap();
        for entry in std::fs::read_dir(&cd).unwrap() {
            let p = entry.unwrap().path();
            if p.file_name().unwrap().to_string_lossy().starts_with("depth_") {
                std::fs::remove_file(p).unwrap();
            }
        }
        let back = import_clip(&cd).unwrap();
        assert!(back.depth.is_none());
    }

    #[test]
    fn image_batch_probability_one_gives_single_frames() {
        let cfg = tiny_cfg();
        let (clips, _) = generate_corpus(&cfg, &Rng::new(11)).unwrap();
        let mut rng = Rng::new(0).substream("data");
        for _ in 0..5 {
            let b = make_batch(&clips, 3, 1.0, 4, 2, &mut rng).unwrap();
            assert!(b.is_image);
            assert_eq!(b.frames.shape()[1], 1);
        }
    }

    #[test]
    fn image_batch_fraction_converges() {
        let cfg = tiny_cfg();
        let (clips, _) = generate_corpus(&cfg, &Rng::new(12)).unwrap();
        let mut rng = Rng::new(1).substream("data");
        let draws = 10_000;
        let mut image_count = 0usize;
        for _ in 0..draws {
            let b = make_batch(&clips, 1, 0.125, 2, 2, &mut rng).unwrap();
            if b.is_image {
                image_count += 1;
            }
        }
        // 3 sigma of a Bernoulli(0.125) mean over 10^4 draws
        let p = 0.125f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        let frac = image_count as f64 / draws as f64;
        assert!(
            (frac - p).abs() < 3.0 * sigma,
            "fraction {frac} vs {p} (3 sigma {})",
            3.0 * sigma
        );
    }

    #[test]
    fn video_batch_uses_strided_indices() {
        // single 32-frame clip: only starts 0..=4 fit 8 frames at stride 4
        let styles = default_styles(1);
        let spec = SceneSpec {
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Square,
                half: 3.0,
                pos: (16.0, 16.0),
                vel: (0.3, 0.0),
                z: 0,
                color_idx: 0,
            }],
            style_id: 0,
            n_frames: 32,
            width: 40,
            height: 40,
            seed: 2,
        };
        let clip = generate_clip(&spec, &styles).unwrap();
        let mut rng = Rng::new(3).substream("data");
        let b = make_batch(&[clip.clone()], 1, 0.0, 8, 4, &mut rng).unwrap();
        assert_eq!(b.frames.shape()[1], 8);
        // the window must equal frames {i, i+4, ..., i+28} for some i
        let bd = b.frames.to_vec();
        let cd = clip.frames.to_vec();
        let frame_len = 3 * 40 * 40;
        let mut matched = false;
        'outer: for start in 0..=4usize {
            for k in 0..8 {
                let src = &cd[(start + 4 * k) * frame_len..(start + 4 * k + 1) * frame_len];
                let dst = &bd[k * frame_len..(k + 1) * frame_len];
                if src != dst {
                    continue 'outer;
                }
            }
            matched = true;
            break;
        }
        assert!(matched, "batch window is not a stride-4 slice");
    }

    #[test]
    fn all_short_clips_is_an_error() {
        let cfg = tiny_cfg();
        let (clips, _) = generate_corpus(&cfg, &Rng::new(13)).unwrap();
        let mut rng = Rng::new(4).substream("data");
        assert!(make_batch(&clips, 2, 0.0, 16, 4, &mut rng).is_err());
    }

    #[test]
    fn depth_silhouette_matches_rendered_shapes() {
        let cfg = tiny_cfg();
        let (clips, _) = generate_corpus(&cfg, &Rng::new(14)).unwrap();
        let clip = &clips[0];
        let spec = clip.spec.as_ref().unwrap();
        let dd = clip.depth.as_ref().unwrap().data();
        let (h, w) = (spec.height, spec.width);
        for f in 0..spec.n_frames {
            let sil = silhouette_from_depth(&dd[f * h * w..(f + 1) * h * w]);
            for y in 0..h {
                for x in 0..w {
                    let owned = spec.owner(f, x as f32 + 0.5, y as f32 + 0.5).is_some();
                    assert_eq!(sil[y * w + x], owned, "frame {f} pixel ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn frame_silhouette_approximates_depth_silhouette() {
        let cfg = tiny_cfg();
        let (clips, _) = generate_corpus(&cfg, &Rng::new(15)).unwrap();
        for clip in clips.iter().take(2) {
            let masks = silhouette_from_frames(&clip.frames).unwrap();
            let dd = clip.depth.as_ref().unwrap().data();
            let hw = clip.frames.shape()[2] * clip.frames.shape()[3];
            for (f, mask) in masks.iter().enumerate() {
                let dsil = silhouette_from_depth(&dd[f * hw..(f + 1) * hw]);
                let iou = mask_iou(mask, &dsil);
                assert!(iou > 0.8, "clip {} frame {f}: iou {iou}", clip.id);
            }
        }
    }

    #[test]
    fn shapes_escaping_frame_are_rejected() {
        let styles = default_styles(1);
        let spec = SceneSpec {
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Circle,
                half: 4.0,
                pos: (4.0, 12.0),
                vel: (-2.0, 0.0),
                z: 0,
                color_idx: 0,
            }],
            style_id: 0,
            n_frames: 8,
            width: 24,
            height: 24,
            seed: 0,
        };
        assert!(generate_clip(&spec, &styles).is_err());
    }
}
