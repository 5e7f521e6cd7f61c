//! Blurry/sharp pair synthesis by frame averaging, a procedural toy video
//! generator, and the on-disk dataset layout.
//!
//! ```text
//! <root>/manifest.txt            one "id,count" line per clip
//! <root>/<id>/blur/%05d.png
//! <root>/<id>/sharp/%05d.png
//! <root>/<id>/flow/<ref>_<nbr>.flo   optional, consecutive blurry frames
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, flow_file_name, FlowField, FlowTable, LkParams};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const DEFAULT_BLUR_WINDOW: usize = 41;
pub const DEFAULT_N_RANGE: (usize, usize) = (38, 44);
pub const TOY_BLUR_WINDOW: usize = 9;
pub const TOY_N_RANGE: (usize, usize) = (9, 11);

/// A sequence of sharp `[3, h, w]` frames in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub frames: Vec<Tensor<f32>>,
    pub fps_source: f32,
}

/// Blurry frames and their sharp middle frames, index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedClip {
    pub id: String,
    pub blurry: Vec<Tensor<f32>>,
    pub sharp: Vec<Tensor<f32>>,
    /// Directory holding `.flo` files between consecutive blurry frames.
    pub flow_dir: Option<PathBuf>,
}

/// `2 * stages + 1` consecutive frames of one clip.
#[derive(Clone, Debug)]
pub struct BlurWindow {
    pub blurry: Vec<Tensor<f32>>,
    pub sharp: Vec<Tensor<f32>>,
    pub clip_id: String,
    /// Clip index of the middle frame.
    pub center_index: usize,
    /// Flows keyed by window positions, present for file alignment.
    pub flows: Option<FlowTable>,
}

/// Pixelwise mean of an odd number of equally shaped frames.
pub fn synthesize_blur(window: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    if window.len() % 2 == 0 {
        return Err(Error::InvalidArgument(format!("blur window must be odd, got {}", window.len())));
    }
    let first = &window[0];
    let mut acc = vec![0.0f64; first.numel()];
    for f in window {
        if f.shape() != first.shape() {
            return Err(Error::shape("synthesize_blur", format!("{:?} vs {:?}", f.shape(), first.shape())));
        }
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / window.len() as f64;
    Tensor::new(first.shape(), acc.into_iter().map(|a| (a * inv) as f32).collect())
}

/// Splits `0..n_frames` into consecutive windows of random length in
/// `n_range` (inclusive) and returns `(middle, start)` for each complete one.
pub fn subsample_centers<R: Rng>(n_frames: usize, n_range: (usize, usize), rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let (lo, hi) = n_range;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidArgument(format!("invalid subsampling range {lo},{hi}")));
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let n = rng.random_range(lo..=hi);
        if start + n > n_frames {
            break;
        }
        out.push((start + n / 2, start));
        start += n;
    }
    Ok(out)
}

/// Blurry/sharp pairs from a sharp clip: one pair per subsampled centre
/// whose `window`-frame blur support lies inside the clip.
pub fn synthesize_clip<R: Rng>(clip: &VideoClip, window: usize, n_range: (usize, usize), rng: &mut R) -> Result<PairedClip> {
    if window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("blur window must be odd, got {window}")));
    }
    let half = window / 2;
    let mut blurry = Vec::new();
    let mut sharp = Vec::new();
    for (center, _) in subsample_centers(clip.frames.len(), n_range, rng)? {
        if center < half || center + half >= clip.frames.len() {
            continue;
        }
        blurry.push(synthesize_blur(&clip.frames[center - half..=center + half])?);
        sharp.push(clip.frames[center].clone());
    }
    Ok(PairedClip { id: clip.id.clone(), blurry, sharp, flow_dir: None })
}

/// Area-weighted resampling of a `[c, h, w]` image to `[c, oh, ow]`.
pub fn downsize_area(image: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || oh == 0 || ow == 0 || oh > s[1] || ow > s[2] {
        return Err(Error::shape("downsize_area", format!("{s:?} -> {oh}x{ow}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let weights = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
                (a.floor() as usize..(b.ceil() as usize).min(n_in))
                    .map(|i| (i, ((i + 1) as f64).min(b) - (i as f64).max(a)))
                    .filter(|&(_, wgt)| wgt > 0.0)
                    .map(|(i, wgt)| (i, wgt / scale))
                    .collect()
            })
            .collect()
    };
    let (wy, wx) = (weights(h, oh), weights(w, ow));
    let d = image.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for ry in &wy {
            for rx in &wx {
                let mut acc = 0.0f64;
                for &(y, a) in ry {
                    for &(x, b) in rx {
                        acc += a * b * d[(ch * h + y) * w + x] as f64;
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Settings of the procedural toy videos.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub n_clips: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Forces every shape to move at this many pixels per frame.
    pub speed: Option<f32>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { n_clips: 20, frames_per_clip: 100, height: 64, width: 64, seed: 0, speed: None }
    }
}

#[derive(Clone, Debug)]
struct Shape {
    circle: bool,
    /// Radius, or half extents for rectangles.
    size: (f32, f32),
    start: (f32, f32),
    velocity: (f32, f32),
    color: [f32; 3],
    stripe_dir: (f32, f32),
    stripe_period: f32,
}

struct Background {
    waves: Vec<([f32; 3], f32, f32, f32)>,
    base: [f32; 3],
}

impl Background {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let waves = (0..6)
            .map(|_| {
                let amp = [rng.random_range(0.03..0.1), rng.random_range(0.03..0.1), rng.random_range(0.03..0.1)];
                (amp, rng.random_range(-1.2..1.2f32), rng.random_range(-1.2..1.2f32), rng.random_range(0.0..std::f32::consts::TAU))
            })
            .collect();
        let base = [rng.random_range(0.3..0.6), rng.random_range(0.3..0.6), rng.random_range(0.3..0.6)];
        Self { waves, base }
    }

    fn at(&self, x: f32, y: f32, ch: usize) -> f32 {
        self.base[ch] + self.waves.iter().map(|(a, fx, fy, ph)| a[ch] * (fx * x + fy * y + ph).sin()).sum::<f32>()
    }
}

fn wrap(d: f32, period: f32) -> f32 {
    d - period * (d / period).round()
}

impl Shape {
    fn sample<R: Rng>(rng: &mut R, h: usize, w: usize, speed: Option<f32>) -> Self {
        let circle = rng.random_bool(0.5);
        let limit = (h.min(w) as f32 / 5.0).max(2.0);
        let size = if circle {
            let r = rng.random_range(0.4 * limit..limit);
            (r, r)
        } else {
            (rng.random_range(0.3 * limit..limit), rng.random_range(0.3 * limit..limit))
        };
        let magnitude = speed.unwrap_or_else(|| rng.random_range(0.2..=1.0));
        let angle = rng.random_range(0.0..std::f32::consts::TAU);
        let sd = rng.random_range(0.0..std::f32::consts::TAU);
        Self {
            circle,
            size,
            start: (rng.random_range(0.0..w as f32), rng.random_range(0.0..h as f32)),
            velocity: (magnitude * angle.cos(), magnitude * angle.sin()),
            color: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            stripe_dir: (sd.cos(), sd.sin()),
            stripe_period: rng.random_range(3.0..7.0),
        }
    }

    /// Signed distance in pixels from the shape boundary (negative inside).
    fn sdf(&self, dx: f32, dy: f32) -> f32 {
        if self.circle {
            dx.hypot(dy) - self.size.0
        } else {
            let (qx, qy) = (dx.abs() - self.size.0, dy.abs() - self.size.1);
            qx.max(0.0).hypot(qy.max(0.0)) + qx.max(qy).min(0.0)
        }
    }
}

/// Renders a clip of textured shapes moving at constant velocity over a
/// textured background that pans with its own constant velocity. Shape
/// positions wrap around the frame borders and `t = frames / 2` is the
/// sampled start of every motion.
fn render_clip(cfg: &ToyConfig, index: usize) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let (h, w) = (cfg.height, cfg.width);
    let bg = Background::sample(&mut rng);
    let pan_angle = rng.random_range(0.0..std::f32::consts::TAU);
    let pan_speed = rng.random_range(0.1..0.5f32);
    let pan = (pan_speed * pan_angle.cos(), pan_speed * pan_angle.sin());
    let n_shapes = rng.random_range(2..=4);
    let shapes: Vec<Shape> = (0..n_shapes).map(|_| Shape::sample(&mut rng, h, w, cfg.speed)).collect();
    let mid = (cfg.frames_per_clip / 2) as f32;
    let frames = (0..cfg.frames_per_clip)
        .map(|t| {
            let dt = t as f32 - mid;
            let centers: Vec<(f32, f32)> =
                shapes.iter().map(|s| (s.start.0 + s.velocity.0 * dt, s.start.1 + s.velocity.1 * dt)).collect();
            Tensor::from_fn(&[3, h, w], |i| {
                let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let mut v = bg.at(px - pan.0 * dt, py - pan.1 * dt, ch);
                for (s, c) in shapes.iter().zip(&centers) {
                    let dx = wrap(px - c.0, w as f32);
                    let dy = wrap(py - c.1, h as f32);
                    let cover = (0.5 - s.sdf(dx, dy)).clamp(0.0, 1.0);
                    if cover > 0.0 {
                        let phase = (dx * s.stripe_dir.0 + dy * s.stripe_dir.1) / s.stripe_period;
                        let tex = s.color[ch] * (0.7 + 0.3 * (std::f32::consts::TAU * phase).sin());
                        v = v * (1.0 - cover) + tex * cover;
                    }
                }
                v.clamp(0.0, 1.0)
            })
        })
        .collect();
    VideoClip { id: format!("clip{index:03}"), frames, fps_source: 1000.0 }
}

/// Procedural sharp clips, bit-identical for equal configs.
pub fn make_toy_dataset(cfg: &ToyConfig) -> Result<Vec<VideoClip>> {
    if cfg.height < 8 || cfg.width < 8 || cfg.frames_per_clip == 0 {
        return Err(Error::InvalidArgument(format!("toy clip {}x{}x{} too small", cfg.frames_per_clip, cfg.height, cfg.width)));
    }
    Ok((0..cfg.n_clips).map(|i| render_clip(cfg, i)).collect())
}

fn to_rgb8(t: &Tensor<f32>) -> Result<image::RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("save_frame", format!("expected [3, h, w], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    }))
}

/// Writes an 8-bit PNG; values are clamped to `[0, 1]`.
pub fn save_frame(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    to_rgb8(frame)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_frame(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * h * w + i] = p[ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Loads every `.png` in `dir`, in lexicographic file-name order.
pub fn load_frames(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    let frames = paths.iter().map(|p| load_frame(p)).collect::<Result<Vec<_>>>()?;
    if let Some(bad) = frames.iter().position(|f| f.shape() != frames[0].shape()) {
        return Err(Error::shape(
            "load_frames",
            format!("{} is {:?}, first frame is {:?}", paths[bad].display(), frames[bad].shape(), frames[0].shape()),
        ));
    }
    Ok(frames)
}

pub fn frame_name(index: usize) -> String {
    format!("{index:05}.png")
}

pub fn save_frames(dir: &Path, frames: &[Tensor<f32>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        save_frame(&dir.join(frame_name(i)), f)?;
    }
    Ok(())
}

/// Classical flows between every pair of consecutive blurry frames, in
/// both directions.
pub fn write_clip_flows(dir: &Path, blurry: &[Tensor<f32>], params: &LkParams) -> Result<()> {
    fs::create_dir_all(dir)?;
    for i in 0..blurry.len().saturating_sub(1) {
        estimate_flow(&blurry[i], &blurry[i + 1], params)?.save(&dir.join(flow_file_name(i, i + 1)))?;
        estimate_flow(&blurry[i + 1], &blurry[i], params)?.save(&dir.join(flow_file_name(i + 1, i)))?;
    }
    Ok(())
}

/// Writes clips in the dataset layout plus the manifest.
pub fn write_dataset(root: &Path, clips: &[PairedClip]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut manifest = String::new();
    for clip in clips {
        save_frames(&root.join(&clip.id).join("blur"), &clip.blurry)?;
        save_frames(&root.join(&clip.id).join("sharp"), &clip.sharp)?;
        manifest.push_str(&format!("{},{}\n", clip.id, clip.blurry.len()));
    }
    fs::write(root.join(MANIFEST), manifest)?;
    Ok(())
}

/// Parses `id,count` manifest lines.
pub fn read_manifest(root: &Path) -> Result<Vec<(String, usize)>> {
    let path = root.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, count) = l
                .split_once(',')
                .ok_or_else(|| Error::Format { what: "manifest", detail: format!("line `{l}`") })?;
            let count = count
                .trim()
                .parse()
                .map_err(|_| Error::Format { what: "manifest", detail: format!("count in `{l}`") })?;
            Ok((id.trim().to_string(), count))
        })
        .collect()
}

/// Loads every clip named in the manifest and checks its frame counts.
pub fn load_dataset(root: &Path) -> Result<Vec<PairedClip>> {
    read_manifest(root)?
        .into_iter()
        .map(|(id, count)| {
            let dir = root.join(&id);
            let blurry = load_frames(&dir.join("blur"))?;
            let sharp = load_frames(&dir.join("sharp"))?;
            if blurry.len() != count || sharp.len() != count {
                return Err(Error::Format {
                    what: "dataset",
                    detail: format!("clip {id}: manifest says {count}, found {} blurry / {} sharp", blurry.len(), sharp.len()),
                });
            }
            let flow_dir = Some(dir.join("flow")).filter(|d| d.is_dir());
            Ok(PairedClip { id, blurry, sharp, flow_dir })
        })
        .collect()
}

/// Every run of `frames` consecutive pairs. With `load_flows`, each window
/// carries the flows of its neighbouring pairs re-keyed to window positions.
pub fn windows(clip: &PairedClip, frames: usize, load_flows: bool) -> Result<Vec<BlurWindow>> {
    if frames % 2 == 0 || frames == 0 {
        return Err(Error::InvalidArgument(format!("window length must be odd, got {frames}")));
    }
    if clip.blurry.len() < frames {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for start in 0..=clip.blurry.len() - frames {
        let flows = if load_flows {
            let dir = clip
                .flow_dir
                .as_ref()
                .ok_or_else(|| Error::MissingFile(PathBuf::from(&clip.id).join("flow")))?;
            let mut table = FlowTable::default();
            for p in 0..frames {
                for q in [p.wrapping_sub(1), p + 1] {
                    if q < frames {
                        table.insert(p, q, FlowField::load(&dir.join(flow_file_name(start + p, start + q)))?);
                    }
                }
            }
            Some(table)
        } else {
            None
        };
        out.push(BlurWindow {
            blurry: clip.blurry[start..start + frames].to_vec(),
            sharp: clip.sharp[start..start + frames].to_vec(),
            clip_id: clip.id.clone(),
            center_index: start + frames / 2,
            flows,
        });
    }
    Ok(out)
}
