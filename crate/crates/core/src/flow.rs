//! Motion estimation and backward warping of neighbour frames.
//!
//! Flow fields map every pixel `(x, y)` of the reference frame to the
//! position `(x + u_x, y + u_y)` in the neighbour frame that holds the same
//! content, so `warp(neighbor, flow)` approximates the reference.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::{Graph, Taps, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Tag opening every Middlebury `.flo` file.
pub const FLO_TAG: f32 = 202021.25;

/// Dense per-pixel displacement in pixels, row-major `[height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u_x: Vec<f32>,
    pub u_y: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { width, height, u_x: vec![0.0; width * height], u_y: vec![0.0; width * height] }
    }

    pub fn uniform(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        Self { width, height, u_x: vec![dx; width * height], u_y: vec![dy; width * height] }
    }

    pub fn max_magnitude(&self) -> f32 {
        self.u_x.iter().zip(&self.u_y).map(|(x, y)| x.hypot(*y)).fold(0.0, f32::max)
    }

    fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.u_x.len() != n || self.u_y.len() != n {
            return Err(Error::shape("flow", format!("{}x{} field with {} / {} values", self.width, self.height, self.u_x.len(), self.u_y.len())));
        }
        if !self.u_x.iter().chain(&self.u_y).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(())
    }

    /// Middlebury `.flo` encoding: tag, width, height, interleaved `(u_x, u_y)`.
    pub fn write_flo<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        w.write_all(&FLO_TAG.to_le_bytes())?;
        w.write_all(&(self.width as i32).to_le_bytes())?;
        w.write_all(&(self.height as i32).to_le_bytes())?;
        for (x, y) in self.u_x.iter().zip(&self.u_y) {
            w.write_all(&x.to_le_bytes())?;
            w.write_all(&y.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_flo<R: Read>(mut r: R) -> Result<Self> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        if f32::from_le_bytes(b) != FLO_TAG {
            return Err(Error::Format { what: "flow file", detail: "bad tag".into() });
        }
        r.read_exact(&mut b)?;
        let width = i32::from_le_bytes(b);
        r.read_exact(&mut b)?;
        let height = i32::from_le_bytes(b);
        if width <= 0 || height <= 0 {
            return Err(Error::Format { what: "flow file", detail: format!("dimensions {width}x{height}") });
        }
        let (width, height) = (width as usize, height as usize);
        let mut payload = vec![0u8; width * height * 8];
        r.read_exact(&mut payload)?;
        let mut field = FlowField::zeros(height, width);
        for (i, px) in payload.chunks_exact(8).enumerate() {
            field.u_x[i] = f32::from_le_bytes([px[0], px[1], px[2], px[3]]);
            field.u_y[i] = f32::from_le_bytes([px[4], px[5], px[6], px[7]]);
        }
        field.validate()?;
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_flo(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_flo(BufReader::new(File::open(path)?))
    }
}

/// Bilinear taps sampling an `h x w` plane at `(x + u_x, y + u_y)`, with the
/// sample position clamped to the image.
pub(crate) fn bilinear_taps<T: Scalar>(flow: &FlowField) -> Vec<Taps<T>> {
    let (h, w) = (flow.height, flow.width);
    let mut taps = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f64 + flow.u_x[i] as f64).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + flow.u_y[i] as f64).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
            let idx = |yy: usize, xx: usize| (yy * w + xx) as u32;
            taps.push([
                (idx(y0, x0), T::lit((1.0 - ax) * (1.0 - ay))),
                (idx(y0, x1), T::lit(ax * (1.0 - ay))),
                (idx(y1, x0), T::lit((1.0 - ax) * ay)),
                (idx(y1, x1), T::lit(ax * ay)),
            ]);
        }
    }
    taps
}

/// Differentiable (w.r.t. the image) backward warp of `images: [n, c, h, w]`
/// with one flow field per sample.
pub fn warp_var<T: Scalar>(g: &mut Graph<T>, images: Var, flows: &[&FlowField]) -> Result<Var> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || flows.len() != s[0] {
        return Err(Error::shape("warp", format!("images {s:?} with {} flow fields", flows.len())));
    }
    let mut taps = Vec::with_capacity(s[0] * s[2] * s[3]);
    for f in flows {
        f.validate()?;
        if f.height != s[2] || f.width != s[3] {
            return Err(Error::shape("warp", format!("flow {}x{} for image {}x{}", f.height, f.width, s[2], s[3])));
        }
        taps.extend(bilinear_taps::<T>(f));
    }
    g.gather_bilinear(images, taps)
}

/// Backward warp of one `[c, h, w]` image.
pub fn warp<T: Scalar>(image: &Tensor<T>, flow: &FlowField) -> Result<Tensor<T>> {
    let s = image.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("warp", format!("image {s:?}")));
    }
    let mut g = Graph::new();
    let x = g.constant(image.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let y = warp_var(&mut g, x, &[flow])?;
    g.value(y).clone().reshape(&s)
}

/// Rec. 601 luma of a `[3, h, w]` image.
pub fn luma<T: Scalar>(image: &Tensor<T>) -> Result<Vec<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("luma", format!("expected [3, h, w], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = image.data();
    Ok((0..plane)
        .map(|i| (0.299 * d[i].as_f64() + 0.587 * d[plane + i].as_f64() + 0.114 * d[2 * plane + i].as_f64()) as f32)
        .collect())
}

/// Pyramidal Lucas–Kanade settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LkParams {
    /// Pyramid levels including full resolution.
    pub levels: usize,
    /// Gauss–Newton iterations per level.
    pub iters: usize,
    /// Odd side of the square integration window.
    pub window: usize,
}

impl Default for LkParams {
    fn default() -> Self {
        Self { levels: 3, iters: 5, window: 7 }
    }
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn sample(&self, x: f32, y: f32) -> f32 {
        let sx = x.clamp(0.0, (self.w - 1) as f32);
        let sy = y.clamp(0.0, (self.h - 1) as f32);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.w - 1), (y0 + 1).min(self.h - 1));
        let (ax, ay) = (sx - x0 as f32, sy - y0 as f32);
        let r0 = self.v[y0 * self.w + x0] * (1.0 - ax) + self.v[y0 * self.w + x1] * ax;
        let r1 = self.v[y1 * self.w + x0] * (1.0 - ax) + self.v[y1 * self.w + x1] * ax;
        r0 * (1.0 - ay) + r1 * ay
    }

    /// Binomial `[1 4 6 4 1] / 16` blur in both directions, then every
    /// second sample.
    fn downsample(&self) -> Plane {
        const K: [f32; 5] = [0.0625, 0.25, 0.375, 0.25, 0.0625];
        let mut rows = Vec::with_capacity(self.v.len());
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                rows.push((0..5).map(|k| K[k] * self.at(x + k as isize - 2, y)).sum::<f32>());
            }
        }
        let rows = Plane { w: self.w, h: self.h, v: rows };
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (2 * x as isize, 2 * y as isize);
                v.push((0..5).map(|k| K[k] * rows.at(sx, sy + k as isize - 2)).sum::<f32>());
            }
        }
        Plane { w, h, v }
    }

    /// Central-difference gradients with clamped borders.
    fn gradients(&self) -> (Vec<f32>, Vec<f32>) {
        let mut gx = Vec::with_capacity(self.v.len());
        let mut gy = Vec::with_capacity(self.v.len());
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                gx.push(0.5 * (self.at(x + 1, y) - self.at(x - 1, y)));
                gy.push(0.5 * (self.at(x, y + 1) - self.at(x, y - 1)));
            }
        }
        (gx, gy)
    }
}

/// Sum over a `(2r+1)^2` window truncated at the borders.
fn box_sum(v: &[f32], w: usize, h: usize, r: usize) -> Vec<f32> {
    let mut rows = vec![0.0f32; v.len()];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = v[y * w + lo..=y * w + hi].iter().sum();
        }
    }
    let mut out = vec![0.0f32; v.len()];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).sum();
        }
    }
    out
}

fn upsample_flow(ux: &[f32], uy: &[f32], from: (usize, usize), to: (usize, usize)) -> (Vec<f32>, Vec<f32>) {
    let (fw, fh) = from;
    let (tw, th) = to;
    let px = Plane { w: fw, h: fh, v: ux.to_vec() };
    let py = Plane { w: fw, h: fh, v: uy.to_vec() };
    let (sx, sy) = (fw as f32 / tw as f32, fh as f32 / th as f32);
    let mut ox = Vec::with_capacity(tw * th);
    let mut oy = Vec::with_capacity(tw * th);
    for y in 0..th {
        for x in 0..tw {
            let cx = (x as f32 + 0.5) * sx - 0.5;
            let cy = (y as f32 + 0.5) * sy - 0.5;
            ox.push(px.sample(cx, cy) / sx);
            oy.push(py.sample(cx, cy) / sy);
        }
    }
    (ox, oy)
}

/// Dense coarse-to-fine Lucas–Kanade flow from `reference` to `neighbor`
/// (both `[3, h, w]`), computed on luma.
///
/// Constant images have zero gradients everywhere and produce exactly zero
/// flow; so do identical inputs.
pub fn estimate_flow<T: Scalar>(reference: &Tensor<T>, neighbor: &Tensor<T>, params: &LkParams) -> Result<FlowField> {
    if reference.shape() != neighbor.shape() {
        return Err(Error::shape("estimate_flow", format!("{:?} vs {:?}", reference.shape(), neighbor.shape())));
    }
    if params.window % 2 == 0 || params.levels == 0 {
        return Err(Error::InvalidArgument(format!("flow window must be odd and levels >= 1, got {params:?}")));
    }
    let (h, w) = (reference.shape()[1], reference.shape()[2]);
    if h < 1 << params.levels || w < 1 << params.levels {
        return Err(Error::InvalidArgument(format!("{h}x{w} frame too small for {} flow levels", params.levels)));
    }
    let mut refs = vec![Plane { w, h, v: luma(reference)? }];
    let mut nbrs = vec![Plane { w, h, v: luma(neighbor)? }];
    for _ in 1..params.levels {
        let (r, n) = (refs.last().unwrap().downsample(), nbrs.last().unwrap().downsample());
        refs.push(r);
        nbrs.push(n);
    }

    let radius = params.window / 2;
    let area = (params.window * params.window) as f32;
    let coarsest = refs.last().unwrap();
    let mut ux = vec![0.0f32; coarsest.w * coarsest.h];
    let mut uy = ux.clone();
    let mut dims = (coarsest.w, coarsest.h);
    for level in (0..params.levels).rev() {
        let (r, n) = (&refs[level], &nbrs[level]);
        if dims != (r.w, r.h) {
            (ux, uy) = upsample_flow(&ux, &uy, dims, (r.w, r.h));
            dims = (r.w, r.h);
        }
        // Each pixel warps its own window with its own flow against fixed
        // reference gradients, so a bad estimate cannot leak into neighbours.
        let (gx, gy) = r.gradients();
        let products: Vec<Vec<f32>> = [(&gx, &gx), (&gx, &gy), (&gy, &gy)]
            .into_iter()
            .map(|(p, q)| p.iter().zip(q.iter()).map(|(a, b)| a * b).collect())
            .collect();
        let [sxx, sxy, syy] = [0, 1, 2].map(|k| box_sum(&products[k], r.w, r.h, radius));
        let cap = radius as f32;
        for y in 0..r.h {
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(r.h - 1));
            for x in 0..r.w {
                let i = y * r.w + x;
                let (a, b, d) = (sxx[i] / area, sxy[i] / area, syy[i] / area);
                let det = a * d - b * b;
                let min_eig = 0.5 * (a + d - ((a - d) * (a - d) + 4.0 * b * b).sqrt());
                if min_eig <= 1e-6 || det <= 1e-12 {
                    continue;
                }
                let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(r.w - 1));
                for _ in 0..params.iters {
                    let (mut et, mut ft) = (0.0f32, 0.0f32);
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            let j = yy * r.w + xx;
                            let dt = n.sample(xx as f32 + ux[i], yy as f32 + uy[i]) - r.v[j];
                            et += gx[j] * dt;
                            ft += gy[j] * dt;
                        }
                    }
                    let (et, ft) = (et / area, ft / area);
                    let du = (-(d * et - b * ft) / det).clamp(-cap, cap);
                    let dv = (-(a * ft - b * et) / det).clamp(-cap, cap);
                    ux[i] += du;
                    uy[i] += dv;
                    if du * du + dv * dv < 1e-6 {
                        break;
                    }
                }
            }
        }
    }
    let field = FlowField { width: w, height: h, u_x: ux, u_y: uy };
    field.validate()?;
    Ok(field)
}

/// Flows loaded from disk, keyed by `(reference, neighbor)` frame indices.
#[derive(Clone, Debug, Default)]
pub struct FlowTable {
    flows: BTreeMap<(usize, usize), FlowField>,
}

impl FlowTable {
    pub fn insert(&mut self, reference: usize, neighbor: usize, flow: FlowField) {
        self.flows.insert((reference, neighbor), flow);
    }

    pub fn get(&self, reference: usize, neighbor: usize) -> Result<&FlowField> {
        self.flows.get(&(reference, neighbor)).ok_or_else(|| {
            Error::MissingFile(PathBuf::from(flow_file_name(reference, neighbor)))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &FlowField)> {
        self.flows.iter().map(|(&k, v)| (k, v))
    }

    /// Loads `<dir>/<ref>_<nbr>.flo` for every pair, failing on the first
    /// missing file.
    pub fn load(dir: &Path, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut table = FlowTable::default();
        for (r, n) in pairs {
            table.insert(r, n, FlowField::load(&dir.join(flow_file_name(r, n)))?);
        }
        Ok(table)
    }
}

pub fn flow_file_name(reference: usize, neighbor: usize) -> String {
    format!("{reference:05}_{neighbor:05}.flo")
}

/// Alignment mode for the neighbour frames of a window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AlignMode {
    Off,
    #[default]
    Classical,
    File,
}

impl std::str::FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(AlignMode::Off),
            "classical" => Ok(AlignMode::Classical),
            "file" => Ok(AlignMode::File),
            other => Err(Error::Config(format!("unknown align mode `{other}` (off|classical|file)"))),
        }
    }
}

impl std::fmt::Display for AlignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AlignMode::Off => "off",
            AlignMode::Classical => "classical",
            AlignMode::File => "file",
        })
    }
}

/// How a window's neighbours are brought onto the reference.
#[derive(Clone, Debug)]
pub enum Alignment {
    Off,
    Classical(LkParams),
    /// One table per batch sample; frame indices are window positions.
    File(Vec<FlowTable>),
}

impl Alignment {
    pub fn mode(&self) -> AlignMode {
        match self {
            Alignment::Off => AlignMode::Off,
            Alignment::Classical(_) => AlignMode::Classical,
            Alignment::File(_) => AlignMode::File,
        }
    }
}

/// Warps the outer frames of `frames: [prev, ref, next]` (each `[n, 3, h, w]`)
/// towards the middle one. `positions` are the frames' window indices, used
/// to look up file flows. Flow is estimated on values and not differentiated.
pub fn align_sequence<T: Scalar>(
    g: &mut Graph<T>,
    frames: [Var; 3],
    positions: [usize; 3],
    alignment: &Alignment,
) -> Result<[Var; 3]> {
    let [prev, reference, next] = frames;
    let s = g.shape(reference).to_vec();
    if g.shape(prev) != s.as_slice() || g.shape(next) != s.as_slice() || s.len() != 4 {
        return Err(Error::shape("align_sequence", format!("{:?} / {:?} / {:?}", g.shape(prev), s, g.shape(next))));
    }
    let n = s[0];
    let mut out = [prev, reference, next];
    for (slot, (&nbr, &pos)) in [0usize, 2].iter().zip([prev, next].iter().zip([positions[0], positions[2]].iter())) {
        let flows: Vec<FlowField> = match alignment {
            Alignment::Off => return Ok(frames),
            Alignment::Classical(params) => (0..n)
                .map(|i| {
                    let r = g.value(reference).index_outer(i)?;
                    let b = g.value(nbr).index_outer(i)?;
                    estimate_flow(&r, &b, params)
                })
                .collect::<Result<_>>()?,
            Alignment::File(tables) => {
                if tables.len() != n {
                    return Err(Error::shape("align_sequence", format!("{} flow tables for batch {n}", tables.len())));
                }
                tables.iter().map(|t| t.get(positions[1], pos).cloned()).collect::<Result<_>>()?
            }
        };
        let refs: Vec<&FlowField> = flows.iter().collect();
        out[*slot] = warp_var(g, nbr, &refs)?;
    }
    Ok(out)
}

/// [`align_sequence`] on plain `[3, h, w]` frames.
pub fn align_frames<T: Scalar>(frames: &[Tensor<T>; 3], alignment: &Alignment) -> Result<[Tensor<T>; 3]> {
    let mut g = Graph::new();
    let vars = frames.clone().map(|f| {
        let s = f.shape().to_vec();
        f.reshape(&[1, s[0], s[1], s[2]]).map(|t| g.constant(t))
    });
    let [a, b, c] = vars;
    let out = align_sequence(&mut g, [a?, b?, c?], [0, 1, 2], alignment)?;
    let unbatch = |v: Var| g.value(v).index_outer(0);
    Ok([unbatch(out[0])?, unbatch(out[1])?, unbatch(out[2])?])
}
