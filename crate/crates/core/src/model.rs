//! Encoder, reconstruction decoder, temporal discriminator and losses.
//!
//! Parameter names:
//!
//! ```text
//! enc.head, enc.s{0,1,2}.rb{0..5}.{c1,c2}, enc.down{1,2}
//! agg.phi.{prev,self,next}.{1..=L}
//! dec.reduce, dec.q.rb{0..5}, dec.up{1,2}, dec.h.rb{0,1}, dec.f.rb{0,1}, dec.out
//! disc.c{1..4}, disc.head
//! ```
//!
//! each with `.w` and `.b` entries.

use std::collections::BTreeMap;

use rand::Rng;

use crate::aggregate::{aggregate_pair, fuse_three, init_refinement};
use crate::autodiff::{Graph, Var};
use crate::corrvol::VolumeKind;
use crate::error::{Error, Result};
use crate::flow::{align_sequence, AlignMode, Alignment};
use crate::params::{he_normal, ParamStore, ParamVars};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const RESBLOCKS_PER_SCALE: usize = 5;
pub const DECODER_BLOCKS_PER_UPSAMPLE: usize = 2;
/// Guard inside every logarithm of the adversarial loss.
pub const LOG_EPS: f64 = 1e-8;
/// Temporal frames seen by the discriminator.
pub const DISC_FRAMES: usize = 3;
const DISC_WIDTHS: [usize; 5] = [3, 8, 16, 16, 16];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeblurConfig {
    pub pyramid_l: usize,
    pub channels: usize,
    pub align: AlignMode,
    pub use_volumes: bool,
    pub stages: usize,
}

impl Default for DeblurConfig {
    fn default() -> Self {
        Self { pyramid_l: 2, channels: 16, align: AlignMode::Classical, use_volumes: true, stages: 2 }
    }
}

impl DeblurConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_l > 4 {
            return Err(Error::Config(format!("pyramid_L must be in [0, 4], got {}", self.pyramid_l)));
        }
        if !(1..=3).contains(&self.stages) {
            return Err(Error::Config(format!("stages must be in [1, 3], got {}", self.stages)));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        Ok(())
    }

    /// Volumes are built only when enabled and the pyramid is non-empty.
    pub fn volumes_active(&self) -> bool {
        self.use_volumes && self.pyramid_l > 0
    }

    /// Channels of the map handed to the decoder.
    pub fn fused_channels(&self) -> usize {
        if self.volumes_active() {
            3 * self.pyramid_l * self.channels
        } else {
            3 * self.channels
        }
    }

    /// Encoder widths at full, half and quarter resolution.
    pub fn widths(&self) -> [usize; 3] {
        let c = self.channels;
        [(c / 4).max(1), (c / 2).max(1), c]
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        4 << self.pyramid_l
    }

    /// Frames per training window.
    pub fn window_frames(&self) -> usize {
        2 * self.stages + 1
    }

    pub fn check_frame_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::InvalidArgument(format!("frame {h}x{w} must be a positive multiple of {m}")));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("pyramid_L".into(), self.pyramid_l.to_string()),
            ("channels".into(), self.channels.to_string()),
            ("align".into(), self.align.to_string()),
            ("use_volumes".into(), self.use_volumes.to_string()),
            ("stages".into(), self.stages.to_string()),
        ]
    }

    /// Reads the keys written by [`DeblurConfig::to_pairs`]; absent keys keep
    /// their defaults.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(v) = map.get("pyramid_L") {
            cfg.pyramid_l = parse_value("pyramid_L", v)?;
        }
        if let Some(v) = map.get("channels") {
            cfg.channels = parse_value("channels", v)?;
        }
        if let Some(v) = map.get("align") {
            cfg.align = v.parse()?;
        }
        if let Some(v) = map.get("use_volumes") {
            cfg.use_volumes = parse_value("use_volumes", v)?;
        }
        if let Some(v) = map.get("stages") {
            cfg.stages = parse_value("stages", v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse_value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim().parse().map_err(|_| Error::Config(format!("invalid value `{v}` for {key}")))
}

fn insert_conv<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, shape: [usize; 4], gain: f64, rng: &mut R) {
    let fan_in = shape[1] * shape[2] * shape[3];
    store.insert(format!("{name}.w"), he_normal(&shape, fan_in, gain, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[shape[0]]));
}

fn insert_resblock<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) {
    insert_conv(store, &format!("{name}.c1"), [c, c, 3, 3], 1.0, rng);
    insert_conv(store, &format!("{name}.c2"), [c, c, 3, 3], 0.1, rng);
}

/// Fresh generator parameters (encoder, refinement convs, decoder). The
/// decoder's last conv is zero so the untrained model returns its
/// reference frame.
pub fn init_generator<T: Scalar, R: Rng>(cfg: &DeblurConfig, rng: &mut R) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let [c1, c2, c3] = cfg.widths();
    let mut p = ParamStore::new();
    insert_conv(&mut p, "enc.head", [c1, 3, 3, 3], 1.0, rng);
    for (s, c) in [c1, c2, c3].into_iter().enumerate() {
        for i in 0..RESBLOCKS_PER_SCALE {
            insert_resblock(&mut p, &format!("enc.s{s}.rb{i}"), c, rng);
        }
    }
    insert_conv(&mut p, "enc.down1", [c2, c1, 3, 3], 1.0, rng);
    insert_conv(&mut p, "enc.down2", [c3, c2, 3, 3], 1.0, rng);
    if cfg.volumes_active() {
        init_refinement(&mut p, c3, cfg.pyramid_l, rng);
    }
    insert_conv(&mut p, "dec.reduce", [c3, cfg.fused_channels(), 1, 1], 1.0, rng);
    for i in 0..RESBLOCKS_PER_SCALE {
        insert_resblock(&mut p, &format!("dec.q.rb{i}"), c3, rng);
    }
    // Transposed-conv weights are [c_in, c_out, k, k]; fan-in per output is c_in * 4.
    for (name, cin, cout) in [("dec.up1", c3, c2), ("dec.up2", c2, c1)] {
        p.insert(format!("{name}.w"), he_normal(&[cin, cout, 4, 4], cin * 4, 1.0, rng));
        p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }
    for i in 0..DECODER_BLOCKS_PER_UPSAMPLE {
        insert_resblock(&mut p, &format!("dec.h.rb{i}"), c2, rng);
        insert_resblock(&mut p, &format!("dec.f.rb{i}"), c1, rng);
    }
    p.insert("dec.out.w", Tensor::zeros(&[3, c1, 3, 3]));
    p.insert("dec.out.b", Tensor::zeros(&[3]));
    Ok(p)
}

/// Fresh discriminator parameters with a zero classifier head.
pub fn init_discriminator<T: Scalar, R: Rng>(rng: &mut R) -> ParamStore<T> {
    let mut p = ParamStore::new();
    for i in 0..4 {
        let (cin, cout) = (DISC_WIDTHS[i], DISC_WIDTHS[i + 1]);
        p.insert(format!("disc.c{}.w", i + 1), he_normal(&[cout, cin, 3, 3, 3], cin * 27, 1.0, rng));
        p.insert(format!("disc.c{}.b", i + 1), Tensor::zeros(&[cout]));
    }
    p.insert("disc.head.w", Tensor::zeros(&[1, DISC_WIDTHS[4], 1, 1]));
    p.insert("disc.head.b", Tensor::zeros(&[1]));
    p
}

fn conv<T: Scalar>(g: &mut Graph<T>, x: Var, p: &ParamVars, name: &str, stride: usize, pad: usize) -> Result<Var> {
    let (w, b) = (p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?);
    g.conv2d(x, w, b, stride, pad)
}

fn resblock<T: Scalar>(g: &mut Graph<T>, x: Var, p: &ParamVars, name: &str) -> Result<Var> {
    let h = conv(g, x, p, &format!("{name}.c1"), 1, 1)?;
    let h = g.leaky_relu(h, T::lit(LEAKY_SLOPE))?;
    let h = conv(g, h, p, &format!("{name}.c2"), 1, 1)?;
    g.add(x, h)
}

fn resblocks<T: Scalar>(g: &mut Graph<T>, mut x: Var, p: &ParamVars, prefix: &str, count: usize) -> Result<Var> {
    for i in 0..count {
        x = resblock(g, x, p, &format!("{prefix}.rb{i}"))?;
    }
    Ok(x)
}

/// Encoder output with the reference-resolution activations the decoder
/// adds back in.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[n, C, h/4, w/4]`.
    pub features: Var,
    pub skip_full: Var,
    pub skip_half: Var,
}

/// Maps `[n, 3, h, w]` frames to `[n, C, h/4, w/4]` features.
pub fn encode<T: Scalar>(g: &mut Graph<T>, frame: Var, params: &ParamVars) -> Result<Encoded> {
    let s = g.shape(frame).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] == 0 || s[3] == 0 {
        return Err(Error::shape("encode", format!("expected [n, 3, 4a, 4b], got {s:?}")));
    }
    let slope = T::lit(LEAKY_SLOPE);
    let x = conv(g, frame, params, "enc.head", 1, 1)?;
    let x = g.leaky_relu(x, slope)?;
    let skip_full = resblocks(g, x, params, "enc.s0", RESBLOCKS_PER_SCALE)?;
    let x = conv(g, skip_full, params, "enc.down1", 2, 1)?;
    let x = g.leaky_relu(x, slope)?;
    let skip_half = resblocks(g, x, params, "enc.s1", RESBLOCKS_PER_SCALE)?;
    let x = conv(g, skip_half, params, "enc.down2", 2, 1)?;
    let x = g.leaky_relu(x, slope)?;
    let features = resblocks(g, x, params, "enc.s2", RESBLOCKS_PER_SCALE)?;
    Ok(Encoded { features, skip_full, skip_half })
}

/// Decodes the fused map into a residual added to `ref_frame`. Output is not
/// clamped.
pub fn reconstruct<T: Scalar>(
    g: &mut Graph<T>,
    fused: Var,
    ref_frame: Var,
    reference: &Encoded,
    params: &ParamVars,
) -> Result<Var> {
    let slope = T::lit(LEAKY_SLOPE);
    let x = conv(g, fused, params, "dec.reduce", 1, 0)?;
    let x = resblocks(g, x, params, "dec.q", RESBLOCKS_PER_SCALE)?;
    let mut x = x;
    for (up, skip, blocks) in [("dec.up1", reference.skip_half, "dec.h"), ("dec.up2", reference.skip_full, "dec.f")] {
        let (w, b) = (params.get(&format!("{up}.w"))?, params.get(&format!("{up}.b"))?);
        x = g.conv_transpose2d(x, w, b, 2, 1)?;
        x = g.leaky_relu(x, slope)?;
        x = g.add(x, skip)?;
        x = resblocks(g, x, params, blocks, DECODER_BLOCKS_PER_UPSAMPLE)?;
    }
    let residual = conv(g, x, params, "dec.out", 1, 1)?;
    g.add(ref_frame, residual)
}

/// Restores the middle of `frames = [prev, ref, next]` (each `[n, 3, h, w]`).
/// `positions` are the frames' indices in the input window.
pub fn deblur_step<T: Scalar>(
    g: &mut Graph<T>,
    frames: [Var; 3],
    positions: [usize; 3],
    cfg: &DeblurConfig,
    alignment: &Alignment,
    params: &ParamVars,
) -> Result<Var> {
    let s = g.shape(frames[1]).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("deblur_step", format!("frame {s:?}")));
    }
    cfg.check_frame_size(s[2], s[3])?;
    if alignment.mode() != cfg.align {
        return Err(Error::Config(format!("alignment {} does not match configured {}", alignment.mode(), cfg.align)));
    }
    let [prev, reference, next] = align_sequence(g, frames, positions, alignment)?;
    let e_prev = encode(g, prev, params)?;
    let e_ref = encode(g, reference, params)?;
    let e_next = encode(g, next, params)?;
    let fused = if cfg.volumes_active() {
        let l = cfg.pyramid_l;
        let a_prev = aggregate_pair(g, e_ref.features, e_prev.features, l, params, VolumeKind::InterPrev)?;
        let a_self = aggregate_pair(g, e_ref.features, e_ref.features, l, params, VolumeKind::Intra)?;
        let a_next = aggregate_pair(g, e_ref.features, e_next.features, l, params, VolumeKind::InterNext)?;
        fuse_three(g, [a_prev, a_self, a_next])?
    } else {
        g.concat(&[e_prev.features, e_ref.features, e_next.features], 1)?
    };
    reconstruct(g, fused, reference, &e_ref, params)
}

/// Probability `[n]` that each triplet `[n, 3, h, w] x 3` is a sharp sequence.
pub fn discriminate<T: Scalar>(g: &mut Graph<T>, seq: &[Var], params: &ParamVars) -> Result<Var> {
    if seq.len() != DISC_FRAMES {
        return Err(Error::shape("discriminate", format!("{} frames, expected {DISC_FRAMES}", seq.len())));
    }
    let s = g.shape(seq[0]).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("discriminate", format!("frame {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let mut parts = Vec::with_capacity(DISC_FRAMES);
    for &f in seq {
        parts.push(g.reshape(f, &[n, 3, 1, h, w])?);
    }
    let mut x = g.concat(&parts, 2)?;
    let slope = T::lit(LEAKY_SLOPE);
    for i in 1..=4 {
        let (cw, cb) = (params.get(&format!("disc.c{i}.w"))?, params.get(&format!("disc.c{i}.b"))?);
        x = g.conv3d(x, cw, cb, [1, 2, 2], [1, 1, 1])?;
        x = g.leaky_relu(x, slope)?;
    }
    let pooled = g.mean_axes(x, &[2, 3, 4])?;
    let pooled = g.reshape(pooled, &[n, DISC_WIDTHS[4], 1, 1])?;
    let (hw, hb) = (params.get("disc.head.w")?, params.get("disc.head.b")?);
    let logit = g.conv2d(pooled, hw, hb, 1, 0)?;
    let logit = g.reshape(logit, &[n])?;
    g.sigmoid(logit)
}

/// `-(ln D(S) + ln(1 - D(R)))` averaged over the batch.
pub fn disc_loss<T: Scalar>(g: &mut Graph<T>, d_sharp: Var, d_restored: Var) -> Result<Var> {
    let eps = T::lit(LOG_EPS);
    let real = g.ln(d_sharp, eps)?;
    let one_minus = g.affine(d_restored, -T::one(), T::one())?;
    let fake = g.ln(one_minus, eps)?;
    let both = g.add(real, fake)?;
    let m = g.mean(both)?;
    g.scale(m, -T::one())
}

/// Non-saturating generator term `-ln D(R)` averaged over the batch.
pub fn gen_loss<T: Scalar>(g: &mut Graph<T>, d_restored: Var) -> Result<Var> {
    let l = g.ln(d_restored, T::lit(LOG_EPS))?;
    let m = g.mean(l)?;
    g.scale(m, -T::one())
}

/// Discriminator and generator losses for scalar probabilities.
pub fn adv_loss(d_sharp: f64, d_restored: f64) -> (f64, f64) {
    let loss_d = -((d_sharp + LOG_EPS).ln() + (1.0 - d_restored + LOG_EPS).ln());
    let loss_g = -(d_restored + LOG_EPS).ln();
    (loss_d, loss_g)
}

/// Mean absolute error averaged with equal weight over every
/// `(restored, sharp)` pair.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no supervised outputs".into()));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for &(r, s) in pairs {
        let d = g.sub(r, s)?;
        let a = g.abs(d)?;
        let m = g.mean(a)?;
        terms.push(m);
    }
    let all = if terms.len() == 1 { terms[0] } else { g.concat(&terms, 0)? };
    g.mean(all)
}

/// `l1 + alpha * adv_g`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, l1: Var, adv_g: Option<Var>, alpha: f64) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    match adv_g {
        Some(adv) if alpha > 0.0 => {
            let a = g.scale(adv, T::lit(alpha))?;
            g.add(l1, a)
        }
        _ => Ok(l1),
    }
}
