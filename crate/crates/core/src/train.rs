//! Progressive multi-stage training with an adversarial temporal
//! discriminator.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::BlurWindow;
use crate::error::{Error, Result};
use crate::flow::{AlignMode, Alignment, FlowField, FlowTable, LkParams};
use crate::model::{
    deblur_step, disc_loss, discriminate, gen_loss, init_discriminator, init_generator, l1_loss, parse_value,
    total_loss, DeblurConfig,
};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: DeblurConfig,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub alpha: f64,
    pub patch: usize,
    pub batch: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound for the generator; off when `None`.
    pub grad_clip: Option<f64>,
    pub lk: LkParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: DeblurConfig::default(),
            lr: 1e-4,
            lr_halve_every: 200,
            alpha: 0.1,
            patch: 64,
            batch: 1,
            epochs: 1,
            max_steps: None,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            lk: LkParams::default(),
        }
    }
}

/// Suggested global-norm bound when clipping is enabled.
pub const DEFAULT_GRAD_CLIP: f64 = 10.0;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let m = self.model.size_multiple();
        if self.patch == 0 || self.patch % m != 0 {
            return Err(Error::Config(format!("patch {} must be a positive multiple of {m}", self.patch)));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be a non-negative number, got {}", self.alpha)));
        }
        if self.alpha > 0.0 && self.model.stages < 2 {
            return Err(Error::Config("the adversarial term needs stages >= 2 to form a restored triplet".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 || self.lr_halve_every == 0 {
            return Err(Error::Config("batch, epochs and lr_halve_every must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.lk.window % 2 == 0 || self.lk.levels == 0 {
            return Err(Error::Config(format!("invalid flow settings {:?}", self.lk)));
        }
        Ok(())
    }

    /// `lr * 2^-floor(epoch / lr_halve_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halve_every) as i32)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = self.model.to_pairs();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        out.extend([
            ("lr".into(), self.lr.to_string()),
            ("lr_halve_every".into(), self.lr_halve_every.to_string()),
            ("alpha".into(), self.alpha.to_string()),
            ("patch".into(), self.patch.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("max_steps".into(), opt(self.max_steps.map(|v| v.to_string()))),
            ("seed".into(), self.seed.to_string()),
            ("beta1".into(), self.beta1.to_string()),
            ("beta2".into(), self.beta2.to_string()),
            ("eps".into(), self.eps.to_string()),
            ("grad_clip".into(), opt(self.grad_clip.map(|v| v.to_string()))),
            ("flow_levels".into(), self.lk.levels.to_string()),
            ("flow_iters".into(), self.lk.iters.to_string()),
            ("flow_window".into(), self.lk.window.to_string()),
        ]);
        out
    }

    /// Overrides defaults with any keys present in `map`.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self { model: DeblurConfig::from_map(map)?, ..Self::default() };
        let optional = |k: &str, v: &str| -> Result<Option<String>> {
            Ok(if v.trim() == "none" { None } else { Some(parse_value::<String>(k, v)?) })
        };
        for (k, v) in map {
            match k.as_str() {
                "lr" => c.lr = parse_value(k, v)?,
                "lr_halve_every" => c.lr_halve_every = parse_value(k, v)?,
                "alpha" => c.alpha = parse_value(k, v)?,
                "patch" => c.patch = parse_value(k, v)?,
                "batch" => c.batch = parse_value(k, v)?,
                "epochs" => c.epochs = parse_value(k, v)?,
                "max_steps" => c.max_steps = optional(k, v)?.map(|s| parse_value(k, &s)).transpose()?,
                "seed" => c.seed = parse_value(k, v)?,
                "beta1" => c.beta1 = parse_value(k, v)?,
                "beta2" => c.beta2 = parse_value(k, v)?,
                "eps" => c.eps = parse_value(k, v)?,
                "grad_clip" => c.grad_clip = optional(k, v)?.map(|s| parse_value(k, &s)).transpose()?,
                "flow_levels" => c.lk.levels = parse_value(k, v)?,
                "flow_iters" => c.lk.iters = parse_value(k, v)?,
                "flow_window" => c.lk.window = parse_value(k, v)?,
                _ => {}
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Outputs of every stage. Stage `s` (1-based) output `j` restores window
/// position `s + j`.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub stages: Vec<Vec<Var>>,
}

impl StageOutputs {
    /// The deepest stage's middle-frame restoration.
    pub fn final_output(&self) -> Var {
        self.stages.last().expect("at least one stage")[0]
    }

    /// `(restored, window position)` for every stage output.
    pub fn supervised(&self) -> Vec<(Var, usize)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, outs)| outs.iter().enumerate().map(move |(j, &v)| (v, s + 1 + j)))
            .collect()
    }

    /// Deepest available restoration of the frames before, at and after the
    /// window centre.
    pub fn restored_triplet(&self) -> Result<[Var; 3]> {
        let s = self.stages.len();
        if s < 2 {
            return Err(Error::Config("a restored triplet needs at least two stages".into()));
        }
        let prev_stage = &self.stages[s - 2];
        Ok([prev_stage[0], self.final_output(), prev_stage[2]])
    }
}

/// Runs `stages` rounds of [`deblur_step`] with shared parameters over
/// `2 * stages + 1` frames `[n, 3, h, w]`.
pub fn progressive_forward<T: Scalar>(
    g: &mut Graph<T>,
    frames: &[Var],
    cfg: &DeblurConfig,
    alignment: &Alignment,
    params: &crate::params::ParamVars,
) -> Result<StageOutputs> {
    if frames.len() != cfg.window_frames() {
        return Err(Error::InvalidArgument(format!(
            "{} stages need {} frames, got {}",
            cfg.stages,
            cfg.window_frames(),
            frames.len()
        )));
    }
    let mut stages = Vec::with_capacity(cfg.stages);
    let mut current: Vec<Var> = frames.to_vec();
    for s in 0..cfg.stages {
        let mut outs = Vec::with_capacity(current.len() - 2);
        for j in 0..current.len() - 2 {
            let pos = [s + j, s + j + 1, s + j + 2];
            outs.push(deblur_step(g, [current[j], current[j + 1], current[j + 2]], pos, cfg, alignment, params)?);
        }
        stages.push(outs.clone());
        current = outs;
    }
    Ok(StageOutputs { stages })
}

/// Adam with bias correction over every entry of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update from the stored gradients; entries without a
    /// gradient are left untouched.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let Some(grad) = p.grad.take() else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = grad[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w = T::lit(w.as_f64() - update);
            }
            p.check_finite(name)?;
        }
        Ok(())
    }
}

/// Scales all stored gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.iter().map(|v| v.as_f64().powi(2)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// A flip followed by `rot90` quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: Flip,
    pub rot90: u8,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { flip: Flip::None, rot90: 0 };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let flip = [Flip::None, Flip::Horizontal, Flip::Vertical][rng.random_range(0..3)];
        Self { flip, rot90: rng.random_range(0..4) }
    }

    /// Source coordinates and vector transform of each elementary step.
    fn steps(&self) -> Vec<Step> {
        let mut s = match self.flip {
            Flip::None => vec![],
            Flip::Horizontal => vec![Step::FlipH],
            Flip::Vertical => vec![Step::FlipV],
        };
        match self.rot90 % 4 {
            1 => s.push(Step::Rot90),
            2 => s.push(Step::Rot180),
            3 => s.extend([Step::Rot180, Step::Rot90]),
            _ => {}
        }
        s
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.rot90 % 2 == 1 && h != w {
            return Err(Error::InvalidArgument(format!("quarter-turn rotation of a non-square {h}x{w} patch")));
        }
        Ok(())
    }

    pub fn apply_image<T: Scalar>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let s = img.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape("augment", format!("image {s:?}")));
        }
        self.check(s[1], s[2])?;
        let mut out = img.clone();
        for step in self.steps() {
            let (h, w) = (s[1], s[2]);
            let src = out.data().to_vec();
            let plane = h * w;
            for c in 0..s[0] {
                for y in 0..h {
                    for x in 0..w {
                        let (sx, sy) = step.source(x, y, h, w);
                        out.data_mut()[c * plane + y * w + x] = src[c * plane + sy * w + sx];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn apply_flow(&self, f: &FlowField) -> Result<FlowField> {
        self.check(f.height, f.width)?;
        let mut out = f.clone();
        for step in self.steps() {
            let (h, w) = (out.height, out.width);
            let (ux, uy) = (out.u_x.clone(), out.u_y.clone());
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = step.source(x, y, h, w);
                    let (a, b) = step.vector(ux[sy * w + sx], uy[sy * w + sx]);
                    out.u_x[y * w + x] = a;
                    out.u_y[y * w + x] = b;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
enum Step {
    FlipH,
    FlipV,
    Rot90,
    Rot180,
}

impl Step {
    fn source(self, x: usize, y: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Step::FlipH => (w - 1 - x, y),
            Step::FlipV => (x, h - 1 - y),
            Step::Rot90 => (w - 1 - y, x),
            Step::Rot180 => (w - 1 - x, h - 1 - y),
        }
    }

    fn vector(self, ux: f32, uy: f32) -> (f32, f32) {
        match self {
            Step::FlipH => (-ux, uy),
            Step::FlipV => (ux, -uy),
            Step::Rot90 => (uy, -ux),
            Step::Rot180 => (-ux, -uy),
        }
    }
}

/// Applies one augmentation identically to every frame, target and flow of
/// a window.
pub fn augment(window: &BlurWindow, aug: Augmentation) -> Result<BlurWindow> {
    let img = |v: &[Tensor<f32>]| v.iter().map(|t| aug.apply_image(t)).collect::<Result<Vec<_>>>();
    let flows = match &window.flows {
        Some(t) => Some(map_flows(t, |f| aug.apply_flow(f))?),
        None => None,
    };
    Ok(BlurWindow { blurry: img(&window.blurry)?, sharp: img(&window.sharp)?, flows, ..window.clone() })
}

fn map_flows(t: &FlowTable, f: impl Fn(&FlowField) -> Result<FlowField>) -> Result<FlowTable> {
    let mut out = FlowTable::default();
    for ((r, n), flow) in t.iter() {
        out.insert(r, n, f(flow)?);
    }
    Ok(out)
}

/// The same `size x size` crop at `(y0, x0)` of every frame, target and flow.
pub fn crop(window: &BlurWindow, y0: usize, x0: usize, size: usize) -> Result<BlurWindow> {
    let s = window.blurry[0].shape().to_vec();
    if y0 + size > s[1] || x0 + size > s[2] {
        return Err(Error::InvalidArgument(format!("crop {size} at ({y0}, {x0}) exceeds {}x{}", s[1], s[2])));
    }
    let cut = |t: &Tensor<f32>| {
        Tensor::from_fn(&[s[0], size, size], |i| t.get(&[i / (size * size), y0 + (i / size) % size, x0 + i % size]))
    };
    let flows = match &window.flows {
        Some(t) => Some(map_flows(t, |f| {
            let mut c = FlowField::zeros(size, size);
            for y in 0..size {
                for x in 0..size {
                    c.u_x[y * size + x] = f.u_x[(y0 + y) * f.width + x0 + x];
                    c.u_y[y * size + x] = f.u_y[(y0 + y) * f.width + x0 + x];
                }
            }
            Ok(c)
        })?),
        None => None,
    };
    Ok(BlurWindow {
        blurry: window.blurry.iter().map(cut).collect(),
        sharp: window.sharp.iter().map(cut).collect(),
        flows,
        ..window.clone()
    })
}

/// Values reported for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub l1: f64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

pub const METRICS_HEADER: &str = "step,epoch,l1,loss_G,loss_D,lr,wall_ms";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:e},{}",
            self.step, self.epoch, self.l1, self.loss_g, self.loss_d, self.lr, self.wall_ms
        )
    }
}

fn alignment_for(cfg: &TrainConfig, windows: &[&BlurWindow]) -> Result<Alignment> {
    Ok(match cfg.model.align {
        AlignMode::Off => Alignment::Off,
        AlignMode::Classical => Alignment::Classical(cfg.lk),
        AlignMode::File => Alignment::File(
            windows
                .iter()
                .map(|w| {
                    w.flows
                        .clone()
                        .ok_or_else(|| Error::Config(format!("clip {} has no flow files", w.clip_id)))
                })
                .collect::<Result<_>>()?,
        ),
    })
}

fn stack_position(windows: &[&BlurWindow], pos: usize, sharp: bool) -> Result<Tensor<f32>> {
    let frames: Vec<Tensor<f32>> =
        windows.iter().map(|w| if sharp { w.sharp[pos].clone() } else { w.blurry[pos].clone() }).collect();
    Tensor::stack(&frames)
}

/// Generator, discriminator and optimizer state of one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: ParamStore<f32>,
    pub disc: ParamStore<f32>,
    gen_opt: Adam,
    disc_opt: Adam,
    rng: ChaCha8Rng,
    pub step: usize,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gen = init_generator(&cfg.model, &mut rng)?;
        let disc = init_discriminator(&mut rng);
        let opt = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Self { gen_opt: opt.clone(), disc_opt: opt, gen, disc, rng, step: 0, epoch: 0, cfg })
    }

    /// Generator and discriminator entries in one store.
    pub fn checkpoint(&self) -> ParamStore<f32> {
        let mut all = self.gen.clone();
        all.extend(self.disc.clone());
        all.clear_grads();
        all
    }

    /// One discriminator update (when `alpha > 0`) followed by one generator
    /// update on an already cropped and augmented batch.
    pub fn train_step(&mut self, batch: &[&BlurWindow]) -> Result<StepMetrics> {
        let start = Instant::now();
        let cfg = self.cfg.clone();
        let lr = cfg.lr_at(self.epoch);
        let frames = cfg.model.window_frames();
        if batch.is_empty() || batch.iter().any(|w| w.blurry.len() != frames || w.sharp.len() != frames) {
            return Err(Error::InvalidArgument(format!("training windows must hold {frames} frame pairs")));
        }
        let alignment = alignment_for(&cfg, batch)?;

        let mut g = Graph::new();
        let gv = self.gen.bind(&mut g);
        let inputs = (0..frames)
            .map(|p| stack_position(batch, p, false).map(|t| g.constant(t)))
            .collect::<Result<Vec<_>>>()?;
        let sharp = (0..frames)
            .map(|p| stack_position(batch, p, true).map(|t| g.constant(t)))
            .collect::<Result<Vec<_>>>()?;
        let outputs = progressive_forward(&mut g, &inputs, &cfg.model, &alignment, &gv)?;
        let pairs: Vec<(Var, Var)> = outputs.supervised().into_iter().map(|(r, p)| (r, sharp[p])).collect();
        let l1 = l1_loss(&mut g, &pairs)?;

        let (mut loss_d, mut loss_g) = (0.0, 0.0);
        let mut adv = None;
        if cfg.alpha > 0.0 {
            let restored = outputs.restored_triplet()?;
            let c = cfg.model.stages;
            let mut gd = Graph::new();
            let dv = self.disc.bind(&mut gd);
            let real: Vec<Var> = (c - 1..=c + 1).map(|p| gd.constant(g.value(sharp[p]).clone())).collect();
            let fake: Vec<Var> = restored.iter().map(|&r| gd.constant(g.value(r).clone())).collect();
            let d_real = discriminate(&mut gd, &real, &dv)?;
            let d_fake = discriminate(&mut gd, &fake, &dv)?;
            let ld = disc_loss(&mut gd, d_real, d_fake)?;
            loss_d = gd.value(ld).data()[0].as_f64();
            let grads = gd.backward(ld)?;
            self.disc.set_grads(&dv, &grads);
            self.disc_opt.step(&mut self.disc, lr)?;

            let dv = self.disc.bind(&mut g);
            let d_fake = discriminate(&mut g, &restored, &dv)?;
            let lg = gen_loss(&mut g, d_fake)?;
            loss_g = g.value(lg).data()[0].as_f64();
            adv = Some(lg);
        }
        let total = total_loss(&mut g, l1, adv, cfg.alpha)?;
        let l1_value = g.value(l1).data()[0].as_f64();
        if !g.value(total).is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        let grads = g.backward(total)?;
        self.gen.set_grads(&gv, &grads);
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut self.gen, max);
        }
        self.gen_opt.step(&mut self.gen, lr)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            epoch: self.epoch,
            l1: l1_value,
            loss_g,
            loss_d,
            lr,
            wall_ms: start.elapsed().as_millis(),
        })
    }

    /// Random crop and augmentation of one window.
    fn sample_view(&mut self, window: &BlurWindow) -> Result<BlurWindow> {
        let s = window.blurry[0].shape().to_vec();
        let p = self.cfg.patch;
        if s[1] < p || s[2] < p {
            return Err(Error::Config(format!("patch {p} larger than {}x{} frames", s[1], s[2])));
        }
        let y0 = self.rng.random_range(0..=s[1] - p);
        let x0 = self.rng.random_range(0..=s[2] - p);
        let aug = Augmentation::sample(&mut self.rng);
        augment(&crop(window, y0, x0, p)?, aug)
    }

    fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Trains until `epochs` or `max_steps` is reached. Each step is passed
    /// to `on_step`; `on_epoch` runs after every completed epoch and once
    /// more if training stops mid-epoch.
    pub fn fit(
        &mut self,
        windows: &[BlurWindow],
        mut on_step: impl FnMut(&Trainer, &StepMetrics) -> Result<()>,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::InvalidArgument("no training windows".into()));
        }
        while !self.finished() {
            let mut order: Vec<usize> = (0..windows.len()).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.cfg.batch) {
                let views = chunk.iter().map(|&i| self.sample_view(&windows[i])).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&BlurWindow> = views.iter().collect();
                let m = self.train_step(&refs)?;
                on_step(self, &m)?;
                if self.finished() {
                    return on_epoch(self);
                }
            }
            self.epoch += 1;
            on_epoch(self)?;
        }
        Ok(())
    }
}

/// Writes the metrics header and returns a step callback appending rows.
pub fn csv_logger<W: Write>(mut out: W) -> Result<impl FnMut(&Trainer, &StepMetrics) -> Result<()>> {
    writeln!(out, "{METRICS_HEADER}")?;
    Ok(move |_: &Trainer, m: &StepMetrics| {
        writeln!(out, "{}", m.csv_row())?;
        out.flush()?;
        Ok(())
    })
}

/// Saves `trainer`'s parameters to `path` and its config to `<path>.cfg`.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    trainer.checkpoint().save(path)?;
    write_config(&config_path(path), &trainer.cfg.to_pairs())
}

pub fn config_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    s.into()
}

pub fn write_config(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_config(&std::fs::read_to_string(path)?)
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Restores the centre of every window with the deepest stage, clamped to
/// `[0, 1]`.
pub fn deblur_windows(
    gen: &ParamStore<f32>,
    cfg: &DeblurConfig,
    lk: &LkParams,
    windows: &[BlurWindow],
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        if w.blurry.len() != cfg.window_frames() {
            return Err(Error::InvalidArgument(format!("window of {} frames for {} stages", w.blurry.len(), cfg.stages)));
        }
        let tc = TrainConfig { model: *cfg, lk: *lk, ..TrainConfig::default() };
        let alignment = alignment_for(&tc, &[w])?;
        let mut g = Graph::new();
        let vars = gen.bind_constants(&mut g);
        let inputs = w
            .blurry
            .iter()
            .map(|f| Tensor::stack(std::slice::from_ref(f)).map(|t| g.constant(t)))
            .collect::<Result<Vec<_>>>()?;
        let outputs = progressive_forward(&mut g, &inputs, cfg, &alignment, &vars)?;
        let r = g.value(outputs.final_output()).index_outer(0)?;
        out.push(r.map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(out)
}
