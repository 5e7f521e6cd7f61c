//! PSNR and SSIM on `[3, h, w]` images in `[0, 1]`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 3 || a.shape()[0] != 3 {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10 log10(1 / mse)`; identical images give `+inf`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let se: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let mse = se / a.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn luma(t: &Tensor<f32>) -> Vec<f64> {
    let plane = t.shape()[1] * t.shape()[2];
    let d = t.data();
    (0..plane)
        .map(|i| 0.299 * d[i] as f64 + 0.587 * d[plane + i] as f64 + 0.114 * d[2 * plane + i] as f64)
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering over valid window positions only.
fn filter_valid(v: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * v[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma channels over all valid 11x11 Gaussian windows.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let (x, y) = (luma(a), luma(b));
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&prod(&x, &x), h, w, &k);
    let syy = filter_valid(&prod(&y, &y), h, w, &k);
    let sxy = filter_valid(&prod(&x, &y), h, w, &k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Per-frame scores and their arithmetic means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub per_frame: Vec<(String, f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_frames(per_frame: Vec<(String, f64, f64)>) -> Self {
        let n = per_frame.len().max(1) as f64;
        let mean_psnr = per_frame.iter().map(|f| f.1).sum::<f64>() / n;
        let mean_ssim = per_frame.iter().map(|f| f.2).sum::<f64>() / n;
        Self { per_frame, mean_psnr, mean_ssim }
    }

    /// Scores paired frames; `ids` name the rows.
    pub fn evaluate(ids: &[String], pred: &[Tensor<f32>], gt: &[Tensor<f32>]) -> Result<Self> {
        if pred.len() != gt.len() || ids.len() != pred.len() {
            return Err(Error::InvalidArgument(format!("{} predictions for {} ground-truth frames", pred.len(), gt.len())));
        }
        let rows = ids
            .iter()
            .zip(pred.iter().zip(gt))
            .map(|(id, (p, g))| Ok((id.clone(), psnr(p, g)?, ssim(p, g)?)))
            .collect::<Result<_>>()?;
        Ok(Self::from_frames(rows))
    }

    /// `frame_id,psnr_db,ssim` rows followed by a `mean` row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "frame_id,psnr_db,ssim")?;
        for (id, p, s) in &self.per_frame {
            writeln!(w, "{id},{p:.6},{s:.6}")?;
        }
        writeln!(w, "mean,{:.6},{:.6}", self.mean_psnr, self.mean_ssim)?;
        Ok(())
    }
}
