//! All-range correlation volumes between a reference feature map and
//! max-pooled neighbour feature maps.
//!
//! A volume is stored as `[n, h*w, hk*wk]`: the `(u, v)` plane of every
//! reference position `(x, y)` is one contiguous row.

use crate::autodiff::{kernels, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which pair of frames a volume relates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VolumeKind {
    InterPrev,
    Intra,
    InterNext,
}

impl VolumeKind {
    pub const ALL: [VolumeKind; 3] = [VolumeKind::InterPrev, VolumeKind::Intra, VolumeKind::InterNext];

    pub fn name(self) -> &'static str {
        match self {
            VolumeKind::InterPrev => "prev",
            VolumeKind::Intra => "self",
            VolumeKind::InterNext => "next",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VolumeDims {
    pub h: usize,
    pub w: usize,
    pub hk: usize,
    pub wk: usize,
}

#[derive(Clone, Debug)]
pub struct CorrelationVolume {
    /// `[n, h*w, hk*wk]`, strictly positive.
    pub values: Var,
    pub level: usize,
    pub kind: VolumeKind,
    pub dims: VolumeDims,
    pub normalized: bool,
}

/// Volumes for `k = 1..=L` together with the pooled neighbour maps they
/// were built against.
#[derive(Clone, Debug)]
pub struct CorrelationPyramid {
    pub levels: Vec<CorrelationVolume>,
    /// `pooled[k-1]` is the neighbour map pooled by `2^k`, `[n, c, hk, wk]`.
    pub pooled: Vec<Var>,
}

impl CorrelationPyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// `exp(dot(f_ref[:, x, y], f_nbr[:, u, v]) - m(x, y))` with `m` the row max.
pub fn build_correlation_volume<T: Scalar>(
    g: &mut Graph<T>,
    f_ref: Var,
    f_nbr: Var,
    level: usize,
    kind: VolumeKind,
) -> Result<CorrelationVolume> {
    let (sr, sn) = (g.shape(f_ref).to_vec(), g.shape(f_nbr).to_vec());
    if sr.len() != 4 || sn.len() != 4 || sr[1] != sn[1] || sr[0] != sn[0] {
        return Err(Error::shape("build_correlation_volume", format!("reference {sr:?}, neighbor {sn:?}")));
    }
    let dots = g.correlation(f_ref, f_nbr)?;
    let values = g.exp_shift_max(dots)?;
    Ok(CorrelationVolume {
        values,
        level,
        kind,
        dims: VolumeDims { h: sr[2], w: sr[3], hk: sn[2], wk: sn[3] },
        normalized: false,
    })
}

/// Level `k` correlates the unpooled reference against the neighbour
/// max-pooled with kernel and stride `2^k`.
pub fn build_pyramid<T: Scalar>(
    g: &mut Graph<T>,
    f_ref: Var,
    f_nbr: Var,
    depth: usize,
    kind: VolumeKind,
) -> Result<CorrelationPyramid> {
    if depth == 0 {
        return Err(Error::InvalidArgument("pyramid depth must be at least 1".into()));
    }
    let s = g.shape(f_nbr).to_vec();
    if s.len() != 4 || g.shape(f_ref) != s.as_slice() {
        return Err(Error::shape("build_pyramid", format!("reference {:?}, neighbor {s:?}", g.shape(f_ref))));
    }
    let f = 1usize << depth;
    if s[2] % f != 0 || s[3] % f != 0 {
        return Err(Error::shape("build_pyramid", format!("{}x{} not divisible by {f}", s[2], s[3])));
    }
    let mut levels = Vec::with_capacity(depth);
    let mut pooled = Vec::with_capacity(depth);
    for k in 1..=depth {
        let p = g.max_pool2d(f_nbr, 1 << k, 1 << k)?;
        levels.push(build_correlation_volume(g, f_ref, p, k, kind)?);
        pooled.push(p);
    }
    Ok(CorrelationPyramid { levels, pooled })
}

/// Divides every `(u, v)` plane by its sum.
pub fn normalize_volume<T: Scalar>(g: &mut Graph<T>, vol: &CorrelationVolume) -> Result<CorrelationVolume> {
    let values = g.row_normalize(vol.values)?;
    Ok(CorrelationVolume { values, normalized: true, ..vol.clone() })
}

/// Largest deviation of any `(u, v)` plane sum from one.
pub fn max_row_sum_error<T: Scalar>(values: &Tensor<T>) -> f64 {
    let row = *values.shape().last().unwrap_or(&1);
    values
        .data()
        .chunks(row.max(1))
        .map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Graph-free volume of one `[c, h, w]` reference against one `[c, hk, wk]`
/// neighbour, shaped `[h, w, hk, wk]`.
pub fn correlation_volume<T: Scalar>(f_ref: &Tensor<T>, f_nbr: &Tensor<T>) -> Result<Tensor<T>> {
    let (sr, sn) = (f_ref.shape().to_vec(), f_nbr.shape().to_vec());
    if sr.len() != 3 || sn.len() != 3 {
        return Err(Error::shape("correlation_volume", format!("reference {sr:?}, neighbor {sn:?}")));
    }
    let mut g = Graph::new();
    let r = g.constant(f_ref.clone().reshape(&[1, sr[0], sr[1], sr[2]])?);
    let n = g.constant(f_nbr.clone().reshape(&[1, sn[0], sn[1], sn[2]])?);
    let vol = build_correlation_volume(&mut g, r, n, 0, VolumeKind::InterNext)?;
    g.value(vol.values).clone().reshape(&[sr[1], sr[2], sn[1], sn[2]])
}

/// Direct pixel-pair loop with the same max shift; the reference for
/// [`correlation_volume`].
pub fn correlation_volume_naive<T: Scalar>(f_ref: &Tensor<T>, f_nbr: &Tensor<T>) -> Result<Tensor<T>> {
    let (sr, sn) = (f_ref.shape().to_vec(), f_nbr.shape().to_vec());
    if sr.len() != 3 || sn.len() != 3 || sr[0] != sn[0] {
        return Err(Error::shape("correlation_volume_naive", format!("reference {sr:?}, neighbor {sn:?}")));
    }
    let (h, w, hk, wk) = (sr[1], sr[2], sn[1], sn[2]);
    let mut out = vec![T::zero(); h * w * hk * wk];
    kernels::correlation_naive(f_ref.data(), f_nbr.data(), sr[0], (h, w), (hk, wk), &mut out);
    for row in out.chunks_mut(hk * wk) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        for v in row.iter_mut() {
            *v = (*v - m).exp();
        }
    }
    Tensor::new(&[h, w, hk, wk], out)
}
