//! Correlation-weighted aggregation of refined neighbour features.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::corrvol::{build_pyramid, max_row_sum_error, normalize_volume, CorrelationVolume, VolumeKind};
use crate::error::{Error, Result};
use crate::params::{he_normal, ParamStore, ParamVars};
use crate::tensor::{Scalar, Tensor};

/// Largest tolerated deviation of a normalized `(u, v)` plane sum from one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

/// Aggregated map `[n, L*C, h, w]` for one source.
#[derive(Clone, Copy, Debug)]
pub struct AggregatedFeature {
    pub values: Var,
    pub source: VolumeKind,
}

/// Weight and bias names of the refinement conv for `(level, source)`.
pub fn phi_names(level: usize, source: VolumeKind) -> (String, String) {
    let base = format!("agg.phi.{}.{level}", source.name());
    (format!("{base}.w"), format!("{base}.b"))
}

/// He-initialised 1x1 refinement convs for every level `1..=depth` and source.
pub fn init_refinement<T: Scalar, R: Rng>(store: &mut ParamStore<T>, channels: usize, depth: usize, rng: &mut R) {
    for source in VolumeKind::ALL {
        for k in 1..=depth {
            let (w, b) = phi_names(k, source);
            store.insert(w, he_normal(&[channels, channels, 1, 1], channels, 1.0, rng));
            store.insert(b, Tensor::zeros(&[channels]));
        }
    }
}

/// Applies the 1x1 conv of `(level, source)` to a pooled neighbour map.
pub fn refine_neighbor<T: Scalar>(
    g: &mut Graph<T>,
    pooled: Var,
    params: &ParamVars,
    level: usize,
    source: VolumeKind,
) -> Result<Var> {
    let (w, b) = phi_names(level, source);
    let (w, b) = (params.get(&w)?, params.get(&b)?);
    g.conv2d(pooled, w, b, 1, 0)
}

/// `out[:, :, x, y] = sum_{u,v} vol[x, y, u, v] * refined[:, :, u, v]`.
pub fn aggregate_level<T: Scalar>(g: &mut Graph<T>, norm_vol: &CorrelationVolume, refined: Var) -> Result<Var> {
    let d = norm_vol.dims;
    let s = g.shape(refined).to_vec();
    if s.len() != 4 || s[2] != d.hk || s[3] != d.wk {
        return Err(Error::shape("aggregate_level", format!("refined {s:?} for volume {d:?}")));
    }
    let err = max_row_sum_error(g.value(norm_vol.values));
    if !norm_vol.normalized || err > NORMALIZATION_TOLERANCE {
        return Err(Error::InvalidArgument(format!("volume is not normalized (row sums off by {err:e})")));
    }
    let (n, c) = (s[0], s[1]);
    let flat = g.reshape(refined, &[n, c, d.hk * d.wk])?;
    let weights = g.transpose_last2(norm_vol.values)?;
    let out = g.matmul(flat, weights)?;
    g.reshape(out, &[n, c, d.h, d.w])
}

/// Pyramid, normalization, refinement and aggregation for one source, with
/// levels concatenated along channels in ascending `k`.
pub fn aggregate_pair<T: Scalar>(
    g: &mut Graph<T>,
    f_ref: Var,
    f_nbr: Var,
    depth: usize,
    params: &ParamVars,
    source: VolumeKind,
) -> Result<AggregatedFeature> {
    let pyramid = build_pyramid(g, f_ref, f_nbr, depth, source)?;
    let mut parts = Vec::with_capacity(depth);
    for (vol, &pooled) in pyramid.levels.iter().zip(&pyramid.pooled) {
        let nv = normalize_volume(g, vol)?;
        let refined = refine_neighbor(g, pooled, params, vol.level, source)?;
        parts.push(aggregate_level(g, &nv, refined)?);
    }
    let values = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
    Ok(AggregatedFeature { values, source })
}

/// Concatenates the prev, self and next maps (in that order) along channels.
pub fn fuse_three<T: Scalar>(g: &mut Graph<T>, parts: [AggregatedFeature; 3]) -> Result<Var> {
    let mut sorted = parts;
    sorted.sort_by_key(|p| p.source);
    let sources: Vec<_> = sorted.iter().map(|p| p.source).collect();
    if sources != VolumeKind::ALL {
        return Err(Error::InvalidArgument(format!("fuse_three needs one prev, self and next map, got {:?}", parts.map(|p| p.source))));
    }
    g.concat(&sorted.map(|p| p.values), 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unnormalized_volume_rejected() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64 * 0.01));
        let p = build_pyramid(&mut g, f, f, 1, VolumeKind::Intra).unwrap();
        let refined = p.pooled[0];
        assert!(aggregate_level(&mut g, &p.levels[0], refined).is_err());
    }

    #[test]
    fn duplicate_source_rejected() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let a = AggregatedFeature { values: v, source: VolumeKind::Intra };
        let b = AggregatedFeature { values: v, source: VolumeKind::InterNext };
        assert!(fuse_three(&mut g, [a, a, b]).is_err());
    }

    #[test]
    fn missing_phi_is_named() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        match refine_neighbor(&mut g, v, &ParamVars::default(), 2, VolumeKind::InterPrev) {
            Err(Error::MissingParam(n)) => assert_eq!(n, "agg.phi.prev.2.w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
