//! Raw array kernels behind the differentiable ops.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Geometry of a (up to) three-dimensional convolution over one sample.
/// Two-dimensional convolutions use a unit leading (time) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for d in 0..3 {
            if stride[d] == 0 {
                return Err(Error::InvalidArgument("convolution stride must be >= 1".into()));
            }
            let span = input[d] + 2 * pad[d];
            if kernel[d] == 0 || span < kernel[d] {
                return Err(Error::shape(
                    "conv",
                    format!("kernel {:?} larger than padded input {:?}", kernel, input),
                ));
            }
            output[d] = (span - kernel[d]) / stride[d] + 1;
        }
        Ok(Self { channels, input, kernel, stride, pad, output })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn col_cols(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Range of output positions `o` with `0 <= o * stride + k - pad < len`.
#[inline]
fn valid_range(out: usize, len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // o * stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o * stride + k - pad <= len - 1
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one sample `[channels, t, h, w]` into `[col_rows, col_cols]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let ncols = ot * oh * ow;
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let (w_lo, w_hi) = valid_range(ow, iw, sw, dw, pw);
                    for zt in 0..ot {
                        let st_i = (zt * st + dt) as isize - pt as isize;
                        for zh in 0..oh {
                            let base = (zt * oh + zh) * ow;
                            let sh_i = (zh * sh + dh) as isize - ph as isize;
                            let line = &mut dst[base..base + ow];
                            if st_i < 0 || st_i >= it as isize || sh_i < 0 || sh_i >= ih as isize {
                                line.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(st_i as usize * ih + sh_i as usize) * iw..][..iw];
                            line[..w_lo].fill(T::zero());
                            line[w_hi..].fill(T::zero());
                            if sw == 1 {
                                let s0 = w_lo + dw - pw;
                                line[w_lo..w_hi].copy_from_slice(&src[s0..s0 + (w_hi - w_lo)]);
                            } else {
                                for (o, v) in line[w_lo..w_hi].iter_mut().enumerate() {
                                    *v = src[(w_lo + o) * sw + dw - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[col_rows, col_cols]` into one sample.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let ncols = ot * oh * ow;
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &mut x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    let (w_lo, w_hi) = valid_range(ow, iw, sw, dw, pw);
                    for zt in 0..ot {
                        let st_i = (zt * st + dt) as isize - pt as isize;
                        if st_i < 0 || st_i >= it as isize {
                            continue;
                        }
                        for zh in 0..oh {
                            let sh_i = (zh * sh + dh) as isize - ph as isize;
                            if sh_i < 0 || sh_i >= ih as isize {
                                continue;
                            }
                            let base = (zt * oh + zh) * ow;
                            let dst = &mut xc[(st_i as usize * ih + sh_i as usize) * iw..][..iw];
                            for o in w_lo..w_hi {
                                dst[o * sw + dw - pw] += src[base + o];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution of a batch. `x: [n, geom.input_len()]`,
/// `w: [cout, col_rows]`, `out: [n, cout, col_cols]`.
pub fn conv_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeom, n: usize, out: &mut [T]) {
    let cout = b.len();
    let (k, p) = (g.col_rows(), g.col_cols());
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for s in 0..n {
        let xs = &x[s * g.input_len()..(s + 1) * g.input_len()];
        let os = &mut out[s * cout * p..(s + 1) * cout * p];
        for (c, row) in os.chunks_mut(p).enumerate() {
            row.fill(b[c]);
        }
        let rhs = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        T::gemm(cout, k, p, T::one(), w, false, rhs, false, T::one(), os);
    }
}

/// Gradients of [`conv_forward`]; any of the outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    n: usize,
    cout: usize,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (k, p) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
    let mut gcols = vec![T::zero(); k * p];
    for s in 0..n {
        let xs = &x[s * g.input_len()..(s + 1) * g.input_len()];
        let gys = &gy[s * cout * p..(s + 1) * cout * p];
        if let Some(gb) = gb.as_deref_mut() {
            for (c, row) in gys.chunks(p).enumerate() {
                gb[c] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            let rhs = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            T::gemm(cout, p, k, T::one(), gys, false, rhs, true, T::one(), gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxs = &mut gx[s * g.input_len()..(s + 1) * g.input_len()];
            if g.is_pointwise() {
                T::gemm(k, cout, p, T::one(), w, true, gys, false, T::one(), gxs);
            } else {
                T::gemm(k, cout, p, T::one(), w, true, gys, false, T::zero(), &mut gcols);
                col2im(&gcols, g, gxs);
            }
        }
    }
}

/// Max pooling with square `kernel == stride` windows over `[planes, h, w]`.
/// Returns pooled values and the flat argmax (first maximum in row-major
/// window order) of every output cell.
pub fn max_pool<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + (y * k) * w + xo * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (y * k + dy) * w + xo * k + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Pairwise (tree) sum of elementwise products.
#[inline]
pub fn pairwise_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    match a.len() {
        0 => T::zero(),
        1 => a[0] * b[0],
        2 => a[0] * b[0] + a[1] * b[1],
        len => {
            let mid = len / 2;
            pairwise_dot(&a[..mid], &b[..mid]) + pairwise_dot(&a[mid..], &b[mid..])
        }
    }
}

/// Transposes a row-major `rows x cols` block.
pub fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
    dst
}

/// Rows of reference positions processed together by [`correlation_tiled`].
const CORR_TILE: usize = 16;

/// All-pairs channel dot products between `reference: [c, p]` and
/// `neighbor: [c, q]`, written as `out: [p, q]` with each `q` row contiguous.
///
/// Features are repacked pixel-major so every dot product reads two
/// contiguous channel vectors and sums them pairwise.
pub fn correlation_tiled<T: Scalar>(reference: &[T], neighbor: &[T], c: usize, p: usize, q: usize, out: &mut [T]) {
    let rt = transpose(reference, c, p);
    let nt = transpose(neighbor, c, q);
    for tile in (0..p).step_by(CORR_TILE) {
        let end = (tile + CORR_TILE).min(p);
        for v in 0..q {
            let nv = &nt[v * c..(v + 1) * c];
            for u in tile..end {
                out[u * q + v] = pairwise_dot(&rt[u * c..(u + 1) * c], nv);
            }
        }
    }
}

/// Straightforward four-loop reference for [`correlation_tiled`] over 2-D maps.
pub fn correlation_naive<T: Scalar>(
    reference: &[T],
    neighbor: &[T],
    c: usize,
    (h, w): (usize, usize),
    (hk, wk): (usize, usize),
    out: &mut [T],
) {
    for x in 0..h {
        for y in 0..w {
            for u in 0..hk {
                for v in 0..wk {
                    let mut acc = T::zero();
                    for ch in 0..c {
                        acc += reference[(ch * h + x) * w + y] * neighbor[(ch * hk + u) * wk + v];
                    }
                    out[((x * w + y) * hk + u) * wk + v] = acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_scan() {
        for len in 1..7 {
            for stride in 1..4 {
                for k in 0..5 {
                    for pad in 0..3 {
                        let out = 9;
                        let (lo, hi) = valid_range(out, len, stride, k, pad);
                        for o in 0..out {
                            let pos = (o * stride + k) as isize - pad as isize;
                            let inside = pos >= 0 && pos < len as isize;
                            assert_eq!(inside, o >= lo && o < hi, "len={len} s={stride} k={k} p={pad} o={o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pairwise_dot_matches_sequential() {
        let a: Vec<f64> = (0..17).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..17).map(|i| 1.0 - i as f64 * 0.1).collect();
        let seq: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((pairwise_dot(&a, &b) - seq).abs() < 1e-12);
    }

    #[test]
    fn tiled_correlation_matches_naive() {
        let (c, h, w, hk, wk) = (3, 5, 4, 2, 3);
        let r: Vec<f64> = (0..c * h * w).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let n: Vec<f64> = (0..c * hk * wk).map(|i| ((i * 5) % 13) as f64 / 13.0 - 0.4).collect();
        let mut a = vec![0.0; h * w * hk * wk];
        let mut b = a.clone();
        correlation_tiled(&r, &n, c, h * w, hk * wk, &mut a);
        correlation_naive(&r, &n, c, (h, w), (hk, wk), &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_ties_pick_first() {
        let x = [1.0f32, 1.0, 1.0, 1.0];
        let (v, arg) = max_pool(&x, 1, 2, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
