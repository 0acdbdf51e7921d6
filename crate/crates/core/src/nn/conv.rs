//! im2col convolution kernels with implicit zero padding.

use super::real::{gemm_new, Real};

/// Geometry of a strided, zero-padded 2D correlation over a `[cin, h, w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < k || wp < k || stride == 0 {
            return None;
        }
        let ho = (hp - k) / stride + 1;
        let wo = (wp - k) / stride + 1;
        Some(Self { cin, h, w, kh: k, kw: k, stride, pad, ho, wo })
    }

    pub fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    let n = g.cols();
    let mut cols = vec![T::zero(); g.rows() * n];
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        // contiguous run of valid columns
                        let x0 = kx as isize - pad;
                        let lo = (-x0).max(0) as usize;
                        let hi = ((g.w as isize - x0).min(g.wo as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + x0) as usize;
                            out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto `dx`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    debug_assert_eq!(dx.len(), g.cin * g.h * g.w);
    let n = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let run = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[x0..x0 + run.len()].iter_mut().zip(run) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[x0..].iter_mut().step_by(g.stride).zip(run) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `o * stride + k - pad` lies in `[0, w)`.
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Narrow stride-1 outputs skip im2col: a gemm with one or two rows wastes the kernel
/// and the column buffer dominates the cost.
fn use_direct(g: &ConvGeom, cout: usize) -> bool {
    g.stride == 1 && cout <= 2
}

/// Calls `f(tap, out_offset, in_offset, len)` for every overlapping row run of every tap.
fn for_each_tap(g: &ConvGeom, cout: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    for o in 0..cout {
        for c in 0..g.cin {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi) = valid_range(kx, g.pad, 1, g.w, g.wo);
                    if lo >= hi {
                        continue;
                    }
                    let tap = ((o * g.cin + c) * g.kh + ky) * g.kw + kx;
                    for oy in 0..g.ho {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let out_at = (o * g.ho + oy) * g.wo + lo;
                        let in_at = (c * g.h + iy as usize) * g.w + lo + kx - g.pad;
                        f(tap, out_at, in_at, hi - lo);
                    }
                }
            }
        }
    }
}

/// Forward correlation. Returns `(output [cout, ho, wo], cols)`; cols are kept for backward
/// and are empty on the direct path.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let n = g.cols();
    let (mut out, cols) = if use_direct(g, cout) {
        let mut out = vec![T::zero(); cout * n];
        for_each_tap(g, cout, |tap, oa, ia, len| {
            let wv = weight[tap];
            for (o, &v) in out[oa..oa + len].iter_mut().zip(&x[ia..ia + len]) {
                *o += wv * v;
            }
        });
        (out, Vec::new())
    } else {
        let cols = im2col(x, g);
        (gemm_new(cout, g.rows(), n, weight, false, &cols, false), cols)
    };
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v += b[o]);
        }
    }
    (out, cols)
}

/// Input gradient of a correlation.
pub fn conv2d_backward_input<T: Real>(weight: &[T], dy: &[T], cout: usize, g: &ConvGeom) -> Vec<T> {
    let mut dx = vec![T::zero(); g.cin * g.h * g.w];
    if use_direct(g, cout) {
        for_each_tap(g, cout, |tap, oa, ia, len| {
            let wv = weight[tap];
            for (d, &v) in dx[ia..ia + len].iter_mut().zip(&dy[oa..oa + len]) {
                *d += wv * v;
            }
        });
        return dx;
    }
    let dcols = gemm_new(g.rows(), cout, g.cols(), weight, true, dy, false);
    col2im(&dcols, g, &mut dx);
    dx
}

/// Dot product with independent lane accumulators so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Weight gradient `[cout, cin·kh·kw]`. `cols` must come from [`conv2d_forward`] on `x`.
pub fn conv2d_backward_weight<T: Real>(x: &[T], cols: &[T], dy: &[T], cout: usize, g: &ConvGeom) -> Vec<T> {
    if use_direct(g, cout) {
        let mut dw = vec![T::zero(); cout * g.rows()];
        for_each_tap(g, cout, |tap, oa, ia, len| {
            dw[tap] += dot(&dy[oa..oa + len], &x[ia..ia + len]);
        });
        return dw;
    }
    gemm_new(cout, g.cols(), g.rows(), dy, false, cols, true)
}

pub fn bias_grad<T: Real>(dy: &[T], cout: usize) -> Vec<T> {
    let n = dy.len() / cout;
    dy.chunks(n).map(|row| row.iter().copied().sum()).collect()
}

/// Geometry of the correlation whose adjoint is the transposed convolution
/// `[cin, hi, wi] -> [cout, ho, wo]`; `ho = (hi - 1) * stride - 2 * pad + k + out_pad`.
pub fn conv_transpose_geom(
    cout: usize,
    hi: usize,
    wi: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Option<ConvGeom> {
    let ho = ((hi - 1) * stride + k + out_pad).checked_sub(2 * pad)?;
    let wo = ((wi - 1) * stride + k + out_pad).checked_sub(2 * pad)?;
    let g = ConvGeom::new(cout, ho, wo, k, stride, pad)?;
    (g.ho == hi && g.wo == wi).then_some(g)
}

/// Transposed convolution forward; weight is `[cin, cout, k, k]`.
pub fn conv_transpose_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    cin: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let n = g.cols();
    let cols = gemm_new(g.rows(), cin, n, weight, true, x, false);
    let mut out = vec![T::zero(); g.cin * g.h * g.w];
    col2im(&cols, g, &mut out);
    if let Some(b) = bias {
        let plane = g.h * g.w;
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[o]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], w: &[f64], cout: usize, g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; cout * g.ho * g.wo];
        for o in 0..cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut s = 0.0;
                    for c in 0..g.cin {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = x[(c * g.h + iy as usize) * g.w + ix as usize];
                                let wv = w[((o * g.cin + c) * g.kh + ky) * g.kw + kx];
                                s += xv * wv;
                            }
                        }
                    }
                    out[(o * g.ho + oy) * g.wo + ox] = s;
                }
            }
        }
        out
    }

    fn seq(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * f).sin()).collect()
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (7, 1, 3), (3, 2, 1), (4, 1, 1)] {
            let g = ConvGeom::new(2, 9, 8, k, s, p).unwrap();
            let x = seq(2 * 9 * 8, 0.7);
            let w = seq(3 * g.rows(), 0.3);
            let (out, _) = conv2d_forward(&x, &w, None, 3, &g);
            let expect = direct_conv(&x, &w, 3, &g);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 7, 6, 4, 2, 1).unwrap();
        let x = seq(2 * 7 * 6, 0.9);
        let c = seq(g.rows() * g.cols(), 0.4);
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transpose_conv_is_adjoint_of_conv() {
        // <conv(y), x> == <y, convT(x)> when both use the same weights.
        let (cin_t, cout_t) = (3, 2);
        let g = conv_transpose_geom(cout_t, 5, 4, 3, 2, 1, 1).unwrap();
        assert_eq!((g.h, g.w), (10, 8));
        let w = seq(cin_t * cout_t * 9, 0.21);
        let x = seq(cin_t * 5 * 4, 0.33);
        let up = conv_transpose_forward(&x, &w, None, cin_t, &g);
        let y = seq(cout_t * 10 * 8, 0.17);
        let (down, _) = conv2d_forward(&y, &w, None, cin_t, &g);
        let lhs: f64 = down.iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = up.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn narrow_outputs_match_gemm_path() {
        for &(cout, k, p) in &[(1, 7, 0), (2, 3, 1), (1, 3, 2), (2, 4, 1)] {
            let g = ConvGeom::new(3, 9, 8, k, 1, p).unwrap();
            let x = seq(3 * 9 * 8, 0.7);
            let w = seq(cout * g.rows(), 0.3);
            let dy = seq(cout * g.cols(), 0.45);
            let (out, cols) = conv2d_forward(&x, &w, None, cout, &g);
            assert!(cols.is_empty());
            for (a, b) in out.iter().zip(&direct_conv(&x, &w, cout, &g)) {
                assert!((a - b).abs() < 1e-12);
            }
            let full = im2col(&x, &g);
            let dw_ref = gemm_new(cout, g.cols(), g.rows(), &dy, false, &full, true);
            for (a, b) in conv2d_backward_weight(&x, &cols, &dy, cout, &g).iter().zip(&dw_ref) {
                assert!((a - b).abs() < 1e-10);
            }
            let mut dx_ref = vec![0.0; x.len()];
            col2im(&gemm_new(g.rows(), cout, g.cols(), &w, true, &dy, false), &g, &mut dx_ref);
            for (a, b) in conv2d_backward_input(&w, &dy, cout, &g).iter().zip(&dx_ref) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
