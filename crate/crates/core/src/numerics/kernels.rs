//! Raw dense kernels behind the tape ops. Parallelism is restricted to
//! disjoint output-row chunks with a fixed inner summation order, so results
//! are bit-identical for any worker count.

use rayon::prelude::*;

/// Below this many multiply-adds the sequential path is used outright.
const PAR_THRESHOLD: usize = 1 << 18;

/// out = A·B with A [m,k], B [k,n]; out must be zeroed by the caller or is
/// fully overwritten here.
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |ai: &[f64], oi: &mut [f64]| {
        oi.fill(0.0);
        for (p, &av) in ai.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..p * n + n];
                for (o, &bv) in oi.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(|(oi, ai)| row(ai, oi));
    } else {
        for (oi, ai) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(ai, oi);
        }
    }
}

/// out = A·Bᵀ with A [m,k], B [n,k].
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |ai: &[f64], oi: &mut [f64]| {
        for (j, o) in oi.iter_mut().enumerate() {
            let bj = &b[j * k..j * k + k];
            let mut acc = 0.0;
            for (&av, &bv) in ai.iter().zip(bj) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(|(oi, ai)| row(ai, oi));
    } else {
        for (oi, ai) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(ai, oi);
        }
    }
}

/// out = Aᵀ·B with A [k,m], B [k,n].
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let rows = |lo: usize, hi: usize, chunk: &mut [f64]| {
        chunk.fill(0.0);
        for p in 0..k {
            let brow = &b[p * n..p * n + n];
            for i in lo..hi {
                let av = a[p * m + i];
                if av != 0.0 {
                    let oi = &mut chunk[(i - lo) * n..(i - lo) * n + n];
                    for (o, &bv) in oi.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        let chunk_rows = m.div_ceil(rayon::current_num_threads().max(1));
        out.par_chunks_mut(chunk_rows * n).enumerate().for_each(|(ci, chunk)| {
            let lo = ci * chunk_rows;
            let hi = (lo + chunk.len() / n).min(m);
            rows(lo, hi, chunk);
        });
    } else {
        rows(0, m, out);
    }
}

/// Geometry of one 2-D convolution over NHWC data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(n: usize, h: usize, w: usize, c_in: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1, "conv stride must be >= 1");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad);
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        ConvGeom { n, h, w, c_in, kh, kw, stride, pad, h_out, w_out }
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    pub fn out_rows(&self) -> usize {
        self.n * self.h_out * self.w_out
    }
}

/// Gather conv patches: x is NHWC [n,h,w,c_in]; out is [n·h_out·w_out, kh·kw·c_in].
/// Out-of-bounds taps read zero.
pub fn im2col(x: &[f64], g: &ConvGeom, out: &mut [f64]) {
    debug_assert_eq!(x.len(), g.n * g.h * g.w * g.c_in);
    debug_assert_eq!(out.len(), g.out_rows() * g.patch_len());
    let (c, w) = (g.c_in, g.w);
    for bn in 0..g.n {
        let xn = &x[bn * g.h * g.w * c..];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let row = ((bn * g.h_out + oy) * g.w_out + ox) * g.patch_len();
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        let dst = row + (ky * g.kw + kx) * c;
                        if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < w {
                            let src = (iy as usize * w + ix as usize) * c;
                            out[dst..dst + c].copy_from_slice(&xn[src..src + c]);
                        } else {
                            out[dst..dst + c].fill(0.0);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add patch gradients back onto the input layout.
pub fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    debug_assert_eq!(out.len(), g.n * g.h * g.w * g.c_in);
    debug_assert_eq!(cols.len(), g.out_rows() * g.patch_len());
    let (c, w) = (g.c_in, g.w);
    for bn in 0..g.n {
        let base = bn * g.h * g.w * c;
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let row = ((bn * g.h_out + oy) * g.w_out + ox) * g.patch_len();
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let src = row + (ky * g.kw + kx) * c;
                        let dst = base + (iy as usize * w + ix as usize) * c;
                        for i in 0..c {
                            out[dst + i] += cols[src + i];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    fn rand_vec(rng: &mut RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = RngStream::new(11, 0);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 2), (5, 7, 6), (64, 32, 48)] {
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let want = naive_mm(&a, &b, m, k, n);

            let mut out = vec![0.0; m * n];
            mm_nn(&a, &b, m, k, n, &mut out);
            assert!(out.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

            // A·Bᵀ with Bᵀ passed row-major as [n,k]
            let mut bt = vec![0.0; k * n];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut out2 = vec![0.0; m * n];
            mm_nt(&a, &bt, m, k, n, &mut out2);
            assert!(out2.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

            // Aᵀ·B with Aᵀ passed row-major as [k,m]
            let mut at = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut out3 = vec![0.0; m * n];
            mm_tn(&at, &b, m, k, n, &mut out3);
            assert!(out3.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), C> == <x, col2im(C)> for random x, C exactly
        // characterizes the scatter as the gather's transpose.
        let mut rng = RngStream::new(5, 1);
        for &(h, w, c, kh, stride, pad) in &[(4, 4, 1, 3, 1, 0), (5, 6, 3, 3, 2, 1), (8, 8, 2, 1, 1, 0)] {
            let g = ConvGeom::new(2, h, w, c, kh, kh, stride, pad);
            let x = rand_vec(&mut rng, 2 * h * w * c);
            let cmat = rand_vec(&mut rng, g.out_rows() * g.patch_len());
            let mut cols = vec![0.0; cmat.len()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&cmat, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&cmat).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "adjoint mismatch {} vs {}", lhs, rhs);
        }
    }

    #[test]
    fn im2col_matches_direct_patch() {
        // 1 image, 3x3 input, 2x2 kernel, stride 1, no padding.
        let g = ConvGeom::new(1, 3, 3, 1, 2, 2, 1, 0);
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut cols = vec![0.0; g.out_rows() * g.patch_len()];
        im2col(&x, &g, &mut cols);
        assert_eq!(cols[0..4], [1.0, 2.0, 4.0, 5.0]);
        assert_eq!(cols[4..8], [2.0, 3.0, 5.0, 6.0]);
        assert_eq!(cols[12..16], [5.0, 6.0, 8.0, 9.0]);
    }
}
