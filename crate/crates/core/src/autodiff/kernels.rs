//! Forward and backward kernels over raw slices. The graph in `graph.rs`
//! owns the bookkeeping; everything here is shape-checked by the caller.

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds `[C, H, W]` into a `[C*k*k, H'*W']` column matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let n = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * n];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeometry, input_grad: &mut [f64]) {
    let n = g.out_len();
    for c in 0..g.c_in {
        let plane = &mut input_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major dense matrices.
/// `a` is `m x k`, `b` is `k x n`; transposition is expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly the m*k, k*n and m*n row-major regions of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear interpolation weights for one point, with coordinates clamped
/// into the grid. Returns four `(flat spatial index, weight)` pairs.
#[inline]
pub(crate) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// 3x3 neighborhood maximum with out-of-range cells ignored. Not differentiable.
pub fn maxpool3x3_same(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let (c, h, w) = match shape {
        [c, h, w] => (*c, *h, *w),
        _ => panic!("maxpool3x3_same expects [C, H, W], got {shape:?}"),
    };
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    if w == 0 || h == 0 {
        return Tensor::new(shape.to_vec(), out).expect("shape preserved");
    }
    // Separable: horizontal pass into `rows`, then vertical pass.
    let mut rows = vec![0.0; h * w];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for (r, dst) in plane.chunks_exact(w).zip(rows.chunks_exact_mut(w)) {
            if w == 1 {
                dst[0] = r[0];
                continue;
            }
            dst[0] = r[0].max(r[1]);
            for xi in 1..w - 1 {
                dst[xi] = r[xi - 1].max(r[xi]).max(r[xi + 1]);
            }
            dst[w - 1] = r[w - 2].max(r[w - 1]);
        }
        let out_plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            let lo = y.saturating_sub(1);
            let hi = (y + 1).min(h - 1);
            let dst = &mut out_plane[y * w..(y + 1) * w];
            dst.copy_from_slice(&rows[lo * w..(lo + 1) * w]);
            for yy in lo + 1..=hi {
                for (d, v) in dst.iter_mut().zip(&rows[yy * w..(yy + 1) * w]) {
                    *d = d.max(*v);
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape preserved")
}
