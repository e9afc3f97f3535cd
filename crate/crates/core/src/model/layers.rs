//! Dense kernels: matrix multiply, 3x3 stride-2 convolution via im2col.
//!
//! Activations use a channel-major batch layout `[C, B, H, W]` so the
//! output of a convolution GEMM is already in input layout for the next
//! block.

/// `c = beta * c + a @ b` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(a.len() as isize >= extent(m, k, a_strides), "gemm: a too short");
    assert!(b.len() as isize >= extent(k, n, b_strides), "gemm: b too short");
    assert!(c.len() as isize >= extent(m, n, c_strides), "gemm: c too short");
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

pub fn conv_out(n: usize) -> usize {
    (n + 2 * PAD - KERNEL) / STRIDE + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    pub fn ho(&self) -> usize {
        conv_out(self.h)
    }

    pub fn wo(&self) -> usize {
        conv_out(self.w)
    }

    /// Columns of the im2col matrix: `batch * ho * wo`.
    pub fn cols(&self) -> usize {
        self.batch * self.ho() * self.wo()
    }

    pub fn k(&self) -> usize {
        self.c_in * KERNEL * KERNEL
    }
}

/// `[C_in, B, H, W]` -> `[C_in * 9, B * Ho * Wo]`.
pub fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let (ho, wo) = (s.ho(), s.wo());
    let n = s.cols();
    let mut col = vec![0.0; s.k() * n];
    for ci in 0..s.c_in {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for b in 0..s.batch {
                    let src = &x[(ci * s.batch + b) * s.h * s.w..];
                    for oy in 0..ho {
                        let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * s.w..];
                        let dst_row = &mut dst[(b * ho + oy) * wo..];
                        for ox in 0..wo {
                            let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < s.w as isize {
                                dst_row[ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(col: &[f64], s: &ConvShape) -> Vec<f64> {
    let (ho, wo) = (s.ho(), s.wo());
    let n = s.cols();
    let mut x = vec![0.0; s.c_in * s.batch * s.h * s.w];
    for ci in 0..s.c_in {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                let src = &col[row * n..(row + 1) * n];
                for b in 0..s.batch {
                    let base = (ci * s.batch + b) * s.h * s.w;
                    for oy in 0..ho {
                        let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < s.w as isize {
                                x[base + iy as usize * s.w + ix as usize] +=
                                    src[(b * ho + oy) * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Pre-activation output `[C_out, B * Ho * Wo]` and the im2col matrix.
pub fn conv_forward(x: &[f64], weight: &[f64], bias: &[f64], s: &ConvShape) -> (Vec<f64>, Vec<f64>) {
    let col = im2col(x, s);
    let n = s.cols();
    let k = s.k();
    let mut z = vec![0.0; s.c_out * n];
    for (co, row) in z.chunks_mut(n).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[co]);
    }
    gemm(s.c_out, k, n, weight, (k as isize, 1), &col, (n as isize, 1), 1.0, &mut z, (n as isize, 1));
    (z, col)
}

/// Returns `(d_weight, d_bias, d_input)`; `d_input` is skipped when
/// `need_input` is false.
pub fn conv_backward(
    dz: &[f64],
    col: &[f64],
    weight: &[f64],
    s: &ConvShape,
    need_input: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let n = s.cols();
    let k = s.k();
    let mut dw = vec![0.0; s.c_out * k];
    // dW = dz @ col^T
    gemm(s.c_out, n, k, dz, (n as isize, 1), col, (1, n as isize), 0.0, &mut dw, (k as isize, 1));
    let db = dz.chunks(n).map(|row| row.iter().sum()).collect();
    let dx = need_input.then(|| {
        let mut dcol = vec![0.0; k * n];
        // dcol = W^T @ dz
        gemm(k, s.c_out, n, weight, (1, k as isize), dz, (n as isize, 1), 0.0, &mut dcol, (n as isize, 1));
        col2im(&dcol, s)
    });
    (dw, db, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Rng;

    /// Direct convolution used as an independent reference.
    fn conv_naive(x: &[f64], w: &[f64], b: &[f64], s: &ConvShape) -> Vec<f64> {
        let (ho, wo) = (s.ho(), s.wo());
        let mut out = vec![0.0; s.c_out * s.batch * ho * wo];
        for co in 0..s.c_out {
            for bi in 0..s.batch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..s.c_in {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * s.c_in + ci) * 3 + ky) * 3 + kx]
                                        * x[((ci * s.batch + bi) * s.h + iy as usize) * s.w + ix as usize];
                                }
                            }
                        }
                        out[((co * s.batch + bi) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn output_extent() {
        assert_eq!(conv_out(64), 32);
        assert_eq!(conv_out(8), 4);
        assert_eq!(conv_out(7), 4);
        assert_eq!(conv_out(1), 1);
    }

    #[test]
    fn im2col_conv_matches_direct() {
        let s = ConvShape { c_in: 3, c_out: 4, batch: 2, h: 7, w: 6 };
        let mut rng = Rng::new(1);
        let x: Vec<f64> = (0..3 * 2 * 7 * 6).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..4 * 27).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let (z, _) = conv_forward(&x, &w, &b, &s);
        let reference = conv_naive(&x, &w, &b, &s);
        for (a, r) in z.iter().zip(&reference) {
            assert!((a - r).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let s = ConvShape { c_in: 2, c_out: 1, batch: 2, h: 5, w: 8 };
        let mut rng = Rng::new(2);
        let x: Vec<f64> = (0..2 * 2 * 5 * 8).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..s.k() * s.cols()).map(|_| rng.normal()).collect();
        let lhs: f64 = im2col(&x, &s).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &s)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
