//! Raw NCHW kernels used by the graph ops.

use super::tensor::{gemm, Float};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Unfolds one image (`c_in × h × w`) into a `(c_in·k·k) × (oh·ow)` matrix.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    debug_assert_eq!(cols.len(), g.patch() * l);
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Batched convolution. `w` is `c_out × c_in × k × k`.
pub fn conv2d_forward<T: Float>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
    c_out: usize,
) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); n * c_out * l];
    let pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); g.patch() * l] };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * c_out * l..(b + 1) * c_out * l];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(l).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let rhs: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(false, false, c_out, l, g.patch(), T::one(), w, rhs, beta, ob);
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output is computed only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    c_out: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    let in_len = g.c_in * g.h * g.w;
    let pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
    let mut cols = vec![T::zero(); g.patch() * l];
    for b in 0..n {
        let gb = &dout[b * c_out * l..(b + 1) * c_out * l];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in gb.chunks(l).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let rhs: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            gemm(false, true, c_out, g.patch(), l, T::one(), gb, rhs, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm(true, false, g.patch(), l, c_out, T::one(), w, gb, T::one(), dxb);
            } else {
                gemm(true, false, g.patch(), l, c_out, T::one(), w, gb, T::zero(), &mut cols);
                col2im(&cols, g, dxb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn conv_naive(x: &[f64], n: usize, g: &ConvGeom, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
        let (oh, ow) = g.out_hw();
        let mut out = vec![0.0; n * c_out * oh * ow];
        for bi in 0..n {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..g.c_in {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * g.c_in + ci) * g.k + ki) * g.k + kj]
                                        * x[((bi * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        out[((bi * c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1), (7, 1, 3)] {
            let g = ConvGeom { c_in: 3, h: 9, w: 8, k, stride, pad };
            let n = 2;
            let c_out = 4;
            let x: Vec<f64> = (0..n * 3 * 72).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
            let w: Vec<f64> = (0..c_out * g.patch()).map(|i| ((i * 13 % 29) as f64 / 14.0) - 1.0).collect();
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&x, n, &g, &w, Some(&b), c_out);
            let slow = conv_naive(&x, n, &g, &w, &b, c_out);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { c_in: 2, h: 6, w: 5, k: 3, stride: 2, pad: 1 };
        let (oh, ow) = g.out_hw();
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch() * oh * ow).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
