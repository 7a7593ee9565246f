//! Batched CPU kernels behind the graph operations. Layouts are NCHW,
//! row-major; convolution is cross-correlation with zero padding.

use crate::scalar::{gemm, MatRef, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a convolution reading `channels x height x width`.
    pub fn conv(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if height + 2 * pad < kernel || width + 2 * pad < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image into `[C*k*k, out_h*out_w]`.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in src[oy * g.out_w..(oy + 1) * g.out_w].iter().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = W * im2col(x[n]) + b`; `w` is `[Co, C*k*k]`.
pub fn conv_forward<T: Scalar>(x: &[T], batch: usize, g: &ConvGeom, w: &[T], b: Option<&[T]>, out_ch: usize, out: &mut [T]) {
    let in_per = g.channels * g.height * g.width;
    let out_per = out_ch * g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        im2col(&x[n * in_per..(n + 1) * in_per], g, &mut cols);
        let o = &mut out[n * out_per..(n + 1) * out_per];
        add_bias(o, b, g.col_cols());
        gemm(
            MatRef::new(w, out_ch, g.col_rows()),
            MatRef::new(&cols, g.col_rows(), g.col_cols()),
            if b.is_some() { T::one() } else { T::zero() },
            o,
        );
    }
}

/// Gradients of [`conv_forward`]. Any of `dx`, `dw`, `db` may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    out_ch: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let in_per = g.channels * g.height * g.width;
    let hw = g.col_cols();
    let out_per = out_ch * hw;
    let mut cols = vec![T::zero(); g.col_rows() * hw];
    for n in 0..batch {
        let d = &dout[n * out_per..(n + 1) * out_per];
        if let Some(db) = db.as_deref_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += d[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[n * in_per..(n + 1) * in_per], g, &mut cols);
            gemm(
                MatRef::new(d, out_ch, hw),
                MatRef::new(&cols, g.col_rows(), hw).t(),
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                MatRef::new(w, out_ch, g.col_rows()).t(),
                MatRef::new(d, out_ch, hw),
                T::zero(),
                &mut cols,
            );
            col2im(&cols, g, &mut dx[n * in_per..(n + 1) * in_per]);
        }
    }
}

/// Transposed convolution. `g` describes the *adjoint* convolution whose
/// input is this op's output (`Co x out_h' x out_w'`) and whose output is
/// this op's input (`Ci x H x W`). `w` is `[Ci, Co*k*k]`.
pub fn conv_t_forward<T: Scalar>(x: &[T], batch: usize, in_ch: usize, g: &ConvGeom, w: &[T], b: Option<&[T]>, out: &mut [T]) {
    let hw = g.col_cols();
    let in_per = in_ch * hw;
    let out_plane = g.height * g.width;
    let out_per = g.channels * out_plane;
    let mut cols = vec![T::zero(); g.col_rows() * hw];
    for n in 0..batch {
        gemm(
            MatRef::new(w, in_ch, g.col_rows()).t(),
            MatRef::new(&x[n * in_per..(n + 1) * in_per], in_ch, hw),
            T::zero(),
            &mut cols,
        );
        let o = &mut out[n * out_per..(n + 1) * out_per];
        add_bias(o, b, out_plane);
        col2im(&cols, g, o);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_t_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    in_ch: usize,
    g: &ConvGeom,
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let hw = g.col_cols();
    let in_per = in_ch * hw;
    let out_plane = g.height * g.width;
    let out_per = g.channels * out_plane;
    let mut cols = vec![T::zero(); g.col_rows() * hw];
    for n in 0..batch {
        let d = &dout[n * out_per..(n + 1) * out_per];
        if let Some(db) = db.as_deref_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += d[co * out_plane..(co + 1) * out_plane].iter().copied().sum::<T>();
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(d, g, &mut cols);
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                MatRef::new(w, in_ch, g.col_rows()),
                MatRef::new(&cols, g.col_rows(), hw),
                T::zero(),
                &mut dx[n * in_per..(n + 1) * in_per],
            );
        }
        if let Some(dw) = dw.as_deref_mut() {
            gemm(
                MatRef::new(&x[n * in_per..(n + 1) * in_per], in_ch, hw),
                MatRef::new(&cols, g.col_rows(), hw).t(),
                T::one(),
                dw,
            );
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], b: Option<&[T]>, plane: usize) {
    match b {
        Some(b) => {
            for (co, &bv) in b.iter().enumerate() {
                out[co * plane..(co + 1) * plane].fill(bv);
            }
        }
        None => out.fill(T::zero()),
    }
}

/// Non-overlapping `k x k` max pooling; returns argmax offsets per output.
pub fn max_pool<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize, out: &mut [T], arg: &mut [u32]) {
    let (oh, ow) = (h / k, w / k);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = (oy * k + dy) * w + ox * k + dx;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
}

pub fn avg_pool<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::lit((k * k) as f64);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        acc += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                out[p * oh * ow + oy * ow + ox] = acc * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], g: &ConvGeom, w: &[f64], co: usize) -> Vec<f64> {
        let mut out = vec![0.0; co * g.out_h * g.out_w];
        for o in 0..co {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for c in 0..g.channels {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                    acc += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                        * w[((o * g.channels + c) * g.kernel + ki) * g.kernel + kj];
                                }
                            }
                        }
                    }
                    out[(o * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let g = ConvGeom::conv(2, 5, 6, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..3 * 18).map(|i| ((i * 5) % 7) as f64 * 0.25 - 0.5).collect();
        let mut out = vec![0.0; 3 * g.out_h * g.out_w];
        conv_forward(&x, 1, &g, &w, None, 3, &mut out);
        assert_eq!(out, direct_conv(&x, &g, &w, 3));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::conv(2, 4, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 32];
        col2im(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
