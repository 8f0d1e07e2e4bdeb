//! Raw forward/backward kernels on flat buffers. No graph bookkeeping here.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1×1, stride-1, unpadded convolution reads its input as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one C×H×W image into a (C·k·k)×(H'·W') column matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let hw_out = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..g.h_out {
                    let ih = (oh * s + ki) as isize - p;
                    let line = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, slot) in line.iter_mut().enumerate() {
                        let iw = (ow * s + kj) as isize - p;
                        *slot = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds column entries back onto the image.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let hw_out = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..g.h_out {
                    let ih = (oh * s + ki) as isize - p;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = (ow * s + kj) as isize - p;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] = dst[iw as usize] + src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    n: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * hw;
    let mut out = vec![T::zero(); n * out_per];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * hw]
    };
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let ys = &mut out[s * out_per..(s + 1) * out_per];
        for (co, plane) in ys.chunks_mut(hw).enumerate() {
            plane.fill(bias[co]);
        }
        let b: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        T::gemm(
            g.c_out,
            rows,
            hw,
            T::one(),
            weight,
            rows as isize,
            1,
            b,
            hw as isize,
            1,
            T::one(),
            ys,
            hw as isize,
            1,
        );
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is only computed when `need_dx`.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    n: usize,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * hw;
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_per]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.c_out * rows]);
    let mut db = need_dw.then(|| vec![T::zero(); g.c_out]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * hw]
    };
    let mut dcols = if need_dx && !g.is_pointwise() {
        vec![T::zero(); rows * hw]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let dys = &dy[s * out_per..(s + 1) * out_per];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            T::gemm(
                g.c_out,
                hw,
                rows,
                T::one(),
                dys,
                hw as isize,
                1,
                b,
                1,
                hw as isize,
                T::one(),
                dw,
                rows as isize,
                1,
            );
            for (co, plane) in dys.chunks(hw).enumerate() {
                db[co] = plane.iter().fold(db[co], |acc, &v| acc + v);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            if g.is_pointwise() {
                // dX = Wᵀ · dY written straight into the input gradient.
                T::gemm(
                    rows,
                    g.c_out,
                    hw,
                    T::one(),
                    weight,
                    1,
                    rows as isize,
                    dys,
                    hw as isize,
                    1,
                    T::zero(),
                    dxs,
                    hw as isize,
                    1,
                );
            } else {
                T::gemm(
                    rows,
                    g.c_out,
                    hw,
                    T::one(),
                    weight,
                    1,
                    rows as isize,
                    dys,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    hw as isize,
                    1,
                );
                col2im(&dcols, g, dxs);
            }
        }
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Max pooling; returns the output and the flat in-plane argmax per output
/// (first occurrence wins on ties).
pub(crate) fn max_pool_forward<T: Real>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let out_per = g.h_out * g.w_out;
    let mut out = Vec::with_capacity(g.planes * out_per);
    let mut arg = Vec::with_capacity(g.planes * out_per);
    for p in 0..g.planes {
        let plane = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oh in 0..g.h_out {
            for ow in 0..g.w_out {
                let (r0, c0) = (oh * g.stride, ow * g.stride);
                let mut best_idx = r0 * g.w + c0;
                let mut best = plane[best_idx];
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let idx = (r0 + i) * g.w + c0 + j;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool_forward<T: Real>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let inv = T::one() / T::from_f64((g.kh * g.kw) as f64);
    let mut out = Vec::with_capacity(g.planes * g.h_out * g.w_out);
    for p in 0..g.planes {
        let plane = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oh in 0..g.h_out {
            for ow in 0..g.w_out {
                let (r0, c0) = (oh * g.stride, ow * g.stride);
                let mut acc = T::zero();
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        acc = acc + plane[(r0 + i) * g.w + c0 + j];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub(crate) fn max_pool_backward<T: Real>(dy: &[T], arg: &[u32], g: &PoolGeom) -> Vec<T> {
    let out_per = g.h_out * g.w_out;
    let mut dx = vec![T::zero(); g.planes * g.h * g.w];
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for o in 0..out_per {
            let idx = base + arg[p * out_per + o] as usize;
            dx[idx] = dx[idx] + dy[p * out_per + o];
        }
    }
    dx
}

pub(crate) fn avg_pool_backward<T: Real>(dy: &[T], g: &PoolGeom) -> Vec<T> {
    let inv = T::one() / T::from_f64((g.kh * g.kw) as f64);
    let mut dx = vec![T::zero(); g.planes * g.h * g.w];
    for p in 0..g.planes {
        let plane = &mut dx[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oh in 0..g.h_out {
            for ow in 0..g.w_out {
                let v = dy[(p * g.h_out + oh) * g.w_out + ow] * inv;
                let (r0, c0) = (oh * g.stride, ow * g.stride);
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let idx = (r0 + i) * g.w + c0 + j;
                        plane[idx] = plane[idx] + v;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn upsample2x_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[i * w2 + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let r0 = 2 * i * w2 + 2 * j;
                let r1 = r0 + w2;
                dst[i * w + j] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
            }
        }
    }
    dx
}
