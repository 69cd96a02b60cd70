//! Forward and adjoint kernels for the primitive catalog.
//!
//! Layouts: dense activations are `(m, features)`, dense weights
//! `(out, in)`; images are NCHW, conv weights `(out, in, k, k)`. Dense and
//! conv outputs carry the `1/sqrt(fan_in)` factor of the NTK
//! parameterization and no bias.

use super::scalar::Scalar;

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn dense_fwd<T: Scalar>(x: &[T], w: &[T], m: usize, fan_in: usize, out: usize) -> Vec<T> {
    let s = 1.0 / (fan_in as f64).sqrt();
    let mut y = vec![T::zero(); m * out];
    for r in 0..m {
        let xr = &x[r * fan_in..(r + 1) * fan_in];
        for o in 0..out {
            y[r * out + o] = dot(&w[o * fan_in..(o + 1) * fan_in], xr).scale(s);
        }
    }
    y
}

/// Returns `(grad_x, grad_w)`.
pub fn dense_bwd<T: Scalar>(
    gy: &[T],
    x: &[T],
    w: &[T],
    m: usize,
    fan_in: usize,
    out: usize,
) -> (Vec<T>, Vec<T>) {
    let s = 1.0 / (fan_in as f64).sqrt();
    let mut gx = vec![T::zero(); m * fan_in];
    let mut gw = vec![T::zero(); out * fan_in];
    for r in 0..m {
        let xr = &x[r * fan_in..(r + 1) * fan_in];
        for o in 0..out {
            let g = gy[r * out + o].scale(s);
            if g == T::zero() {
                continue;
            }
            axpy(g, &w[o * fan_in..(o + 1) * fan_in], &mut gx[r * fan_in..(r + 1) * fan_in]);
            axpy(g, xr, &mut gw[o * fan_in..(o + 1) * fan_in]);
        }
    }
    (gx, gw)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub m: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }
    fn scale(&self) -> f64 {
        1.0 / ((self.c_in * self.k * self.k) as f64).sqrt()
    }
    /// Valid output column range `[lo, hi)` for kernel offset `kx`.
    #[inline]
    fn span(&self, off: usize, extent: usize) -> (usize, usize, isize) {
        let d = off as isize - self.pad();
        let lo = (-d).max(0) as usize;
        let hi = ((extent as isize) - d).min(extent as isize).max(0) as usize;
        (lo, hi, d)
    }
}

/// Stride-1 "same" convolution.
pub fn conv_fwd<T: Scalar>(x: &[T], w: &[T], d: ConvDims) -> Vec<T> {
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    let mut y = vec![T::zero(); d.m * d.c_out * hw];
    for n in 0..d.m {
        for o in 0..d.c_out {
            let yo = &mut y[(n * d.c_out + o) * hw..(n * d.c_out + o + 1) * hw];
            for c in 0..d.c_in {
                let xc = &x[(n * d.c_in + c) * hw..(n * d.c_in + c + 1) * hw];
                for ky in 0..d.k {
                    let (ylo, yhi, dy) = d.span(ky, d.h);
                    for kx in 0..d.k {
                        let wv = w[(o * d.c_in + c) * kk + ky * d.k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (xlo, xhi, dx) = d.span(kx, d.w);
                        for yy in ylo..yhi {
                            let sy = (yy as isize + dy) as usize;
                            let src = &xc[sy * d.w..(sy + 1) * d.w];
                            let dst = &mut yo[yy * d.w..(yy + 1) * d.w];
                            for xx in xlo..xhi {
                                dst[xx] += wv * src[(xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
            let s = d.scale();
            for v in yo.iter_mut() {
                *v = v.scale(s);
            }
        }
    }
    y
}

pub fn conv_bwd<T: Scalar>(gy: &[T], x: &[T], w: &[T], d: ConvDims) -> (Vec<T>, Vec<T>) {
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    let s = d.scale();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    for n in 0..d.m {
        for o in 0..d.c_out {
            let go: Vec<T> = gy[(n * d.c_out + o) * hw..(n * d.c_out + o + 1) * hw]
                .iter()
                .map(|v| v.scale(s))
                .collect();
            for c in 0..d.c_in {
                let base = (n * d.c_in + c) * hw;
                for ky in 0..d.k {
                    let (ylo, yhi, dy) = d.span(ky, d.h);
                    for kx in 0..d.k {
                        let widx = (o * d.c_in + c) * kk + ky * d.k + kx;
                        let wv = w[widx];
                        let (xlo, xhi, dx) = d.span(kx, d.w);
                        let mut acc = T::zero();
                        for yy in ylo..yhi {
                            let sy = (yy as isize + dy) as usize;
                            for xx in xlo..xhi {
                                let sx = (xx as isize + dx) as usize;
                                let g = go[yy * d.w + xx];
                                acc += g * x[base + sy * d.w + sx];
                                gx[base + sy * d.w + sx] += g * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// 3x3 stride-1 pooling window bounds around `(y, x)` clipped to the image.
#[inline]
fn window(y: usize, x: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    (y.saturating_sub(1), (y + 2).min(h), x.saturating_sub(1), (x + 2).min(w))
}

/// 3x3 average pooling, padding excluded from the count.
pub fn mean_pool_fwd<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                let (y0, y1, x0, x1) = window(yy, xx, h, w);
                let mut acc = T::zero();
                for sy in y0..y1 {
                    for sx in x0..x1 {
                        acc += xp[sy * w + sx];
                    }
                }
                y[p * h * w + yy * w + xx] = acc.scale(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    y
}

pub fn mean_pool_bwd<T: Scalar>(gy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); gy.len()];
    for p in 0..planes {
        for yy in 0..h {
            for xx in 0..w {
                let (y0, y1, x0, x1) = window(yy, xx, h, w);
                let g = gy[p * h * w + yy * w + xx].scale(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
                for sy in y0..y1 {
                    for sx in x0..x1 {
                        gx[p * h * w + sy * w + sx] += g;
                    }
                }
            }
        }
    }
    gx
}

/// 3x3 max pooling; ties resolve to the first element in row-major order.
fn max_pool_argmax<T: Scalar>(xp: &[T], yy: usize, xx: usize, h: usize, w: usize) -> usize {
    let (y0, y1, x0, x1) = window(yy, xx, h, w);
    let mut best = y0 * w + x0;
    for sy in y0..y1 {
        for sx in x0..x1 {
            if xp[sy * w + sx].re() > xp[best].re() {
                best = sy * w + sx;
            }
        }
    }
    best
}

pub fn max_pool_fwd<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                y[p * h * w + yy * w + xx] = xp[max_pool_argmax(xp, yy, xx, h, w)];
            }
        }
    }
    y
}

pub fn max_pool_bwd<T: Scalar>(gy: &[T], x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); x.len()];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                let a = max_pool_argmax(xp, yy, xx, h, w);
                gx[p * h * w + a] += gy[p * h * w + yy * w + xx];
            }
        }
    }
    gx
}

/// Row-wise softmax over the trailing axis of width `w`.
pub fn softmax_rows<T: Scalar>(x: &[T], w: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(w) {
        let mx = row.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<T> = row.iter().map(|&v| (v - T::from_f64(mx)).exp()).collect();
        let z = e.iter().fold(T::zero(), |a, &b| a + b);
        y.extend(e.into_iter().map(|v| v / z));
    }
    y
}

pub fn softmax_bwd<T: Scalar>(gy: &[T], y: &[T], w: usize) -> Vec<T> {
    let mut gx = Vec::with_capacity(y.len());
    for (g, s) in gy.chunks(w).zip(y.chunks(w)) {
        let d = dot(g, s);
        gx.extend(g.iter().zip(s).map(|(&gi, &si)| si * (gi - d)));
    }
    gx
}
