//! Per-sample layer kernels on `[channels, height, width]` activations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Real;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Act<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Act {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds `x` into a `(c * k * k) x (h * w)` matrix for "same" convolution.
fn im2col<T: Real>(x: &Act<T>, k: usize, col: &mut [T]) {
    let (h, w, hw) = (x.h, x.w, x.hw());
    let pad = (k / 2) as isize;
    for ci in 0..x.c {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let x0 = (-dx).clamp(0, w as isize) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].fill(T::zero());
                    dst[x0..x1].copy_from_slice(
                        &srow[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize],
                    );
                    dst[x1..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `dx`.
fn col2im<T: Real>(col: &[T], k: usize, dx: &mut Act<T>) {
    let (h, w, hw) = (dx.h, dx.w, dx.hw());
    let pad = (k / 2) as isize;
    for ci in 0..dx.c {
        let dst = &mut dx.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let ddx = kx as isize - pad;
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let x0 = (-ddx).clamp(0, w as isize) as usize;
                let x1 = (w as isize - ddx).clamp(0, w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = sy as usize * w;
                    let src = &row[y * w + x0..y * w + x1];
                    let out = &mut dst
                        [base + (x0 as isize + ddx) as usize..base + (x1 as isize + ddx) as usize];
                    for (o, &s) in out.iter_mut().zip(src) {
                        *o = *o + s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(x: &Act<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Act<T> {
    let hw = x.hw();
    let kk = x.c * k * k;
    let mut y = Act::zeros(cout, x.h, x.w);
    if k == 1 {
        T::gemm(cout, kk, hw, weight, false, &x.data, false, &mut y.data, false);
    } else {
        let mut col = vec![T::zero(); kk * hw];
        im2col(x, k, &mut col);
        T::gemm(cout, kk, hw, weight, false, &col, false, &mut y.data, false);
    }
    for (co, &b) in bias.iter().enumerate() {
        for v in &mut y.data[co * hw..(co + 1) * hw] {
            *v = *v + b;
        }
    }
    y
}

/// Accumulates kernel and bias gradients and returns the input gradient when
/// `need_dx` is set.
pub(crate) fn conv_backward<T: Real>(
    x: &Act<T>,
    weight: &[T],
    dy: &Act<T>,
    k: usize,
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Act<T>> {
    let hw = x.hw();
    let kk = x.c * k * k;
    let cout = dy.c;
    for co in 0..cout {
        let s: f64 = dy.data[co * hw..(co + 1) * hw]
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .sum();
        db[co] = db[co] + T::from_f64(s);
    }
    if k == 1 {
        T::gemm(cout, hw, kk, &dy.data, false, &x.data, true, dw, true);
        return need_dx.then(|| {
            let mut dx = Act::zeros(x.c, x.h, x.w);
            T::gemm(kk, cout, hw, weight, true, &dy.data, false, &mut dx.data, false);
            dx
        });
    }
    let mut col = vec![T::zero(); kk * hw];
    im2col(x, k, &mut col);
    T::gemm(cout, hw, kk, &dy.data, false, &col, true, dw, true);
    if !need_dx {
        return None;
    }
    T::gemm(kk, cout, hw, weight, true, &dy.data, false, &mut col, false);
    let mut dx = Act::zeros(x.c, x.h, x.w);
    col2im(&col, k, &mut dx);
    Some(dx)
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Act<T>) {
    for v in x.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub(crate) fn relu_backward<T: Real>(out: &Act<T>, dy: &mut Act<T>) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max-pool; returns the pooled activation and the flat argmax index of
/// each output element. Ties go to the first element in raster order.
pub(crate) fn maxpool_forward<T: Real>(x: &Act<T>) -> (Act<T>, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Act::zeros(x.c, h2, w2);
    let mut arg = vec![0u32; x.c * h2 * w2];
    for c in 0..x.c {
        let base = c * x.hw();
        for oy in 0..h2 {
            for ox in 0..w2 {
                let mut best = base + 2 * oy * x.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * x.w + 2 * ox + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = (c * h2 + oy) * w2 + ox;
                y.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward<T: Real>(dy: &Act<T>, arg: &[u32], dx: &mut Act<T>) {
    for (g, &i) in dy.data.iter().zip(arg) {
        dx.data[i as usize] = dx.data[i as usize] + *g;
    }
}

pub(crate) fn upsample_forward<T: Real>(x: &Act<T>) -> Act<T> {
    let (h, w) = (2 * x.h, 2 * x.w);
    let mut y = Act::zeros(x.c, h, w);
    for c in 0..x.c {
        for yy in 0..h {
            let src = &x.data[(c * x.h + yy / 2) * x.w..][..x.w];
            let dst = &mut y.data[(c * h + yy) * w..][..w];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    y
}

pub(crate) fn upsample_backward<T: Real>(dy: &Act<T>) -> Act<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for yy in 0..dy.h {
            let src = &dy.data[(c * dy.h + yy) * dy.w..][..dy.w];
            let dst = &mut dx.data[(c * h + yy / 2) * w..][..w];
            for (xx, &g) in src.iter().enumerate() {
                dst[xx / 2] = dst[xx / 2] + g;
            }
        }
    }
    dx
}

/// Inverted dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub(crate) fn dropout_mask<T: Real>(len: usize, rate: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub(crate) fn apply_mask<T: Real>(x: &mut Act<T>, mask: &[T]) {
    for (v, &m) in x.data.iter_mut().zip(mask) {
        *v = *v * m;
    }
}

pub(crate) fn concat<T: Real>(a: &Act<T>, b: &Act<T>) -> Act<T> {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Act {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Splits a gradient of a concatenation back into its two parts.
pub(crate) fn split<T: Real>(d: Act<T>, c_first: usize) -> (Act<T>, Act<T>) {
    let n = c_first * d.hw();
    let mut first = d.data;
    let second = first.split_off(n);
    (
        Act {
            c: c_first,
            h: d.h,
            w: d.w,
            data: first,
        },
        Act {
            c: d.c - c_first,
            h: d.h,
            w: d.w,
            data: second,
        },
    )
}
