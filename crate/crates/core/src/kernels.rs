//! Raw loops behind the taped operations.
//!
//! Layouts are channel-last: feature maps are `[batch, h, w, d]`, dynamic
//! kernels `[batch, h, w, k, k, g]` with the `(di, dj, group)` suffix in
//! row-major order. Every loop parallelises over disjoint output rows only.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Scalar;

/// Geometry of a dynamic depth-wise convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::config(format!(
                "channels {} not divisible by groups {}",
                self.channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    pub fn kernel_len(&self) -> usize {
        self.batch * self.height * self.width * self.taps() * self.groups
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Nominal multiply-accumulates, zero-padded taps included.
    pub fn macs(&self) -> usize {
        self.feature_len() * self.taps()
    }
}

/// Dynamic depth-wise convolution, stride 1, zero padding, centred taps.
pub fn dyconv_forward<T: Scalar>(g: ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let ConvGeom { height: h, width: wd, channels: d, kernel: k, groups, .. } = g;
    let cpg = d / groups;
    let r = (k / 2) as isize;
    let row = wd * d;
    par::for_each_chunk(out, row, |bi, orow| {
        let b = bi / h;
        let i = (bi % h) as isize;
        orow.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..wd {
            let kbase = ((b * h + i as usize) * wd + j) * k * k * groups;
            let o = &mut orow[j * d..(j + 1) * d];
            for a in 0..k {
                let ii = i + a as isize - r;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for bb in 0..k {
                    let jj = j as isize + bb as isize - r;
                    if jj < 0 || jj >= wd as isize {
                        continue;
                    }
                    let xs = ((b * h + ii as usize) * wd + jj as usize) * d;
                    let xrow = &x[xs..xs + d];
                    let kern = &w[kbase + (a * k + bb) * groups..][..groups];
                    group_axpy(cpg, o, xrow, kern);
                }
            }
        }
    });
}

/// `o[c] += w[c / cpg] * x[c]`, with the common group widths unrolled.
#[inline]
fn group_axpy<T: Scalar>(cpg: usize, o: &mut [T], x: &[T], w: &[T]) {
    #[inline(always)]
    fn fixed<T: Scalar, const C: usize>(o: &mut [T], x: &[T], w: &[T]) {
        for ((o, x), &wv) in o.chunks_exact_mut(C).zip(x.chunks_exact(C)).zip(w) {
            for c in 0..C {
                o[c] += wv * x[c];
            }
        }
    }
    match cpg {
        1 => fixed::<T, 1>(o, x, w),
        2 => fixed::<T, 2>(o, x, w),
        4 => fixed::<T, 4>(o, x, w),
        8 => fixed::<T, 8>(o, x, w),
        16 => fixed::<T, 16>(o, x, w),
        _ => {
            for ((o, x), &wv) in o.chunks_exact_mut(cpg).zip(x.chunks_exact(cpg)).zip(w) {
                for (ov, &xv) in o.iter_mut().zip(x) {
                    *ov += wv * xv;
                }
            }
        }
    }
}

/// `t[g] = sum over the group's channels of a[c] * b[c]`.
#[inline]
fn group_dot<T: Scalar>(cpg: usize, t: &mut [T], a: &[T], b: &[T]) {
    #[inline(always)]
    fn fixed<T: Scalar, const C: usize>(t: &mut [T], a: &[T], b: &[T]) {
        for ((t, a), b) in t.iter_mut().zip(a.chunks_exact(C)).zip(b.chunks_exact(C)) {
            let mut s = T::zero();
            for c in 0..C {
                s += a[c] * b[c];
            }
            *t = s;
        }
    }
    match cpg {
        1 => fixed::<T, 1>(t, a, b),
        2 => fixed::<T, 2>(t, a, b),
        4 => fixed::<T, 4>(t, a, b),
        8 => fixed::<T, 8>(t, a, b),
        16 => fixed::<T, 16>(t, a, b),
        _ => {
            for ((t, a), b) in t.iter_mut().zip(a.chunks_exact(cpg)).zip(b.chunks_exact(cpg)) {
                let mut s = T::zero();
                for (&x, &y) in a.iter().zip(b) {
                    s += x * y;
                }
                *t = s;
            }
        }
    }
}

/// Gradient wrt the input features (gather form).
pub fn dyconv_backward_input<T: Scalar>(g: ConvGeom, dy: &[T], w: &[T], dx: &mut [T]) {
    let ConvGeom { height: h, width: wd, channels: d, kernel: k, groups, .. } = g;
    let cpg = d / groups;
    let r = (k / 2) as isize;
    par::for_each_chunk(dx, wd * d, |bi, drow| {
        let b = bi / h;
        let ii = (bi % h) as isize;
        drow.iter_mut().for_each(|v| *v = T::zero());
        for jj in 0..wd {
            let o = &mut drow[jj * d..(jj + 1) * d];
            for a in 0..k {
                // output row i whose tap `a` reads input row ii
                let i = ii - a as isize + r;
                if i < 0 || i >= h as isize {
                    continue;
                }
                for bb in 0..k {
                    let j = jj as isize - bb as isize + r;
                    if j < 0 || j >= wd as isize {
                        continue;
                    }
                    let pos = (b * h + i as usize) * wd + j as usize;
                    let gy = &dy[pos * d..(pos + 1) * d];
                    let kern = &w[pos * k * k * groups + (a * k + bb) * groups..][..groups];
                    group_axpy(cpg, o, gy, kern);
                }
            }
        }
    });
}

/// Gradient wrt the per-position kernels.
pub fn dyconv_backward_kernels<T: Scalar>(g: ConvGeom, dy: &[T], x: &[T], dw: &mut [T]) {
    let ConvGeom { height: h, width: wd, channels: d, kernel: k, groups, .. } = g;
    let cpg = d / groups;
    let r = (k / 2) as isize;
    let per_pos = k * k * groups;
    par::for_each_chunk(dw, wd * per_pos, |bi, drow| {
        let b = bi / h;
        let i = (bi % h) as isize;
        for j in 0..wd {
            let pos = (b * h + i as usize) * wd + j;
            let gy = &dy[pos * d..(pos + 1) * d];
            let o = &mut drow[j * per_pos..(j + 1) * per_pos];
            for a in 0..k {
                let ii = i + a as isize - r;
                for bb in 0..k {
                    let jj = j as isize + bb as isize - r;
                    let taps = &mut o[(a * k + bb) * groups..][..groups];
                    if ii < 0 || ii >= h as isize || jj < 0 || jj >= wd as isize {
                        taps.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let xs = ((b * h + ii as usize) * wd + jj as usize) * d;
                    let xrow = &x[xs..xs + d];
                    group_dot(cpg, taps, gy, xrow);
                }
            }
        }
    });
}

/// Packs each `s x s` block of a `[batch, h, w, d]` map into one token of
/// width `s*s*d`; tokens are in block row-major order and the features inside
/// a token are ordered `(si, sj, channel)`.
pub fn pixel_pack<T: Scalar>(
    batch: usize,
    h: usize,
    w: usize,
    d: usize,
    s: usize,
    x: &[T],
) -> Result<Vec<T>> {
    check_packing(h, w, s)?;
    if x.len() != batch * h * w * d {
        return Err(Error::shape(format!(
            "buffer of {} does not hold a {batch}x{h}x{w}x{d} map",
            x.len()
        )));
    }
    let (bh, bw) = (h / s, w / s);
    let mut out = vec![T::zero(); x.len()];
    let tok = s * s * d;
    par::for_each_chunk(&mut out, tok, |t, o| {
        let b = t / (bh * bw);
        let bi = (t / bw) % bh;
        let bj = t % bw;
        for si in 0..s {
            for sj in 0..s {
                let src = ((b * h + bi * s + si) * w + bj * s + sj) * d;
                o[(si * s + sj) * d..][..d].copy_from_slice(&x[src..src + d]);
            }
        }
    });
    Ok(out)
}

/// Exact inverse of [`pixel_pack`].
pub fn pixel_unpack<T: Scalar>(
    batch: usize,
    h: usize,
    w: usize,
    d: usize,
    s: usize,
    packed: &[T],
) -> Result<Vec<T>> {
    check_packing(h, w, s)?;
    if packed.len() != batch * h * w * d {
        return Err(Error::shape(format!(
            "packed buffer of {} does not hold a {batch}x{h}x{w}x{d} map",
            packed.len()
        )));
    }
    let (bh, bw) = (h / s, w / s);
    let mut out = vec![T::zero(); packed.len()];
    par::for_each_chunk(&mut out, w * d, |bi_row, o| {
        let b = bi_row / h;
        let i = bi_row % h;
        for j in 0..w {
            let t = (b * bh + i / s) * bw + j / s;
            let inner = ((i % s) * s + j % s) * d;
            o[j * d..(j + 1) * d].copy_from_slice(&packed[t * s * s * d + inner..][..d]);
        }
    });
    Ok(out)
}

/// Nearest-neighbour recovery of a packed `[batch, (h/s)(w/s), d]` matrix to
/// `[batch, h*w, d]`: each packed row is replicated over its `s x s` cell.
pub fn upsample_cells<T: Scalar>(
    h: usize,
    w: usize,
    d: usize,
    s: usize,
    packed: &[T],
    out: &mut [T],
) {
    let (bh, bw) = (h / s, w / s);
    par::for_each_chunk(out, w * d, |row, o| {
        let b = row / h;
        let i = row % h;
        for j in 0..w {
            let t = (b * bh + i / s) * bw + j / s;
            o[j * d..(j + 1) * d].copy_from_slice(&packed[t * d..(t + 1) * d]);
        }
    });
}

/// Adjoint of [`upsample_cells`]: sums each cell back into its packed row.
pub fn upsample_cells_backward<T: Scalar>(
    h: usize,
    w: usize,
    d: usize,
    s: usize,
    grad: &[T],
    out: &mut [T],
) {
    let (bh, bw) = (h / s, w / s);
    par::for_each_chunk(out, d, |t, o| {
        let b = t / (bh * bw);
        let ci = (t / bw) % bh;
        let cj = t % bw;
        o.iter_mut().for_each(|v| *v = T::zero());
        for si in 0..s {
            for sj in 0..s {
                let p = (b * h + ci * s + si) * w + cj * s + sj;
                for (ov, &gv) in o.iter_mut().zip(&grad[p * d..(p + 1) * d]) {
                    *ov += gv;
                }
            }
        }
    });
}

pub(crate) fn check_packing(h: usize, w: usize, s: usize) -> Result<()> {
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::shape(format!(
            "packing size {s} must divide the {h}x{w} resolution"
        )));
    }
    Ok(())
}

/// Row softmax over the last dimension. With a mask, row `r` uses
/// `mask[(r / rows_per_mask) * n ..][..n]`; masked entries come out as exact zeros.
pub fn softmax_rows<T: Scalar>(
    n: usize,
    x: &[T],
    mask: Option<(&[bool], usize)>,
    out: &mut [T],
) {
    par::for_each_chunk(out, n, |r, o| {
        let xs = &x[r * n..(r + 1) * n];
        let m = mask.map(|(m, per)| &m[(r / per) * n..][..n]);
        let keep = |c: usize| m.is_none_or(|m| m[c]);
        let mut mx = T::neg_infinity();
        for (c, &v) in xs.iter().enumerate() {
            if keep(c) && v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (c, (ov, &v)) in o.iter_mut().zip(xs).enumerate() {
            *ov = if keep(c) { (v - mx).exp() } else { T::zero() };
            sum += *ov;
        }
        let inv = T::one() / sum;
        o.iter_mut().for_each(|v| *v *= inv);
    });
}

/// `dx = y * (dy - sum(dy * y))` row by row.
pub fn softmax_rows_backward<T: Scalar>(n: usize, y: &[T], dy: &[T], dx: &mut [T]) {
    par::for_each_chunk(dx, n, |r, o| {
        let ys = &y[r * n..(r + 1) * n];
        let gs = &dy[r * n..(r + 1) * n];
        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(ys).zip(gs) {
            *ov = yv * (gv - dot);
        }
    });
}

/// Per-channel batch statistics over `rows x d`: (mean, biased variance).
pub fn channel_stats<T: Scalar>(rows: usize, d: usize, x: &[T]) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0f64; d];
    for row in x.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0f64; d];
    for row in x.chunks_exact(d) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let c = v.as_f64() - m;
            *s += c * c;
        }
    }
    var.iter_mut().for_each(|v| *v /= rows as f64);
    (mean, var)
}

/// 2x2 stride-2 max pooling; returns the flat input index of every maximum.
pub fn maxpool2<T: Scalar>(
    batch: usize,
    h: usize,
    w: usize,
    d: usize,
    x: &[T],
) -> Result<(Vec<T>, Vec<u32>)> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("2x2 pooling needs even resolution, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let n = batch * oh * ow * d;
    let mut out = vec![T::zero(); n];
    let mut arg = vec![0u32; n];
    for b in 0..batch {
        for i in 0..oh {
            for j in 0..ow {
                let obase = ((b * oh + i) * ow + j) * d;
                for c in 0..d {
                    let mut best = T::neg_infinity();
                    let mut at = 0usize;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * d + c;
                        if x[idx] > best {
                            best = x[idx];
                            at = idx;
                        }
                    }
                    out[obase + c] = best;
                    arg[obase + c] = at as u32;
                }
            }
        }
    }
    Ok((out, arg))
}
