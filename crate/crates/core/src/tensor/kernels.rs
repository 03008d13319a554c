//! Per-item compute kernels behind the tape primitives.
//!
//! Every kernel loops over the batch and processes one item at a time, so an
//! item's result never depends on which other items share its batch.

use std::ops::Range;

use super::Real;

/// Upper bound on the unrolled patch buffer, sized to stay cache resident.
const COL_BLOCK_BYTES: usize = 256 * 1024;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unrolls output rows `rows` of one item `[cin, h, w]` into
/// `col[cin*kh*kw, rows.len()*ow]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, rows: Range<usize>, col: &mut [T]) {
    let p = rows.len() * g.ow;
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * p..(row + 1) * p];
                for (r, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let seg = &mut dst[r * g.ow..(r + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(kx, g);
                        seg[..lo].fill(T::zero());
                        seg[hi.max(lo)..].fill(T::zero());
                        if hi > lo {
                            seg[lo..hi].copy_from_slice(&src[lo + kx - g.pad..hi + kx - g.pad]);
                        }
                        continue;
                    }
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

/// Output columns `lo..hi` whose stride-1 input column `ox + kx - pad` is in bounds.
fn valid_range(kx: usize, g: &ConvGeom) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx);
    let hi = (g.w + g.pad).saturating_sub(kx).min(g.ow);
    (lo, hi)
}

/// Scatter-adds a `col` block of output rows `rows` back onto an item
/// gradient `[cin, h, w]`.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, rows: Range<usize>, dx: &mut [T]) {
    let p = rows.len() * g.ow;
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * p..(row + 1) * p];
                for (r, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(kx, g);
                        if hi > lo {
                            let d = &mut dst[lo + kx - g.pad..hi + kx - g.pad];
                            for (a, &v) in d.iter_mut().zip(&src[r * g.ow + lo..r * g.ow + hi]) {
                                *a = *a + v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[r * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl ConvGeom {
    /// Output-row blocks whose unrolled patches fit [`COL_BLOCK_BYTES`].
    fn row_blocks<T: Real>(&self) -> Vec<Range<usize>> {
        let per_row = self.patch() * self.ow * T::BYTES;
        let step = (COL_BLOCK_BYTES / per_row.max(1)).clamp(1, self.oh);
        (0..self.oh).step_by(step).map(|r| r..(r + step).min(self.oh)).collect()
    }
}

/// Output lanes and output channels accumulated together by the direct kernel.
const LANES: usize = 16;
const CO_BLOCK: usize = 4;

/// Same-padded, stride-1 convolution of one item `[cin, h, w]` with weights
/// `[cout, cin, k, k]`, computed on a zero-padded copy whose rows are
/// `w + k - 1` wide so every kernel tap reads one contiguous run. Each output
/// accumulates its taps in `(ci, ky, kx)` order starting from zero, then adds
/// the bias.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv_same_item_body<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[T],
    bias: Option<&[T]>,
    cout: usize,
    k: usize,
    xp: &mut Vec<T>,
    out: &mut [T],
) {
    let p = k / 2;
    let wp = w + 2 * p;
    let ps = (h + 2 * p) * wp;
    let len = h * wp;
    let taps = cin * k * k;
    xp.clear();
    xp.resize(cin * ps + 2 * p * wp + 2 * p + LANES, T::zero());
    for c in 0..cin {
        for y in 0..h {
            let dst = c * ps + (y + p) * wp + p;
            xp[dst..dst + w].copy_from_slice(&x[(c * h + y) * w..(c * h + y + 1) * w]);
        }
    }
    let offsets: Vec<usize> = (0..cin)
        .flat_map(|c| (0..k).flat_map(move |ky| (0..k).map(move |kx| c * ps + ky * wp + kx)))
        .collect();
    let mut packed = vec![[T::zero(); CO_BLOCK]; taps];
    for co0 in (0..cout).step_by(CO_BLOCK) {
        let nb = CO_BLOCK.min(cout - co0);
        for (t, pk) in packed.iter_mut().enumerate() {
            for c in 0..CO_BLOCK {
                pk[c] = if c < nb { wt[(co0 + c) * taps + t] } else { T::zero() };
            }
        }
        for j0 in (0..len).step_by(LANES) {
            let mut acc = [[T::zero(); LANES]; CO_BLOCK];
            for (pk, &off) in packed.iter().zip(&offsets) {
                let src: &[T; LANES] = xp[off + j0..off + j0 + LANES].try_into().expect("lane slice");
                for c in 0..CO_BLOCK {
                    let wv = pk[c];
                    for l in 0..LANES {
                        acc[c][l] = acc[c][l] + wv * src[l];
                    }
                }
            }
            for (c, a) in acc.iter().enumerate().take(nb) {
                let b = bias.map_or(T::zero(), |b| b[co0 + c]);
                let plane = &mut out[(co0 + c) * h * w..(co0 + c + 1) * h * w];
                for (l, &v) in a.iter().enumerate() {
                    let j = j0 + l;
                    let (y, xx) = (j / wp, j % wp);
                    if j < len && xx < w {
                        plane[y * w + xx] = v + b;
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn conv_same_item_avx2<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[T],
    bias: Option<&[T]>,
    cout: usize,
    k: usize,
    xp: &mut Vec<T>,
    out: &mut [T],
) {
    conv_same_item_body(x, cin, h, w, wt, bias, cout, k, xp, out)
}

/// Dispatches to a wider-vector build of the same loop when available. Both
/// builds perform identical floating-point operations in identical order.
#[allow(clippy::too_many_arguments)]
fn conv_same_item<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[T],
    bias: Option<&[T]>,
    cout: usize,
    k: usize,
    xp: &mut Vec<T>,
    out: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { conv_same_item_avx2(x, cin, h, w, wt, bias, cout, k, xp, out) };
        return;
    }
    conv_same_item_body(x, cin, h, w, wt, bias, cout, k, xp, out)
}

impl ConvGeom {
    /// Same padding, stride 1, square odd kernel: the direct kernel applies.
    fn is_same_unit(&self) -> bool {
        self.stride == 1 && self.kh == self.kw && self.kh % 2 == 1 && self.pad == self.kh / 2
    }
}

/// `w[co, ci, ky, kx] -> w'[ci, co, k-1-ky, k-1-kx]`, turning the input
/// gradient of a same-padded convolution into another same-padded convolution.
fn flip_transpose<T: Real>(w: &[T], cout: usize, cin: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    out[((ci * cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        w[((co * cin + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], n: usize, w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.patch();
    let p = g.out_pixels();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut out = vec![T::zero(); n * out_len];
    if g.is_same_unit() {
        let mut xp = Vec::new();
        for i in 0..n {
            conv_same_item(
                &x[i * in_len..(i + 1) * in_len],
                g.cin,
                g.h,
                g.w,
                w,
                Some(b),
                g.cout,
                g.kh,
                &mut xp,
                &mut out[i * out_len..(i + 1) * out_len],
            );
        }
        return out;
    }
    let blocks = g.row_blocks::<T>();
    let mut col = vec![T::zero(); k * blocks[0].len() * g.ow];
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let y = &mut out[i * out_len..(i + 1) * out_len];
        for (co, &bias) in b.iter().enumerate() {
            y[co * p..(co + 1) * p].fill(bias);
        }
        for rows in &blocks {
            let q = rows.len() * g.ow;
            im2col(xi, g, rows.clone(), &mut col[..k * q]);
            let off = rows.start * g.ow;
            T::gemm(
                g.cout,
                k,
                q,
                w,
                k,
                1,
                &col[..k * q],
                q,
                1,
                T::one(),
                &mut y[off..],
                p,
                1,
            );
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let k = g.patch();
    let p = g.out_pixels();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.cout * k]);
    let mut db = need_db.then(|| vec![T::zero(); g.cout]);
    let direct_dx = g.is_same_unit();
    let wt_flipped = (direct_dx && need_dx).then(|| flip_transpose(w, g.cout, g.cin, g.kh));
    let mut xp = Vec::new();
    let blocks = g.row_blocks::<T>();
    let mut col = vec![T::zero(); k * blocks[0].len() * g.ow];
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let dyi = &dy[i * out_len..(i + 1) * out_len];
        if let (Some(dx), Some(wf)) = (dx.as_mut(), wt_flipped.as_ref()) {
            conv_same_item(
                dyi,
                g.cout,
                g.oh,
                g.ow,
                wf,
                None,
                g.cin,
                g.kh,
                &mut xp,
                &mut dx[i * in_len..(i + 1) * in_len],
            );
        }
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                for &v in &dyi[co * p..(co + 1) * p] {
                    *acc = *acc + v;
                }
            }
        }
        for rows in &blocks {
            let q = rows.len() * g.ow;
            let dyb = &dyi[rows.start * g.ow..];
            if let Some(dw) = dw.as_mut() {
                im2col(xi, g, rows.clone(), &mut col[..k * q]);
                // dW[cout, k] += dY[cout, q] · col[k, q]ᵀ
                T::gemm(g.cout, q, k, dyb, p, 1, &col[..k * q], 1, q, T::one(), dw, k, 1);
            }
            if let Some(dx) = dx.as_mut().filter(|_| !direct_dx) {
                // dcol[k, q] = Wᵀ[k, cout] · dY[cout, q]
                T::gemm(k, g.cout, q, w, 1, k, dyb, p, 1, T::zero(), &mut col[..k * q], q, 1);
                col2im(&col[..k * q], g, rows.clone(), &mut dx[i * in_len..(i + 1) * in_len]);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2×2, stride-2 transposed convolution. `w` is laid out `[cin, cout, 2, 2]`.
pub(crate) fn tconv_forward<T: Real>(x: &[T], n: usize, cin: usize, h: usize, wd: usize, w: &[T], b: &[T]) -> Vec<T> {
    let cout = b.len();
    let r = cout * 4;
    let p = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![T::zero(); n * cout * oh * ow];
    let mut y4 = vec![T::zero(); r * p];
    for i in 0..n {
        let xi = &x[i * cin * p..(i + 1) * cin * p];
        // Y4[(co,a,b), ij] = Wᵀ[(co,a,b), ci] · X[ci, ij]
        T::gemm(r, cin, p, w, 1, r, xi, p, 1, T::zero(), &mut y4, p, 1);
        let yi = &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow];
        for co in 0..cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &y4[(co * 4 + a * 2 + bb) * p..(co * 4 + a * 2 + bb + 1) * p];
                    for y in 0..h {
                        for x_ in 0..wd {
                            yi[co * oh * ow + (2 * y + a) * ow + 2 * x_ + bb] = src[y * wd + x_] + b[co];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn tconv_backward<T: Real>(
    x: &[T],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    w: &[T],
    cout: usize,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let r = cout * 4;
    let p = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut dx = need_dx.then(|| vec![T::zero(); n * cin * p]);
    let mut dw = need_dw.then(|| vec![T::zero(); cin * r]);
    let mut db = need_db.then(|| vec![T::zero(); cout]);
    let mut dy4 = vec![T::zero(); r * p];
    for i in 0..n {
        let dyi = &dy[i * cout * oh * ow..(i + 1) * cout * oh * ow];
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                for &v in &dyi[co * oh * ow..(co + 1) * oh * ow] {
                    *acc = *acc + v;
                }
            }
        }
        for co in 0..cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let dst = &mut dy4[(co * 4 + a * 2 + bb) * p..(co * 4 + a * 2 + bb + 1) * p];
                    for y in 0..h {
                        for x_ in 0..wd {
                            dst[y * wd + x_] = dyi[co * oh * ow + (2 * y + a) * ow + 2 * x_ + bb];
                        }
                    }
                }
            }
        }
        if let Some(dw) = dw.as_mut() {
            // dW[ci, r] += X[ci, p] · dY4[r, p]ᵀ
            let xi = &x[i * cin * p..(i + 1) * cin * p];
            T::gemm(cin, p, r, xi, p, 1, &dy4, 1, p, T::one(), dw, r, 1);
        }
        if let Some(dx) = dx.as_mut() {
            // dX[ci, p] = W[ci, r] · dY4[r, p]
            let dxi = &mut dx[i * cin * p..(i + 1) * cin * p];
            T::gemm(cin, r, p, w, r, 1, &dy4, p, 1, T::zero(), dxi, p, 1);
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2×2 max pool; returns the pooled values and, per output, the flat input
/// index of the first maximum in raster order.
pub(crate) fn maxpool_forward<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_i = idx;
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}
