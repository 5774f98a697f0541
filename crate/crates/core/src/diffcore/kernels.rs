// Raw loops behind the tape operations. Everything here works on flat
// row-major slices; shape checking happens in tape.rs.

use super::Float;

/// c[m,n] = a[m,k] · b[k,n] (+ c when `accumulate`).
pub fn matmul<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    unsafe {
        T::gemm(
            m, k, n, T::one(),
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c[m,k] += g[m,n] · b[k,n]ᵀ
pub fn matmul_nt_acc<T: Float>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m, n, k, T::one(),
            g.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            T::one(),
            c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// c[k,n] += a[m,k]ᵀ · g[m,n]
pub fn matmul_tn_acc<T: Float>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            k, m, n, T::one(),
            a.as_ptr(), 1, k as isize,
            g.as_ptr(), n as isize, 1,
            T::one(),
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Float>(x: T) -> T {
    let c = T::c(GELU_C);
    let a = T::c(GELU_A);
    let half = T::c(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::c(GELU_C);
    let a = T::c(GELU_A);
    let half = T::c(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * a * x * x)
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax with max subtraction. Rows whose entries are all masked
/// (`-inf`) become all-zero.
pub fn softmax_rows<T: Float>(x: &[T], out: &mut [T], width: usize) {
    for (xr, yr) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            yr.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut total = T::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            total += *y;
        }
        let inv = T::one() / total;
        yr.iter_mut().for_each(|y| *y *= inv);
    }
}

pub fn log_softmax_rows<T: Float>(x: &[T], out: &mut [T], width: usize) {
    for (xr, yr) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + xr.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = v - lse;
        }
    }
}

/// Saved state of a multi-head attention forward pass.
pub struct AttentionShape {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttentionShape {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Multi-head scaled dot-product attention. `mask[b*lk + j]` false removes key
/// `j` of item `b`. Writes the output and returns the attention weights
/// `[batch, heads, lq, lk]`.
pub fn attention_forward<T: Float>(
    s: &AttentionShape,
    q: &[T],
    k: &[T],
    v: &[T],
    mask: Option<&[bool]>,
    out: &mut [T],
) -> Vec<T> {
    let (lq, lk, d, dh) = (s.lq, s.lk, s.width, s.head_dim());
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut probs = vec![T::zero(); s.batch * s.heads * lq * lk];
    let mut scores = vec![T::zero(); lq * lk];
    for b in 0..s.batch {
        let qb = &q[b * lq * d..];
        let kb = &k[b * lk * d..];
        let vb = &v[b * lk * d..];
        for h in 0..s.heads {
            let off = h * dh;
            unsafe {
                T::gemm(
                    lq, dh, lk, scale,
                    qb.as_ptr().add(off), d as isize, 1,
                    kb.as_ptr().add(off), 1, d as isize,
                    T::zero(),
                    scores.as_mut_ptr(), lk as isize, 1,
                );
            }
            if let Some(mask) = mask {
                let mb = &mask[b * lk..(b + 1) * lk];
                for row in scores.chunks_exact_mut(lk) {
                    for (x, &keep) in row.iter_mut().zip(mb) {
                        if !keep {
                            *x = T::neg_infinity();
                        }
                    }
                }
            }
            let p = &mut probs[(b * s.heads + h) * lq * lk..(b * s.heads + h + 1) * lq * lk];
            softmax_rows(&scores, p, lk);
            unsafe {
                T::gemm(
                    lq, lk, dh, T::one(),
                    p.as_ptr(), lk as isize, 1,
                    vb.as_ptr().add(off), d as isize, 1,
                    T::zero(),
                    out.as_mut_ptr().add(b * lq * d + off), d as isize, 1,
                );
            }
        }
    }
    probs
}

/// Accumulates attention input gradients given the output gradient.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Float>(
    s: &AttentionShape,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dq: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    dv: Option<&mut [T]>,
) {
    let (lq, lk, d, dh) = (s.lq, s.lk, s.width, s.head_dim());
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut dp = vec![T::zero(); lq * lk];
    let dq_ptr = dq.map(|x| x.as_mut_ptr());
    let dk_ptr = dk.map(|x| x.as_mut_ptr());
    let dv_ptr = dv.map(|x| x.as_mut_ptr());
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            let p = &probs[(b * s.heads + h) * lq * lk..(b * s.heads + h + 1) * lq * lk];
            let go = unsafe { dout.as_ptr().add(b * lq * d + off) };
            unsafe {
                if let Some(dv) = dv_ptr {
                    // dV = Pᵀ dO
                    T::gemm(
                        lk, lq, dh, T::one(),
                        p.as_ptr(), 1, lk as isize,
                        go, d as isize, 1,
                        T::one(),
                        dv.add(b * lk * d + off), d as isize, 1,
                    );
                }
                if dq_ptr.is_none() && dk_ptr.is_none() {
                    continue;
                }
                // dP = dO Vᵀ
                T::gemm(
                    lq, dh, lk, T::one(),
                    go, d as isize, 1,
                    v.as_ptr().add(b * lk * d + off), 1, d as isize,
                    T::zero(),
                    dp.as_mut_ptr(), lk as isize, 1,
                );
            }
            for (dpr, pr) in dp.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
                let dot: T = dpr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in dpr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            unsafe {
                if let Some(dq) = dq_ptr {
                    T::gemm(
                        lq, lk, dh, T::one(),
                        dp.as_ptr(), lk as isize, 1,
                        k.as_ptr().add(b * lk * d + off), d as isize, 1,
                        T::one(),
                        dq.add(b * lq * d + off), d as isize, 1,
                    );
                }
                if let Some(dk) = dk_ptr {
                    T::gemm(
                        lk, lq, dh, T::one(),
                        dp.as_ptr(), 1, lk as isize,
                        q.as_ptr().add(b * lq * d + off), d as isize, 1,
                        T::one(),
                        dk.add(b * lk * d + off), d as isize, 1,
                    );
                }
            }
        }
    }
}
