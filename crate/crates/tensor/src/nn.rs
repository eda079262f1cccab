//! Fused neural-network primitives and their adjoints.

use std::sync::Arc;

use crate::tape::Op;
use crate::{Element, Result, Tape, Tensor, TensorError, Var};

/// One independent attention problem inside a row-stacked batch.
///
/// Queries `q_start..q_start+q_len` attend to keys/values
/// `k_start..k_start+k_len`. `visible` is an optional row-major
/// `q_len × k_len` visibility matrix; `None` means every key is visible.
#[derive(Debug, Clone)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub visible: Option<Arc<[bool]>>,
}

impl AttnSegment {
    pub fn full(q_start: usize, q_len: usize, k_start: usize, k_len: usize) -> Self {
        AttnSegment {
            q_start,
            q_len,
            k_start,
            k_len,
            visible: None,
        }
    }
}

pub(crate) struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<AttnSegment>,
    /// Softmax weights per (segment, head), concatenated.
    probs: Vec<T>,
}

pub(crate) struct ConvCache {
    x: Var,
    w: Var,
    b: Var,
    geom: ConvGeometry,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    fn out_pixels(&self) -> usize {
        self.batch * self.h_out * self.w_out
    }

    /// Unfolds NHWC input into `[out_pixels × k·k·c_in]` patches.
    fn im2col<T: Element>(&self, x: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut cols = vec![T::zero(); self.out_pixels() * patch];
        for b in 0..self.batch {
            for oy in 0..self.h_out {
                for ox in 0..self.w_out {
                    let row = (b * self.h_out + oy) * self.w_out + ox;
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src =
                                ((b * self.h + iy as usize) * self.w + ix as usize) * self.c_in;
                            let off = (ky * self.kernel + kx) * self.c_in;
                            dst[off..off + self.c_in].copy_from_slice(&x[src..src + self.c_in]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds patches back.
    fn col2im<T: Element>(&self, cols: &[T], dx: &mut [T]) {
        let patch = self.patch();
        for b in 0..self.batch {
            for oy in 0..self.h_out {
                for ox in 0..self.w_out {
                    let row = (b * self.h_out + oy) * self.w_out + ox;
                    let src = &cols[row * patch..(row + 1) * patch];
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst =
                                ((b * self.h + iy as usize) * self.w + ix as usize) * self.c_in;
                            let off = (ky * self.kernel + kx) * self.c_in;
                            for c in 0..self.c_in {
                                dx[dst + c] = dx[dst + c] + src[off + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

impl<T: Element> Tape<T> {
    /// Softmax over the trailing axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let d = value.cols();
        for row in value.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(value, Op::Softmax { x }, &[x])
    }

    pub(crate) fn softmax_backward(&mut self, idx: usize, x: Var, g: &[T]) {
        let y = self.shared_value(Var(idx));
        let d = y.cols();
        if let Some(gx) = self.grad_buf(x) {
            for ((gx_row, y_row), g_row) in
                gx.chunks_mut(d).zip(y.data().chunks(d)).zip(g.chunks(d))
            {
                let dot: T = y_row.iter().zip(g_row).map(|(&a, &b)| a * b).sum();
                for ((acc, &yv), &gv) in gx_row.iter_mut().zip(y_row).zip(g_row) {
                    *acc = *acc + yv * (gv - dot);
                }
            }
        }
    }

    /// Row-wise normalization over the trailing axis followed by `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(TensorError::shape(
                "layer_norm",
                vx.shape(),
                self.value(gamma).shape(),
            ));
        }
        if eps <= T::zero() {
            return Err(TensorError::invalid("layer_norm", "eps must be positive"));
        }
        let rows = vx.rows();
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gd[c] + bd[c];
            }
        }
        let value = Tensor::from_vec(vx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub(crate) fn layer_norm_backward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        rstd: &[T],
        g: &[T],
    ) {
        let gv = self.shared_value(gamma);
        let d = gv.len();
        let dn = T::from_f64(d as f64);
        if let Some(gg) = self.grad_buf(gamma) {
            for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                for c in 0..d {
                    gg[c] = gg[c] + gr[c] * hr[c];
                }
            }
        }
        if let Some(gb) = self.grad_buf(beta) {
            for gr in g.chunks(d) {
                for c in 0..d {
                    gb[c] = gb[c] + gr[c];
                }
            }
        }
        if let Some(gx) = self.grad_buf(x) {
            let mut dh = vec![T::zero(); d];
            for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                for c in 0..d {
                    dh[c] = gr[c] * gv.data()[c];
                }
                let mean_dh = dh.iter().copied().sum::<T>() / dn;
                let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                for c in 0..d {
                    let v = rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                    gx[r * d + c] = gx[r * d + c] + v;
                }
            }
        }
    }

    /// Mean negative log-likelihood of `targets` over rows whose `ignore`
    /// flag is false.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: &[bool],
    ) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, classes) = (vl.rows(), vl.cols());
        if targets.len() != rows || ignore.len() != rows {
            return Err(TensorError::shape(
                "cross_entropy",
                vl.shape(),
                &[targets.len(), ignore.len()],
            ));
        }
        if let Some(&bad) = targets
            .iter()
            .zip(ignore)
            .find(|(&t, &ig)| !ig && t >= classes)
            .map(|(t, _)| t)
        {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("target {bad} outside {classes} classes"),
            ));
        }
        let count = ignore.iter().filter(|&&i| !i).count();
        if count == 0 {
            return Err(TensorError::invalid(
                "cross_entropy",
                "every position is ignored",
            ));
        }
        let mut probs = vl.data().to_vec();
        let mut total = T::zero();
        for (r, row) in probs.chunks_mut(classes).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            if !ignore[r] {
                total = total + lse - row[targets[r]];
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / T::from_f64(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active: ignore.iter().map(|&i| !i).collect(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub(crate) fn cross_entropy_backward(
        &mut self,
        logits: Var,
        targets: &[usize],
        active: &[bool],
        probs: &[T],
        count: usize,
        g: T,
    ) {
        let classes = probs.len() / targets.len();
        let w = g / T::from_f64(count as f64);
        if let Some(gl) = self.grad_buf(logits) {
            for r in 0..targets.len() {
                if !active[r] {
                    continue;
                }
                for c in 0..classes {
                    let mut d = probs[r * classes + c];
                    if c == targets[r] {
                        d = d - T::one();
                    }
                    gl[r * classes + c] = gl[r * classes + c] + w * d;
                }
            }
        }
    }

    /// Mean over `valid` rows of `1 − a·b / (‖a‖‖b‖ + eps)`.
    pub fn cosine_distance(&mut self, a: Var, b: Var, valid: &[bool], eps: T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.rows() != valid.len() {
            return Err(TensorError::shape(
                "cosine_distance",
                va.shape(),
                vb.shape(),
            ));
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(TensorError::invalid("cosine_distance", "no valid rows"));
        }
        let mut total = T::zero();
        for r in 0..va.rows() {
            if !valid[r] {
                continue;
            }
            let (ra, rb) = (va.row(r), vb.row(r));
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let na = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
            total = total + T::one() - dot / (na * nb + eps);
        }
        let loss = total / T::from_f64(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Cosine {
                a,
                b,
                valid: valid.to_vec(),
                eps,
                count,
            },
            &[a, b],
        ))
    }

    pub(crate) fn cosine_backward(
        &mut self,
        a: Var,
        b: Var,
        valid: &[bool],
        eps: T,
        count: usize,
        g: T,
    ) {
        let (va, vb) = (self.shared_value(a), self.shared_value(b));
        let d = va.cols();
        let w = g / T::from_f64(count as f64);
        let mut ga = vec![T::zero(); va.len()];
        let mut gb = vec![T::zero(); vb.len()];
        for r in 0..valid.len() {
            if !valid[r] {
                continue;
            }
            let (ra, rb) = (va.row(r), vb.row(r));
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let na = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
            let den = na * nb + eps;
            // d(1 − dot/den)/da = −b/den + dot·nb·(a/na)/den²
            for c in 0..d {
                let mut da = -rb[c] / den;
                let mut db = -ra[c] / den;
                if na > T::zero() {
                    da = da + dot * nb * ra[c] / (na * den * den);
                }
                if nb > T::zero() {
                    db = db + dot * na * rb[c] / (nb * den * den);
                }
                ga[r * d + c] = w * da;
                gb[r * d + c] = w * db;
            }
        }
        self.accumulate(a, &ga);
        self.accumulate(b, &gb);
    }

    /// Row lookup into an embedding table `[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (vocab, d) = (vt.rows(), vt.cols());
        if ids.is_empty() {
            return Err(TensorError::invalid("embedding", "empty id sequence"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::invalid(
                    "embedding",
                    format!("id {id} outside table of {vocab}"),
                ));
            }
            data.extend_from_slice(vt.row(id));
        }
        let value = Tensor::from_vec(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Scaled dot-product attention with `heads` heads over row-stacked
    /// segments. `q` is `[Nq×d]`, `k` and `v` are `[Nk×d]`; the result is
    /// `[Nq×d]` with heads concatenated along the feature axis. Masked keys
    /// receive a score of −∞ before the softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[AttnSegment],
    ) -> Result<Var> {
        let (vq, vk, vv) = (
            self.shared_value(q),
            self.shared_value(k),
            self.shared_value(v),
        );
        let d = vq.cols();
        if vk.shape() != vv.shape() || vk.cols() != d {
            return Err(TensorError::shape("attention", vq.shape(), vk.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::invalid(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut out = vec![T::zero(); vq.len()];
        let total: usize = segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
        let mut probs = Vec::with_capacity(total);
        for (si, seg) in segments.iter().enumerate() {
            if seg.q_start + seg.q_len > vq.rows() || seg.k_start + seg.k_len > vk.rows() {
                return Err(TensorError::invalid(
                    "attention",
                    format!("segment {si} out of range"),
                ));
            }
            if let Some(vis) = &seg.visible {
                if vis.len() != seg.q_len * seg.k_len {
                    return Err(TensorError::invalid(
                        "attention",
                        format!("segment {si} mask has wrong size"),
                    ));
                }
                for r in 0..seg.q_len {
                    if !vis[r * seg.k_len..(r + 1) * seg.k_len].iter().any(|&b| b) {
                        return Err(TensorError::EmptyAttentionRow {
                            segment: si,
                            row: r,
                        });
                    }
                }
            }
            for h in 0..heads {
                let mut scores = vec![T::zero(); seg.q_len * seg.k_len];
                T::gemm(
                    seg.q_len,
                    dh,
                    seg.k_len,
                    scale,
                    &vq.data()[seg.q_start * d + h * dh..],
                    d as isize,
                    1,
                    &vk.data()[seg.k_start * d + h * dh..],
                    1,
                    d as isize,
                    T::zero(),
                    &mut scores,
                    seg.k_len as isize,
                    1,
                );
                if let Some(vis) = &seg.visible {
                    for (s, &ok) in scores.iter_mut().zip(vis.iter()) {
                        if !ok {
                            *s = T::neg_infinity();
                        }
                    }
                }
                for row in scores.chunks_mut(seg.k_len) {
                    softmax_in_place(row);
                }
                T::gemm(
                    seg.q_len,
                    seg.k_len,
                    dh,
                    T::one(),
                    &scores,
                    seg.k_len as isize,
                    1,
                    &vv.data()[seg.k_start * d + h * dh..],
                    d as isize,
                    1,
                    T::zero(),
                    &mut out[seg.q_start * d + h * dh..],
                    d as isize,
                    1,
                );
                probs.extend_from_slice(&scores);
            }
        }
        let value = Tensor::from_vec(vq.shape().to_vec(), out)?;
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            segments: segments.to_vec(),
            probs,
        };
        Ok(self.push(value, Op::Attention(Box::new(cache)), &[q, k, v]))
    }

    pub(crate) fn attention_backward(&mut self, cache: &AttentionCache<T>, g: &[T]) {
        let (vq, vk, vv) = (
            self.shared_value(cache.q),
            self.shared_value(cache.k),
            self.shared_value(cache.v),
        );
        let d = vq.cols();
        let dh = d / cache.heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut dq = vec![T::zero(); vq.len()];
        let mut dk = vec![T::zero(); vk.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut offset = 0;
        for seg in &cache.segments {
            let (tq, tk) = (seg.q_len, seg.k_len);
            for h in 0..cache.heads {
                let p = &cache.probs[offset..offset + tq * tk];
                offset += tq * tk;
                let g_h = &g[seg.q_start * d + h * dh..];
                // dP = dO · Vᵀ
                let mut dp = vec![T::zero(); tq * tk];
                T::gemm(
                    tq,
                    dh,
                    tk,
                    T::one(),
                    g_h,
                    d as isize,
                    1,
                    &vv.data()[seg.k_start * d + h * dh..],
                    1,
                    d as isize,
                    T::zero(),
                    &mut dp,
                    tk as isize,
                    1,
                );
                // dV += Pᵀ · dO
                T::gemm(
                    tk,
                    tq,
                    dh,
                    T::one(),
                    p,
                    1,
                    tk as isize,
                    g_h,
                    d as isize,
                    1,
                    T::one(),
                    &mut dv[seg.k_start * d + h * dh..],
                    d as isize,
                    1,
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)) · scale
                for (dp_row, p_row) in dp.chunks_mut(tk).zip(p.chunks(tk)) {
                    let dot: T = dp_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
                    for (x, &pv) in dp_row.iter_mut().zip(p_row) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                // dQ += dS · K
                T::gemm(
                    tq,
                    tk,
                    dh,
                    T::one(),
                    &dp,
                    tk as isize,
                    1,
                    &vk.data()[seg.k_start * d + h * dh..],
                    d as isize,
                    1,
                    T::one(),
                    &mut dq[seg.q_start * d + h * dh..],
                    d as isize,
                    1,
                );
                // dK += dSᵀ · Q
                T::gemm(
                    tk,
                    tq,
                    dh,
                    T::one(),
                    &dp,
                    1,
                    tk as isize,
                    &vq.data()[seg.q_start * d + h * dh..],
                    d as isize,
                    1,
                    T::one(),
                    &mut dk[seg.k_start * d + h * dh..],
                    d as isize,
                    1,
                );
            }
        }
        self.accumulate(cache.q, &dq);
        self.accumulate(cache.k, &dk);
        self.accumulate(cache.v, &dv);
    }

    /// Square-kernel 2D convolution over NHWC input `[B,H,W,Cin]` with
    /// weights `[k·k·Cin × Cout]` (row order `ky, kx, c`) and bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vw, vb) = (
            self.shared_value(x),
            self.shared_value(w),
            self.shared_value(b),
        );
        let s = vx.shape();
        if s.len() != 4 || kernel == 0 || stride == 0 {
            return Err(TensorError::invalid(
                "conv2d",
                format!("bad input shape {s:?}"),
            ));
        }
        let (batch, h, wd, c_in) = (s[0], s[1], s[2], s[3]);
        let c_out = vw.cols();
        if vw.shape() != [kernel * kernel * c_in, c_out] || vb.len() != c_out {
            return Err(TensorError::shape("conv2d", s, vw.shape()));
        }
        if h + 2 * pad < kernel || wd + 2 * pad < kernel {
            return Err(TensorError::invalid(
                "conv2d",
                "kernel larger than padded input",
            ));
        }
        let geom = ConvGeometry {
            batch,
            h,
            w: wd,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            h_out: (h + 2 * pad - kernel) / stride + 1,
            w_out: (wd + 2 * pad - kernel) / stride + 1,
        };
        let cols = geom.im2col(vx.data());
        let rows = geom.out_pixels();
        let patch = geom.patch();
        let mut out = Vec::with_capacity(rows * c_out);
        for _ in 0..rows {
            out.extend_from_slice(vb.data());
        }
        T::gemm(
            rows,
            patch,
            c_out,
            T::one(),
            &cols,
            patch as isize,
            1,
            vw.data(),
            c_out as isize,
            1,
            T::one(),
            &mut out,
            c_out as isize,
            1,
        );
        let value = Tensor::from_vec(vec![batch, geom.h_out, geom.w_out, c_out], out)?;
        Ok(self.push(
            value,
            Op::Conv2d(Box::new(ConvCache { x, w, b, geom })),
            &[x, w, b],
        ))
    }

    pub(crate) fn conv2d_backward(&mut self, cache: &ConvCache, g: &[T]) {
        let geom = cache.geom;
        let (vx, vw) = (self.shared_value(cache.x), self.shared_value(cache.w));
        let rows = geom.out_pixels();
        let patch = geom.patch();
        let c_out = geom.c_out;
        if let Some(gb) = self.grad_buf(cache.b) {
            for row in g.chunks(c_out) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        let needs_w = self.requires_grad(cache.w);
        let needs_x = self.requires_grad(cache.x);
        if needs_w {
            let cols = geom.im2col(vx.data());
            let gw = self.grad_buf(cache.w).expect("requires grad");
            // dW += colsᵀ · dY
            T::gemm(
                patch,
                rows,
                c_out,
                T::one(),
                &cols,
                1,
                patch as isize,
                g,
                c_out as isize,
                1,
                T::one(),
                gw,
                c_out as isize,
                1,
            );
        }
        if needs_x {
            let mut dcols = vec![T::zero(); rows * patch];
            // dcols = dY · Wᵀ
            T::gemm(
                rows,
                c_out,
                patch,
                T::one(),
                g,
                c_out as isize,
                1,
                vw.data(),
                1,
                c_out as isize,
                T::zero(),
                &mut dcols,
                patch as isize,
                1,
            );
            let gx = self.grad_buf(cache.x).expect("requires grad");
            geom.col2im(&dcols, gx);
        }
    }
}
