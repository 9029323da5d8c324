//! The fixed primitive vocabulary.
//!
//! Every primitive ships its own forward, JVP, and VJP kernels; the adjoint
//! identity ⟨c, Jv⟩ = ⟨Jᵀc, v⟩ is what keeps the pairs honest (tested per
//! primitive). Derivatives are taken with respect to parameters and operator
//! inputs; the graph layer composes them.

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Op {
    /// Graph input placeholder.
    Input,
    /// Affine map on the last axis; accepts rank-1 `[in]` or rank-2
    /// `[rows, in]`. Params: `W[out][in]`, then `b[out]`.
    Dense { in_dim: usize, out_dim: usize },
    /// Stride-1 periodic 2D convolution on `(C, H, W)`, odd kernel.
    /// Params: `W[out][in][k][k]`, then `b[out]`.
    ConvPeriodic {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    /// Stride-p convolution with kernel p on `(C, N, N)`, flattened to
    /// row-major tokens `((N/p)², embed)`. Params: `W[e][c][α][β]`, `b[e]`.
    PatchEmbed {
        in_ch: usize,
        embed: usize,
        patch: usize,
    },
    /// Inverse layout of PatchEmbed: tokens `(G², out_ch·p²)` back to
    /// `(out_ch, G·p, G·p)`. Pure index permutation, no params.
    PatchUnembed { out_ch: usize, patch: usize },
    /// Pointwise tanh.
    Tanh,
    /// 2×2 average pooling on `(C, H, W)`.
    AvgPool2,
    /// 2×2 nearest-neighbour upsampling on `(C, H, W)`.
    UpsampleNearest2,
    /// Row-wise softmax on a rank-2 tensor.
    SoftmaxRows,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Channel concatenation of two `(C, H, W)` tensors.
    ConcatChannels,
    /// `A·B` (or `A·Bᵀ`) on rank-2 tensors.
    MatMul { transpose_b: bool },
    /// Multiplication by a fixed constant.
    ScaleConst { factor: f64 },
    /// Adds a learned tensor of the same size (position embeddings).
    ParamAdd { len: usize },
}

impl Op {
    pub fn arity(&self) -> usize {
        match self {
            Op::Input => 0,
            Op::Add | Op::ConcatChannels | Op::MatMul { .. } => 2,
            _ => 1,
        }
    }

    pub fn param_len(&self) -> usize {
        match *self {
            Op::Dense { in_dim, out_dim } => out_dim * in_dim + out_dim,
            Op::ConvPeriodic {
                in_ch,
                out_ch,
                kernel,
            } => out_ch * in_ch * kernel * kernel + out_ch,
            Op::PatchEmbed {
                in_ch,
                embed,
                patch,
            } => embed * in_ch * patch * patch + embed,
            Op::ParamAdd { len } => len,
            _ => 0,
        }
    }

    /// Trailing bias entries within the param segment (zero-initialized).
    pub fn bias_len(&self) -> usize {
        match *self {
            Op::Dense { out_dim, .. } => out_dim,
            Op::ConvPeriodic { out_ch, .. } => out_ch,
            Op::PatchEmbed { embed, .. } => embed,
            _ => 0,
        }
    }

    /// Fan-in used for uniform init scaling of the weight block.
    pub fn fan_in(&self) -> usize {
        match *self {
            Op::Dense { in_dim, .. } => in_dim,
            Op::ConvPeriodic { in_ch, kernel, .. } => in_ch * kernel * kernel,
            Op::PatchEmbed { in_ch, patch, .. } => in_ch * patch * patch,
            Op::ParamAdd { len } => len,
            _ => 0,
        }
    }

    /// Validate input shapes and compute the output shape.
    pub fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let fail = |msg: String| -> Result<Vec<usize>> { Err(Error::shape(msg)) };
        if inputs.len() != self.arity() {
            return fail(format!(
                "{self:?} expects {} inputs, got {}",
                self.arity(),
                inputs.len()
            ));
        }
        match *self {
            Op::Input => fail("input node has no upstream".into()),
            Op::Dense { in_dim, out_dim } => {
                let s = inputs[0];
                match s.len() {
                    1 if s[0] == in_dim => Ok(vec![out_dim]),
                    2 if s[1] == in_dim => Ok(vec![s[0], out_dim]),
                    _ => fail(format!("dense({in_dim}->{out_dim}) got input {s:?}")),
                }
            }
            Op::ConvPeriodic { in_ch, out_ch, kernel } => {
                let s = inputs[0];
                if kernel % 2 == 0 {
                    return fail(format!("conv kernel must be odd, got {kernel}"));
                }
                if s.len() != 3 || s[0] != in_ch {
                    return fail(format!("conv(in={in_ch}) got input {s:?}"));
                }
                Ok(vec![out_ch, s[1], s[2]])
            }
            Op::PatchEmbed { in_ch, embed, patch } => {
                let s = inputs[0];
                if s.len() != 3 || s[0] != in_ch || s[1] != s[2] {
                    return fail(format!("patch_embed(in={in_ch}) got input {s:?}"));
                }
                if patch == 0 || s[1] % patch != 0 {
                    return fail(format!(
                        "patch size {patch} does not divide grid {}",
                        s[1]
                    ));
                }
                let g = s[1] / patch;
                Ok(vec![g * g, embed])
            }
            Op::PatchUnembed { out_ch, patch } => {
                let s = inputs[0];
                if s.len() != 2 || s[1] != out_ch * patch * patch {
                    return fail(format!(
                        "patch_unembed(out={out_ch}, p={patch}) got input {s:?}"
                    ));
                }
                let g = (s[0] as f64).sqrt() as usize;
                if g * g != s[0] {
                    return fail(format!("token count {} is not a square", s[0]));
                }
                Ok(vec![out_ch, g * patch, g * patch])
            }
            Op::Tanh | Op::ScaleConst { .. } => Ok(inputs[0].to_vec()),
            Op::AvgPool2 => {
                let s = inputs[0];
                if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
                    return fail(format!("avg_pool2 needs (C, even, even), got {s:?}"));
                }
                Ok(vec![s[0], s[1] / 2, s[2] / 2])
            }
            Op::UpsampleNearest2 => {
                let s = inputs[0];
                if s.len() != 3 {
                    return fail(format!("upsample2 needs (C, H, W), got {s:?}"));
                }
                Ok(vec![s[0], s[1] * 2, s[2] * 2])
            }
            Op::SoftmaxRows => {
                let s = inputs[0];
                if s.len() != 2 {
                    return fail(format!("softmax_rows needs rank 2, got {s:?}"));
                }
                Ok(s.to_vec())
            }
            Op::Add => {
                if inputs[0] != inputs[1] {
                    return fail(format!("add shape mismatch: {:?} vs {:?}", inputs[0], inputs[1]));
                }
                Ok(inputs[0].to_vec())
            }
            Op::ConcatChannels => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
                    return fail(format!("concat shape mismatch: {a:?} vs {b:?}"));
                }
                Ok(vec![a[0] + b[0], a[1], a[2]])
            }
            Op::MatMul { transpose_b } => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.len() != 2 || b.len() != 2 {
                    return fail(format!("matmul needs rank-2 inputs, got {a:?}, {b:?}"));
                }
                let ok = if transpose_b { a[1] == b[1] } else { a[1] == b[0] };
                if !ok {
                    return fail(format!(
                        "matmul(transpose_b={transpose_b}) inner dims: {a:?} vs {b:?}"
                    ));
                }
                Ok(vec![a[0], if transpose_b { b[0] } else { b[1] }])
            }
            Op::ParamAdd { len } => {
                let s = inputs[0];
                if s.iter().product::<usize>() != len {
                    return fail(format!("param_add(len={len}) got input {s:?}"));
                }
                Ok(s.to_vec())
            }
        }
    }

    pub fn forward<T: Scalar>(&self, inputs: &[&Tensor<T>], params: &[T]) -> Tensor<T> {
        match *self {
            Op::Input => unreachable!("input nodes are seeded by the engine"),
            Op::Dense { in_dim, out_dim } => dense_fwd(inputs[0], params, in_dim, out_dim, true),
            Op::ConvPeriodic { in_ch, out_ch, kernel } => {
                conv_fwd(inputs[0], params, in_ch, out_ch, kernel, true)
            }
            Op::PatchEmbed { in_ch, embed, patch } => {
                patch_embed_fwd(inputs[0], params, in_ch, embed, patch, true)
            }
            Op::PatchUnembed { out_ch, patch } => patch_unembed_fwd(inputs[0], out_ch, patch),
            Op::Tanh => inputs[0].map(|v| v.tanh()),
            Op::AvgPool2 => pool_fwd(inputs[0]),
            Op::UpsampleNearest2 => upsample_fwd(inputs[0]),
            Op::SoftmaxRows => softmax_rows_fwd(inputs[0]),
            Op::Add => {
                let mut out = inputs[0].clone();
                for (o, b) in out.data_mut().iter_mut().zip(inputs[1].data()) {
                    *o += *b;
                }
                out
            }
            Op::ConcatChannels => concat_fwd(inputs[0], inputs[1]),
            Op::MatMul { transpose_b } => matmul_fwd(inputs[0], inputs[1], transpose_b),
            Op::ScaleConst { factor } => {
                let c = T::from_f64(factor);
                inputs[0].map(|v| c * v)
            }
            Op::ParamAdd { .. } => {
                let mut out = inputs[0].clone();
                for (o, p) in out.data_mut().iter_mut().zip(params) {
                    *o += *p;
                }
                out
            }
        }
    }

    /// Forward-mode derivative: given tangents of the inputs and of the
    /// param segment, produce the tangent of the output.
    pub fn jvp<T: Scalar>(
        &self,
        inputs: &[&Tensor<T>],
        params: &[T],
        input_tangents: &[&Tensor<T>],
        param_tangent: &[T],
        primal_out: &Tensor<T>,
    ) -> Tensor<T> {
        match *self {
            Op::Input => unreachable!(),
            Op::Dense { in_dim, out_dim } => {
                let mut out = dense_fwd(input_tangents[0], params, in_dim, out_dim, false);
                let dwb = dense_fwd(inputs[0], param_tangent, in_dim, out_dim, true);
                add_into(&mut out, &dwb);
                out
            }
            Op::ConvPeriodic { in_ch, out_ch, kernel } => {
                let mut out = conv_fwd(input_tangents[0], params, in_ch, out_ch, kernel, false);
                let dwb = conv_fwd(inputs[0], param_tangent, in_ch, out_ch, kernel, true);
                add_into(&mut out, &dwb);
                out
            }
            Op::PatchEmbed { in_ch, embed, patch } => {
                let mut out =
                    patch_embed_fwd(input_tangents[0], params, in_ch, embed, patch, false);
                let dwb = patch_embed_fwd(inputs[0], param_tangent, in_ch, embed, patch, true);
                add_into(&mut out, &dwb);
                out
            }
            Op::PatchUnembed { out_ch, patch } => {
                patch_unembed_fwd(input_tangents[0], out_ch, patch)
            }
            Op::Tanh => {
                // d tanh = (1 − y²) dx, reusing the primal output
                let mut out = input_tangents[0].clone();
                for (d, y) in out.data_mut().iter_mut().zip(primal_out.data()) {
                    *d *= T::one() - *y * *y;
                }
                out
            }
            Op::AvgPool2 => pool_fwd(input_tangents[0]),
            Op::UpsampleNearest2 => upsample_fwd(input_tangents[0]),
            Op::SoftmaxRows => softmax_rows_jacobian(primal_out, input_tangents[0]),
            Op::Add => {
                let mut out = input_tangents[0].clone();
                add_into(&mut out, input_tangents[1]);
                out
            }
            Op::ConcatChannels => concat_fwd(input_tangents[0], input_tangents[1]),
            Op::MatMul { transpose_b } => {
                let mut out = matmul_fwd(input_tangents[0], inputs[1], transpose_b);
                let db = matmul_fwd(inputs[0], input_tangents[1], transpose_b);
                add_into(&mut out, &db);
                out
            }
            Op::ScaleConst { factor } => {
                let c = T::from_f64(factor);
                input_tangents[0].map(|v| c * v)
            }
            Op::ParamAdd { .. } => {
                let mut out = input_tangents[0].clone();
                for (o, p) in out.data_mut().iter_mut().zip(param_tangent) {
                    *o += *p;
                }
                out
            }
        }
    }

    /// Reverse-mode derivative: returns the cotangent for each input and
    /// accumulates the param-segment gradient into `param_grad`.
    pub fn vjp<T: Scalar>(
        &self,
        inputs: &[&Tensor<T>],
        params: &[T],
        primal_out: &Tensor<T>,
        cot: &Tensor<T>,
        param_grad: &mut [T],
    ) -> Vec<Tensor<T>> {
        match *self {
            Op::Input => unreachable!(),
            Op::Dense { in_dim, out_dim } => {
                dense_vjp(inputs[0], params, cot, param_grad, in_dim, out_dim)
            }
            Op::ConvPeriodic { in_ch, out_ch, kernel } => {
                conv_vjp(inputs[0], params, cot, param_grad, in_ch, out_ch, kernel)
            }
            Op::PatchEmbed { in_ch, embed, patch } => {
                patch_embed_vjp(inputs[0], params, cot, param_grad, in_ch, embed, patch)
            }
            Op::PatchUnembed { out_ch, patch } => {
                vec![patch_unembed_vjp(inputs[0], cot, out_ch, patch)]
            }
            Op::Tanh => {
                let mut out = cot.clone();
                for (d, y) in out.data_mut().iter_mut().zip(primal_out.data()) {
                    *d *= T::one() - *y * *y;
                }
                vec![out]
            }
            Op::AvgPool2 => vec![pool_vjp(inputs[0], cot)],
            Op::UpsampleNearest2 => vec![upsample_vjp(inputs[0], cot)],
            // the softmax Jacobian is symmetric, so VJP = JVP with the cotangent
            Op::SoftmaxRows => vec![softmax_rows_jacobian(primal_out, cot)],
            Op::Add => vec![cot.clone(), cot.clone()],
            Op::ConcatChannels => concat_vjp(inputs[0], inputs[1], cot),
            Op::MatMul { transpose_b } => matmul_vjp(inputs[0], inputs[1], cot, transpose_b),
            Op::ScaleConst { factor } => {
                let c = T::from_f64(factor);
                vec![cot.map(|v| c * v)]
            }
            Op::ParamAdd { .. } => {
                for (g, c) in param_grad.iter_mut().zip(cot.data()) {
                    *g += *c;
                }
                vec![cot.clone()]
            }
        }
    }
}

fn add_into<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += *y;
    }
}

/// Copy a `(C, H, W)` tensor into a periodically padded `(C, H+2m, W+2m)`
/// buffer with `buf[c][i+m][j+m] = x[c][i mod H][j mod W]`.
fn pad_periodic<T: Scalar>(x: &[T], ch: usize, h: usize, w: usize, m: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * m, w + 2 * m);
    let mut out = vec![T::zero(); ch * ph * pw];
    for c in 0..ch {
        for pi in 0..ph {
            let si = (pi as isize - m as isize).rem_euclid(h as isize) as usize;
            let src = (c * h + si) * w;
            let dst = (c * ph + pi) * pw;
            for pj in 0..pw {
                let sj = (pj as isize - m as isize).rem_euclid(w as isize) as usize;
                out[dst + pj] = x[src + sj];
            }
        }
    }
    out
}

fn dense_fwd<T: Scalar>(
    x: &Tensor<T>,
    params: &[T],
    in_dim: usize,
    out_dim: usize,
    with_bias: bool,
) -> Tensor<T> {
    let rows = x.numel() / in_dim;
    let (w, b) = params.split_at(out_dim * in_dim);
    let out_shape: Vec<usize> = if x.shape().len() == 1 {
        vec![out_dim]
    } else {
        vec![rows, out_dim]
    };
    let mut out = Tensor::zeros(&out_shape);
    for r in 0..rows {
        let xr = &x.data()[r * in_dim..(r + 1) * in_dim];
        let orow = &mut out.data_mut()[r * out_dim..(r + 1) * out_dim];
        for o in 0..out_dim {
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = if with_bias { b[o] } else { T::zero() };
            for (wi, xi) in wrow.iter().zip(xr.iter()) {
                acc += *wi * *xi;
            }
            orow[o] = acc;
        }
    }
    out
}

fn dense_vjp<T: Scalar>(
    x: &Tensor<T>,
    params: &[T],
    cot: &Tensor<T>,
    param_grad: &mut [T],
    in_dim: usize,
    out_dim: usize,
) -> Vec<Tensor<T>> {
    let rows = x.numel() / in_dim;
    let w = &params[..out_dim * in_dim];
    let (wg, bg) = param_grad.split_at_mut(out_dim * in_dim);
    let mut xcot = Tensor::zeros(x.shape());
    for r in 0..rows {
        let xr = &x.data()[r * in_dim..(r + 1) * in_dim];
        let crow = &cot.data()[r * out_dim..(r + 1) * out_dim];
        let xc = &mut xcot.data_mut()[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let co = crow[o];
            bg[o] += co;
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            let wgrow = &mut wg[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                xc[i] += wrow[i] * co;
                wgrow[i] += xr[i] * co;
            }
        }
    }
    vec![xcot]
}

fn conv_fwd<T: Scalar>(
    x: &Tensor<T>,
    params: &[T],
    in_ch: usize,
    out_ch: usize,
    k: usize,
    with_bias: bool,
) -> Tensor<T> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let m = k / 2;
    let (pw_, ph_) = (w + 2 * m, h + 2 * m);
    let xp = pad_periodic(x.data(), in_ch, h, w, m);
    let (wts, bias) = params.split_at(out_ch * in_ch * k * k);
    let mut out = Tensor::zeros(&[out_ch, h, w]);
    for o in 0..out_ch {
        let oplane = &mut out.data_mut()[o * h * w..(o + 1) * h * w];
        if with_bias {
            for v in oplane.iter_mut() {
                *v = bias[o];
            }
        }
        for c in 0..in_ch {
            for a in 0..k {
                for b in 0..k {
                    let wv = wts[((o * in_ch + c) * k + a) * k + b];
                    if wv == T::zero() {
                        continue;
                    }
                    for i in 0..h {
                        let row = (c * ph_ + i + a) * pw_ + b;
                        let xrow = &xp[row..row + w];
                        let orow = &mut oplane[i * w..(i + 1) * w];
                        for j in 0..w {
                            orow[j] += wv * xrow[j];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_vjp<T: Scalar>(
    x: &Tensor<T>,
    params: &[T],
    cot: &Tensor<T>,
    param_grad: &mut [T],
    in_ch: usize,
    out_ch: usize,
    k: usize,
) -> Vec<Tensor<T>> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let m = k / 2;
    let (ph_, pw_) = (h + 2 * m, w + 2 * m);
    let xp = pad_periodic(x.data(), in_ch, h, w, m);
    let cp = pad_periodic(cot.data(), out_ch, h, w, m);
    let wts = &params[..out_ch * in_ch * k * k];
    let (wg, bg) = param_grad.split_at_mut(out_ch * in_ch * k * k);

    // bias gradient: plain sums of the cotangent planes
    for o in 0..out_ch {
        let mut acc = T::zero();
        for v in &cot.data()[o * h * w..(o + 1) * h * w] {
            acc += *v;
        }
        bg[o] += acc;
    }

    // weight gradient: correlate input with cotangent
    for o in 0..out_ch {
        let cplane = &cot.data()[o * h * w..(o + 1) * h * w];
        for c in 0..in_ch {
            for a in 0..k {
                for b in 0..k {
                    let mut acc = T::zero();
                    for i in 0..h {
                        let row = (c * ph_ + i + a) * pw_ + b;
                        let xrow = &xp[row..row + w];
                        let crow = &cplane[i * w..(i + 1) * w];
                        for j in 0..w {
                            acc += crow[j] * xrow[j];
                        }
                    }
                    wg[((o * in_ch + c) * k + a) * k + b] += acc;
                }
            }
        }
    }

    // input cotangent: transposed convolution of the cotangent
    let mut xcot = Tensor::zeros(x.shape());
    for c in 0..in_ch {
        let xplane = &mut xcot.data_mut()[c * h * w..(c + 1) * h * w];
        for o in 0..out_ch {
            for a in 0..k {
                for b in 0..k {
                    let wv = wts[((o * in_ch + c) * k + a) * k + b];
                    if wv == T::zero() {
                        continue;
                    }
                    // x_cot[c][y][t] += W[o,c,a,b] · cot[o][(y−a+m) mod][(t−b+m) mod]
                    for y in 0..h {
                        let row = (o * ph_ + y + 2 * m - a) * pw_ + (2 * m - b);
                        let crow = &cp[row..row + w];
                        let xrow = &mut xplane[y * w..(y + 1) * w];
                        for t in 0..w {
                            xrow[t] += wv * crow[t];
                        }
                    }
                }
            }
        }
    }
    vec![xcot]
}

fn patch_embed_fwd<T: Scalar>(
    x: &Tensor<T>,
    params: &[T],
    in_ch: usize,
    embed: usize,
    p: usize,
    with_bias: bool,
) -> Tensor<T> {
    let n = x.shape()[1];
    let g = n / p;
    let (wts, bias) = params.split_at(embed * in_ch * p * p);
    let mut out = Tensor::zeros(&[g * g, embed]);
    for gi in 0..g {
        for gj in 0..g {
            let t = gi * g + gj;
            let orow = &mut out.data_mut()[t * embed..(t + 1) * embed];
            for e in 0..embed {
                let mut acc = if with_bias { bias[e] } else { T::zero() };
                for c in 0..in_ch {
                    for al in 0..p {
                        let xrow = (c * n + gi * p + al) * n + gj * p;
                        let wrow = ((e * in_ch + c) * p + al) * p;
                        for be in 0..p {
                            acc += wts[wrow + be] * x.data()[xrow + be];
                        }
                    }
                }
                orow[e] = acc;
            }
        }
    }
    out
}

fn patch_embed_vjp<T: Scalar>(
    x: &Tensor<T>,
    params: &[T],
    cot: &Tensor<T>,
    param_grad: &mut [T],
    in_ch: usize,
    embed: usize,
    p: usize,
) -> Vec<Tensor<T>> {
    let n = x.shape()[1];
    let g = n / p;
    let wts = &params[..embed * in_ch * p * p];
    let (wg, bg) = param_grad.split_at_mut(embed * in_ch * p * p);
    let mut xcot = Tensor::zeros(x.shape());
    for gi in 0..g {
        for gj in 0..g {
            let t = gi * g + gj;
            let crow = &cot.data()[t * embed..(t + 1) * embed];
            for e in 0..embed {
                let ce = crow[e];
                bg[e] += ce;
                for c in 0..in_ch {
                    for al in 0..p {
                        let xrow = (c * n + gi * p + al) * n + gj * p;
                        let wrow = ((e * in_ch + c) * p + al) * p;
                        for be in 0..p {
                            wg[wrow + be] += ce * x.data()[xrow + be];
                            xcot.data_mut()[xrow + be] += ce * wts[wrow + be];
                        }
                    }
                }
            }
        }
    }
    vec![xcot]
}

fn patch_unembed_fwd<T: Scalar>(x: &Tensor<T>, out_ch: usize, p: usize) -> Tensor<T> {
    let tokens = x.shape()[0];
    let g = (tokens as f64).sqrt() as usize;
    let n = g * p;
    let width = out_ch * p * p;
    let mut out = Tensor::zeros(&[out_ch, n, n]);
    for gi in 0..g {
        for gj in 0..g {
            let t = gi * g + gj;
            for c in 0..out_ch {
                for al in 0..p {
                    let dst = (c * n + gi * p + al) * n + gj * p;
                    let src = t * width + (c * p + al) * p;
                    for be in 0..p {
                        out.data_mut()[dst + be] = x.data()[src + be];
                    }
                }
            }
        }
    }
    out
}

fn patch_unembed_vjp<T: Scalar>(
    x: &Tensor<T>,
    cot: &Tensor<T>,
    out_ch: usize,
    p: usize,
) -> Tensor<T> {
    let tokens = x.shape()[0];
    let g = (tokens as f64).sqrt() as usize;
    let n = g * p;
    let width = out_ch * p * p;
    let mut xcot = Tensor::zeros(x.shape());
    for gi in 0..g {
        for gj in 0..g {
            let t = gi * g + gj;
            for c in 0..out_ch {
                for al in 0..p {
                    let src = (c * n + gi * p + al) * n + gj * p;
                    let dst = t * width + (c * p + al) * p;
                    for be in 0..p {
                        xcot.data_mut()[dst + be] = cot.data()[src + be];
                    }
                }
            }
        }
    }
    xcot
}

fn pool_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let quarter = T::from_f64(0.25);
    let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
    for ch in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let a = x.at3(ch, 2 * i, 2 * j);
                let b = x.at3(ch, 2 * i, 2 * j + 1);
                let d = x.at3(ch, 2 * i + 1, 2 * j);
                let e = x.at3(ch, 2 * i + 1, 2 * j + 1);
                let idx = (ch * (h / 2) + i) * (w / 2) + j;
                out.data_mut()[idx] = ((a + b) + (d + e)) * quarter;
            }
        }
    }
    out
}

fn pool_vjp<T: Scalar>(x: &Tensor<T>, cot: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let quarter = T::from_f64(0.25);
    let mut xcot = Tensor::zeros(x.shape());
    for ch in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let g = cot.data()[(ch * (h / 2) + i) * (w / 2) + j] * quarter;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = xcot.idx3(ch, 2 * i + di, 2 * j + dj);
                    xcot.data_mut()[idx] += g;
                }
            }
        }
    }
    xcot
}

fn upsample_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ch in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                let idx = (ch * 2 * h + i) * 2 * w + j;
                out.data_mut()[idx] = x.at3(ch, i / 2, j / 2);
            }
        }
    }
    out
}

fn upsample_vjp<T: Scalar>(x: &Tensor<T>, cot: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut xcot = Tensor::zeros(x.shape());
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    acc += cot.data()[(ch * 2 * h + 2 * i + di) * 2 * w + 2 * j + dj];
                }
                let idx = xcot.idx3(ch, i, j);
                xcot.data_mut()[idx] = acc;
            }
        }
    }
    xcot
}

fn softmax_rows_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(x.shape());
    for r in 0..rows {
        let xr = &x.data()[r * cols..(r + 1) * cols];
        let orow = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let mut maxv = xr[0];
        for v in xr.iter().skip(1) {
            if *v > maxv {
                maxv = *v;
            }
        }
        let mut sum = T::zero();
        for (o, v) in orow.iter_mut().zip(xr.iter()) {
            *o = (*v - maxv).exp();
            sum += *o;
        }
        let inv = T::one() / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    out
}

/// `y ∘ (v − ⟨y, v⟩)` per row: the softmax Jacobian applied to `v`. The
/// Jacobian `diag(y) − y yᵀ` is symmetric, so the same kernel serves JVP
/// and VJP.
fn softmax_rows_jacobian<T: Scalar>(y: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = (y.shape()[0], y.shape()[1]);
    let mut out = Tensor::zeros(y.shape());
    for r in 0..rows {
        let yr = &y.data()[r * cols..(r + 1) * cols];
        let vr = &v.data()[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for (a, b) in yr.iter().zip(vr.iter()) {
            dot += *a * *b;
        }
        let orow = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for k in 0..cols {
            orow[k] = yr[k] * (vr[k] - dot);
        }
    }
    out
}

fn concat_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let cb = b.shape()[0];
    let mut out = Tensor::zeros(&[ca + cb, h, w]);
    out.data_mut()[..ca * h * w].copy_from_slice(a.data());
    out.data_mut()[ca * h * w..].copy_from_slice(b.data());
    out
}

fn concat_vjp<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cot: &Tensor<T>) -> Vec<Tensor<T>> {
    let na = a.numel();
    let mut ac = Tensor::zeros(a.shape());
    let mut bc = Tensor::zeros(b.shape());
    ac.data_mut().copy_from_slice(&cot.data()[..na]);
    bc.data_mut().copy_from_slice(&cot.data()[na..]);
    vec![ac, bc]
}

fn matmul_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, transpose_b: bool) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = if transpose_b { b.shape()[0] } else { b.shape()[1] };
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let orow = &mut out.data_mut()[i * n..(i + 1) * n];
        if transpose_b {
            for j in 0..n {
                let brow = &b.data()[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for l in 0..k {
                    acc += arow[l] * brow[l];
                }
                orow[j] = acc;
            }
        } else {
            for l in 0..k {
                let av = arow[l];
                if av == T::zero() {
                    continue;
                }
                let brow = &b.data()[l * n..(l + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    out
}

fn matmul_vjp<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    cot: &Tensor<T>,
    transpose_b: bool,
) -> Vec<Tensor<T>> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = cot.shape()[1];
    let mut ac = Tensor::zeros(a.shape());
    let mut bc = Tensor::zeros(b.shape());
    if transpose_b {
        // out = A Bᵀ: Ac = cot·B, Bc = cotᵀ·A
        for i in 0..m {
            let crow = &cot.data()[i * n..(i + 1) * n];
            let arow = &a.data()[i * k..(i + 1) * k];
            let acrow = &mut ac.data_mut()[i * k..(i + 1) * k];
            for j in 0..n {
                let cv = crow[j];
                if cv == T::zero() {
                    continue;
                }
                let brow = &b.data()[j * k..(j + 1) * k];
                for l in 0..k {
                    acrow[l] += cv * brow[l];
                }
            }
            for j in 0..n {
                let cv = crow[j];
                if cv == T::zero() {
                    continue;
                }
                let bcrow = &mut bc.data_mut()[j * k..(j + 1) * k];
                for l in 0..k {
                    bcrow[l] += cv * arow[l];
                }
            }
        }
    } else {
        // out = A B: Ac = cot·Bᵀ, Bc = Aᵀ·cot
        for i in 0..m {
            let crow = &cot.data()[i * n..(i + 1) * n];
            let arow = &a.data()[i * k..(i + 1) * k];
            let acrow = &mut ac.data_mut()[i * k..(i + 1) * k];
            for l in 0..k {
                let brow = &b.data()[l * n..(l + 1) * n];
                let mut acc = T::zero();
                for j in 0..n {
                    acc += crow[j] * brow[j];
                }
                acrow[l] += acc;
                let av = arow[l];
                if av != T::zero() {
                    let bcrow = &mut bc.data_mut()[l * n..(l + 1) * n];
                    for j in 0..n {
                        bcrow[j] += av * crow[j];
                    }
                }
            }
        }
    }
    vec![ac, bc]
}
