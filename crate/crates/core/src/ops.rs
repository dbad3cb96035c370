//! Differentiable kernels for the 3D convolutional branches.
//!
//! Every op is pure and comes with an explicit backward function instead of
//! an autodiff tape. Accumulation order inside each output element is fixed
//! (channel, then kernel t/h/w ascending), so results are bitwise
//! reproducible and match the naive references in [`crate::reference`]
//! exactly.

use crate::tensor::{ShapeError, Tensor};

/// 3D convolution, kernel 3x3x3, stride 1, zero padding 1.
///
/// Input is `[C_in, T, H, W]`, weight `[C_out, C_in, 3, 3, 3]`, bias
/// `[C_out]`; the output keeps the spatial extents: `[C_out, T, H, W]`.
pub fn conv3d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor, ShapeError> {
    let (c_out, c_in, t, h, w) = check_conv_args("conv3d_forward", input, weight, bias)?;

    let mut out = Tensor::zeros(&[c_out, t, h, w]);
    let idata = input.data();
    let wdata = weight.data();
    let bdata = bias.data();
    let odata = out.data_mut();

    for co in 0..c_out {
        for to in 0..t {
            for ho in 0..h {
                let orow = &mut odata[((co * t + to) * h + ho) * w..][..w];
                orow.fill(bdata[co]);
                for ci in 0..c_in {
                    for dt in 0..3usize {
                        let ti = to + dt;
                        if ti < 1 || ti > t {
                            continue;
                        }
                        let ti = ti - 1;
                        for dh in 0..3usize {
                            let hi = ho + dh;
                            if hi < 1 || hi > h {
                                continue;
                            }
                            let hi = hi - 1;
                            let irow = &idata[((ci * t + ti) * h + hi) * w..][..w];
                            let wbase = (((co * c_in + ci) * 3 + dt) * 3 + dh) * 3;
                            // dw ascending keeps the per-element add order
                            // identical to the naive loop.
                            let coef = wdata[wbase];
                            for x in 1..w {
                                orow[x] += coef * irow[x - 1];
                            }
                            let coef = wdata[wbase + 1];
                            for x in 0..w {
                                orow[x] += coef * irow[x];
                            }
                            let coef = wdata[wbase + 2];
                            for x in 0..w.saturating_sub(1) {
                                orow[x] += coef * irow[x + 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d_forward`] with respect to input, weight, and bias.
///
/// `grad_out` must match the forward output shape.
pub fn conv3d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), ShapeError> {
    let [c_in, t, h, w] = input.dims4("conv3d_backward")?;
    let [c_out, wc_in, kt, kh, kw] = weight.dims5("conv3d_backward")?;
    if (kt, kh, kw) != (3, 3, 3) {
        return Err(ShapeError::mismatch(
            "conv3d_backward",
            format!("kernel must be 3x3x3, got {kt}x{kh}x{kw}"),
        ));
    }
    if wc_in != c_in {
        return Err(ShapeError::mismatch(
            "conv3d_backward",
            format!("input has {c_in} channels, weight expects {wc_in}"),
        ));
    }
    let go_shape = grad_out.dims4("conv3d_backward")?;
    if go_shape != [c_out, t, h, w] {
        return Err(ShapeError::mismatch(
            "conv3d_backward",
            format!("grad_out {go_shape:?} does not match output [{c_out}, {t}, {h}, {w}]"),
        ));
    }

    let idata = input.data();
    let wdata = weight.data();
    let gdata = grad_out.data();

    let mut grad_bias = Tensor::zeros(&[c_out]);
    {
        let gb = grad_bias.data_mut();
        let plane = t * h * w;
        for co in 0..c_out {
            let mut acc = 0.0;
            for &g in &gdata[co * plane..(co + 1) * plane] {
                acc += g;
            }
            gb[co] = acc;
        }
    }

    let mut grad_weight = Tensor::zeros(&[c_out, c_in, 3, 3, 3]);
    {
        let gw = grad_weight.data_mut();
        for co in 0..c_out {
            for ci in 0..c_in {
                for dt in 0..3usize {
                    for dh in 0..3usize {
                        let mut acc = [0.0f64; 3];
                        for to in 0..t {
                            let ti = to + dt;
                            if ti < 1 || ti > t {
                                continue;
                            }
                            let ti = ti - 1;
                            for ho in 0..h {
                                let hi = ho + dh;
                                if hi < 1 || hi > h {
                                    continue;
                                }
                                let hi = hi - 1;
                                let grow = &gdata[((co * t + to) * h + ho) * w..][..w];
                                let irow = &idata[((ci * t + ti) * h + hi) * w..][..w];
                                for x in 1..w {
                                    acc[0] += grow[x] * irow[x - 1];
                                }
                                for x in 0..w {
                                    acc[1] += grow[x] * irow[x];
                                }
                                for x in 0..w.saturating_sub(1) {
                                    acc[2] += grow[x] * irow[x + 1];
                                }
                            }
                        }
                        let base = (((co * c_in + ci) * 3 + dt) * 3 + dh) * 3;
                        gw[base] = acc[0];
                        gw[base + 1] = acc[1];
                        gw[base + 2] = acc[2];
                    }
                }
            }
        }
    }

    let mut grad_input = Tensor::zeros(&[c_in, t, h, w]);
    {
        let gi = grad_input.data_mut();
        for co in 0..c_out {
            for to in 0..t {
                for ho in 0..h {
                    let grow = &gdata[((co * t + to) * h + ho) * w..][..w];
                    for ci in 0..c_in {
                        for dt in 0..3usize {
                            let ti = to + dt;
                            if ti < 1 || ti > t {
                                continue;
                            }
                            let ti = ti - 1;
                            for dh in 0..3usize {
                                let hi = ho + dh;
                                if hi < 1 || hi > h {
                                    continue;
                                }
                                let hi = hi - 1;
                                let girow = &mut gi[((ci * t + ti) * h + hi) * w..][..w];
                                let wbase = (((co * c_in + ci) * 3 + dt) * 3 + dh) * 3;
                                let coef = wdata[wbase];
                                for x in 1..w {
                                    girow[x - 1] += coef * grow[x];
                                }
                                let coef = wdata[wbase + 1];
                                for x in 0..w {
                                    girow[x] += coef * grow[x];
                                }
                                let coef = wdata[wbase + 2];
                                for x in 0..w.saturating_sub(1) {
                                    girow[x + 1] += coef * grow[x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok((grad_input, grad_weight, grad_bias))
}

fn check_conv_args(
    op: &'static str,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize, usize, usize), ShapeError> {
    let [c_in, t, h, w] = input.dims4(op)?;
    let [c_out, wc_in, kt, kh, kw] = weight.dims5(op)?;
    if (kt, kh, kw) != (3, 3, 3) {
        return Err(ShapeError::mismatch(
            op,
            format!("kernel must be 3x3x3, got {kt}x{kh}x{kw}"),
        ));
    }
    if wc_in != c_in {
        return Err(ShapeError::mismatch(
            op,
            format!("input has {c_in} channels, weight expects {wc_in}"),
        ));
    }
    let bn = bias.dims1(op)?;
    if bn != c_out {
        return Err(ShapeError::mismatch(
            op,
            format!("bias has {bn} entries, weight produces {c_out} channels"),
        ));
    }
    Ok((c_out, c_in, t, h, w))
}

/// Forward bookkeeping for max pooling: which input element won each window.
#[derive(Debug, Clone)]
pub struct PoolCache {
    in_shape: [usize; 4],
    out_shape: [usize; 4],
    argmax: Vec<usize>,
}

impl PoolCache {
    pub fn in_shape(&self) -> [usize; 4] {
        self.in_shape
    }

    pub fn out_shape(&self) -> [usize; 4] {
        self.out_shape
    }
}

/// Max pooling with kernel 2x2x2 and stride 2.
///
/// Floor semantics: a trailing odd slice along any axis is dropped. Extents
/// that would pool to zero are rejected.
pub fn maxpool3d_forward(input: &Tensor) -> Result<(Tensor, PoolCache), ShapeError> {
    maxpool3d_with_kernel(input, [2, 2, 2])
}

/// Max pooling with a per-axis kernel of 1 (identity) or 2, stride equal to
/// the kernel. The model uses this to leave already-collapsed axes alone.
pub fn maxpool3d_with_kernel(
    input: &Tensor,
    kernel: [usize; 3],
) -> Result<(Tensor, PoolCache), ShapeError> {
    let [c, t, h, w] = input.dims4("maxpool3d_forward")?;
    for (&k, (&e, axis)) in kernel.iter().zip([t, h, w].iter().zip(["t", "h", "w"])) {
        if k != 1 && k != 2 {
            return Err(ShapeError::mismatch(
                "maxpool3d_forward",
                format!("kernel extent {k} on axis {axis} (only 1 or 2 supported)"),
            ));
        }
        if e / k == 0 {
            return Err(ShapeError::mismatch(
                "maxpool3d_forward",
                format!("axis {axis} extent {e} would pool to 0"),
            ));
        }
    }
    let [kt, kh, kw] = kernel;
    let (ot, oh, ow) = (t / kt, h / kh, w / kw);

    let mut out = Tensor::zeros(&[c, ot, oh, ow]);
    let mut argmax = vec![0usize; c * ot * oh * ow];
    let idata = input.data();
    let odata = out.data_mut();

    let mut o = 0usize;
    for ch in 0..c {
        for to in 0..ot {
            for ho in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dt in 0..kt {
                        for dh in 0..kh {
                            for dx in 0..kw {
                                let idx = ((ch * t + to * kt + dt) * h + ho * kh + dh) * w
                                    + xo * kw
                                    + dx;
                                let v = idata[idx];
                                // strict > keeps the first element of a tie
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    odata[o] = best;
                    argmax[o] = best_idx;
                    o += 1;
                }
            }
        }
    }

    Ok((
        out,
        PoolCache {
            in_shape: [c, t, h, w],
            out_shape: [c, ot, oh, ow],
            argmax,
        },
    ))
}

/// Routes each output gradient back to the input element that won its window.
pub fn maxpool3d_backward(cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor, ShapeError> {
    let go_shape = grad_out.dims4("maxpool3d_backward")?;
    if go_shape != cache.out_shape {
        return Err(ShapeError::mismatch(
            "maxpool3d_backward",
            format!(
                "grad_out {go_shape:?} does not match pooled shape {:?}",
                cache.out_shape
            ),
        ));
    }
    let mut grad_input = Tensor::zeros(&cache.in_shape);
    let gi = grad_input.data_mut();
    for (&src, &g) in cache.argmax.iter().zip(grad_out.data()) {
        // windows are disjoint, so each input index appears at most once
        gi[src] += g;
    }
    Ok(grad_input)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
    out
}

/// Gradient passes where the forward input was strictly positive; the
/// subgradient at zero is zero.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor, ShapeError> {
    if input.shape() != grad_out.shape() {
        return Err(ShapeError::mismatch(
            "relu_backward",
            format!(
                "grad_out {:?} does not match input {:?}",
                grad_out.shape(),
                input.shape()
            ),
        ));
    }
    let mut out = Tensor::zeros(input.shape());
    let odata = out.data_mut();
    for ((o, &x), &g) in odata.iter_mut().zip(input.data()).zip(grad_out.data()) {
        if x > 0.0 {
            *o = g;
        }
    }
    Ok(out)
}

/// Affine map `y = W x + b` with weight `[N_out, N_in]`.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, ShapeError> {
    let n_in = input.dims1("linear_forward")?;
    let [n_out, wn_in] = weight.dims2("linear_forward")?;
    if wn_in != n_in {
        return Err(ShapeError::mismatch(
            "linear_forward",
            format!("input has {n_in} features, weight expects {wn_in}"),
        ));
    }
    let bn = bias.dims1("linear_forward")?;
    if bn != n_out {
        return Err(ShapeError::mismatch(
            "linear_forward",
            format!("bias has {bn} entries, weight produces {n_out}"),
        ));
    }
    let mut out = Tensor::zeros(&[n_out]);
    let x = input.data();
    let wdata = weight.data();
    let odata = out.data_mut();
    for (r, o) in odata.iter_mut().enumerate() {
        let row = &wdata[r * n_in..(r + 1) * n_in];
        let mut acc = bias.data()[r];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *o = acc;
    }
    Ok(out)
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), ShapeError> {
    let n_in = input.dims1("linear_backward")?;
    let [n_out, wn_in] = weight.dims2("linear_backward")?;
    if wn_in != n_in {
        return Err(ShapeError::mismatch(
            "linear_backward",
            format!("input has {n_in} features, weight expects {wn_in}"),
        ));
    }
    let gn = grad_out.dims1("linear_backward")?;
    if gn != n_out {
        return Err(ShapeError::mismatch(
            "linear_backward",
            format!("grad_out has {gn} entries, weight produces {n_out}"),
        ));
    }

    let x = input.data();
    let wdata = weight.data();
    let g = grad_out.data();

    let mut grad_input = Tensor::zeros(&[n_in]);
    let gi = grad_input.data_mut();
    for r in 0..n_out {
        let gr = g[r];
        let row = &wdata[r * n_in..(r + 1) * n_in];
        for (o, wv) in gi.iter_mut().zip(row) {
            *o += gr * wv;
        }
    }

    let mut grad_weight = Tensor::zeros(&[n_out, n_in]);
    let gw = grad_weight.data_mut();
    for r in 0..n_out {
        let gr = g[r];
        let row = &mut gw[r * n_in..(r + 1) * n_in];
        for (o, xv) in row.iter_mut().zip(x) {
            *o = gr * xv;
        }
    }

    let grad_bias = grad_out.clone();
    Ok((grad_input, grad_weight, grad_bias))
}

/// Numerically stable softmax of a rank-1 tensor.
pub fn softmax(logits: &Tensor) -> Result<Vec<f64>, ShapeError> {
    let n = logits.dims1("softmax")?;
    if n == 0 {
        return Err(ShapeError::mismatch("softmax", "empty logits"));
    }
    let x = logits.data();
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    Ok(p)
}

/// Softmax cross-entropy loss and its gradient with respect to the logits.
///
/// Stable under large magnitudes via max subtraction; the gradient is
/// `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor), ShapeError> {
    let n = logits.dims1("softmax_cross_entropy")?;
    if label >= n {
        return Err(ShapeError::mismatch(
            "softmax_cross_entropy",
            format!("label {label} out of range for {n} classes"),
        ));
    }
    let x = logits.data();
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (x[label] - m);

    let mut grad = Tensor::zeros(&[n]);
    let gdata = grad.data_mut();
    for (i, (o, e)) in gdata.iter_mut().zip(&exps).enumerate() {
        *o = e / z - if i == label { 1.0 } else { 0.0 };
    }
    Ok((loss, grad))
}
