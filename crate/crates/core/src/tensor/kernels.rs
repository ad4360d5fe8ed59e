//! Forward/backward kernels on raw slices, plus the tensor-level pure ops.
//!
//! Convolutions are same-padded with zeros and use cross-correlation (no
//! kernel flip). They are lowered to GEMM through an im2col buffer which
//! the backward pass reuses.

use serde::{Deserialize, Serialize};

use super::{check_shape, Real, Result, Tensor, TensorError};

/// `c = op(a) * op(b) + beta * c`, with `a` stored `m×k` (or `k×m` when
/// `trans_a`) and `b` stored `k×n` (or `n×k` when `trans_b`), row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths asserted above; c is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `[c, h, w]` into `[c*k*k, h*w]` patches (zero padding).
pub fn im2col<T: Real>(input: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let hw = h * w;
    let mut col = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = &mut col[((ci * k + dy) * k + dx) * hw..][..hw];
                let (x0, x1) = valid_range(w, dx, p);
                for y in 0..h {
                    let yy = y + dy;
                    if yy < p || yy - p >= h {
                        continue;
                    }
                    let src = &plane[(yy - p) * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    dst[x0..x1].copy_from_slice(&src[x0 + dx - p..x1 + dx - p]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds patch gradients back onto `[c, h, w]`.
pub fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = &col[((ci * k + dy) * k + dx) * hw..][..hw];
                let (x0, x1) = valid_range(w, dx, p);
                for y in 0..h {
                    let yy = y + dy;
                    if yy < p || yy - p >= h {
                        continue;
                    }
                    let dst = &mut plane[(yy - p) * w..][..w];
                    let src = &row[y * w..][..w];
                    for (d, &s) in dst[x0 + dx - p..x1 + dx - p].iter_mut().zip(&src[x0..x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

// Output columns x for which x + dx - p falls inside [0, w).
fn valid_range(w: usize, dx: usize, p: usize) -> (usize, usize) {
    let x0 = p.saturating_sub(dx);
    let x1 = (w + p).saturating_sub(dx).min(w);
    (x0, x1.max(x0))
}

pub(crate) struct Conv2dGeometry {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl Conv2dGeometry {
    pub fn check(input: &[usize], kernel: &[usize], bias: Option<&[usize]>) -> Result<Self> {
        if input.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d input",
                expected: vec![0, 0, 0],
                actual: input.to_vec(),
            });
        }
        if kernel.len() != 4 || kernel[2] != kernel[3] || kernel[1] != input[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d kernel",
                expected: vec![kernel.first().copied().unwrap_or(0), input[0], 0, 0],
                actual: kernel.to_vec(),
            });
        }
        if kernel[2] % 2 == 0 {
            return Err(TensorError::EvenKernel {
                op: "conv2d",
                size: kernel[2],
            });
        }
        if let Some(b) = bias {
            check_shape("conv2d bias", &[kernel[0]], b)?;
        }
        Ok(Self {
            cin: input[0],
            cout: kernel[0],
            h: input[1],
            w: input[2],
            k: kernel[2],
        })
    }
}

/// Returns the output and the im2col buffer (kept for backward).
pub(crate) fn conv2d_forward<T: Real>(
    g: &Conv2dGeometry,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let hw = g.h * g.w;
    let kk = g.cin * g.k * g.k;
    let col = if g.k == 1 {
        input.to_vec()
    } else {
        im2col(input, g.cin, g.h, g.w, g.k)
    };
    let mut out = vec![T::zero(); g.cout * hw];
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bv);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    gemm(false, false, g.cout, hw, kk, kernel, &col, beta, &mut out);
    (out, col)
}

/// Gradients w.r.t. (input, kernel, bias) given the upstream gradient.
pub(crate) fn conv2d_backward<T: Real>(
    g: &Conv2dGeometry,
    grad_out: &[T],
    col: &[T],
    kernel: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = g.h * g.w;
    let kk = g.cin * g.k * g.k;
    let mut gk = vec![T::zero(); g.cout * kk];
    gemm(false, true, g.cout, kk, hw, grad_out, col, T::zero(), &mut gk);
    let gb: Vec<T> = (0..g.cout)
        .map(|o| grad_out[o * hw..(o + 1) * hw].iter().copied().sum())
        .collect();
    let gin = need_input.then(|| {
        let mut gcol = vec![T::zero(); kk * hw];
        gemm(true, false, kk, hw, g.cout, kernel, grad_out, T::zero(), &mut gcol);
        if g.k == 1 {
            gcol
        } else {
            let mut gin = vec![T::zero(); g.cin * hw];
            col2im(&gcol, g.cin, g.h, g.w, g.k, &mut gin);
            gin
        }
    });
    (gin, gk, gb)
}

/// Same-padded 2-D cross-correlation: `[C_in,H,W] * [C_out,C_in,k,k] + [C_out]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Conv2dGeometry::check(input.shape(), kernel.shape(), Some(bias.shape()))?;
    let (out, _) = conv2d_forward(&g, input.data(), kernel.data(), Some(bias.data()));
    Tensor::from_vec(&[g.cout, g.h, g.w], out)
}

pub(crate) struct Conv3dGeometry {
    pub len: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kt: usize,
    pub k: usize,
}

impl Conv3dGeometry {
    pub fn check(input: &[usize], kernel: &[usize], bias: &[usize]) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 5 || kernel[1] != input[1] || kernel[3] != kernel[4] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                expected: vec![kernel.first().copied().unwrap_or(0), input.get(1).copied().unwrap_or(0), 0, 0, 0],
                actual: kernel.to_vec(),
            });
        }
        for size in [kernel[2], kernel[3]] {
            if size % 2 == 0 {
                return Err(TensorError::EvenKernel { op: "conv3d", size });
            }
        }
        check_shape("conv3d bias", &[kernel[0]], bias)?;
        Ok(Self {
            len: input[0],
            cin: input[1],
            cout: kernel[0],
            h: input[2],
            w: input[3],
            kt: kernel[2],
            k: kernel[3],
        })
    }
}

fn tap_of<T: Real>(g: &Conv3dGeometry, kernel: &[T], tau: usize) -> Vec<T> {
    let kk = g.k * g.k;
    let mut out = Vec::with_capacity(g.cout * g.cin * kk);
    for o in 0..g.cout {
        for i in 0..g.cin {
            let base = ((o * g.cin + i) * g.kt + tau) * kk;
            out.extend_from_slice(&kernel[base..base + kk]);
        }
    }
    out
}

fn scatter_tap<T: Real>(g: &Conv3dGeometry, tap_grad: &[T], tau: usize, kernel_grad: &mut [T]) {
    let kk = g.k * g.k;
    for o in 0..g.cout {
        for i in 0..g.cin {
            let base = ((o * g.cin + i) * g.kt + tau) * kk;
            let src = &tap_grad[(o * g.cin + i) * kk..][..kk];
            for (d, &s) in kernel_grad[base..base + kk].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

// (output time t, input time) pairs that a temporal tap connects.
fn tap_pairs(len: usize, kt: usize, tau: usize) -> impl Iterator<Item = (usize, usize)> {
    let pt = kt / 2;
    (0..len).filter_map(move |t| {
        let src = t + tau;
        (src >= pt && src - pt < len).then(|| (t, src - pt))
    })
}

/// 3-D convolution over `[L, C_in, H, W]` (time-major), same padding in
/// time and space. Returns output and the per-time im2col buffers.
pub(crate) fn conv3d_forward<T: Real>(
    g: &Conv3dGeometry,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> (Vec<T>, Vec<Vec<T>>) {
    let hw = g.h * g.w;
    let kk = g.cin * g.k * g.k;
    let cols: Vec<Vec<T>> = (0..g.len)
        .map(|t| im2col(&input[t * g.cin * hw..(t + 1) * g.cin * hw], g.cin, g.h, g.w, g.k))
        .collect();
    let mut out = vec![T::zero(); g.len * g.cout * hw];
    for t in 0..g.len {
        for (o, &bv) in bias.iter().enumerate() {
            out[(t * g.cout + o) * hw..][..hw].iter_mut().for_each(|v| *v = bv);
        }
    }
    for tau in 0..g.kt {
        let w_tap = tap_of(g, kernel, tau);
        for (t, src) in tap_pairs(g.len, g.kt, tau) {
            let dst = &mut out[t * g.cout * hw..(t + 1) * g.cout * hw];
            gemm(false, false, g.cout, hw, kk, &w_tap, &cols[src], T::one(), dst);
        }
    }
    (out, cols)
}

pub(crate) fn conv3d_backward<T: Real>(
    g: &Conv3dGeometry,
    grad_out: &[T],
    cols: &[Vec<T>],
    kernel: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = g.h * g.w;
    let kk = g.cin * g.k * g.k;
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gcols: Vec<Vec<T>> = vec![vec![T::zero(); kk * hw]; g.len];
    for tau in 0..g.kt {
        let w_tap = tap_of(g, kernel, tau);
        let mut g_tap = vec![T::zero(); g.cout * kk];
        let mut touched = false;
        for (t, src) in tap_pairs(g.len, g.kt, tau) {
            let go = &grad_out[t * g.cout * hw..(t + 1) * g.cout * hw];
            gemm(false, true, g.cout, kk, hw, go, &cols[src], T::one(), &mut g_tap);
            gemm(true, false, kk, hw, g.cout, &w_tap, go, T::one(), &mut gcols[src]);
            touched = true;
        }
        if touched {
            scatter_tap(g, &g_tap, tau, &mut gk);
        }
    }
    let mut gb = vec![T::zero(); g.cout];
    for t in 0..g.len {
        for (o, b) in gb.iter_mut().enumerate() {
            *b += grad_out[(t * g.cout + o) * hw..][..hw].iter().copied().sum();
        }
    }
    let mut gin = vec![T::zero(); g.len * g.cin * hw];
    for (t, gcol) in gcols.iter().enumerate() {
        col2im(gcol, g.cin, g.h, g.w, g.k, &mut gin[t * g.cin * hw..(t + 1) * g.cin * hw]);
    }
    (gin, gk, gb)
}

/// 3-D convolution head: `[L,C_in,H,W] * [C_out,C_in,kt,k,k] + [C_out]`.
pub fn conv3d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Conv3dGeometry::check(input.shape(), kernel.shape(), bias.shape())?;
    let (out, _) = conv3d_forward(&g, input.data(), kernel.data(), bias.data());
    Tensor::from_vec(&[g.len, g.cout, g.h, g.w], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => {
                // Split by sign so exp never overflows.
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's own output `y`.
    pub fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

pub fn apply_activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let data = x.data().iter().map(|&v| kind.eval(v)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchNormMode {
    Train,
    Infer,
}

/// Per-channel batchnorm state. `scale`/`shift` are trainable; the moving
/// statistics are not.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub moving_mean: Vec<T>,
    pub moving_var: Vec<T>,
}

impl<T: Real> BatchNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            moving_mean: vec![T::zero(); channels],
            moving_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Forward pass shared by the pure op and the tape.
pub(crate) struct BatchNormForward<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

pub(crate) fn batchnorm_forward<T: Real>(
    x: &[T],
    channels: usize,
    scale: &[T],
    shift: &[T],
    moving_mean: &[T],
    moving_var: &[T],
    mode: BatchNormMode,
    eps: T,
) -> BatchNormForward<T> {
    let n = x.len() / channels;
    let nf = T::from_usize(n).expect("count");
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); channels];
    let mut batch_mean = vec![T::zero(); channels];
    let mut batch_var = vec![T::zero(); channels];
    for c in 0..channels {
        let plane = &x[c * n..(c + 1) * n];
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mean = plane.iter().copied().sum::<T>() / nf;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                (mean, var)
            }
            BatchNormMode::Infer => (moving_mean[c], moving_var[c]),
        };
        batch_mean[c] = mean;
        batch_var[c] = var;
        let is = T::one() / (var + eps).sqrt();
        inv_std[c] = is;
        for i in 0..n {
            let xh = (plane[i] - mean) * is;
            xhat[c * n + i] = xh;
            out[c * n + i] = scale[c] * xh + shift[c];
        }
    }
    BatchNormForward {
        out,
        xhat,
        inv_std,
        batch_mean,
        batch_var,
    }
}

/// Returns (dx, dscale, dshift).
pub(crate) fn batchnorm_backward<T: Real>(
    grad_out: &[T],
    xhat: &[T],
    inv_std: &[T],
    scale: &[T],
    mode: BatchNormMode,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let channels = scale.len();
    let n = grad_out.len() / channels;
    let nf = T::from_usize(n).expect("count");
    let mut dx = vec![T::zero(); grad_out.len()];
    let mut dscale = vec![T::zero(); channels];
    let mut dshift = vec![T::zero(); channels];
    for c in 0..channels {
        let go = &grad_out[c * n..(c + 1) * n];
        let xh = &xhat[c * n..(c + 1) * n];
        let sum_g: T = go.iter().copied().sum();
        let sum_gx: T = go.iter().zip(xh).map(|(&g, &x)| g * x).sum();
        dscale[c] = sum_gx;
        dshift[c] = sum_g;
        let k = scale[c] * inv_std[c];
        match mode {
            BatchNormMode::Train => {
                for i in 0..n {
                    dx[c * n + i] = k * (go[i] - sum_g / nf - xh[i] * sum_gx / nf);
                }
            }
            BatchNormMode::Infer => {
                for i in 0..n {
                    dx[c * n + i] = k * go[i];
                }
            }
        }
    }
    (dx, dscale, dshift)
}

/// Folds batch statistics into the moving averages (`m = momentum*m + (1-momentum)*batch`).
pub fn update_moving_stats<T: Real>(params: &mut BatchNormParams<T>, batch_mean: &[T], batch_var: &[T], momentum: T) {
    let keep = momentum;
    let take = T::one() - momentum;
    for c in 0..params.channels() {
        params.moving_mean[c] = keep * params.moving_mean[c] + take * batch_mean[c];
        params.moving_var[c] = keep * params.moving_var[c] + take * batch_var[c];
    }
}

/// Batch normalization of `[C, H, W]` over the spatial dims.
///
/// Train mode normalizes by the field's own statistics and updates the
/// moving averages in `params`; infer mode uses the moving averages.
pub fn batchnorm<T: Real>(
    x: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: BatchNormMode,
    momentum: T,
    eps: T,
) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        return Err(TensorError::NonPositiveEpsilon(eps.as_f64()));
    }
    let shape = x.shape();
    if shape.is_empty() || shape[0] != params.channels() {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            expected: vec![params.channels()],
            actual: shape.to_vec(),
        });
    }
    let fwd = batchnorm_forward(
        x.data(),
        params.channels(),
        &params.scale,
        &params.shift,
        &params.moving_mean,
        &params.moving_var,
        mode,
        eps,
    );
    if mode == BatchNormMode::Train {
        update_moving_stats(params, &fwd.batch_mean, &fwd.batch_var, momentum);
    }
    Tensor::from_vec(shape, fwd.out)
}

/// Mean squared error and its gradient `2(pred - target)/N`.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Vec<T>)> {
    check_shape("mse_loss", target.shape(), pred.shape())?;
    let n = T::from_usize(pred.len().max(1)).expect("count");
    let two = T::one() + T::one();
    let mut sum = T::zero();
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d * d;
            two * d / n
        })
        .collect();
    Ok((sum / n, grad))
}
