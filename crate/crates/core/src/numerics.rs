//! Dense tensor math with explicit forward/backward rules and an SGD-with-momentum
//! optimizer.
//!
//! There is no computation graph here. Every layer of the model is chained by hand
//! in `training`, using the slice kernels at the bottom of this file. The `Tensor`
//! level functions are thin checked wrappers around those kernels.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("gaussian standard deviation must be positive, got {0}")]
    NonPositiveSigma(f64),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(NumericsError::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        axpy(1.0, &other.data, &mut self.data);
        Ok(())
    }
}

/// A trainable tensor with its accumulated gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            velocity,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.fill(0.0);
    }
}

/// Indexed access to a fixed collection of parameters.
pub trait ParamSet {
    fn num_params(&self) -> usize;
    fn param(&self, index: usize) -> &Parameter;
    fn param_mut(&mut self, index: usize) -> &mut Parameter;

    fn zero_grads(&mut self) {
        for i in 0..self.num_params() {
            self.param_mut(i).zero_grad();
        }
    }
}

impl ParamSet for Vec<Parameter> {
    fn num_params(&self) -> usize {
        self.len()
    }

    fn param(&self, index: usize) -> &Parameter {
        &self[index]
    }

    fn param_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self[index]
    }
}

fn check_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if w.rank() != 2 {
        return Err(NumericsError::ShapeMismatch {
            op: "affine",
            left: w.shape.clone(),
            right: x.shape.clone(),
        });
    }
    let (rows, cols) = (w.shape[0], w.shape[1]);
    if x.shape != [cols] {
        return Err(NumericsError::ShapeMismatch {
            op: "affine",
            left: w.shape.clone(),
            right: x.shape.clone(),
        });
    }
    if b.shape != [rows] {
        return Err(NumericsError::ShapeMismatch {
            op: "affine",
            left: w.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok((rows, cols))
}

/// `y = W x + b`.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, cols) = check_affine(x, w, b)?;
    let mut y = b.data.clone();
    matvec_acc(&w.data, rows, cols, &x.data, &mut y);
    Ok(Tensor::from_vec(y))
}

/// Reverse rule for [`affine_forward`]: returns `(dx, dW, db)`.
pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    if w.rank() != 2 || x.shape != [w.shape[1]] {
        return Err(NumericsError::ShapeMismatch {
            op: "affine_backward",
            left: w.shape.clone(),
            right: x.shape.clone(),
        });
    }
    let (rows, cols) = (w.shape[0], w.shape[1]);
    if dy.shape != [rows] {
        return Err(NumericsError::ShapeMismatch {
            op: "affine_backward",
            left: w.shape.clone(),
            right: dy.shape.clone(),
        });
    }
    let mut dx = vec![0.0; cols];
    matvec_t_acc(&w.data, rows, cols, &dy.data, &mut dx);
    let mut dw = vec![0.0; rows * cols];
    outer_acc(&dy.data, &x.data, &mut dw);
    Ok((
        Tensor::from_vec(dx),
        Tensor::new(vec![rows, cols], dw)?,
        dy.clone(),
    ))
}

/// Backward through an affine layer whose weights live in `Parameter`s: gradients
/// are added into `w.grad` / `b.grad` and `dx` is returned.
pub fn affine_backward_accumulate(
    x: &Tensor,
    w: &mut Parameter,
    b: &mut Parameter,
    dy: &Tensor,
) -> Result<Tensor> {
    let (dx, dw, db) = affine_backward(x, &w.value, dy)?;
    w.grad.add_assign(&dw)?;
    b.grad.add_assign(&db)?;
    Ok(dx)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Subgradient at exactly zero is 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape != dy.shape {
        return Err(NumericsError::ShapeMismatch {
            op: "relu_backward",
            left: x.shape.clone(),
            right: dy.shape.clone(),
        });
    }
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.data.clone();
    softmax_in_place(&mut out);
    Tensor {
        shape: logits.shape.clone(),
        data: out,
    }
}

pub const LOG_EPS: f64 = 1e-12;

/// Cross-entropy of softmax probabilities against `label`.
///
/// Returns the loss and its gradient with respect to the logits that produced
/// `probs`, which is `probs - onehot(label)`.
pub fn cross_entropy_loss(probs: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let k = probs.len();
    if label >= k {
        return Err(NumericsError::LabelOutOfRange { label, classes: k });
    }
    let loss = -(probs.data[label] + LOG_EPS).ln();
    let mut grad = probs.clone();
    grad.data[label] -= 1.0;
    Ok((loss, grad))
}

/// Gradient of `log N(sample; mean, sigma^2 I)` with respect to `mean`.
pub fn gaussian_logprob_grad(sample: [f64; 2], mean: [f64; 2], sigma: f64) -> Result<[f64; 2]> {
    if !(sigma > 0.0) {
        return Err(NumericsError::NonPositiveSigma(sigma));
    }
    let var = sigma * sigma;
    Ok([(sample[0] - mean[0]) / var, (sample[1] - mean[1]) / var])
}

/// Log-density of an isotropic 2-D Gaussian.
pub fn gaussian_logpdf(sample: [f64; 2], mean: [f64; 2], sigma: f64) -> f64 {
    let var = sigma * sigma;
    let d0 = sample[0] - mean[0];
    let d1 = sample[1] - mean[1];
    -(d0 * d0 + d1 * d1) / (2.0 * var) - (2.0 * std::f64::consts::PI * var).ln()
}

/// `velocity = momentum * velocity + grad; value -= lr * velocity`.
///
/// Gradients are left untouched; the caller zeroes them.
pub fn sgd_momentum_step<P: ParamSet + ?Sized>(params: &mut P, lr: f64, momentum: f64) {
    for i in 0..params.num_params() {
        let p = params.param_mut(i);
        for ((v, &g), w) in p
            .velocity
            .data
            .iter_mut()
            .zip(&p.grad.data)
            .zip(p.value.data.iter_mut())
        {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
}

/// Relative error used by the gradient checker. The floor keeps coordinates whose
/// true gradient is ~0 from dominating through round-off alone.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the gradients already accumulated in `params` against central
/// differences of `loss`, returning the worst relative error over all coordinates.
pub fn finite_difference_check<P, F>(params: &mut P, eps: f64, mut loss: F) -> f64
where
    P: ParamSet + ?Sized,
    F: FnMut(&P) -> f64,
{
    let mut worst = 0.0f64;
    for p in 0..params.num_params() {
        for i in 0..params.param(p).len() {
            let original = params.param(p).value.data[i];
            params.param_mut(p).value.data[i] = original + eps;
            let plus = loss(params);
            params.param_mut(p).value.data[i] = original - eps;
            let minus = loss(params);
            params.param_mut(p).value.data[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = params.param(p).grad.data[i];
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Slice kernels. These are the hot loops of training.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y += W x` for a row-major `rows x cols` matrix.
pub fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (yi, row) in y.iter_mut().zip(w.chunks_exact(cols)) {
        *yi += dot(row, x);
    }
}

/// `x += W^T y` for a row-major `rows x cols` matrix.
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, y: &[f64], x: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (&yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if yi != 0.0 {
            axpy(yi, row, x);
        }
    }
}

/// `W += y x^T`.
pub fn outer_acc(y: &[f64], x: &[f64], w: &mut [f64]) {
    let cols = x.len();
    for (&yi, row) in y.iter().zip(w.chunks_exact_mut(cols)) {
        if yi != 0.0 {
            axpy(yi, x, row);
        }
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
