//! Dense vector and matrix primitives with hand-written derivatives.
//!
//! Vectors are plain `[f64]` slices. Each forward primitive has a matching
//! backward helper that maps an upstream gradient to gradients of its inputs,
//! and [`check_gradients`] compares any analytic gradient against central
//! finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Row-major dense matrix with fixed dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix data", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ensure_len("matrix row", cols, r)?;
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column vector (n x 1).
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_len("matvec input", self.cols, x)?;
        Ok(self.data.chunks_exact(self.cols.max(1)).take(self.rows).map(|row| dot(row, x)).collect())
    }

    /// `self^T * y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        ensure_len("transposed matvec input", self.rows, y)?;
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            axpy(yr, self.row(r), &mut out);
        }
        Ok(out)
    }

    /// `self += alpha * u v^T`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = alpha * ur;
            if s == 0.0 {
                continue;
            }
            axpy(s, v, self.row_mut(r));
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn squared_norm(v: &[f64]) -> f64 {
    dot(v, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    None,
    Rectifier,
}

/// `W x + b`, optionally followed by an entrywise rectifier.
pub fn affine_forward(x: &[f64], w: &Matrix, b: &[f64], activation: Activation) -> Result<Vec<f64>> {
    ensure_len("affine bias", w.rows(), b)?;
    let mut out = w.matvec(x)?;
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
        if activation == Activation::Rectifier && *o < 0.0 {
            *o = 0.0;
        }
    }
    Ok(out)
}

/// Backward pass of [`affine_forward`].
///
/// `output` is the forward result (post-activation). Accumulates into
/// `grad_w`/`grad_b` and returns the gradient with respect to `x`. The
/// rectifier derivative at exactly zero is taken as zero.
pub fn affine_backward(
    x: &[f64],
    w: &Matrix,
    output: &[f64],
    activation: Activation,
    grad_out: &[f64],
    grad_w: &mut Matrix,
    grad_b: &mut [f64],
) -> Result<Vec<f64>> {
    ensure_len("affine output gradient", w.rows(), grad_out)?;
    let g: Vec<f64> = match activation {
        Activation::None => grad_out.to_vec(),
        Activation::Rectifier => grad_out
            .iter()
            .zip(output)
            .map(|(g, o)| if *o > 0.0 { *g } else { 0.0 })
            .collect(),
    };
    grad_w.add_outer(1.0, &g, x);
    axpy(1.0, &g, grad_b);
    w.matvec_t(&g)
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    ensure_len("hadamard", a.len(), b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::dim("softmax", 1, 0));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Gradient of the softmax pre-activations given the softmax output `y`
/// and upstream gradient `grad_y`.
pub fn softmax_backward(y: &[f64], grad_y: &[f64]) -> Vec<f64> {
    let s = dot(y, grad_y);
    y.iter().zip(grad_y).map(|(yi, gi)| yi * (gi - s)).collect()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_len("euclidean distance", a.len(), b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Gradient of `‖diff‖` with respect to `diff`, scaled by `upstream`.
/// Zero at the origin.
pub fn norm_backward(diff: &[f64], norm: f64, upstream: f64) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; diff.len()];
    }
    let s = upstream / norm;
    diff.iter().map(|d| d * s).collect()
}

/// Opaque handle to a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    #[serde(skip)]
    grad: Option<Matrix>,
    /// Frozen parameters receive gradients but are never updated.
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param {
            name: name.into(),
            value,
            grad: Some(grad),
            trainable: true,
        }
    }

    pub fn grad(&self) -> &Matrix {
        self.grad.as_ref().expect("gradient slot initialised")
    }

    /// Value and gradient borrowed together.
    pub fn split_mut(&mut self) -> (&Matrix, &mut Matrix) {
        let (r, c) = self.value.shape();
        let grad = self.grad.get_or_insert_with(|| Matrix::zeros(r, c));
        (&self.value, grad)
    }

    pub fn grad_mut(&mut self) -> &mut Matrix {
        self.split_mut().1
    }

    pub fn len(&self) -> usize {
        self.value.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered collection of parameters, each with a same-shape gradient slot.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Param::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, id: ParamId) -> bool {
        id.0 < self.params.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad_mut().fill(0.0);
        }
    }

    /// Total number of scalar entries.
    pub fn entry_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }
}

/// Finite-difference comparison result for one parameter.
#[derive(Debug, Clone)]
pub struct ParamGradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Flat indices whose relative error exceeded the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamGradCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Denominator floor for the relative error, so entries whose true
/// gradient is zero are judged by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient produced by `loss` against central
/// differences `(f(θ+eps) - f(θ-eps)) / 2eps` for every parameter entry.
///
/// `loss` must evaluate the objective at the current parameter values and
/// accumulate its gradient into the (already zeroed) gradient slots.
pub fn check_gradients<F>(params: &mut ParamSet, mut loss: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamSet) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut eval = |params: &mut ParamSet| -> Result<f64> {
        params.zero_grads();
        let v = loss(params)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    eval(params)?;
    let analytic: Vec<Matrix> = params.iter().map(|p| p.grad().clone()).collect();

    let mut report = GradCheckReport {
        eps,
        tol,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let id = ParamId(pi);
        let n = params.get(id).len();
        let mut check = ParamGradCheck {
            name: params.get(id).name.clone(),
            entries: n,
            max_rel_error: 0.0,
            flagged: Vec::new(),
        };
        for k in 0..n {
            let orig = params.get(id).value.as_slice()[k];
            params.get_mut(id).value.as_mut_slice()[k] = orig + eps;
            let plus = eval(params)?;
            params.get_mut(id).value.as_mut_slice()[k] = orig - eps;
            let minus = eval(params)?;
            params.get_mut(id).value.as_mut_slice()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grad.as_slice()[k], numeric);
            check.max_rel_error = check.max_rel_error.max(err);
            if err > tol {
                check.flagged.push(k);
            }
        }
        report.params.push(check);
    }
    // leave the analytic gradient in place for the caller
    eval(params)?;
    Ok(report)
}
