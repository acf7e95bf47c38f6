//! Local and global objectives: L2-regularized multinomial logistic
//! regression and the per-device ridge quadratic.
//!
//! A [`LocalObjective`] carries an extra positive `scale` factor so that the
//! rescaled objectives `p_k N F_k` used by transformed Scheme II are ordinary
//! objectives too.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::datasets::DeviceData;
use crate::error::NumericError;
use crate::linalg::{dist2, dot, norm2, Matrix};
use crate::optim::{self, MinimizeOptions};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("parameter shape mismatch: objective expects {expected:?}, got {found:?}")]
    Shape { expected: Shape, found: Shape },
    #[error("parameter vector has {found} entries, shape {shape:?} needs {expected}")]
    Length {
        shape: Shape,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("batch size {batch} outside [1, {n}]")]
    BatchSize { batch: usize, n: usize },
    #[error("invalid objective: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Layout of a parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Flat(usize),
    /// Row-major `classes x features` weight matrix followed by `classes` biases.
    Logistic {
        classes: usize,
        features: usize,
    },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(d) => d,
            Shape::Logistic { classes, features } => classes * features + classes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat model parameters with shape metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T> {
    values: Vec<T>,
    shape: Shape,
}

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            values: vec![T::zero(); shape.len()],
            shape,
        }
    }

    pub fn new(shape: Shape, values: Vec<T>) -> Result<Self, ObjectiveError> {
        if values.len() != shape.len() {
            return Err(ObjectiveError::Length {
                shape,
                expected: shape.len(),
                found: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(ObjectiveError::NonFinite("parameter vector"));
        }
        Ok(Self { values, shape })
    }

    pub fn flat(values: Vec<T>) -> Self {
        Self {
            shape: Shape::Flat(values.len()),
            values,
        }
    }

    /// Builds a vector without the finiteness check; used on hot paths where
    /// the caller checks finiteness itself.
    pub(crate) fn from_raw(shape: Shape, values: Vec<T>) -> Self {
        debug_assert_eq!(shape.len(), values.len());
        Self { values, shape }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> T {
        norm2(&self.values)
    }

    pub fn distance(&self, other: &ParamVector<T>) -> T {
        dist2(&self.values, &other.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub enum ObjectiveKind<T> {
    /// Mean cross-entropy of `softmax(W x + b)` plus `lambda * ||w||^2`.
    Logistic {
        data: Arc<DeviceData<T>>,
        classes: usize,
        lambda: T,
    },
    /// `1/2 [w^T A w - 2 b^T w + mu ||w||^2]`.
    ///
    /// `noise_sigma` injects isotropic Gaussian noise with
    /// `E||noise||^2 = noise_sigma^2` into stochastic gradients.
    Quadratic {
        a: Matrix<T>,
        b: Vec<T>,
        mu: T,
        noise_sigma: T,
    },
}

/// One device's objective `F_k`, optionally multiplied by a positive scale.
#[derive(Clone, Debug)]
pub struct LocalObjective<T> {
    kind: ObjectiveKind<T>,
    scale: T,
}

/// Minimizer and minimum value of a local objective.
#[derive(Clone, Debug)]
pub struct LocalMinimum<T> {
    pub w: ParamVector<T>,
    pub value: T,
    /// Set when the quadratic system was singular and the minimum-norm
    /// minimizer was returned.
    pub rank_deficient: bool,
}

impl<T: Scalar> LocalObjective<T> {
    pub fn logistic(data: Arc<DeviceData<T>>, classes: usize, lambda: T) -> Result<Self, ObjectiveError> {
        if !(lambda > T::zero()) {
            return Err(ObjectiveError::Invalid(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        if data.is_empty() {
            return Err(ObjectiveError::Invalid("device dataset is empty".into()));
        }
        if classes < 2 {
            return Err(ObjectiveError::Invalid("need at least two classes".into()));
        }
        if let Some(&bad) = data.labels().iter().find(|&&y| y >= classes) {
            return Err(ObjectiveError::Invalid(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            kind: ObjectiveKind::Logistic { data, classes, lambda },
            scale: T::one(),
        })
    }

    pub fn quadratic(a: Matrix<T>, b: Vec<T>, mu: T) -> Result<Self, ObjectiveError> {
        if !a.is_square() || a.rows() != b.len() {
            return Err(NumericError::Dimension {
                expected: a.rows(),
                found: b.len(),
            }
            .into());
        }
        if !a.is_symmetric(T::zero()) {
            return Err(ObjectiveError::Invalid("quadratic matrix must be symmetric".into()));
        }
        if !(mu >= T::zero()) {
            return Err(ObjectiveError::Invalid(format!("ridge weight must be >= 0, got {mu}")));
        }
        Ok(Self {
            kind: ObjectiveKind::Quadratic {
                a,
                b,
                mu,
                noise_sigma: T::zero(),
            },
            scale: T::one(),
        })
    }

    /// Checks that the quadratic matrix has spectrum inside `[0, max_eig]`
    /// (up to `tol`).
    pub fn check_spectrum(&self, max_eig: T, tol: T) -> Result<(), ObjectiveError> {
        if let ObjectiveKind::Quadratic { a, .. } = &self.kind {
            let eig = a.symmetric_eigen()?;
            if eig.min() < -tol || eig.max() > max_eig + tol {
                return Err(ObjectiveError::Invalid(format!(
                    "spectrum [{}, {}] outside [0, {max_eig}]",
                    eig.min(),
                    eig.max()
                )));
            }
        }
        Ok(())
    }

    /// Adds injected gradient noise to a quadratic objective.
    pub fn with_gradient_noise(mut self, sigma: T) -> Result<Self, ObjectiveError> {
        match &mut self.kind {
            ObjectiveKind::Quadratic { noise_sigma, .. } if sigma >= T::zero() => {
                *noise_sigma = sigma;
                Ok(self)
            }
            ObjectiveKind::Quadratic { .. } => Err(ObjectiveError::Invalid("noise sigma must be >= 0".into())),
            ObjectiveKind::Logistic { .. } => Err(ObjectiveError::Invalid(
                "gradient noise injection is only defined for quadratic objectives".into(),
            )),
        }
    }

    /// Returns the objective multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            kind: self.kind.clone(),
            scale: self.scale * factor,
        }
    }

    pub fn kind(&self) -> &ObjectiveKind<T> {
        &self.kind
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self.kind, ObjectiveKind::Quadratic { .. })
    }

    pub fn shape(&self) -> Shape {
        match &self.kind {
            ObjectiveKind::Logistic { data, classes, .. } => Shape::Logistic {
                classes: *classes,
                features: data.n_features(),
            },
            ObjectiveKind::Quadratic { b, .. } => Shape::Flat(b.len()),
        }
    }

    /// Number of local samples `n_k` (1 for quadratic objectives).
    pub fn num_samples(&self) -> usize {
        match &self.kind {
            ObjectiveKind::Logistic { data, .. } => data.len(),
            ObjectiveKind::Quadratic { .. } => 1,
        }
    }

    fn check_shape(&self, w: &ParamVector<T>) -> Result<(), ObjectiveError> {
        let expected = self.shape();
        if w.shape() != expected {
            return Err(ObjectiveError::Shape {
                expected,
                found: w.shape(),
            });
        }
        Ok(())
    }

    pub fn loss(&self, w: &ParamVector<T>) -> Result<T, ObjectiveError> {
        self.check_shape(w)?;
        let v = match &self.kind {
            ObjectiveKind::Logistic { data, classes, lambda } => {
                let idx: Vec<usize> = (0..data.len()).collect();
                let (l, _) = logistic_eval(data, *classes, w.values(), &idx, false);
                l + *lambda * dot(w.values(), w.values())
            }
            ObjectiveKind::Quadratic { a, b, mu, .. } => {
                let x = w.values();
                let half = T::lit(0.5);
                half * (a.quadratic_form(x) - T::lit(2.0) * dot(b, x) + *mu * dot(x, x))
            }
        };
        let v = self.scale * v;
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite("loss"));
        }
        Ok(v)
    }

    pub fn grad(&self, w: &ParamVector<T>) -> Result<ParamVector<T>, ObjectiveError> {
        self.check_shape(w)?;
        let g = match &self.kind {
            ObjectiveKind::Logistic { data, .. } => {
                let idx: Vec<usize> = (0..data.len()).collect();
                return self.grad_on_indices(w, &idx);
            }
            ObjectiveKind::Quadratic { a, b, mu, .. } => quadratic_grad(a, b, *mu, self.scale, w.values()),
        };
        if !g.iter().all(|v| v.is_finite()) {
            return Err(ObjectiveError::NonFinite("gradient"));
        }
        Ok(ParamVector::from_raw(w.shape(), g))
    }

    /// Loss and gradient in one pass over the data.
    pub fn loss_and_grad(&self, w: &ParamVector<T>) -> Result<(T, ParamVector<T>), ObjectiveError> {
        self.check_shape(w)?;
        match &self.kind {
            ObjectiveKind::Logistic { data, classes, lambda } => {
                let idx: Vec<usize> = (0..data.len()).collect();
                let (l, g) = logistic_eval(data, *classes, w.values(), &idx, true);
                let v = self.scale * (l + *lambda * dot(w.values(), w.values()));
                let two_lambda = T::lit(2.0) * *lambda;
                let g: Vec<T> = g
                    .into_iter()
                    .zip(w.values())
                    .map(|(gi, &wi)| self.scale * (gi + two_lambda * wi))
                    .collect();
                if !v.is_finite() || !g.iter().all(|x| x.is_finite()) {
                    return Err(ObjectiveError::NonFinite("loss or gradient"));
                }
                Ok((v, ParamVector::from_raw(w.shape(), g)))
            }
            ObjectiveKind::Quadratic { .. } => Ok((self.loss(w)?, self.grad(w)?)),
        }
    }

    /// Gradient of the mean loss over the given sample indices (repeats
    /// allowed) plus the full regularizer gradient. Logistic only.
    pub fn grad_on_indices(&self, w: &ParamVector<T>, indices: &[usize]) -> Result<ParamVector<T>, ObjectiveError> {
        self.check_shape(w)?;
        let ObjectiveKind::Logistic { data, classes, lambda } = &self.kind else {
            return Err(ObjectiveError::Invalid(
                "sample-index gradients need a logistic objective".into(),
            ));
        };
        if indices.is_empty() {
            return Err(ObjectiveError::BatchSize {
                batch: 0,
                n: data.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= data.len()) {
            return Err(ObjectiveError::Invalid(format!("sample index {bad} out of range")));
        }
        let (_, g) = logistic_eval(data, *classes, w.values(), indices, true);
        let two_lambda = T::lit(2.0) * *lambda;
        let g: Vec<T> = g
            .into_iter()
            .zip(w.values())
            .map(|(gi, &wi)| self.scale * (gi + two_lambda * wi))
            .collect();
        if !g.iter().all(|v| v.is_finite()) {
            return Err(ObjectiveError::NonFinite("gradient"));
        }
        Ok(ParamVector::from_raw(w.shape(), g))
    }

    /// Unbiased stochastic gradient.
    ///
    /// Logistic: mean over `batch_size` samples drawn uniformly with
    /// replacement. Quadratic: the exact gradient plus the injected noise
    /// (if any); `batch_size` must then be 1.
    pub fn stochastic_grad<R: Rng + ?Sized>(
        &self,
        w: &ParamVector<T>,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<ParamVector<T>, ObjectiveError> {
        let n = self.num_samples();
        if batch_size == 0 || batch_size > n {
            return Err(ObjectiveError::BatchSize { batch: batch_size, n });
        }
        match &self.kind {
            ObjectiveKind::Logistic { .. } => {
                let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
                self.grad_on_indices(w, &idx)
            }
            ObjectiveKind::Quadratic { noise_sigma, .. } => {
                let mut g = self.grad(w)?;
                if *noise_sigma > T::zero() {
                    let per_coord = *noise_sigma / T::from_count(g.len()).sqrt();
                    for v in g.values_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = *v + per_coord * T::lit(z);
                    }
                }
                Ok(g)
            }
        }
    }

    /// Minimizer and minimum value `F_k*`.
    ///
    /// Quadratic objectives are solved exactly; a singular system (zero
    /// ridge, rank-deficient matrix) yields the minimum-norm minimizer.
    /// Logistic objectives are minimized numerically to `||grad|| <= 1e-9`.
    pub fn local_minimum(&self) -> Result<LocalMinimum<T>, ObjectiveError> {
        match &self.kind {
            ObjectiveKind::Quadratic { a, b, mu, .. } => {
                let h = a.shift_diagonal(*mu);
                let (x, rank_deficient) = match h.solve_spd(b) {
                    Ok(x) => (x, false),
                    Err(_) => {
                        let eig = h.symmetric_eigen()?;
                        let tol = eig.max().abs().max(T::one()) * T::lit(1e-10);
                        (eig.pseudo_solve(b, tol), true)
                    }
                };
                let w = ParamVector::flat(x);
                let value = self.loss(&w)?;
                Ok(LocalMinimum {
                    w,
                    value,
                    rank_deficient,
                })
            }
            ObjectiveKind::Logistic { .. } => {
                let shape = self.shape();
                let m = optim::minimize(
                    |x: &[T]| {
                        let w = ParamVector::from_raw(shape, x.to_vec());
                        match self.loss_and_grad(&w) {
                            Ok((l, g)) => (l, g.into_values()),
                            Err(_) => (T::nan(), vec![T::nan(); x.len()]),
                        }
                    },
                    vec![T::zero(); shape.len()],
                    &MinimizeOptions::default(),
                )?;
                Ok(LocalMinimum {
                    w: ParamVector::from_raw(shape, m.x),
                    value: m.value,
                    rank_deficient: false,
                })
            }
        }
    }
}

fn quadratic_grad<T: Scalar>(a: &Matrix<T>, b: &[T], mu: T, scale: T, x: &[T]) -> Vec<T> {
    let mut ax = vec![T::zero(); x.len()];
    a.matvec_into(x, &mut ax);
    ax.iter()
        .zip(b)
        .zip(x)
        .map(|((&axi, &bi), &xi)| scale * (axi - bi + mu * xi))
        .collect()
}

/// Mean cross-entropy (and optionally its gradient, without regularizer)
/// over the listed samples.
fn logistic_eval<T: Scalar>(
    data: &DeviceData<T>,
    classes: usize,
    w: &[T],
    indices: &[usize],
    want_grad: bool,
) -> (T, Vec<T>) {
    let f = data.n_features();
    let (weights, bias) = w.split_at(classes * f);
    let mut grad = if want_grad {
        vec![T::zero(); w.len()]
    } else {
        Vec::new()
    };
    let mut z = vec![T::zero(); classes];
    let mut total = T::zero();
    for &j in indices {
        let x = data.row(j);
        let y = data.labels()[j];
        for (c, zc) in z.iter_mut().enumerate() {
            *zc = dot(&weights[c * f..(c + 1) * f], x) + bias[c];
        }
        let zmax = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum_exp = z.iter().fold(T::zero(), |acc, &v| acc + (v - zmax).exp());
        let lse = zmax + sum_exp.ln();
        total = total + (lse - z[y]);
        if want_grad {
            let (gw, gb) = grad.split_at_mut(classes * f);
            for c in 0..classes {
                let mut r = (z[c] - lse).exp();
                if c == y {
                    r = r - T::one();
                }
                if r != T::zero() {
                    for (g, &xi) in gw[c * f..(c + 1) * f].iter_mut().zip(x) {
                        *g = *g + r * xi;
                    }
                }
                gb[c] = gb[c] + r;
            }
        }
    }
    let inv = T::one() / T::from_count(indices.len());
    grad.iter_mut().for_each(|g| *g = *g * inv);
    (total * inv, grad)
}

/// `F(w) = sum_k p_k F_k(w)`.
#[derive(Clone, Debug)]
pub struct GlobalObjective<T> {
    locals: Vec<LocalObjective<T>>,
    weights: Vec<T>,
}

/// Global minimizer `w*` and minimum `F*`.
#[derive(Clone, Debug)]
pub struct GlobalMinimum<T> {
    pub w: ParamVector<T>,
    pub value: T,
}

impl<T: Scalar> GlobalObjective<T> {
    pub fn new(locals: Vec<LocalObjective<T>>, weights: Vec<T>) -> Result<Self, ObjectiveError> {
        if locals.is_empty() || locals.len() != weights.len() {
            return Err(ObjectiveError::Invalid(format!(
                "{} objectives but {} weights",
                locals.len(),
                weights.len()
            )));
        }
        validate_weights(&weights)?;
        let shape = locals[0].shape();
        if let Some(bad) = locals.iter().find(|l| l.shape() != shape) {
            return Err(ObjectiveError::Shape {
                expected: shape,
                found: bad.shape(),
            });
        }
        Ok(Self { locals, weights })
    }

    /// Equal weights `1/N`.
    pub fn uniform(locals: Vec<LocalObjective<T>>) -> Result<Self, ObjectiveError> {
        let n = T::from_count(locals.len());
        let w = vec![T::one() / n; locals.len()];
        Self::new(locals, w)
    }

    pub fn locals(&self) -> &[LocalObjective<T>] {
        &self.locals
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn num_devices(&self) -> usize {
        self.locals.len()
    }

    pub fn shape(&self) -> Shape {
        self.locals[0].shape()
    }

    /// True when all weights are equal to `1/N` within `1e-12`.
    pub fn is_balanced(&self) -> bool {
        let target = T::one() / T::from_count(self.weights.len());
        self.weights.iter().all(|&p| (p - target).abs() <= T::lit(1e-12))
    }

    pub fn loss(&self, w: &ParamVector<T>) -> Result<T, ObjectiveError> {
        let mut acc = T::zero();
        for (l, &p) in self.locals.iter().zip(&self.weights) {
            acc = acc + p * l.loss(w)?;
        }
        Ok(acc)
    }

    pub fn grad(&self, w: &ParamVector<T>) -> Result<ParamVector<T>, ObjectiveError> {
        let mut acc = vec![T::zero(); w.len()];
        for (l, &p) in self.locals.iter().zip(&self.weights) {
            let g = l.grad(w)?;
            for (a, &gi) in acc.iter_mut().zip(g.values()) {
                *a = *a + p * gi;
            }
        }
        Ok(ParamVector::from_raw(w.shape(), acc))
    }

    pub fn loss_and_grad(&self, w: &ParamVector<T>) -> Result<(T, ParamVector<T>), ObjectiveError> {
        let mut loss = T::zero();
        let mut acc = vec![T::zero(); w.len()];
        for (l, &p) in self.locals.iter().zip(&self.weights) {
            let (v, g) = l.loss_and_grad(w)?;
            loss = loss + p * v;
            for (a, &gi) in acc.iter_mut().zip(g.values()) {
                *a = *a + p * gi;
            }
        }
        Ok((loss, ParamVector::from_raw(w.shape(), acc)))
    }

    /// Global minimizer. All-quadratic problems are solved exactly through
    /// the normal equations; otherwise the minimum is found numerically.
    pub fn minimum(&self) -> Result<GlobalMinimum<T>, ObjectiveError> {
        let shape = self.shape();
        if self.locals.iter().all(|l| l.is_quadratic()) {
            let d = shape.len();
            let mut h = Matrix::zeros(d, d);
            let mut rhs = vec![T::zero(); d];
            for (l, &p) in self.locals.iter().zip(&self.weights) {
                if let ObjectiveKind::Quadratic { a, b, mu, .. } = &l.kind {
                    let s = p * l.scale;
                    h = h.add(&a.shift_diagonal(*mu).scale(s));
                    for (r, &bi) in rhs.iter_mut().zip(b) {
                        *r = *r + s * bi;
                    }
                }
            }
            let x = h.solve_spd(&rhs)?;
            let w = ParamVector::flat(x);
            let value = self.loss(&w)?;
            return Ok(GlobalMinimum { w, value });
        }
        let m = optim::minimize(
            |x: &[T]| {
                let w = ParamVector::from_raw(shape, x.to_vec());
                match self.loss_and_grad(&w) {
                    Ok((l, g)) => (l, g.into_values()),
                    Err(_) => (T::nan(), vec![T::nan(); x.len()]),
                }
            },
            vec![T::zero(); shape.len()],
            &MinimizeOptions::default(),
        )?;
        Ok(GlobalMinimum {
            w: ParamVector::from_raw(shape, m.x),
            value: m.value,
        })
    }
}

pub(crate) fn validate_weights<T: Scalar>(p: &[T]) -> Result<(), ObjectiveError> {
    if p.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
        return Err(ObjectiveError::Invalid(
            "weights must be finite and non-negative".into(),
        ));
    }
    let sum: T = p.iter().copied().sum();
    let tol = T::lit(1e-12).max(T::epsilon() * T::from_count(4 * p.len()));
    if (sum - T::one()).abs() > tol {
        return Err(ObjectiveError::Invalid(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Heterogeneity `Gamma = F* - sum_k p_k F_k*`, clamped to zero when it is
/// negative only through round-off (down to `-1e-9`).
pub fn gamma_heterogeneity<T: Scalar>(global: &GlobalObjective<T>) -> Result<T, ObjectiveError> {
    let f_star = global.minimum()?.value;
    let mut weighted = T::zero();
    for (l, &p) in global.locals().iter().zip(global.weights()) {
        weighted = weighted + p * l.local_minimum()?.value;
    }
    let gamma = f_star - weighted;
    if gamma >= T::zero() {
        Ok(gamma)
    } else if gamma >= T::lit(-1e-9) {
        Ok(T::zero())
    } else {
        Err(ObjectiveError::Invalid(format!(
            "heterogeneity {gamma} is negative beyond tolerance; a minimizer failed"
        )))
    }
}
