//! Distributed ridge regression on which fixed-step FedAvg with `E > 1`
//! converges to a point away from the optimum.
//!
//! With `d = Np + 1`, `A` is the `d x d` tridiagonal matrix with 2 on the
//! diagonal and -1 beside it. It is split into `N` positive semidefinite
//! pieces: device `k` (0-based) owns the block of indices `[kp, kp + p]`,
//! with 1 on the block endpoints, 2 on the interior diagonal and -1 on the
//! off-diagonals inside the block. Device 0 additionally gets `+1` at
//! `(0, 0)` and device `N-1` at `(Np, Np)`, so the pieces sum to `A`.
//! Only device 0 sees data: `b_0 = e_1`. Local objectives are
//! `F_k(w) = ½ (wᵀA_k w − 2 b_kᵀw + μ‖w‖²)` with uniform weights.

use thiserror::Error;

use crate::error::NumericError;
use crate::linalg::{norm2, Matrix, SymTridiagonal};
use crate::objectives::{GlobalObjective, LocalObjective, ObjectiveError, ParamVector, Shape};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum CounterexampleError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("step size {eta} outside (0, {limit})")]
    StepSize { eta: f64, limit: f64 },
    #[error("expected a vector of length {expected}, got {found}")]
    Shape { expected: usize, found: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Clone, Debug)]
pub struct Counterexample<T> {
    n_devices: usize,
    block: usize,
    mu: T,
    a: Matrix<T>,
    parts: Vec<Matrix<T>>,
    tri_parts: Vec<SymTridiagonal<T>>,
    b_parts: Vec<Vec<T>>,
    objective: GlobalObjective<T>,
}

/// Result of iterating the round map to a fixed point.
#[derive(Clone, Debug)]
pub struct FixedPointIteration<T> {
    pub w: ParamVector<T>,
    pub rounds: usize,
    /// `‖w_{t+1} − w_t‖` at the last round.
    pub last_step: T,
    pub converged: bool,
}

impl<T: Scalar> Counterexample<T> {
    pub fn build(n_devices: usize, block: usize, mu: T) -> Result<Self, CounterexampleError> {
        if n_devices < 2 {
            return Err(CounterexampleError::InvalidParameter(format!(
                "need at least 2 devices, got {n_devices}"
            )));
        }
        if block < 1 {
            return Err(CounterexampleError::InvalidParameter("block size must be >= 1".into()));
        }
        if !(mu >= T::zero() && mu.is_finite()) {
            return Err(CounterexampleError::InvalidParameter(format!(
                "ridge weight {mu} must be >= 0"
            )));
        }
        let d = n_devices * block + 1;
        let two = T::lit(2.0);
        let a = Matrix::from_fn(d, d, |i, j| {
            if i == j {
                two
            } else if i.abs_diff(j) == 1 {
                -T::one()
            } else {
                T::zero()
            }
        });
        let parts: Vec<Matrix<T>> = (0..n_devices)
            .map(|k| {
                let (s, e) = (k * block, k * block + block);
                let mut m = Matrix::zeros(d, d);
                for i in s..=e {
                    m[(i, i)] = if i == s || i == e { T::one() } else { two };
                }
                for i in s..e {
                    m[(i, i + 1)] = -T::one();
                    m[(i + 1, i)] = -T::one();
                }
                if k == 0 {
                    m[(0, 0)] = m[(0, 0)] + T::one();
                }
                if k == n_devices - 1 {
                    m[(d - 1, d - 1)] = m[(d - 1, d - 1)] + T::one();
                }
                m
            })
            .collect();
        let tri_parts = parts
            .iter()
            .map(SymTridiagonal::from_dense)
            .collect::<Result<Vec<_>, _>>()?;
        let b_parts: Vec<Vec<T>> = (0..n_devices)
            .map(|k| {
                let mut b = vec![T::zero(); d];
                if k == 0 {
                    b[0] = T::one();
                }
                b
            })
            .collect();
        let locals = parts
            .iter()
            .zip(&b_parts)
            .map(|(m, b)| LocalObjective::quadratic(m.clone(), b.clone(), mu))
            .collect::<Result<Vec<_>, _>>()?;
        let objective = GlobalObjective::uniform(locals)?;
        Ok(Self {
            n_devices,
            block,
            mu,
            a,
            parts,
            tri_parts,
            b_parts,
            objective,
        })
    }

    pub fn num_devices(&self) -> usize {
        self.n_devices
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn mu(&self) -> T {
        self.mu
    }

    pub fn dim(&self) -> usize {
        self.n_devices * self.block + 1
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    /// The pieces `A_k` (without the ridge term).
    pub fn parts(&self) -> &[Matrix<T>] {
        &self.parts
    }

    pub fn b(&self) -> &[T] {
        &self.b_parts[0]
    }

    pub fn b_parts(&self) -> &[Vec<T>] {
        &self.b_parts
    }

    /// `F = (1/N) Σ F_k`.
    pub fn objective(&self) -> &GlobalObjective<T> {
        &self.objective
    }

    fn shape(&self) -> Shape {
        Shape::Flat(self.dim())
    }

    /// Unregularized minimizer `(w*)_i = 1 − i/(Np+2)` (1-based `i`).
    pub fn closed_form_optimum(&self) -> ParamVector<T> {
        let denom = T::from_count(self.dim() + 1);
        ParamVector::from_raw(
            self.shape(),
            (1..=self.dim()).map(|i| T::one() - T::from_count(i) / denom).collect(),
        )
    }

    /// Global minimizer of `F`: the closed form when `μ = 0` (checked against
    /// `A w = b`), otherwise the solution of `(A + NμI) w = b`.
    pub fn optimum(&self) -> Result<ParamVector<T>, CounterexampleError> {
        if self.mu == T::zero() {
            let w = self.closed_form_optimum();
            let r = self.a.matvec(w.values());
            let resid: Vec<T> = r.iter().zip(self.b()).map(|(&x, &y)| x - y).collect();
            let tol = T::lit(1e-10).max(T::epsilon() * T::from_count(64 * self.dim()));
            if norm2(&resid) > tol {
                return Err(NumericError::NoConvergence {
                    what: "closed-form optimum residual",
                    iterations: 0,
                }
                .into());
            }
            return Ok(w);
        }
        let m = self.a.shift_diagonal(T::from_count(self.n_devices) * self.mu);
        Ok(ParamVector::from_raw(self.shape(), m.solve_spd(self.b())?))
    }

    /// Largest admissible constant step, `1/(4 + μ)`.
    pub fn step_limit(&self) -> T {
        T::one() / (T::lit(4.0) + self.mu)
    }

    fn check_step(&self, eta: T, local_steps: usize) -> Result<(), CounterexampleError> {
        if local_steps == 0 {
            return Err(CounterexampleError::InvalidParameter("E must be >= 1".into()));
        }
        if !(eta > T::zero() && eta < self.step_limit()) {
            return Err(CounterexampleError::StepSize {
                eta: eta.to_f64_lossy(),
                limit: self.step_limit().to_f64_lossy(),
            });
        }
        Ok(())
    }

    /// Closed-form fixed point of full-batch FedAvg with constant step `eta`
    /// and `E` local steps:
    /// `(I − (1/N) Σ_k (I − ηÃ_k)^E)⁻¹ (η/N) Σ_{l<E} (I − ηÃ_0)^l b`,
    /// where `Ã_k = A_k + μI`.
    pub fn fedavg_fixed_point(&self, eta: T, local_steps: usize) -> Result<ParamVector<T>, CounterexampleError> {
        self.check_step(eta, local_steps)?;
        let d = self.dim();
        let n = T::from_count(self.n_devices);
        let id = Matrix::<T>::identity(d);
        let step_matrix = |k: usize| id.sub(&self.parts[k].shift_diagonal(self.mu).scale(eta));
        let mut mean_power = Matrix::zeros(d, d);
        let mut power0 = id.clone();
        for k in 0..self.n_devices {
            let s = step_matrix(k);
            let mut pw = id.clone();
            for _ in 0..local_steps {
                pw = pw.matmul(&s);
            }
            mean_power = mean_power.add(&pw);
            if k == 0 {
                power0 = s;
            }
        }
        let lhs = id.sub(&mean_power.scale(T::one() / n));
        // Σ_{l<E} (I − ηÃ_0)^l b
        let mut term = self.b().to_vec();
        let mut rhs = vec![T::zero(); d];
        for _ in 0..local_steps {
            rhs.iter_mut().zip(&term).for_each(|(r, &t)| *r = *r + t);
            term = power0.matvec(&term);
        }
        rhs.iter_mut().for_each(|r| *r = *r * eta / n);
        Ok(ParamVector::from_raw(self.shape(), lhs.solve(&rhs)?))
    }

    /// Lower bound `(E−1)η/16 · ‖A_0 A_1 w*‖` on the distance between the
    /// FedAvg fixed point and the optimum, using the optimum of this
    /// instance.
    pub fn gap_lower_bound(&self, eta: T, local_steps: usize) -> Result<T, CounterexampleError> {
        let w = self.optimum()?;
        let a01 = self.parts[0].matmul(&self.parts[1]);
        let factor = T::from_count(local_steps.saturating_sub(1)) * eta / T::lit(16.0);
        Ok(factor * norm2(&a01.matvec(w.values())))
    }

    /// One round of full-batch FedAvg: every device runs `E` gradient steps
    /// from `w`, then the models are averaged. Produces exactly the same
    /// floating-point result as the engine under full participation.
    pub fn round_map(
        &self,
        w: &ParamVector<T>,
        eta: T,
        local_steps: usize,
    ) -> Result<ParamVector<T>, CounterexampleError> {
        self.check_step(eta, local_steps)?;
        if w.len() != self.dim() {
            return Err(CounterexampleError::Shape {
                expected: self.dim(),
                found: w.len(),
            });
        }
        let mut ws = Workspace::new(self.dim());
        let mut out = vec![T::zero(); self.dim()];
        self.round_into(w.values(), eta, local_steps, &mut ws, &mut out);
        Ok(ParamVector::from_raw(self.shape(), out))
    }

    fn round_into(&self, w: &[T], eta: T, local_steps: usize, ws: &mut Workspace<T>, out: &mut [T]) {
        // Outside its block a device's matrix row and data are zero, so those
        // coordinates only feel the ridge term and evolve identically on every
        // device; they are computed once. The arithmetic per coordinate is the
        // same as a full gradient step, so results match the engine bitwise.
        let zero = T::zero();
        ws.shrunk.copy_from_slice(w);
        for _ in 0..local_steps {
            for yi in ws.shrunk.iter_mut() {
                // Same operation order as (Ax - b + mu x) with zero row and data.
                #[allow(clippy::eq_op)]
                let g = T::one() * (zero - zero + self.mu * *yi);
                *yi = *yi - eta * g;
            }
        }
        out.iter_mut().for_each(|v| *v = zero);
        let weights = self.objective.weights();
        for k in 0..self.n_devices {
            let (s, e) = (k * self.block, k * self.block + self.block);
            let (tri, b) = (&self.tri_parts[k], &self.b_parts[k]);
            let x = &mut ws.x[..=e - s];
            x.copy_from_slice(&w[s..=e]);
            let ax = &mut ws.ax[..=e - s];
            for _ in 0..local_steps {
                for (r, i) in (s..=e).enumerate() {
                    let mut acc = zero;
                    if r > 0 && tri.off[i - 1] != zero {
                        acc = acc + tri.off[i - 1] * x[r - 1];
                    }
                    if tri.diag[i] != zero {
                        acc = acc + tri.diag[i] * x[r];
                    }
                    if i < e && tri.off[i] != zero {
                        acc = acc + tri.off[i] * x[r + 1];
                    }
                    ax[r] = acc;
                }
                for (r, i) in (s..=e).enumerate() {
                    let g = T::one() * (ax[r] - b[i] + self.mu * x[r]);
                    x[r] = x[r] - eta * g;
                }
            }
            let pk = weights[k];
            let (head, rest) = out.split_at_mut(s);
            let (mid, tail) = rest.split_at_mut(e + 1 - s);
            for (o, &v) in head.iter_mut().zip(&ws.shrunk[..s]) {
                *o = *o + pk * v;
            }
            for (o, &v) in mid.iter_mut().zip(x.iter()) {
                *o = *o + pk * v;
            }
            for (o, &v) in tail.iter_mut().zip(&ws.shrunk[e + 1..]) {
                *o = *o + pk * v;
            }
        }
    }

    /// Iterates the round map from `w0` until `‖w_{t+1} − w_t‖ <= step_tol`
    /// or `max_rounds` rounds have run.
    pub fn iterate_to_fixed_point(
        &self,
        w0: &ParamVector<T>,
        eta: T,
        local_steps: usize,
        step_tol: T,
        max_rounds: usize,
    ) -> Result<FixedPointIteration<T>, CounterexampleError> {
        self.check_step(eta, local_steps)?;
        if w0.len() != self.dim() {
            return Err(CounterexampleError::Shape {
                expected: self.dim(),
                found: w0.len(),
            });
        }
        let mut ws = Workspace::new(self.dim());
        let mut cur = w0.values().to_vec();
        let mut next = vec![T::zero(); self.dim()];
        let mut last_step = T::infinity();
        let mut rounds = 0;
        while rounds < max_rounds {
            self.round_into(&cur, eta, local_steps, &mut ws, &mut next);
            rounds += 1;
            last_step = cur
                .iter()
                .zip(&next)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt();
            std::mem::swap(&mut cur, &mut next);
            if !last_step.is_finite() {
                return Err(NumericError::NonFinite("counterexample iteration").into());
            }
            if last_step <= step_tol {
                break;
            }
        }
        Ok(FixedPointIteration {
            w: ParamVector::from_raw(self.shape(), cur),
            rounds,
            last_step,
            converged: last_step <= step_tol,
        })
    }
}

struct Workspace<T> {
    x: Vec<T>,
    ax: Vec<T>,
    shrunk: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    fn new(d: usize) -> Self {
        Self {
            x: vec![T::zero(); d],
            ax: vec![T::zero(); d],
            shrunk: vec![T::zero(); d],
        }
    }
}
