//! Deterministic smooth minimizer used for the numeric minima of logistic
//! objectives (local `F_k*` and global `F*`).

use std::collections::VecDeque;

use crate::error::NumericError;
use crate::linalg::{axpy, dot, norm2};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct MinimizeOptions<T> {
    /// Stop once the Euclidean gradient norm is at or below this value.
    pub grad_tol: T,
    pub max_iter: usize,
    pub history: usize,
}

impl<T: Scalar> Default for MinimizeOptions<T> {
    fn default() -> Self {
        Self {
            grad_tol: T::lit(1e-9),
            max_iter: 20_000,
            history: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub value: T,
    pub grad_norm: T,
    pub iterations: usize,
}

/// Limited-memory BFGS with a backtracking Armijo line search.
///
/// `f` returns `(value, gradient)`. Near the optimum the function values stop
/// being resolvable in floating point, so a step that cannot be certified by
/// Armijo is still accepted when the value change is at noise level and the
/// gradient norm shrinks.
pub fn minimize<T, F>(f: F, x0: Vec<T>, opts: &MinimizeOptions<T>) -> Result<Minimum<T>, NumericError>
where
    T: Scalar,
    F: Fn(&[T]) -> (T, Vec<T>),
{
    let c1 = T::lit(1e-4);
    let noise = T::lit(1e-13);
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() {
        return Err(NumericError::NonFinite("minimize: initial value"));
    }
    let mut gnorm = norm2(&g);
    let mut mem: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::with_capacity(opts.history);

    for iter in 0..opts.max_iter {
        if gnorm <= opts.grad_tol {
            return Ok(Minimum {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
            });
        }

        // two-loop recursion
        let mut d: Vec<T> = g.iter().map(|&v| -v).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = *rho * dot(s, &d);
            axpy(-a, y, &mut d);
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v = *v * gamma);
        } else {
            let s = T::one() / gnorm.max(T::one());
            d.iter_mut().for_each(|v| *v = *v * s);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
            let b = *rho * dot(y, &d);
            axpy(a - b, s, &mut d);
        }
        let mut slope = dot(&g, &d);
        if !(slope < T::zero()) {
            mem.clear();
            d = g.iter().map(|&v| -v).collect();
            slope = -gnorm * gnorm;
        }

        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let mut xn = x.clone();
            axpy(step, &d, &mut xn);
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() {
                let armijo = fn_ <= fx + c1 * step * slope;
                let flat = (fn_ - fx).abs() <= noise * fx.abs().max(T::one());
                if armijo || (flat && norm2(&gn) < gnorm) {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step = step * T::lit(0.5);
        }
        let Some((xn, fn_, gn)) = accepted else {
            return Err(NumericError::NoConvergence {
                what: "line search",
                iterations: iter,
            });
        };

        let s: Vec<T> = xn.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = gn.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > T::epsilon() * norm2(&s) * norm2(&y) {
            if mem.len() == opts.history {
                mem.pop_front();
            }
            mem.push_back((s, y, T::one() / sy));
        }
        x = xn;
        fx = fn_;
        g = gn;
        gnorm = norm2(&g);
    }
    if gnorm <= opts.grad_tol {
        return Ok(Minimum {
            x,
            value: fx,
            grad_norm: gnorm,
            iterations: opts.max_iter,
        });
    }
    Err(NumericError::NoConvergence {
        what: "l-bfgs",
        iterations: opts.max_iter,
    })
}
