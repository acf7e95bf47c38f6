//! Device selection for partial participation and the matching aggregation
//! rules.
//!
//! | scheme | selection | aggregate |
//! |---|---|---|
//! | `Full` | all devices | `Σ p_k w_k` |
//! | `SchemeI` | K iid draws from `p` (multiset) | `(1/K) Σ_{k∈S} w_k` |
//! | `SchemeII` | uniform K-subset | `(N/K) Σ_{k∈S} p_k w_k` |
//! | `SchemeIITransformed` | uniform K-subset | `(1/K) Σ_{k∈S} w_k` on rescaled objectives |
//! | `Original` | uniform K-subset | `Σ_{k∉S} p_k w_prev + Σ_{k∈S} p_k w_k` |
//!
//! The original scheme has no convergence guarantee and is provided for
//! comparisons only. Averaging with weights `p_k / Σ_{l∈S} p_l` is not
//! supported.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use thiserror::Error;

use crate::linalg::sq_dist;
use crate::objectives::ParamVector;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
    #[error("cannot select K={k} of N={n} devices")]
    InvalidCount { k: usize, n: usize },
    #[error("selection does not fit scheme {scheme}: {reason}")]
    Mismatch { scheme: Scheme, reason: String },
    #[error("{0} models given, expected {1}")]
    ModelCount(usize, usize),
    #[error("model shapes differ")]
    Shape,
    #[error("scheme {0} has no closed-form aggregation variance")]
    Unsupported(Scheme),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    Full,
    SchemeI,
    SchemeII,
    SchemeIITransformed,
    Original,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Full,
        Scheme::SchemeI,
        Scheme::SchemeII,
        Scheme::SchemeIITransformed,
        Scheme::Original,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Full => "full",
            Scheme::SchemeI => "scheme_i",
            Scheme::SchemeII => "scheme_ii",
            Scheme::SchemeIITransformed => "scheme_ii_transformed",
            Scheme::Original => "original",
        }
    }

    pub fn is_partial(self) -> bool {
        self != Scheme::Full
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL.into_iter().find(|sc| sc.name() == s).ok_or_else(|| {
            let names: Vec<_> = Scheme::ALL.iter().map(|s| s.name()).collect();
            format!("unknown scheme `{s}` (expected one of {})", names.join(", "))
        })
    }
}

/// Selected device indices. Scheme I keeps draw order and may repeat
/// indices; the other schemes hold distinct indices in increasing order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionResult {
    pub scheme: Scheme,
    pub indices: Vec<usize>,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Distinct devices in increasing order with their multiplicities.
    pub fn counts(&self) -> Vec<(usize, usize)> {
        let mut sorted = self.indices.clone();
        sorted.sort_unstable();
        let mut out: Vec<(usize, usize)> = Vec::new();
        for k in sorted {
            match out.last_mut() {
                Some((last, m)) if *last == k => *m += 1,
                _ => out.push((k, 1)),
            }
        }
        out
    }
}

pub fn validate_distribution<T: Scalar>(p: &[T]) -> Result<(), SamplingError> {
    if p.is_empty() {
        return Err(SamplingError::InvalidDistribution("empty".into()));
    }
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= T::zero())) {
        return Err(SamplingError::InvalidDistribution(format!("entry {v}")));
    }
    let s: f64 = p.iter().map(|v| v.to_f64_lossy()).sum();
    let tol = (T::epsilon().to_f64_lossy() * 4.0 * p.len() as f64).max(1e-12);
    if (s - 1.0).abs() > tol {
        return Err(SamplingError::InvalidDistribution(format!("sums to {s}")));
    }
    Ok(())
}

/// K iid categorical draws from `p`.
pub fn sample_with_replacement<T: Scalar, R: Rng + ?Sized>(
    p: &[T],
    k: usize,
    rng: &mut R,
) -> Result<SelectionResult, SamplingError> {
    validate_distribution(p)?;
    if k == 0 {
        return Err(SamplingError::InvalidCount { k, n: p.len() });
    }
    let dist = WeightedIndex::new(p.iter().map(|v| v.to_f64_lossy()))
        .map_err(|e| SamplingError::InvalidDistribution(e.to_string()))?;
    Ok(SelectionResult {
        scheme: Scheme::SchemeI,
        indices: (0..k).map(|_| dist.sample(rng)).collect(),
    })
}

/// Uniform K-subset of `0..n`, sorted.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<SelectionResult, SamplingError> {
    if k == 0 || k > n {
        return Err(SamplingError::InvalidCount { k, n });
    }
    let mut indices = rand::seq::index::sample(rng, n, k).into_vec();
    indices.sort_unstable();
    Ok(SelectionResult {
        scheme: Scheme::SchemeII,
        indices,
    })
}

/// Draws the participating devices of one round.
pub fn select<T: Scalar, R: Rng + ?Sized>(
    scheme: Scheme,
    p: &[T],
    k: usize,
    rng: &mut R,
) -> Result<SelectionResult, SamplingError> {
    let n = p.len();
    let mut sel = match scheme {
        Scheme::Full => SelectionResult {
            scheme,
            indices: (0..n).collect(),
        },
        Scheme::SchemeI => sample_with_replacement(p, k, rng)?,
        Scheme::SchemeII | Scheme::SchemeIITransformed | Scheme::Original => sample_without_replacement(n, k, rng)?,
    };
    sel.scheme = scheme;
    Ok(sel)
}

fn check_selection(sel: &SelectionResult, n: usize) -> Result<(), SamplingError> {
    let bad = |reason: String| SamplingError::Mismatch {
        scheme: sel.scheme,
        reason,
    };
    if let Some(&k) = sel.indices.iter().find(|&&k| k >= n) {
        return Err(bad(format!("index {k} out of range for N={n}")));
    }
    match sel.scheme {
        Scheme::Full if sel.indices != (0..n).collect::<Vec<_>>() => {
            Err(bad("full participation needs every device in order".into()))
        }
        Scheme::SchemeI if sel.indices.is_empty() => Err(bad("empty selection".into())),
        Scheme::SchemeII | Scheme::SchemeIITransformed | Scheme::Original
            if sel.indices.is_empty() || sel.indices.windows(2).any(|w| w[0] >= w[1]) =>
        {
            Err(bad("indices must be distinct and increasing".into()))
        }
        _ => Ok(()),
    }
}

/// Aggregation coefficients `(device, coefficient)` for the selected models
/// (distinct devices, increasing order) and the coefficient on the previous
/// global model. Scheme II's `N/K` factor is returned separately so it can be
/// applied after the sum, which keeps `K = N` bitwise equal to full
/// participation.
pub(crate) struct Coefficients<T> {
    pub terms: Vec<(usize, T)>,
    pub prev: T,
    pub post_scale: T,
}

pub(crate) fn coefficients<T: Scalar>(sel: &SelectionResult, p: &[T]) -> Coefficients<T> {
    let n = p.len();
    let k = T::from_count(sel.len());
    match sel.scheme {
        Scheme::Full => Coefficients {
            terms: sel.indices.iter().map(|&i| (i, p[i])).collect(),
            prev: T::zero(),
            post_scale: T::one(),
        },
        Scheme::SchemeI | Scheme::SchemeIITransformed => Coefficients {
            terms: sel.counts().into_iter().map(|(i, m)| (i, T::from_count(m))).collect(),
            prev: T::zero(),
            post_scale: T::one() / k,
        },
        Scheme::SchemeII => Coefficients {
            terms: sel.indices.iter().map(|&i| (i, p[i])).collect(),
            prev: T::zero(),
            post_scale: T::from_count(n) / k,
        },
        Scheme::Original => {
            let mut inside = vec![false; n];
            sel.indices.iter().for_each(|&i| inside[i] = true);
            let prev = (0..n).filter(|&i| !inside[i]).map(|i| p[i]).sum();
            Coefficients {
                terms: sel.indices.iter().map(|&i| (i, p[i])).collect(),
                prev,
                post_scale: T::one(),
            }
        }
    }
}

/// Evaluates `post_scale · (prev·w_prev + Σ c_i w_i)` with the terms summed in
/// the order given. `model(i)` returns device `i`'s local model.
pub(crate) fn combine<'a, T: Scalar>(
    coef: &Coefficients<T>,
    global_prev: &[T],
    mut model: impl FnMut(usize) -> &'a [T],
) -> Vec<T> {
    let mut acc = vec![T::zero(); global_prev.len()];
    if coef.prev != T::zero() {
        acc.iter_mut().zip(global_prev).for_each(|(a, &w)| *a = coef.prev * w);
    }
    for &(i, c) in &coef.terms {
        for (a, &w) in acc.iter_mut().zip(model(i)) {
            *a = *a + c * w;
        }
    }
    if coef.post_scale != T::one() {
        acc.iter_mut().for_each(|a| *a = *a * coef.post_scale);
    }
    acc
}

/// Aggregates the local models of one round.
///
/// `locals[i]` is the model returned by device `selection.indices[i]`; for
/// Scheme I a device drawn twice appears twice (with the same model) and
/// counts twice.
pub fn aggregate<T: Scalar>(
    selection: &SelectionResult,
    locals: &[ParamVector<T>],
    global_prev: &ParamVector<T>,
    p: &[T],
) -> Result<ParamVector<T>, SamplingError> {
    validate_distribution(p)?;
    check_selection(selection, p.len())?;
    if locals.len() != selection.len() {
        return Err(SamplingError::ModelCount(locals.len(), selection.len()));
    }
    if locals.iter().any(|w| w.shape() != global_prev.shape()) {
        return Err(SamplingError::Shape);
    }
    let mut by_device: Vec<Option<&[T]>> = vec![None; p.len()];
    for (&i, w) in selection.indices.iter().zip(locals) {
        match by_device[i] {
            Some(prev) if prev != w.values() => {
                return Err(SamplingError::Mismatch {
                    scheme: selection.scheme,
                    reason: format!("device {i} appears with two different models"),
                })
            }
            _ => by_device[i] = Some(w.values()),
        }
    }
    let coef = coefficients(selection, p);
    let out = combine(&coef, global_prev.values(), |i| by_device[i].expect("selected device"));
    Ok(ParamVector::from_raw(global_prev.shape(), out))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceCheck {
    /// Monte Carlo mean of `‖aggregate − Σ p_k v_k‖²`.
    pub empirical: f64,
    pub closed_form: f64,
    /// Standard error of `empirical`.
    pub std_err: f64,
}

impl VarianceCheck {
    /// Whether the Monte Carlo estimate is within `z` standard errors of the
    /// closed form (with a small absolute slack for the zero-variance case).
    pub fn agrees(&self, z: f64) -> bool {
        (self.empirical - self.closed_form).abs() <= z * self.std_err + 1e-12 * self.closed_form.abs().max(1e-12)
    }
}

/// Compares the sampling variance of the aggregate around `v̄ = Σ p_k v_k`
/// with its closed form:
///
/// * Scheme I: `(1/K) Σ p_k ‖v_k − v̄‖²`
/// * Scheme II: `(N−K)/(K(N−1)) · (1/N) Σ ‖N p_k v_k − v̄‖²` (finite-population
///   sampling of the points `N p_k v_k`, whose mean is `v̄`)
/// * Full: 0
pub fn aggregation_variance_check<T: Scalar, R: Rng + ?Sized>(
    scheme: Scheme,
    locals: &[ParamVector<T>],
    p: &[T],
    k: usize,
    trials: usize,
    rng: &mut R,
) -> Result<VarianceCheck, SamplingError> {
    validate_distribution(p)?;
    let n = p.len();
    if locals.len() != n {
        return Err(SamplingError::ModelCount(locals.len(), n));
    }
    let Some(first) = locals.first() else {
        return Err(SamplingError::ModelCount(0, n));
    };
    if locals.iter().any(|w| w.shape() != first.shape()) {
        return Err(SamplingError::Shape);
    }
    let d = first.len();
    let pf: Vec<f64> = p.iter().map(|v| v.to_f64_lossy()).collect();
    let vf: Vec<Vec<f64>> = locals
        .iter()
        .map(|w| w.values().iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let mut vbar = vec![0.0; d];
    for (pk, v) in pf.iter().zip(&vf) {
        vbar.iter_mut().zip(v).for_each(|(a, x)| *a += pk * x);
    }
    let closed_form = match scheme {
        Scheme::Full => 0.0,
        Scheme::SchemeI => pf.iter().zip(&vf).map(|(pk, v)| pk * sq_dist(v, &vbar)).sum::<f64>() / k as f64,
        Scheme::SchemeII | Scheme::SchemeIITransformed => {
            if n == 1 {
                0.0
            } else {
                let spread: f64 = pf
                    .iter()
                    .zip(&vf)
                    .map(|(pk, v)| {
                        let x: Vec<f64> = v.iter().map(|a| n as f64 * pk * a).collect();
                        sq_dist(&x, &vbar)
                    })
                    .sum::<f64>()
                    / n as f64;
                (n - k) as f64 / (k as f64 * (n - 1) as f64) * spread
            }
        }
        Scheme::Original => return Err(SamplingError::Unsupported(scheme)),
    };
    let sel_scheme = if scheme == Scheme::SchemeIITransformed {
        Scheme::SchemeII
    } else {
        scheme
    };
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..trials {
        let sel = select(sel_scheme, &pf, k, rng)?;
        let coef = coefficients(&sel, &pf);
        let agg = combine(&coef, &vbar, |i| &vf[i]);
        let e = sq_dist(&agg, &vbar);
        sum += e;
        sum_sq += e * e;
    }
    let m = trials.max(1) as f64;
    let empirical = sum / m;
    let var = (sum_sq / m - empirical * empirical).max(0.0);
    Ok(VarianceCheck {
        empirical,
        closed_form,
        std_err: (var / (m - 1.0).max(1.0)).sqrt(),
    })
}
