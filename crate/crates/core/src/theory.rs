//! Problem constants and closed-form convergence bounds.
//!
//! All quantities are reported in `f64` regardless of the training scalar.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::BatchMode;
use crate::objectives::{gamma_heterogeneity, GlobalObjective, ObjectiveError, ObjectiveKind, ParamVector};
use crate::sampling::Scheme;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("objective is not strongly convex (mu = {0})")]
    NotStronglyConvex(f64),
    #[error("invalid constants: {0}")]
    Invalid(String),
    #[error("no variance constant for scheme {0}")]
    Unsupported(Scheme),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Whether a constant was computed exactly or estimated numerically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Exact,
    Estimated,
}

impl Tag {
    pub fn name(self) -> &'static str {
        match self {
            Tag::Exact => "exact",
            Tag::Estimated => "estimated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tagged {
    pub value: f64,
    pub tag: Tag,
}

impl Tagged {
    pub fn exact(value: f64) -> Self {
        Self { value, tag: Tag::Exact }
    }

    pub fn estimated(value: f64) -> Self {
        Self {
            value,
            tag: Tag::Estimated,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemConstants {
    /// Smoothness `L`.
    pub l: Tagged,
    /// Strong convexity `μ`.
    pub mu: Tagged,
    /// Bound on stochastic gradient norms `G`.
    pub g: Tagged,
    /// Per-device gradient-noise bounds `σ_k`.
    pub sigma: Vec<Tagged>,
    /// Heterogeneity `Γ = F* − Σ p_k F_k*`.
    pub gamma: Tagged,
    pub p: Vec<f64>,
    pub n: usize,
    pub k: usize,
    pub e: usize,
}

impl ProblemConstants {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        l: f64,
        mu: f64,
        g: f64,
        sigma: Vec<f64>,
        gamma: f64,
        p: Vec<f64>,
        k: usize,
        e: usize,
    ) -> Result<Self, TheoryError> {
        let c = Self {
            l: Tagged::exact(l),
            mu: Tagged::exact(mu),
            g: Tagged::exact(g),
            sigma: sigma.into_iter().map(Tagged::exact).collect(),
            gamma: Tagged::exact(gamma),
            n: p.len(),
            p,
            k,
            e,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let bad = |m: String| Err(TheoryError::Invalid(m));
        if !(self.mu.value > 0.0) {
            return Err(TheoryError::NotStronglyConvex(self.mu.value));
        }
        if !(self.l.value >= self.mu.value && self.l.value.is_finite()) {
            return bad(format!("need L >= mu, got L={} mu={}", self.l.value, self.mu.value));
        }
        if !(self.g.value >= 0.0) || !(self.gamma.value >= 0.0) {
            return bad("G and Gamma must be >= 0".into());
        }
        if self.sigma.len() != self.n || self.sigma.iter().any(|s| !(s.value >= 0.0)) {
            return bad("need one sigma >= 0 per device".into());
        }
        if self.n == 0 || self.e == 0 || self.k == 0 {
            return bad("N, K and E must be >= 1".into());
        }
        Ok(())
    }

    pub fn kappa(&self) -> f64 {
        self.l.value / self.mu.value
    }

    /// Replaces `G` (typically by the largest gradient norm of a run).
    pub fn with_g(mut self, g: f64) -> Self {
        self.g = Tagged::estimated(g);
        self
    }

    pub fn with_participation(mut self, k: usize, e: usize) -> Self {
        self.k = k;
        self.e = e;
        self
    }

    /// `Σ p_k² σ_k²`
    pub fn noise_term(&self) -> f64 {
        self.p
            .iter()
            .zip(&self.sigma)
            .map(|(p, s)| p * p * s.value * s.value)
            .sum()
    }

    /// `max{8L/μ, E} − 1`
    pub fn gamma_shift(&self) -> f64 {
        (8.0 * self.kappa()).max(self.e as f64) - 1.0
    }
}

#[derive(Clone, Debug)]
pub struct EstimateOptions {
    pub batch: BatchMode,
    pub participants: usize,
    pub local_steps: usize,
    /// Stochastic-gradient draws per device and probe point.
    pub draws: usize,
    pub seed: u64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            batch: BatchMode::Full,
            participants: 1,
            local_steps: 1,
            draws: 200,
            seed: 0,
        }
    }
}

fn clean_min_eig(lo: f64, hi: f64) -> f64 {
    if lo.abs() <= 1e-12 * hi.abs().max(1.0) {
        0.0
    } else {
        lo
    }
}

/// Constants of `problem`.
///
/// Quadratic devices give `L = max_k s_k(λ_max(A_k) + μ_k)` and
/// `μ = min_k s_k(λ_min(A_k) + μ_k)` exactly. Logistic devices use the
/// softmax Hessian bound `L = s_k(½ max_j ‖(x_j, 1)‖² + 2λ)` and `μ = 2 s_k λ`.
/// `G` and `σ_k` come from probes at the zero model and the minimizer;
/// `Γ` from the numerical minima.
pub fn estimate_constants<T: Scalar>(
    problem: &GlobalObjective<T>,
    opts: &EstimateOptions,
) -> Result<ProblemConstants, TheoryError> {
    let mut l = 0.0f64;
    let mut mu = f64::INFINITY;
    let mut all_exact = true;
    let mut sigma = Vec::with_capacity(problem.num_devices());
    for local in problem.locals() {
        let s = local.scale().to_f64_lossy();
        match local.kind() {
            ObjectiveKind::Quadratic {
                a,
                mu: ridge,
                noise_sigma,
                ..
            } => {
                let eig = a.symmetric_eigen().map_err(ObjectiveError::from)?;
                let hi = eig.max().to_f64_lossy();
                let lo = clean_min_eig(eig.min().to_f64_lossy(), hi);
                let r = ridge.to_f64_lossy();
                l = l.max(s * (hi + r));
                mu = mu.min(s * (lo + r));
                sigma.push(match opts.batch {
                    BatchMode::Full => Tagged::exact(0.0),
                    BatchMode::MiniBatch(_) => Tagged::exact(noise_sigma.to_f64_lossy()),
                });
            }
            ObjectiveKind::Logistic { data, lambda, .. } => {
                all_exact = false;
                let lam = lambda.to_f64_lossy();
                let max_sq = (0..data.len())
                    .map(|j| data.row(j).iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() + 1.0)
                    .fold(0.0, f64::max);
                l = l.max(s * (0.5 * max_sq + 2.0 * lam));
                mu = mu.min(s * 2.0 * lam);
                sigma.push(Tagged::exact(0.0));
            }
        }
    }
    if !(mu > 0.0) {
        return Err(TheoryError::NotStronglyConvex(mu));
    }
    let tag = if all_exact { Tag::Exact } else { Tag::Estimated };

    let minimum = problem.minimum()?;
    let probes = [ParamVector::zeros(problem.shape()), minimum.w];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut g_sq = 0.0f64;
    for (k, local) in problem.locals().iter().enumerate() {
        let mut noise_sq = 0.0f64;
        for w in &probes {
            let full = local.grad(w)?;
            match opts.batch {
                BatchMode::Full => g_sq = g_sq.max(full.norm().to_f64_lossy().powi(2)),
                BatchMode::MiniBatch(b) => {
                    let b = b.min(local.num_samples());
                    let (mut sq, mut dev) = (0.0, 0.0);
                    for _ in 0..opts.draws.max(1) {
                        let g = local.stochastic_grad(w, b, &mut rng)?;
                        sq += g.norm().to_f64_lossy().powi(2);
                        dev += g.distance(&full).to_f64_lossy().powi(2);
                    }
                    let m = opts.draws.max(1) as f64;
                    g_sq = g_sq.max(sq / m);
                    noise_sq = noise_sq.max(dev / m);
                }
            }
        }
        if !local.is_quadratic() && matches!(opts.batch, BatchMode::MiniBatch(_)) {
            sigma[k] = Tagged::estimated(noise_sq.sqrt());
        }
    }
    let gamma = gamma_heterogeneity(problem)?.to_f64_lossy();
    let c = ProblemConstants {
        l: Tagged { value: l, tag },
        mu: Tagged { value: mu, tag },
        g: Tagged::estimated(g_sq.sqrt()),
        sigma,
        gamma: Tagged { value: gamma, tag },
        p: problem.weights().iter().map(|v| v.to_f64_lossy()).collect(),
        n: problem.num_devices(),
        k: opts.participants.max(1),
        e: opts.local_steps.max(1),
    };
    c.validate()?;
    Ok(c)
}

/// `B = Σ p_k² σ_k² + 6LΓ + 8(E−1)²G²`
pub fn compute_b(c: &ProblemConstants) -> f64 {
    let e1 = c.e.saturating_sub(1) as f64;
    c.noise_term() + 6.0 * c.l.value * c.gamma.value + 8.0 * e1 * e1 * c.g.value * c.g.value
}

/// Partial-participation variance constant: `4E²G²/K` for Scheme I,
/// `(N−K)/(N−1) · 4E²G²/K` for Scheme II, zero under full participation.
pub fn compute_c(scheme: Scheme, c: &ProblemConstants) -> Result<f64, TheoryError> {
    let (n, k, e) = (c.n as f64, c.k as f64, c.e as f64);
    let base = 4.0 * e * e * c.g.value * c.g.value / k;
    match scheme {
        Scheme::Full => Ok(0.0),
        Scheme::SchemeI => Ok(base),
        Scheme::SchemeII | Scheme::SchemeIITransformed => {
            if c.n < 2 {
                return Err(TheoryError::Invalid("scheme_ii needs N >= 2".into()));
            }
            if c.k > c.n {
                return Err(TheoryError::Invalid(format!("K={} > N={}", c.k, c.n)));
            }
            Ok((n - k) / (n - 1.0) * base)
        }
        Scheme::Original => Err(TheoryError::Unsupported(scheme)),
    }
}

/// Bound on `E[F(w_t)] − F*` at iterate `t ≥ 1` (1-based; `t = 1` is the
/// starting point) under the schedule `2/(μ(γ+t))`, `γ = max{8κ, E} − 1`:
/// `κ/(γ+t) · (2(B+C)/μ + μ(γ+1)Δ₁/2)` with `Δ₁ = ‖w_1 − w*‖²`.
///
/// Writing `γ' = γ + 1` gives the equivalent form
/// `κ/(γ'+t−1) · (2(B+C)/μ + μγ'Δ₁/2)`.
pub fn theorem_rhs(t: usize, c: &ProblemConstants, cc: f64, delta1: f64) -> f64 {
    let mu = c.mu.value;
    let gamma = c.gamma_shift();
    let b = compute_b(c);
    c.kappa() / (gamma + t as f64) * (2.0 * (b + cc) / mu + mu * (gamma + 1.0) * delta1 / 2.0)
}

/// Bound on `E‖w_t − w*‖²`: `v/(γ+t)` with
/// `v = max{4(B+C)/μ², (γ+1)Δ₁}`.
pub fn distance_bound(t: usize, c: &ProblemConstants, cc: f64, delta1: f64) -> f64 {
    let mu = c.mu.value;
    let gamma = c.gamma_shift();
    let v = (4.0 * (compute_b(c) + cc) / (mu * mu)).max((gamma + 1.0) * delta1);
    v / (gamma + t as f64)
}

/// Relative number of communication rounds needed for a fixed accuracy:
/// `(1 + 1/K)EG² + (Σp_k²σ_k² + LΓ + κG²)/E + G²`. Only ratios between
/// values are meaningful.
pub fn predict_comm_rounds(c: &ProblemConstants, k: usize, e: f64) -> f64 {
    let g2 = c.g.value * c.g.value;
    let lin = (1.0 + 1.0 / k as f64) * g2;
    lin * e + hyperbolic_term(c) / e + g2
}

fn hyperbolic_term(c: &ProblemConstants) -> f64 {
    c.noise_term() + c.l.value * c.gamma.value + c.kappa() * c.g.value * c.g.value
}

/// Minimizer over real `E > 0` of [`predict_comm_rounds`].
pub fn optimal_local_steps(c: &ProblemConstants, k: usize) -> f64 {
    let g2 = c.g.value * c.g.value;
    (hyperbolic_term(c) / ((1.0 + 1.0 / k as f64) * g2)).sqrt()
}
