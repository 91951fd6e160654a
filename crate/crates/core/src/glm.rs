//! Link functions and the weighted, regularized maximum-likelihood estimator.
//!
//! The estimator solves `λθ + Σ w²(μ(zᵀθ) − o)z = 0`, which is the stationarity
//! condition of the strictly convex objective
//! `F(θ) = (λ/2)‖θ‖² + Σ w²[M(zᵀθ) − o·zᵀθ]` with `M' = μ`. [`solve_mle`] runs a
//! damped Newton method on `F`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid step used to bound `μ̇` numerically for links without closed-form bounds.
pub const SLOPE_GRID_STEP: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("MLE did not converge: gradient norm {grad_norm:e} after {iterations} Newton steps (tol {tol:e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        tol: f64,
    },
    #[error("regularizer must be positive, got {0}")]
    BadRegularizer(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("unknown link function {0:?} (known: logistic, cauchit)")]
    UnknownLink(String),
}

/// A symmetric link `μ` with `μ(x) + μ(−x) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    /// `μ(x) = 1 / (1 + e^{−x})`.
    Logistic,
    /// Cauchy CDF, `μ(x) = 1/2 + atan(x)/π`. Heavier tails than the logistic.
    Cauchit,
}

pub fn logistic_link() -> Link {
    Link::Logistic
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::Logistic => "logistic",
            Link::Cauchit => "cauchit",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, GlmError> {
        match name {
            "logistic" => Ok(Link::Logistic),
            "cauchit" => Ok(Link::Cauchit),
            other => Err(GlmError::UnknownLink(other.to_string())),
        }
    }

    pub fn mu(self, x: f64) -> f64 {
        match self {
            Link::Logistic => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Link::Cauchit => 0.5 + x.atan() / std::f64::consts::PI,
        }
    }

    pub fn mu_dot(self, x: f64) -> f64 {
        match self {
            Link::Logistic => {
                let p = self.mu(x);
                p * (1.0 - p)
            }
            Link::Cauchit => 1.0 / (std::f64::consts::PI * (1.0 + x * x)),
        }
    }

    /// Antiderivative `M` of `μ`, normalized so that `M(x) − x·μ(x)` stays bounded
    /// for the logistic case (`M` is the softplus).
    pub fn cumulant(self, x: f64) -> f64 {
        match self {
            Link::Logistic => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Link::Cauchit => {
                0.5 * x + (x * x.atan() - 0.5 * x.mul_add(x, 1.0).ln()) / std::f64::consts::PI
            }
        }
    }
}

/// Lower and upper bounds on `μ̇` over the attainable argument range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeBounds {
    pub kappa_mu: f64,
    pub l_mu: f64,
}

/// Slope bounds over `[−2A, 2A]`, the range of `(x − y)ᵀθ` for `‖x‖ ≤ A`, `‖θ‖ ≤ 1`.
pub fn slope_bounds(link: Link, arm_bound: f64) -> SlopeBounds {
    assert!(arm_bound > 0.0, "arm bound must be positive");
    match link {
        // μ̇ is even and decreasing in |x|.
        Link::Logistic => SlopeBounds {
            kappa_mu: link.mu_dot(2.0 * arm_bound),
            l_mu: 0.25,
        },
        _ => {
            let hi = 2.0 * arm_bound;
            let steps = (2.0 * hi / SLOPE_GRID_STEP).ceil() as usize;
            let (mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY);
            for i in 0..=steps {
                let x = (-hi + i as f64 * SLOPE_GRID_STEP).min(hi);
                let v = link.mu_dot(x);
                lo_v = lo_v.min(v);
                hi_v = hi_v.max(v);
            }
            SlopeBounds {
                kappa_mu: lo_v,
                l_mu: hi_v,
            }
        }
    }
}

/// One weighted comparison: `z = x − y`, outcome `o = 1{x ≻ y}`, weight `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct DuelSample {
    pub z: DVector<f64>,
    pub o: bool,
    pub w: f64,
}

impl DuelSample {
    pub fn new(z: DVector<f64>, o: bool, w: f64) -> Self {
        Self { z, o, w }
    }

    #[inline]
    pub fn outcome(&self) -> f64 {
        if self.o {
            1.0
        } else {
            0.0
        }
    }
}

/// Newton solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when both `‖∇F‖₂` and the Newton step norm are at most `tol`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// `λθ + Σ w²(μ(zᵀθ) − o)z`.
pub fn mle_grad(theta: &DVector<f64>, samples: &[DuelSample], reg: f64, link: Link) -> DVector<f64> {
    let mut g = theta * reg;
    for s in samples {
        let r = s.w * s.w * (link.mu(s.z.dot(theta)) - s.outcome());
        g.axpy(r, &s.z, 1.0);
    }
    g
}

/// The regularized negative log-likelihood whose gradient is [`mle_grad`].
pub fn mle_objective(theta: &DVector<f64>, samples: &[DuelSample], reg: f64, link: Link) -> f64 {
    let mut f = 0.5 * reg * theta.norm_squared();
    for s in samples {
        let m = s.z.dot(theta);
        f += s.w * s.w * (link.cumulant(m) - s.outcome() * m);
    }
    f
}

fn hessian(theta: &DVector<f64>, samples: &[DuelSample], reg: f64, link: Link) -> DMatrix<f64> {
    let d = theta.len();
    let mut h = DMatrix::identity(d, d) * reg;
    for s in samples {
        let c = s.w * s.w * link.mu_dot(s.z.dot(theta));
        h.ger(c, &s.z, &s.z, 1.0);
    }
    h
}

/// Solves the regularized MLE equation starting from `warm_start`.
pub fn solve_mle(
    samples: &[DuelSample],
    reg: f64,
    link: Link,
    warm_start: &DVector<f64>,
    opts: SolverOptions,
) -> Result<DVector<f64>, GlmError> {
    solve_mle_traced(samples, reg, link, warm_start, opts, |_| {})
}

/// [`solve_mle`] with a callback receiving the objective value at every accepted iterate
/// (including the starting point).
pub fn solve_mle_traced(
    samples: &[DuelSample],
    reg: f64,
    link: Link,
    warm_start: &DVector<f64>,
    opts: SolverOptions,
    mut on_iterate: impl FnMut(f64),
) -> Result<DVector<f64>, GlmError> {
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(GlmError::BadRegularizer(reg));
    }
    let d = warm_start.len();
    if let Some(s) = samples.iter().find(|s| s.z.len() != d) {
        return Err(GlmError::DimMismatch {
            expected: d,
            got: s.z.len(),
        });
    }

    let mut theta = warm_start.clone();
    let mut f = mle_objective(&theta, samples, reg, link);
    let mut g = mle_grad(&theta, samples, reg, link);
    on_iterate(f);

    for iter in 0..opts.max_iter {
        let gnorm = g.norm();
        let h = hessian(&theta, samples, reg, link);
        let step = match nalgebra::Cholesky::new(h) {
            Some(chol) => -chol.solve(&g),
            // The Hessian is SPD in exact arithmetic; fall back to steepest descent.
            None => -&g,
        };
        // A small gradient alone does not bound the error when curvature is low;
        // the Newton step estimates the remaining distance to the optimum.
        if gnorm <= opts.tol && step.norm() <= opts.tol {
            return Ok(theta);
        }
        let slope = g.dot(&step);

        // Summing n terms leaves F with rounding noise of order nε|F|. Near the
        // optimum the predicted decrease drops below it and Armijo comparisons
        // become coin flips, so a step whose F change is within the noise is
        // judged by the gradient norm instead.
        let noise = f64::EPSILON * (samples.len() as f64 + 64.0) * (1.0 + f.abs());
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = &theta + &step * t;
            let fc = mle_objective(&cand, samples, reg, link);
            let ok = fc <= f + ARMIJO * t * slope
                || (fc <= f + noise && mle_grad(&cand, samples, reg, link).norm() < gnorm);
            if ok {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            if gnorm <= opts.tol {
                return Ok(theta);
            }
            return Err(GlmError::NonConvergence {
                iterations: iter,
                grad_norm: gnorm,
                tol: opts.tol,
            });
        };
        theta = cand;
        f = fc;
        g = mle_grad(&theta, samples, reg, link);
        on_iterate(f);
    }

    let gnorm = g.norm();
    if gnorm <= opts.tol {
        Ok(theta)
    } else {
        Err(GlmError::NonConvergence {
            iterations: opts.max_iter,
            grad_norm: gnorm,
            tol: opts.tol,
        })
    }
}
