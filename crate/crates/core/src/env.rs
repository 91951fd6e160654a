//! Synthetic preference environment: a hidden parameter `θ*`, arm sets, Bernoulli
//! duel feedback and average-regret accounting.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::Link;

/// Largest dimension [`hypercube_arms`] will enumerate.
pub const MAX_HYPERCUBE_DIM: usize = 20;

/// Random stream used for duel feedback. ChaCha is counter-based, so a run's
/// stream is fully determined by its seed.
pub type DuelRng = ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("dimension must be at least 1")]
    ZeroDim,
    #[error("scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("hypercube enumeration is limited to d <= {MAX_HYPERCUBE_DIM}, got {0}")]
    DimTooLarge(usize),
    #[error("arm set must be non-empty")]
    NoArms,
}

/// A preference environment with hidden parameter `θ*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub theta_star: DVector<f64>,
    pub link: Link,
    /// `‖θ*‖₂`; larger values push preference probabilities towards 0 or 1.
    pub scale: f64,
    /// Bound `A` on arm norms.
    pub arm_bound: f64,
    /// Noise-free comparisons: the better arm always wins.
    pub deterministic: bool,
}

/// Feedback of one duel. Only `o` is visible to a learner; the rest is diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub o: bool,
    pub p: f64,
    pub sigma_sq: f64,
    pub eps: f64,
}

/// Draws `θ* = scale · g/‖g‖` with `g` standard Gaussian from `ChaCha8(seed)`.
/// The arm bound defaults to `√d`, the hypercube radius.
pub fn make_instance(
    d: usize,
    scale: f64,
    link: Link,
    rng_seed: u64,
    deterministic: bool,
) -> Result<Instance, EnvError> {
    if d == 0 {
        return Err(EnvError::ZeroDim);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let g = loop {
        let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        if g.norm() > 0.0 {
            break g;
        }
    };
    Instance::from_direction(g, scale, link, (d as f64).sqrt(), deterministic)
}

impl Instance {
    /// Builds an instance with `θ* = scale · direction/‖direction‖`.
    pub fn from_direction(
        direction: DVector<f64>,
        scale: f64,
        link: Link,
        arm_bound: f64,
        deterministic: bool,
    ) -> Result<Self, EnvError> {
        if direction.is_empty() {
            return Err(EnvError::ZeroDim);
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(EnvError::BadScale(scale));
        }
        let theta_star = direction.normalize() * scale;
        Ok(Self {
            theta_star,
            link,
            scale,
            arm_bound,
            deterministic,
        })
    }

    pub fn with_arm_bound(mut self, arm_bound: f64) -> Self {
        self.arm_bound = arm_bound;
        self
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    /// True utility `xᵀθ*`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.theta_star)
    }

    /// `P(x ≻ y) = μ((x − y)ᵀθ*)` in the stochastic model.
    pub fn preference(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.link.mu((x - y).dot(&self.theta_star))
    }

    /// Compares `x` against `y`. Consumes exactly one uniform draw from `rng`
    /// in both modes so that streams stay aligned across learners.
    pub fn duel(&self, x: &DVector<f64>, y: &DVector<f64>, rng: &mut impl Rng) -> Outcome {
        debug_assert!(x.norm() <= self.arm_bound * (1.0 + 1e-9) && y.norm() <= self.arm_bound * (1.0 + 1e-9));
        let u: f64 = rng.random();
        if self.deterministic {
            let (vx, vy) = (self.value(x), self.value(y));
            let p = if vx > vy {
                1.0
            } else if vx < vy {
                0.0
            } else {
                0.5
            };
            let o = vx >= vy;
            let of = if o { 1.0 } else { 0.0 };
            Outcome {
                o,
                p,
                sigma_sq: 0.0,
                eps: of - p,
            }
        } else {
            let p = self.preference(x, y);
            let o = u < p;
            let of = if o { 1.0 } else { 0.0 };
            Outcome {
                o,
                p,
                sigma_sq: p * (1.0 - p),
                eps: of - p,
            }
        }
    }

    /// Index of the value-maximal arm; the lowest index wins ties.
    pub fn best_arm(&self, arms: &[DVector<f64>]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in arms.iter().enumerate() {
            let v = self.value(a);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Average regret `(2·x*ᵀθ* − (x + y)ᵀθ*) / 2` of playing `(x, y)` against `arms`.
    pub fn instant_regret(&self, arms: &[DVector<f64>], x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let best = arms
            .iter()
            .map(|a| self.value(a))
            .fold(f64::NEG_INFINITY, f64::max);
        average_regret(best, self.value(x), self.value(y))
    }
}

/// `(2·best − vx − vy) / 2`, clamped at zero against rounding.
#[inline]
pub fn average_regret(best: f64, vx: f64, vy: f64) -> f64 {
    (((best - vx) + (best - vy)) * 0.5).max(0.0)
}

/// All `2^d` sign vectors of `{−1, 1}^d`. Bit `k` of the arm index selects the
/// sign of coordinate `k` (0 → −1).
pub fn hypercube_arms(d: usize) -> Result<Vec<DVector<f64>>, EnvError> {
    if d == 0 {
        return Err(EnvError::ZeroDim);
    }
    if d > MAX_HYPERCUBE_DIM {
        return Err(EnvError::DimTooLarge(d));
    }
    Ok((0..1usize << d)
        .map(|i| DVector::from_fn(d, |k, _| if (i >> k) & 1 == 1 { 1.0 } else { -1.0 }))
        .collect())
}

/// `k` points drawn uniformly from the unit sphere in `R^d`.
pub fn sphere_arms(k: usize, d: usize, rng: &mut impl Rng) -> Result<Vec<DVector<f64>>, EnvError> {
    if d == 0 {
        return Err(EnvError::ZeroDim);
    }
    if k == 0 {
        return Err(EnvError::NoArms);
    }
    Ok((0..k)
        .map(|_| loop {
            let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = g.norm();
            if n > 0.0 {
                break g / n;
            }
        })
        .collect())
}
