//! Single-layer comparison learners sharing one regularized GLM estimator.
//!
//! * MaxInP: restrict to the promising set `C_t` of arms not confidently beaten,
//!   then play its most uncertain pair.
//! * MaxPairUCB: the symmetric UCB pair over all arms.
//! * CoLSTIM: first arm by perturbed estimated utility, second arm as the
//!   toughest optimistic competitor. With zero perturbation this is the
//!   asymmetric Sta'D rule.

use std::collections::HashMap;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::ellipsoid::CovState;
use crate::glm::{solve_mle, DuelSample, GlmError, Link, SolverOptions};
use crate::vacdb::{dist_sq, most_uncertain_pair, symmetric_ucb_pair};

/// Default ridge regularizer of the single-layer estimator.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Shared estimator: `Σ = λI + Σ zzᵀ`, unit-weight MLE, radius `β`.
///
/// Repeated observations of the same `(z, o)` are stored once with weight
/// `√count`, which leaves the likelihood unchanged and keeps the per-round MLE
/// cost bounded by the number of distinct differences.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleLayerState {
    pub cov: CovState,
    pub theta_hat: DVector<f64>,
    /// Distinct observations, weighted by the square root of their multiplicity.
    pub samples: Vec<DuelSample>,
    counts: Vec<u32>,
    index: HashMap<(Vec<u64>, bool), usize>,
    n_obs: usize,
    pub beta: f64,
    pub radius_scale: f64,
    pub lambda: f64,
    pub kappa_mu: f64,
    pub delta: f64,
    pub link: Link,
    pub solver: SolverOptions,
}

impl SingleLayerState {
    pub fn new(
        dim: usize,
        lambda: f64,
        kappa_mu: f64,
        delta: f64,
        link: Link,
        radius_scale: f64,
    ) -> Result<Self, crate::ellipsoid::CovError> {
        let mut s = Self {
            cov: CovState::new(dim, lambda)?,
            theta_hat: DVector::zeros(dim),
            samples: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
            n_obs: 0,
            beta: 0.0,
            radius_scale,
            lambda,
            kappa_mu,
            delta,
            link,
            solver: SolverOptions::default(),
        };
        s.beta = s.radius(0);
        Ok(s)
    }

    /// Number of duels observed so far.
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    /// `radius_scale · ((1/κ_μ)√(d·log((1 + t)/δ)) + √λ)`.
    pub fn radius(&self, t: usize) -> f64 {
        let d = self.dim() as f64;
        let core = (d * ((1.0 + t as f64) / self.delta).ln()).sqrt() / self.kappa_mu;
        self.radius_scale * (core + self.lambda.sqrt())
    }

    /// Appends `(x − y, o)`, refits the MLE and recomputes the radius.
    pub fn single_update(&mut self, x: &DVector<f64>, y: &DVector<f64>, o: bool) -> Result<(), GlmError> {
        let z = x - y;
        self.cov
            .rank1_update(&z, 1.0)
            .map_err(|_| GlmError::DimMismatch {
                expected: self.dim(),
                got: z.len(),
            })?;
        let key = (z.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), o);
        match self.index.get(&key) {
            Some(&i) => {
                self.counts[i] += 1;
                self.samples[i].w = f64::from(self.counts[i]).sqrt();
            }
            None => {
                self.index.insert(key, self.samples.len());
                self.samples.push(DuelSample::new(z, o, 1.0));
                self.counts.push(1);
            }
        }
        self.n_obs += 1;
        self.theta_hat = solve_mle(&self.samples, self.lambda, self.link, &self.theta_hat, self.solver)?;
        self.beta = self.radius(self.n_obs);
        Ok(())
    }

    fn whiten_all(&self, arms: &[DVector<f64>]) -> Vec<DVector<f64>> {
        arms.iter()
            .map(|a| self.cov.whiten(a).expect("arm dimension matches estimator"))
            .collect()
    }

    fn values(&self, arms: &[DVector<f64>]) -> Vec<f64> {
        arms.iter().map(|a| a.dot(&self.theta_hat)).collect()
    }

    /// Indices of arms `x` with `(x − y)ᵀθ̂ + β‖x − y‖_{Σ⁻¹} ≥ 0` for every `y`.
    pub fn promising_set(&self, arms: &[DVector<f64>]) -> Vec<usize> {
        let white = self.whiten_all(arms);
        let values = self.values(arms);
        promising(&values, &white, self.beta)
    }

    pub fn maxinp_choose(&self, arms: &[DVector<f64>]) -> (usize, usize) {
        assert!(!arms.is_empty(), "arm set must be non-empty");
        let white = self.whiten_all(arms);
        let values = self.values(arms);
        let c = promising(&values, &white, self.beta);
        let argmax = argmax(&values);
        assert!(c.contains(&argmax), "promising set lost the empirical argmax");
        let sub: Vec<DVector<f64>> = c.iter().map(|&i| white[i].clone()).collect();
        let (a, b, _) = most_uncertain_pair(&sub);
        if a == b {
            // Single-arm set, or all pairs degenerate.
            (c[0], c[0])
        } else {
            (c[a], c[b])
        }
    }

    pub fn maxpairucb_choose(&self, arms: &[DVector<f64>]) -> (usize, usize) {
        assert!(!arms.is_empty(), "arm set must be non-empty");
        let white = self.whiten_all(arms);
        symmetric_ucb_pair(&self.values(arms), &white, self.beta)
    }

    /// Draws one Gumbel(0, 1) perturbation per arm from `rng`, scaled by
    /// `perturbation · ‖x‖_{Σ⁻¹}`.
    pub fn colstim_choose(&self, arms: &[DVector<f64>], rng: &mut impl Rng, perturbation: f64) -> (usize, usize) {
        assert!(!arms.is_empty(), "arm set must be non-empty");
        let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
        let white = self.whiten_all(arms);
        let values = self.values(arms);
        let perturbed: Vec<f64> = values
            .iter()
            .zip(&white)
            .map(|(v, u)| {
                let eps: f64 = gumbel.sample(rng);
                v + perturbation * eps * u.norm()
            })
            .collect();
        let x = argmax(&perturbed);
        let challenger: Vec<f64> = values
            .iter()
            .zip(&white)
            .map(|(v, u)| v + 2.0 * self.beta * dist_sq(&white[x], u).sqrt())
            .collect();
        (x, argmax(&challenger))
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn promising(values: &[f64], white: &[DVector<f64>], beta: f64) -> Vec<usize> {
    (0..values.len())
        .filter(|&i| {
            (0..values.len()).all(|j| values[i] - values[j] + beta * dist_sq(&white[i], &white[j]).sqrt() >= 0.0)
        })
        .collect()
}
