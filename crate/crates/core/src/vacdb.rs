//! The variance-aware layered learner.
//!
//! Every layer `ℓ ∈ 1..=L` keeps its own weighted samples, covariance, MLE and
//! confidence radius. Each round walks the layers from `ℓ = 1`:
//!
//! * if every surviving pair satisfies `‖x − y‖_{Σ̂⁻¹} ≤ α`, exploit the symmetric
//!   UCB pair `argmax (x + y)ᵀθ̂ + β̂‖x − y‖_{Σ̂⁻¹}`;
//! * else if every pair is within `2^{−ℓ}`, drop arms whose estimated value is more
//!   than `2^{−ℓ}β̂` below the best and move to layer `ℓ + 1`;
//! * otherwise explore the most uncertain pair at layer `ℓ` with weight
//!   `w = 2^{−ℓ} / ‖x − y‖_{Σ̂⁻¹}`.
//!
//! Only exploration rounds change state, and only in the layer that explored.

use log::trace;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ellipsoid::{CovError, CovState};
use crate::glm::{mle_grad, solve_mle, DuelSample, GlmError, Link, SlopeBounds, SolverOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VacdbError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("arm set is empty")]
    NoArms,
    #[error("arm {index} has dimension {got}, expected {expected}")]
    DimMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer walk passed layer {0} without a decision")]
    InternalLoopOverrun(usize),
    #[error("decision belongs to round {decision_round} / generation {decision_gen}, state is at round {round} / generation {gen}")]
    StaleDecision {
        decision_round: u64,
        decision_gen: u64,
        round: u64,
        gen: u64,
    },
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Cov(#[from] CovError),
}

/// Configuration of the layered learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoParams {
    pub dim: usize,
    pub horizon: u64,
    /// Confidence parameter `δ`.
    pub delta: f64,
    pub kappa_mu: f64,
    pub l_mu: f64,
    /// Exploitation threshold on pairwise inverse norms.
    pub alpha: f64,
    /// Number of layers, `⌈log₂(1/α)⌉`.
    pub layers: usize,
    /// Multiplier on every confidence radius.
    pub radius_scale: f64,
    /// Multiply the initial covariance regularizer `2^{−2ℓ}` by `κ_μ`.
    pub kappa_in_regularizer: bool,
    pub link: Link,
    pub solver: SolverOptions,
}

impl AlgoParams {
    /// Defaults: `δ = 0.01`, `α = T^{−3/2}`, unit radius scale.
    pub fn new(dim: usize, horizon: u64, link: Link, bounds: SlopeBounds) -> Self {
        let alpha = (horizon.max(1) as f64).powf(-1.5);
        Self {
            dim,
            horizon,
            delta: 0.01,
            kappa_mu: bounds.kappa_mu,
            l_mu: bounds.l_mu,
            alpha,
            layers: layer_count(alpha),
            radius_scale: 1.0,
            kappa_in_regularizer: true,
            link,
            solver: SolverOptions::default(),
        }
    }

    /// Sets `α` and the matching layer count.
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self.layers = layer_count(alpha);
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_radius_scale(mut self, radius_scale: f64) -> Self {
        self.radius_scale = radius_scale;
        self
    }

    pub fn validate(&self) -> Result<(), VacdbError> {
        let bad = |m: &str| Err(VacdbError::InvalidParams(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be at least 1");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if !(self.kappa_mu > 0.0 && self.kappa_mu <= self.l_mu) {
            return bad("slope bounds must satisfy 0 < kappa_mu <= L_mu");
        }
        if !(self.alpha > 0.0) || self.layers == 0 {
            return bad("alpha must be positive and L >= 1");
        }
        if layer_width(self.layers) > self.alpha {
            return bad("2^-L must not exceed alpha");
        }
        if !(self.radius_scale > 0.0 && self.radius_scale.is_finite()) {
            return bad("radius_scale must be positive");
        }
        Ok(())
    }

    /// Diagonal regularizer of layer `ell`'s covariance at initialization.
    pub fn cov_reg(&self, ell: usize) -> f64 {
        let base = layer_width(ell).powi(2);
        if self.kappa_in_regularizer {
            base * self.kappa_mu
        } else {
            base
        }
    }

    /// Regularizer `2^{−2ℓ}κ_μ` of layer `ell`'s MLE equation.
    pub fn mle_reg(&self, ell: usize) -> f64 {
        layer_width(ell).powi(2) * self.kappa_mu
    }
}

/// `⌈log₂(1/α)⌉`, bumped if rounding leaves `2^{−L} > α`.
pub fn layer_count(alpha: f64) -> usize {
    let mut l = (1.0 / alpha).log2().ceil().max(1.0) as usize;
    while layer_width(l) > alpha {
        l += 1;
    }
    l
}

/// `2^{−ℓ}`.
#[inline]
pub fn layer_width(ell: usize) -> f64 {
    (-(ell as f64)).exp2()
}

/// Estimator bundle of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub ell: usize,
    pub cov: CovState,
    pub theta_hat: DVector<f64>,
    pub beta_hat: f64,
    pub psi: Vec<DuelSample>,
}

/// Which case of the two-case variance estimator applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarBranch {
    /// Weighted squared residuals of the stored samples.
    Empirical,
    /// The crude bound `|Ψ|`, used on low layers.
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceEstimate {
    pub value: f64,
    pub branch: VarBranch,
}

/// `log(4t²L/δ)`.
fn conf_log(t: f64, params: &AlgoParams) -> f64 {
    (4.0 * t * t * params.layers as f64 / params.delta).ln()
}

/// Variance estimate of layer `layer` at round `t`.
pub fn var_hat(layer: &LayerState, t: u64, params: &AlgoParams) -> VarianceEstimate {
    let t = t as f64;
    let threshold = 64.0 * (params.l_mu / params.kappa_mu) * conf_log(t + 1.0, params).sqrt();
    let est = if (layer.ell as f64).exp2() >= threshold {
        let value = layer
            .psi
            .iter()
            .map(|s| {
                let r = s.outcome() - params.link.mu(s.z.dot(&layer.theta_hat));
                s.w * s.w * r * r
            })
            .sum();
        VarianceEstimate {
            value,
            branch: VarBranch::Empirical,
        }
    } else {
        VarianceEstimate {
            value: layer.psi.len() as f64,
            branch: VarBranch::Count,
        }
    };
    trace!("layer {} round {}: var_hat {:?}", layer.ell, t, est);
    est
}

/// Variance-aware confidence radius of layer `layer` at round `t`, including
/// `radius_scale`.
pub fn beta_hat(layer: &LayerState, t: u64, params: &AlgoParams) -> f64 {
    let var = var_hat(layer, t, params).value;
    beta_formula(layer.ell, t, var, params)
}

pub(crate) fn beta_formula(ell: usize, t: u64, var: f64, params: &AlgoParams) -> f64 {
    let t = t as f64;
    let width = layer_width(ell);
    let log_t = conf_log(t, params);
    let log_t1 = conf_log(t + 1.0, params);
    let beta = 16.0 * width / params.kappa_mu * ((8.0 * var + 18.0 * log_t1) * log_t).sqrt()
        + 6.0 * width / params.kappa_mu * log_t
        + 2.0 * width;
    beta * params.radius_scale
}

/// How a round's pair was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecisionKind {
    /// Exploitation fired at `layer`; no state change follows.
    Exploit { layer: usize },
    /// Exploration at `layer` with sample weight `weight`.
    Explore { layer: usize, weight: f64 },
}

impl DecisionKind {
    pub fn layer(&self) -> usize {
        match *self {
            DecisionKind::Exploit { layer } | DecisionKind::Explore { layer, .. } => layer,
        }
    }

    pub fn branch_name(&self) -> &'static str {
        match self {
            DecisionKind::Exploit { .. } => "exploit",
            DecisionKind::Explore { .. } => "explore",
        }
    }
}

/// One round's selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub round: u64,
    pub generation: u64,
    pub x_idx: usize,
    pub y_idx: usize,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub kind: DecisionKind,
    /// Surviving arm indices at each visited layer, starting with layer 1.
    pub active_sets: Vec<Vec<usize>>,
}

/// Full learner state.
#[derive(Debug, Clone, PartialEq)]
pub struct VacdbState {
    params: AlgoParams,
    layers: Vec<LayerState>,
    generation: u64,
}

impl VacdbState {
    pub fn init(params: AlgoParams) -> Result<Self, VacdbError> {
        params.validate()?;
        let layers = (1..=params.layers)
            .map(|ell| {
                Ok(LayerState {
                    ell,
                    cov: CovState::new(params.dim, params.cov_reg(ell))?,
                    theta_hat: DVector::zeros(params.dim),
                    beta_hat: layer_width(ell) * (1.0 + 1.0 / params.kappa_mu) * params.radius_scale,
                    psi: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>, CovError>>()?;
        Ok(Self {
            params,
            layers,
            generation: 0,
        })
    }

    pub fn params(&self) -> &AlgoParams {
        &self.params
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    /// Layer `ell` (1-based).
    pub fn layer(&self, ell: usize) -> &LayerState {
        &self.layers[ell - 1]
    }

    /// Number of exploration updates applied so far.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Overwrites a layer's estimate and radius. Meant for test rigs and
    /// diagnostics; the learner never calls it.
    pub fn set_estimate(&mut self, ell: usize, theta_hat: DVector<f64>, beta_hat: f64) {
        let layer = &mut self.layers[ell - 1];
        layer.theta_hat = theta_hat;
        layer.beta_hat = beta_hat;
    }

    /// Runs the layer walk for round `t` over `arms`.
    pub fn choose(&self, arms: &[DVector<f64>], t: u64) -> Result<Decision, VacdbError> {
        if arms.is_empty() {
            return Err(VacdbError::NoArms);
        }
        let d = self.params.dim;
        if let Some((index, a)) = arms.iter().enumerate().find(|(_, a)| a.len() != d) {
            return Err(VacdbError::DimMismatch {
                index,
                expected: d,
                got: a.len(),
            });
        }

        let mut active: Vec<usize> = (0..arms.len()).collect();
        let mut active_sets = Vec::new();
        for layer in &self.layers {
            let ell = layer.ell;
            active_sets.push(active.clone());
            let white = active
                .iter()
                .map(|&i| layer.cov.whiten(&arms[i]))
                .collect::<Result<Vec<_>, _>>()?;
            let (wa, wb, max_sq) = most_uncertain_pair(&white);
            let max_norm = max_sq.sqrt();
            let width = layer_width(ell);

            if max_norm <= self.params.alpha {
                let values: Vec<f64> = active.iter().map(|&i| arms[i].dot(&layer.theta_hat)).collect();
                let (a, b) = symmetric_ucb_pair(&values, &white, layer.beta_hat);
                return Ok(self.decision(arms, t, active[a], active[b], DecisionKind::Exploit { layer: ell }, active_sets));
            }
            if max_norm <= width {
                let values: Vec<f64> = active.iter().map(|&i| arms[i].dot(&layer.theta_hat)).collect();
                let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let cut = best - width * layer.beta_hat;
                active = active
                    .iter()
                    .zip(&values)
                    .filter(|(_, &v)| v >= cut)
                    .map(|(&i, _)| i)
                    .collect();
                continue;
            }
            let (xi, yi) = (active[wa], active[wb]);
            let norm = layer.cov.inv_norm(&(&arms[xi] - &arms[yi]))?;
            let weight = width / norm;
            return Ok(self.decision(arms, t, xi, yi, DecisionKind::Explore { layer: ell, weight }, active_sets));
        }
        Err(VacdbError::InternalLoopOverrun(self.params.layers))
    }

    fn decision(
        &self,
        arms: &[DVector<f64>],
        t: u64,
        x_idx: usize,
        y_idx: usize,
        kind: DecisionKind,
        active_sets: Vec<Vec<usize>>,
    ) -> Decision {
        Decision {
            round: t,
            generation: self.generation,
            x_idx,
            y_idx,
            x: arms[x_idx].clone(),
            y: arms[y_idx].clone(),
            kind,
            active_sets,
        }
    }

    /// Feeds back the outcome `o = 1{x ≻ y}` of `decision`, made at round `t`.
    pub fn observe(&mut self, decision: &Decision, o: bool, t: u64) -> Result<(), VacdbError> {
        if decision.round != t || decision.generation != self.generation {
            return Err(VacdbError::StaleDecision {
                decision_round: decision.round,
                decision_gen: decision.generation,
                round: t,
                gen: self.generation,
            });
        }
        let (ell, weight) = match decision.kind {
            DecisionKind::Exploit { .. } => return Ok(()),
            DecisionKind::Explore { layer, weight } => (layer, weight),
        };

        let warm = if !self.layers[ell - 1].psi.is_empty() {
            self.layers[ell - 1].theta_hat.clone()
        } else if ell > 1 {
            self.layers[ell - 2].theta_hat.clone()
        } else {
            DVector::zeros(self.params.dim)
        };
        let reg = self.params.mle_reg(ell);
        let params = &self.params;
        let layer = &mut self.layers[ell - 1];
        let z = &decision.x - &decision.y;
        layer.cov.rank1_update(&z, weight)?;
        layer.psi.push(DuelSample::new(z, o, weight));
        layer.theta_hat = solve_mle(&layer.psi, reg, params.link, &warm, params.solver)?;
        debug_assert!(mle_grad(&layer.theta_hat, &layer.psi, reg, params.link).norm() <= params.solver.tol);
        layer.beta_hat = beta_hat(layer, t + 1, params);
        self.generation += 1;
        Ok(())
    }
}

/// Pair `(a, b)`, `a < b`, maximizing `‖u_a − u_b‖` over whitened vectors, with its
/// squared norm. Ties go to the lexicographically first pair; a single vector
/// yields `(0, 0, 0)`.
pub(crate) fn most_uncertain_pair(white: &[DVector<f64>]) -> (usize, usize, f64) {
    let mut best = (0, 0, 0.0);
    for a in 0..white.len() {
        for b in a + 1..white.len() {
            let sq = dist_sq(&white[a], &white[b]);
            if sq > best.2 {
                best = (a, b, sq);
            }
        }
    }
    best
}

#[inline]
pub(crate) fn dist_sq(u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    u.iter().zip(v.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// `argmax_{a ≤ b} (v_a + v_b) + β‖u_a − u_b‖`, lexicographic tie-break.
pub(crate) fn symmetric_ucb_pair(values: &[f64], white: &[DVector<f64>], beta: f64) -> (usize, usize) {
    let mut best = (0, 0, f64::NEG_INFINITY);
    for a in 0..values.len() {
        for b in a..values.len() {
            let score = values[a] + values[b] + beta * dist_sq(&white[a], &white[b]).sqrt();
            if score > best.2 {
                best = (a, b, score);
            }
        }
    }
    (best.0, best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{hypercube_arms, make_instance, DuelRng};
    use crate::glm::{logistic_link, slope_bounds};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn params(d: usize, horizon: u64) -> AlgoParams {
        AlgoParams::new(d, horizon, Link::Logistic, slope_bounds(Link::Logistic, (d as f64).sqrt()))
    }

    #[test]
    fn init_examples() {
        let p = AlgoParams {
            kappa_mu: 1.0,
            l_mu: 1.0,
            ..params(3, 100)
        };
        let s = VacdbState::init(p).unwrap();
        assert_eq!(s.layer(1).beta_hat, 1.0);
        assert!(s.layers().iter().all(|l| l.theta_hat.iter().all(|v| *v == 0.0) && l.psi.is_empty()));

        let p = params(5, 4000);
        let alpha = 4000f64.powf(-1.5);
        assert_relative_eq!(p.alpha, alpha);
        assert!((p.alpha - 3.953e-6).abs() < 1e-9);
        assert_eq!(p.layers, 18);
        assert_eq!(p.layers, (1.0 / alpha).log2().ceil() as usize);
        let s = VacdbState::init(p.clone()).unwrap();
        assert_eq!(s.layers().len(), 18);
        for l in s.layers() {
            let reg = 4f64.powi(-(l.ell as i32)) * p.kappa_mu;
            assert_relative_eq!(l.cov.reg(), reg, max_relative = 1e-15);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let p = params(3, 10).with_delta(1.5);
        assert!(matches!(VacdbState::init(p), Err(VacdbError::InvalidParams(_))));
        let mut p = params(3, 10);
        p.layers = 1;
        assert!(VacdbState::init(p).is_err());
    }

    #[test]
    fn single_arm_exploits_immediately() {
        let s = VacdbState::init(params(2, 100)).unwrap();
        let arms = vec![DVector::from_vec(vec![0.3, -0.4])];
        let d = s.choose(&arms, 1).unwrap();
        assert_eq!(d.kind, DecisionKind::Exploit { layer: 1 });
        assert_eq!((d.x_idx, d.y_idx), (0, 0));
    }

    #[test]
    fn round_one_explores_at_layer_one() {
        let p = params(5, 4000);
        assert!(p.kappa_mu < 1.0);
        let s = VacdbState::init(p.clone()).unwrap();
        let arms = hypercube_arms(5).unwrap();
        // Fresh covariance is 2^{-2}κ_μ I, so a distinct pair has norm 2‖x − y‖₂/√κ_μ ≥ 4/√κ_μ.
        let min_norm = 2.0 * 2.0 / p.kappa_mu.sqrt();
        assert!(min_norm > 0.5);
        let d = s.choose(&arms, 1).unwrap();
        match d.kind {
            DecisionKind::Explore { layer, weight } => {
                assert_eq!(layer, 1);
                let n = s.layer(1).cov.inv_norm(&(&d.x - &d.y)).unwrap();
                assert_relative_eq!(n, 2.0 * (&d.x - &d.y).norm() / p.kappa_mu.sqrt(), max_relative = 1e-12);
                assert!((weight * n - 0.5).abs() <= 1e-12);
            }
            other => panic!("expected exploration, got {other:?}"),
        }
        // Most informative pair on the hypercube is antipodal; first such pair is (0, 31).
        assert_eq!((d.x_idx, d.y_idx), (0, 31));
    }

    #[test]
    fn oracle_estimate_exploits_best_pair() {
        let inst = make_instance(3, 1.0, Link::Logistic, 5, false).unwrap();
        let arms = hypercube_arms(3).unwrap();
        let mut p = params(3, 100).with_alpha(1e-3);
        p.radius_scale = 1.0;
        let mut s = VacdbState::init(p).unwrap();
        // A huge covariance makes every pair certain at layer 1.
        s.layers[0].cov = CovState::new(3, 1e12).unwrap();
        s.set_estimate(1, inst.theta_star.clone(), 0.0);
        let d = s.choose(&arms, 1).unwrap();
        assert!(matches!(d.kind, DecisionKind::Exploit { layer: 1 }));
        let best = inst.best_arm(&arms).unwrap();
        assert_eq!((d.x_idx, d.y_idx), (best, best));
        assert_eq!(inst.instant_regret(&arms, &d.x, &d.y), 0.0);
    }

    #[test]
    fn exploit_pair_invariant_to_value_shift() {
        let white: Vec<DVector<f64>> = (0..5)
            .map(|i| DVector::from_vec(vec![i as f64 * 0.3, (i * i) as f64 * 0.1]))
            .collect();
        let values = vec![0.1, 0.5, -0.2, 0.45, 0.3];
        let shifted: Vec<f64> = values.iter().map(|v| v + 7.25).collect();
        for beta in [0.0, 0.1, 1.0, 10.0] {
            assert_eq!(
                symmetric_ucb_pair(&values, &white, beta),
                symmetric_ucb_pair(&shifted, &white, beta)
            );
        }
    }

    #[test]
    fn var_hat_examples() {
        let p = params(1, 100);
        let high = 30; // 2^30 exceeds the threshold for any sane (t, L, δ)
        let mut layer = LayerState {
            ell: high,
            cov: CovState::new(1, 1.0).unwrap(),
            theta_hat: DVector::zeros(1),
            beta_hat: 1.0,
            psi: Vec::new(),
        };
        let v = var_hat(&layer, 1, &p);
        assert_eq!((v.value, v.branch), (0.0, VarBranch::Empirical));
        layer.ell = 1;
        let v = var_hat(&layer, 1, &p);
        assert_eq!((v.value, v.branch), (0.0, VarBranch::Count));

        // μ(zᵀθ̂) = 0.8 with z = 1 and θ̂ = logit(0.8).
        layer.ell = high;
        layer.theta_hat = DVector::from_element(1, (0.8f64 / 0.2).ln());
        layer.psi.push(DuelSample::new(DVector::from_element(1, 1.0), true, 1.0));
        let v = var_hat(&layer, 1, &p);
        assert_eq!(v.branch, VarBranch::Empirical);
        assert_relative_eq!(v.value, 0.04, max_relative = 1e-12);
        layer.ell = 2;
        assert_eq!(var_hat(&layer, 1, &p).value, 1.0);
    }

    #[test]
    fn beta_hat_literal_evaluation() {
        let mut p = params(3, 4000);
        p.kappa_mu = 1.0;
        p.l_mu = 1.0;
        p.delta = 0.01;
        assert_eq!(p.layers, 18);
        let layer = LayerState {
            ell: 1,
            cov: CovState::new(3, 1.0).unwrap(),
            theta_hat: DVector::zeros(3),
            beta_hat: 0.0,
            psi: Vec::new(),
        };
        // Hand evaluation: log(4·1·18/0.01) = log 7200, log(4·4·18/0.01) = log 28800.
        let a = 7200f64.ln();
        let b = 28800f64.ln();
        let expected = 8.0 * (18.0 * b * a).sqrt() + 3.0 * a + 1.0;
        assert_relative_eq!(beta_hat(&layer, 1, &p), expected, max_relative = 1e-12);

        assert!(beta_formula(1, 10, 5.0, &p) > beta_formula(1, 10, 1.0, &p));
        let two = beta_formula(2, 10, 3.0, &p) - 0.5;
        let one = beta_formula(1, 10, 3.0, &p) - 1.0;
        assert_relative_eq!(two, one / 2.0, max_relative = 1e-12);
        assert_relative_eq!(beta_formula(1, 10, 3.0, &p.clone().with_radius_scale(0.25)), beta_formula(1, 10, 3.0, &p) * 0.25);
    }

    #[test]
    fn observe_exploit_leaves_state_unchanged() {
        let s0 = VacdbState::init(params(2, 100)).unwrap();
        let mut s = s0.clone();
        let arms = vec![DVector::from_vec(vec![1.0, 0.0])];
        let d = s.choose(&arms, 3).unwrap();
        s.observe(&d, true, 3).unwrap();
        assert_eq!(s, s0);
    }

    #[test]
    fn first_exploration_solves_one_sample_equation() {
        let p = params(1, 100);
        let mut s = VacdbState::init(p.clone()).unwrap();
        let arms = vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)];
        let d = s.choose(&arms, 1).unwrap();
        let DecisionKind::Explore { layer: 1, weight } = d.kind else {
            panic!("expected exploration at layer 1");
        };
        s.observe(&d, true, 1).unwrap();
        let layer = s.layer(1);
        assert_eq!(layer.psi.len(), 1);
        // Scalar equation: λθ + w²(σ(zθ) − 1)z = 0 with z = x − y = 2.
        let (lam, z, w2) = (p.mle_reg(1), 2.0, weight * weight);
        let f = |t: f64| lam * t + w2 * (1.0 / (1.0 + (-z * t).exp()) - 1.0) * z;
        let (mut lo, mut hi) = (-1e6, 1e6);
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert!((layer.theta_hat[0] - 0.5 * (lo + hi)).abs() <= 1e-8);
        assert_eq!(s.generation(), 1);
        assert!(s.layers()[1..].iter().all(|l| l.psi.is_empty()));
    }

    #[test]
    fn stale_decisions_rejected() {
        let mut s = VacdbState::init(params(1, 100)).unwrap();
        let arms = vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)];
        let d = s.choose(&arms, 1).unwrap();
        assert!(matches!(s.observe(&d, true, 2), Err(VacdbError::StaleDecision { .. })));
        s.observe(&d, true, 1).unwrap();
        assert!(matches!(s.observe(&d, true, 1), Err(VacdbError::StaleDecision { .. })));
    }

    #[test]
    fn layers_do_not_contaminate_each_other() {
        let p = params(2, 100);
        let mut s = VacdbState::init(p).unwrap();
        let arms = hypercube_arms(2).unwrap();
        let d1 = s.choose(&arms, 1).unwrap();
        s.observe(&d1, true, 1).unwrap();
        let snapshot = s.clone();
        // Force an exploration at layer 2 by hand.
        let z = &arms[0] - &arms[3];
        let n = s.layer(2).cov.inv_norm(&z).unwrap();
        let d2 = Decision {
            round: 2,
            generation: s.generation(),
            x_idx: 0,
            y_idx: 3,
            x: arms[0].clone(),
            y: arms[3].clone(),
            kind: DecisionKind::Explore { layer: 2, weight: 0.25 / n },
            active_sets: vec![],
        };
        s.observe(&d2, false, 2).unwrap();
        assert_eq!(s.layer(1), snapshot.layer(1));
        assert_ne!(s.layer(2), snapshot.layer(2));
        assert_eq!(&s.layers()[2..], &snapshot.layers()[2..]);
    }

    #[test]
    fn simulated_run_keeps_invariants() {
        let inst = make_instance(3, 1.0, logistic_link(), 17, false).unwrap();
        let arms = hypercube_arms(3).unwrap();
        let p = params(3, 300).with_radius_scale(0.05);
        let mut s = VacdbState::init(p.clone()).unwrap();
        let mut rng = DuelRng::seed_from_u64(4);
        for t in 1..=300 {
            let d = s.choose(&arms, t).unwrap();
            assert!(d.active_sets.len() <= p.layers);
            if let DecisionKind::Explore { layer, weight } = d.kind {
                assert_ne!(d.x_idx, d.y_idx);
                assert!(weight > 0.0 && weight <= 1.0);
                let n = s.layer(layer).cov.inv_norm(&(&d.x - &d.y)).unwrap();
                assert!((weight * n - layer_width(layer)).abs() <= 1e-12);
            }
            let out = inst.duel(&d.x, &d.y, &mut rng);
            s.observe(&d, out.o, t).unwrap();
        }
        for layer in s.layers() {
            let mut m = nalgebra::DMatrix::identity(3, 3) * p.cov_reg(layer.ell);
            for smp in &layer.psi {
                m += &smp.z * smp.z.transpose() * (smp.w * smp.w);
            }
            assert!((layer.cov.matrix() - &m).norm() <= 1e-9 * m.norm());
        }
    }
}
