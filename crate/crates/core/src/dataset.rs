//! Pairwise-comparison count data and the joint embedding fit.
//!
//! Given counts `C[i][j]` of comparisons resolved in favour of item `i` over item
//! `j`, the fit maximizes
//!
//! ```text
//! Σᵢⱼ C[i][j] · log σ((xᵢ − xⱼ)ᵀθ) − (ε/2)(Σᵢ‖xᵢ‖² + ‖θ‖²)
//! ```
//!
//! over item embeddings `xᵢ ∈ R^d` and a preference direction `θ`. The objective is
//! unchanged by translating all `xᵢ` and by `(X, θ) → (cX, θ/c)`, so the result is
//! reported in a fixed gauge: zero-mean embeddings and `‖θ‖ = 1`.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Instance;
use crate::glm::Link;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}, column {col}: cannot parse {value:?} as an integer")]
    Parse { row: usize, col: usize, value: String },
    #[error("row {row}, column {col}: negative count {value}")]
    Negative { row: usize, col: usize, value: i64 },
    #[error("diagonal entry {index} is {value}, expected 0")]
    NonZeroDiagonal { index: usize, value: u64 },
    #[error("count matrix is not square: row {row} has {cols} columns, expected {expected}")]
    NotSquare { row: usize, cols: usize, expected: usize },
    #[error("count matrix is empty")]
    Empty,
    #[error("no positive counts to fit")]
    NoComparisons,
    #[error("embedding dimension must be at least 1")]
    ZeroDim,
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// Square matrix of comparison counts with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    counts: Vec<Vec<u64>>,
}

impl CountMatrix {
    pub fn from_rows(rows: Vec<Vec<i64>>) -> Result<Self, DatasetError> {
        let k = rows.len();
        if k == 0 {
            return Err(DatasetError::Empty);
        }
        let mut counts = Vec::with_capacity(k);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != k {
                return Err(DatasetError::NotSquare {
                    row: i,
                    cols: row.len(),
                    expected: k,
                });
            }
            let mut out = Vec::with_capacity(k);
            for (j, v) in row.into_iter().enumerate() {
                if v < 0 {
                    return Err(DatasetError::Negative { row: i, col: j, value: v });
                }
                out.push(v as u64);
            }
            if out[i] != 0 {
                return Err(DatasetError::NonZeroDiagonal { index: i, value: out[i] });
            }
            counts.push(out);
        }
        Ok(Self { counts })
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    /// Number of items.
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    /// `C[i][j]`: comparisons between `i` and `j` resolved in favour of `i`.
    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i][j]
    }

    pub fn add(&mut self, i: usize, j: usize, n: u64) {
        assert_ne!(i, j, "diagonal counts must stay zero");
        self.counts[i][j] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    /// Comma-separated rows, no header.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.counts {
            let line: Vec<String> = row.iter().map(u64::to_string).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Reads a headerless CSV of `K` rows by `K` integer columns.
pub fn load_count_matrix(path: impl AsRef<Path>) -> Result<CountMatrix, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_count_matrix(BufReader::new(file))
}

pub fn parse_count_matrix(reader: impl Read) -> Result<CountMatrix, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v.parse::<i64>().map_err(|_| DatasetError::Parse {
                    row: i,
                    col: j,
                    value: v.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    CountMatrix::from_rows(rows)
}

/// Fitted item embeddings and preference direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    /// `Σ C[i][j] log σ((xᵢ − xⱼ)ᵀθ)` at the returned parameters, penalty excluded.
    pub final_loglik: f64,
}

impl FittedModel {
    pub fn arms(&self) -> Vec<DVector<f64>> {
        self.x.iter().map(|r| DVector::from_column_slice(r)).collect()
    }

    pub fn theta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }

    /// `P[i][j] = σ((xᵢ − xⱼ)ᵀθ)`, the fitted probability that `i` is preferred to `j`.
    pub fn pairwise_probs(&self) -> DMatrix<f64> {
        let theta = self.theta();
        let u: Vec<f64> = self.arms().iter().map(|x| x.dot(&theta)).collect();
        DMatrix::from_fn(self.k, self.k, |i, j| Link::Logistic.mu(u[i] - u[j]))
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidModel(m));
        if self.d == 0 || self.k == 0 {
            return bad("d and K must be positive".into());
        }
        if self.x.len() != self.k {
            return bad(format!("X has {} rows, K is {}", self.x.len(), self.k));
        }
        if let Some(r) = self.x.iter().position(|r| r.len() != self.d) {
            return bad(format!("X row {r} does not have d = {} entries", self.d));
        }
        if self.theta.len() != self.d {
            return bad(format!("theta has {} entries, d is {}", self.theta.len(), self.d));
        }
        let all_finite = self.theta.iter().chain(self.x.iter().flatten()).all(|v| v.is_finite());
        if !all_finite {
            return bad("non-finite parameter".into());
        }
        if self.theta.iter().all(|v| *v == 0.0) {
            return bad("theta is zero".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, DatasetError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, DatasetError> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&s)
    }
}

/// Optimizer settings for [`fit_joint_mle`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitHyper {
    /// Initial step size, per comparison (divided by the total count).
    pub learning_rate: f64,
    /// ℓ2 penalty `ε` on embeddings and direction.
    pub penalty: f64,
    pub max_epochs: usize,
    /// Stop when an accepted step improves the objective by less than this, relatively.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for FitHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            penalty: 1e-4,
            max_epochs: 100_000,
            rel_tol: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub model: FittedModel,
    /// False when `max_epochs` ran out first; the best iterate is still returned.
    pub converged: bool,
    pub epochs: usize,
}

struct Params {
    x: Vec<DVector<f64>>,
    theta: DVector<f64>,
}

impl Params {
    fn axpy(&self, step: f64, g: &Params) -> Params {
        Params {
            x: self.x.iter().zip(&g.x).map(|(a, b)| a + b * step).collect(),
            theta: &self.theta + &g.theta * step,
        }
    }

    fn norm_sq(&self) -> f64 {
        self.x.iter().map(|v| v.norm_squared()).sum::<f64>() + self.theta.norm_squared()
    }
}

fn loglik(c: &CountMatrix, p: &Params) -> f64 {
    let u: Vec<f64> = p.x.iter().map(|x| x.dot(&p.theta)).collect();
    let mut ll = 0.0;
    for (i, row) in c.rows().iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            if n > 0 {
                // log σ(s) = −softplus(−s)
                ll -= n as f64 * Link::Logistic.cumulant(u[j] - u[i]);
            }
        }
    }
    ll
}

fn objective(c: &CountMatrix, p: &Params, eps: f64) -> f64 {
    loglik(c, p) - 0.5 * eps * p.norm_sq()
}

fn gradient(c: &CountMatrix, p: &Params, eps: f64) -> Params {
    let k = p.x.len();
    let u: Vec<f64> = p.x.iter().map(|x| x.dot(&p.theta)).collect();
    // r[i] = ∂ll/∂uᵢ
    let mut r = vec![0.0; k];
    for (i, row) in c.rows().iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            if n > 0 {
                let g = n as f64 * (1.0 - Link::Logistic.mu(u[i] - u[j]));
                r[i] += g;
                r[j] -= g;
            }
        }
    }
    let mut theta = &p.theta * -eps;
    for (xi, ri) in p.x.iter().zip(&r) {
        theta.axpy(*ri, xi, 1.0);
    }
    let x = p
        .x
        .iter()
        .zip(&r)
        .map(|(xi, ri)| &p.theta * *ri - xi * eps)
        .collect();
    Params { x, theta }
}

/// Jointly fits embeddings and direction by full-batch gradient ascent with
/// backtracking, then fixes the gauge.
pub fn fit_joint_mle(counts: &CountMatrix, d: usize, hyper: FitHyper) -> Result<FitOutcome, DatasetError> {
    if d == 0 {
        return Err(DatasetError::ZeroDim);
    }
    let total = counts.total();
    if total == 0 {
        return Err(DatasetError::NoComparisons);
    }
    let k = counts.k();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let init = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid normal");
    let x = (0..k)
        .map(|_| DVector::from_fn(d, |_, _| init.sample(&mut rng)))
        .collect();
    let theta = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
    let mut p = Params { x, theta };

    let eps = hyper.penalty;
    let mut step = hyper.learning_rate / total as f64;
    let mut f = objective(counts, &p, eps);
    let mut converged = false;
    let mut epochs = 0;
    while epochs < hyper.max_epochs {
        epochs += 1;
        let g = gradient(counts, &p, eps);
        let gsq = g.norm_sq();
        if gsq == 0.0 {
            converged = true;
            break;
        }
        // Backtrack until the ascent condition holds.
        let mut accepted = None;
        for _ in 0..60 {
            let cand = p.axpy(step, &g);
            let fc = objective(counts, &cand, eps);
            if fc >= f + 1e-4 * step * gsq {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            converged = true;
            break;
        };
        let improvement = (fc - f) / f.abs().max(f64::MIN_POSITIVE);
        p = cand;
        f = fc;
        step *= 1.25;
        if improvement < hyper.rel_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("joint fit stopped after {epochs} epochs without meeting rel_tol {}", hyper.rel_tol);
    }

    let model = gauge_fix(counts, p, d);
    Ok(FitOutcome {
        model,
        converged,
        epochs,
    })
}

fn gauge_fix(counts: &CountMatrix, mut p: Params, d: usize) -> FittedModel {
    let k = p.x.len();
    let mean = p.x.iter().fold(DVector::zeros(d), |acc, x| acc + x) / k as f64;
    for x in &mut p.x {
        *x -= &mean;
    }
    let c = p.theta.norm();
    if c > 0.0 {
        p.theta /= c;
        for x in &mut p.x {
            *x *= c;
        }
    } else {
        p.theta = DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 });
        for x in &mut p.x {
            x.fill(0.0);
        }
    }
    let final_loglik = loglik(counts, &p);
    FittedModel {
        d,
        k,
        x: p.x.iter().map(|v| v.iter().copied().collect()).collect(),
        theta: p.theta.iter().copied().collect(),
        final_loglik,
    }
}

/// An environment whose arms are the fitted embeddings and whose `θ*` is the
/// fitted direction, with arm bound `max ‖xᵢ‖`.
pub fn instance_from_fit(model: &FittedModel, link: Link) -> Result<(Instance, Vec<DVector<f64>>), DatasetError> {
    model.validate()?;
    let arms = model.arms();
    let bound = arms.iter().map(|a| a.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let theta = model.theta();
    let scale = theta.norm();
    let inst = Instance::from_direction(theta, scale, link, bound, false)
        .map_err(|e| DatasetError::InvalidModel(e.to_string()))?;
    Ok((inst, arms))
}

/// Simulates `per_pair` duels for every unordered pair `i < j` of `arms` and
/// tallies them as counts.
pub fn sample_counts(
    instance: &Instance,
    arms: &[DVector<f64>],
    per_pair: u64,
    rng: &mut impl Rng,
) -> CountMatrix {
    let mut c = CountMatrix::zeros(arms.len());
    for i in 0..arms.len() {
        for j in i + 1..arms.len() {
            for _ in 0..per_pair {
                if instance.duel(&arms[i], &arms[j], rng).o {
                    c.add(i, j, 1);
                } else {
                    c.add(j, i, 1);
                }
            }
        }
    }
    c
}
