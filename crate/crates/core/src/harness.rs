//! Config-driven experiment runner.
//!
//! An experiment is a grid of cells `(scale, run, algorithm)`. Every cell builds
//! its environment from seeds derived only from `(base_seed, scale, run)`, so all
//! algorithms in a `(scale, run)` pair face the same `θ*`, the same arms and the
//! same duel random stream. Cells run on a worker pool and are merged in canonical
//! order, which makes the output independent of the number of workers.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::baselines::{SingleLayerState, DEFAULT_LAMBDA};
use crate::dataset::{instance_from_fit, DatasetError, FittedModel};
use crate::env::{average_regret, hypercube_arms, make_instance, sphere_arms, DuelRng, EnvError, Instance};
use crate::glm::{slope_bounds, GlmError, Link, SlopeBounds, SolverOptions};
use crate::vacdb::{AlgoParams, VacdbError, VacdbState};

/// Algorithms the harness knows how to run.
pub const ROSTER: [&str; 4] = ["vacdb", "maxinp", "maxpairucb", "colstim"];

/// CSV header of [`write_csv`].
pub const CSV_HEADER: &str = "run_id,algo,scale,t,inst_regret,cum_regret,layer,branch";

/// Environment variable consulted when no job count is given.
pub const JOBS_ENV: &str = "DUELBENCH_JOBS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run {run} (scale {scale}, algo {algo}): {source}")]
    Run {
        run: usize,
        scale: f64,
        algo: String,
        #[source]
        source: RunError,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed results CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

impl HarnessError {
    /// Whether the failure is a validation problem (bad input) rather than a
    /// runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::Dataset(_) | HarnessError::Csv(_))
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Vacdb(#[from] VacdbError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Cov(#[from] crate::ellipsoid::CovError),
}

/// Where arm sets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmSource {
    /// All `2^d` vertices of `{−1, 1}^d`.
    Hypercube,
    /// `K` uniform points on the unit sphere.
    Sphere(usize),
    /// Embeddings of a fitted model JSON file; its direction becomes `θ*`.
    Fitted(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoName {
    Vacdb,
    Maxinp,
    Maxpairucb,
    Colstim,
}

impl AlgoName {
    pub fn as_str(self) -> &'static str {
        match self {
            AlgoName::Vacdb => "vacdb",
            AlgoName::Maxinp => "maxinp",
            AlgoName::Maxpairucb => "maxpairucb",
            AlgoName::Colstim => "colstim",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "vacdb" => Some(AlgoName::Vacdb),
            "maxinp" => Some(AlgoName::Maxinp),
            "maxpairucb" => Some(AlgoName::Maxpairucb),
            "colstim" => Some(AlgoName::Colstim),
            _ => None,
        }
    }
}

/// One roster entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub name: AlgoName,
    /// Name written to the `algo` column; defaults to `name`.
    pub label: String,
    pub radius_scale: f64,
    /// Ridge regularizer of the single-layer baselines.
    pub lambda: f64,
    /// Gumbel perturbation scale (CoLSTIM only; 0 gives Sta'D's rule).
    pub perturbation: f64,
    /// Exploitation threshold override for VACDB; `None` means `T^{−3/2}`.
    pub alpha: Option<f64>,
    /// Multiply VACDB's initial covariance regularizer by `κ_μ`.
    pub kappa_in_regularizer: bool,
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: u64,
    pub runs: usize,
    pub base_seed: u64,
    pub arm_source: ArmSource,
    /// Draw a fresh arm set every round instead of reusing one per run.
    pub resample_arms: bool,
    pub scales: Vec<f64>,
    pub link: Link,
    pub delta: f64,
    pub deterministic: bool,
    /// Draw `θ*` per run; when false every run shares one direction.
    pub theta_per_run: bool,
    pub solver: SolverOptions,
    pub algorithms: Vec<AlgorithmSpec>,
    pub output: Option<PathBuf>,
}

const TOP_LEVEL_KEYS: [&str; 15] = [
    "d",
    "T",
    "runs",
    "base_seed",
    "arm_source",
    "resample_arms",
    "scale",
    "scales",
    "link",
    "delta",
    "deterministic",
    "theta_per_run",
    "solver",
    "algorithms",
    "output",
];
const ALGO_KEYS: [&str; 7] = [
    "name",
    "label",
    "radius_scale",
    "lambda",
    "perturbation",
    "alpha",
    "kappa_in_regularizer",
];

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut cfg = parse_config(&text)?;
    // Relative model paths are resolved against the config's directory.
    if let ArmSource::Fitted(p) = &cfg.arm_source {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.arm_source = ArmSource::Fitted(dir.join(p));
            }
        }
    }
    Ok(cfg)
}

fn get_u64(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Option<u64>, ConfigError> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| field_err(key, format!("expected a nonnegative integer, got {v}"))),
    }
}

fn get_f64(obj: &serde_json::Map<String, Value>, key: &str, field: &str) -> Result<Option<f64>, ConfigError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| field_err(field, format!("expected a number, got {v}"))),
    }
}

fn get_bool(obj: &serde_json::Map<String, Value>, key: &str, field: &str) -> Result<Option<bool>, ConfigError> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_bool()
            .map(Some)
            .ok_or_else(|| field_err(field, format!("expected true or false, got {v}"))),
    }
}

/// Parses and validates a JSON config, filling defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let root: Value = serde_json::from_str(text)?;
    let obj = root
        .as_object()
        .ok_or_else(|| field_err("<root>", "expected a JSON object"))?;
    if let Some(k) = obj.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
        return Err(field_err(k.clone(), format!("unknown field (known: {})", TOP_LEVEL_KEYS.join(", "))));
    }

    let d = get_u64(obj, "d")?.ok_or_else(|| field_err("d", "required"))? as usize;
    if d == 0 {
        return Err(field_err("d", "must be at least 1"));
    }
    let horizon = get_u64(obj, "T")?.ok_or_else(|| field_err("T", "required"))?;
    if horizon == 0 {
        return Err(field_err("T", "must be at least 1"));
    }
    let runs = get_u64(obj, "runs")?.ok_or_else(|| field_err("runs", "required"))? as usize;
    if runs == 0 {
        return Err(field_err("runs", "must be at least 1"));
    }
    let base_seed = get_u64(obj, "base_seed")?.unwrap_or(0);

    let arm_source = match obj.get("arm_source") {
        None => ArmSource::Hypercube,
        Some(v) => serde_json::from_value::<ArmSource>(v.clone()).map_err(|e| {
            field_err(
                "arm_source",
                format!("expected \"hypercube\", {{\"sphere\": K}} or {{\"fitted\": path}} ({e})"),
            )
        })?,
    };
    match &arm_source {
        ArmSource::Hypercube if d > crate::env::MAX_HYPERCUBE_DIM => {
            return Err(field_err("arm_source", format!("hypercube needs d <= {}", crate::env::MAX_HYPERCUBE_DIM)))
        }
        ArmSource::Sphere(0) => return Err(field_err("arm_source", "sphere needs at least one arm")),
        _ => {}
    }
    let resample_arms = get_bool(obj, "resample_arms", "resample_arms")?.unwrap_or(false);
    if resample_arms && !matches!(arm_source, ArmSource::Sphere(_)) {
        return Err(field_err("resample_arms", "only sphere arm sets can be resampled"));
    }

    let scale_key = if obj.contains_key("scales") { "scales" } else { "scale" };
    let scales = match obj.get(scale_key) {
        None => vec![1.0],
        Some(Value::Array(a)) => a
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| field_err(scale_key, format!("expected numbers, got {v}"))))
            .collect::<Result<Vec<_>, _>>()?,
        Some(v) => vec![v
            .as_f64()
            .ok_or_else(|| field_err(scale_key, format!("expected a number or list of numbers, got {v}")))?],
    };
    if scales.is_empty() {
        return Err(field_err(scale_key, "must not be empty"));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(field_err(scale_key, format!("entries must be positive, got {s}")));
    }

    let link = match obj.get("link") {
        None => Link::Logistic,
        Some(Value::String(s)) => Link::from_name(s).map_err(|e| field_err("link", e.to_string()))?,
        Some(v) => return Err(field_err("link", format!("expected a string, got {v}"))),
    };
    let delta = get_f64(obj, "delta", "delta")?.unwrap_or(0.01);
    if !(delta > 0.0 && delta < 1.0) {
        return Err(field_err("delta", format!("must lie in (0, 1), got {delta}")));
    }
    let deterministic = get_bool(obj, "deterministic", "deterministic")?.unwrap_or(false);
    let theta_per_run = get_bool(obj, "theta_per_run", "theta_per_run")?.unwrap_or(true);

    let mut solver = SolverOptions::default();
    if let Some(v) = obj.get("solver") {
        let s = v.as_object().ok_or_else(|| field_err("solver", "expected an object"))?;
        if let Some(tol) = get_f64(s, "tol", "solver.tol")? {
            if !(tol > 0.0) {
                return Err(field_err("solver.tol", "must be positive"));
            }
            solver.tol = tol;
        }
        if let Some(m) = get_u64(s, "max_iter").map_err(|_| field_err("solver.max_iter", "expected a positive integer"))? {
            if m == 0 {
                return Err(field_err("solver.max_iter", "must be positive"));
            }
            solver.max_iter = m as usize;
        }
    }

    let algos = match obj.get("algorithms") {
        Some(Value::Array(a)) if !a.is_empty() => a,
        Some(Value::Array(_)) => return Err(field_err("algorithms", "must list at least one algorithm")),
        Some(_) => return Err(field_err("algorithms", "expected a list")),
        None => return Err(field_err("algorithms", "required")),
    };
    let mut algorithms = Vec::with_capacity(algos.len());
    for (i, a) in algos.iter().enumerate() {
        let f = |k: &str| format!("algorithms[{i}].{k}");
        let a = a.as_object().ok_or_else(|| field_err(format!("algorithms[{i}]"), "expected an object"))?;
        if let Some(k) = a.keys().find(|k| !ALGO_KEYS.contains(&k.as_str())) {
            return Err(field_err(f(k), format!("unknown field (known: {})", ALGO_KEYS.join(", "))));
        }
        let name_str = a
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| field_err(f("name"), "required string"))?;
        let name = AlgoName::parse(name_str).ok_or_else(|| {
            field_err(f("name"), format!("unknown algorithm {name_str:?} (roster: {})", ROSTER.join(", ")))
        })?;
        let label = match a.get("label") {
            None => name.as_str().to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(v) => return Err(field_err(f("label"), format!("expected a string, got {v}"))),
        };
        if label.is_empty() || label.contains([',', '"', '\n', '\r']) {
            return Err(field_err(f("label"), "must be non-empty without commas, quotes or newlines"));
        }
        let radius_scale = get_f64(a, "radius_scale", &f("radius_scale"))?.unwrap_or(1.0);
        if !(radius_scale > 0.0 && radius_scale.is_finite()) {
            return Err(field_err(f("radius_scale"), "must be positive"));
        }
        let lambda = get_f64(a, "lambda", &f("lambda"))?.unwrap_or(DEFAULT_LAMBDA);
        if !(lambda > 0.0) {
            return Err(field_err(f("lambda"), "must be positive"));
        }
        let perturbation = get_f64(a, "perturbation", &f("perturbation"))?.unwrap_or(1.0);
        if !(perturbation >= 0.0) {
            return Err(field_err(f("perturbation"), "must be nonnegative"));
        }
        let alpha = get_f64(a, "alpha", &f("alpha"))?;
        if let Some(al) = alpha {
            if !(al > 0.0 && al < 1.0) {
                return Err(field_err(f("alpha"), "must lie in (0, 1)"));
            }
        }
        let kappa_in_regularizer = get_bool(a, "kappa_in_regularizer", &f("kappa_in_regularizer"))?.unwrap_or(true);
        algorithms.push(AlgorithmSpec {
            name,
            label,
            radius_scale,
            lambda,
            perturbation,
            alpha,
            kappa_in_regularizer,
        });
    }
    for (i, a) in algorithms.iter().enumerate() {
        if algorithms[..i].iter().any(|b| b.label == a.label) {
            return Err(field_err(format!("algorithms[{i}].label"), format!("duplicate label {:?}", a.label)));
        }
    }

    let output = match obj.get("output") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(v) => return Err(field_err("output", format!("expected a path string, got {v}"))),
    };

    Ok(ExperimentConfig {
        d,
        horizon,
        runs,
        base_seed,
        arm_source,
        resample_arms,
        scales,
        link,
        delta,
        deterministic,
        theta_per_run,
        solver,
        algorithms,
        output,
    })
}

/// One round of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: usize,
    pub algo: Arc<str>,
    pub scale: f64,
    pub t: u64,
    pub inst_regret: f64,
    pub cum_regret: f64,
    /// Layer that decided the round (VACDB only).
    pub layer: Option<usize>,
    /// `exploit` or `explore` (VACDB only).
    pub branch: Option<&'static str>,
    /// `|Ψ_ℓ|` of the deciding layer after the update (VACDB only).
    pub psi_len: Option<usize>,
    /// `β̂_ℓ` of the deciding layer after the update (VACDB only).
    pub beta_hat: Option<f64>,
}

/// SplitMix64 finalizer; a fixed, platform-independent mixing function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `(scale, run)` cell: `base_seed ⊕ hash(scale, run)`.
pub fn cell_seed(base_seed: u64, scale: f64, run: usize) -> u64 {
    base_seed ^ mix64(mix64(scale.to_bits()) ^ run as u64)
}

#[derive(Clone, Copy)]
enum Stream {
    Theta = 1,
    Arms = 2,
    Duels = 3,
    Learner = 4,
}

fn stream_seed(seed: u64, stream: Stream, extra: u64) -> u64 {
    mix64(seed ^ mix64((stream as u64) << 32 | extra))
}

/// Environment of one `(scale, run)` cell.
pub struct CellEnv {
    pub instance: Instance,
    pub arms: Vec<DVector<f64>>,
    pub env_seed: u64,
    pub arm_seed: u64,
    pub cell_seed: u64,
}

/// Builds the environment of cell `(scale, run)`. The direction of `θ*` depends
/// only on the run, so the scales of one run share it.
pub fn build_cell_env(
    cfg: &ExperimentConfig,
    fitted: Option<&FittedModel>,
    scale: f64,
    run: usize,
) -> Result<CellEnv, RunError> {
    let seed = cell_seed(cfg.base_seed, scale, run);
    let theta_seed = if cfg.theta_per_run {
        stream_seed(cfg.base_seed, Stream::Theta, run as u64)
    } else {
        stream_seed(cfg.base_seed, Stream::Theta, u64::MAX)
    };
    let arm_seed = stream_seed(seed, Stream::Arms, 0);
    let (instance, arms) = match (&cfg.arm_source, fitted) {
        (ArmSource::Fitted(_), Some(model)) => {
            let (inst, arms) = instance_from_fit(model, cfg.link)?;
            let inst = Instance::from_direction(inst.theta_star, scale, cfg.link, inst.arm_bound, cfg.deterministic)?;
            (inst, arms)
        }
        (ArmSource::Sphere(k), _) => {
            let mut rng = ChaCha8Rng::seed_from_u64(arm_seed);
            let arms = sphere_arms(*k, cfg.d, &mut rng)?;
            let inst = make_instance(cfg.d, scale, cfg.link, theta_seed, cfg.deterministic)?.with_arm_bound(1.0);
            (inst, arms)
        }
        _ => {
            let arms = hypercube_arms(cfg.d)?;
            let inst = make_instance(cfg.d, scale, cfg.link, theta_seed, cfg.deterministic)?;
            (inst, arms)
        }
    };
    Ok(CellEnv {
        instance,
        arms,
        env_seed: stream_seed(seed, Stream::Duels, 0),
        arm_seed,
        cell_seed: seed,
    })
}

/// Slope bounds a learner uses: computed from the arm bound alone, since the
/// learner does not know `‖θ*‖`.
pub fn learner_bounds(link: Link, arm_bound: f64) -> SlopeBounds {
    slope_bounds(link, arm_bound)
}

enum Learner {
    Vacdb(VacdbState),
    Single {
        name: AlgoName,
        state: SingleLayerState,
        perturbation: f64,
        rng: ChaCha8Rng,
    },
}

struct Choice {
    x: usize,
    y: usize,
    vacdb: Option<crate::vacdb::Decision>,
}

impl Learner {
    fn new(
        spec: &AlgorithmSpec,
        cfg: &ExperimentConfig,
        bounds: SlopeBounds,
        learner_seed: u64,
    ) -> Result<Self, RunError> {
        Ok(match spec.name {
            AlgoName::Vacdb => {
                let mut p = AlgoParams::new(cfg.d, cfg.horizon, cfg.link, bounds)
                    .with_delta(cfg.delta)
                    .with_radius_scale(spec.radius_scale);
                if let Some(alpha) = spec.alpha {
                    p = p.with_alpha(alpha);
                }
                p.kappa_in_regularizer = spec.kappa_in_regularizer;
                p.solver = cfg.solver;
                Learner::Vacdb(VacdbState::init(p)?)
            }
            name => {
                let mut state =
                    SingleLayerState::new(cfg.d, spec.lambda, bounds.kappa_mu, cfg.delta, cfg.link, spec.radius_scale)
?;
                state.solver = cfg.solver;
                Learner::Single {
                    name,
                    state,
                    perturbation: spec.perturbation,
                    rng: ChaCha8Rng::seed_from_u64(learner_seed),
                }
            }
        })
    }

    fn choose(&mut self, arms: &[DVector<f64>], t: u64) -> Result<Choice, RunError> {
        Ok(match self {
            Learner::Vacdb(s) => {
                let d = s.choose(arms, t)?;
                Choice {
                    x: d.x_idx,
                    y: d.y_idx,
                    vacdb: Some(d),
                }
            }
            Learner::Single {
                name,
                state,
                perturbation,
                rng,
            } => {
                let (x, y) = match name {
                    AlgoName::Maxinp => state.maxinp_choose(arms),
                    AlgoName::Maxpairucb => state.maxpairucb_choose(arms),
                    AlgoName::Colstim => state.colstim_choose(arms, rng, *perturbation),
                    AlgoName::Vacdb => unreachable!(),
                };
                Choice { x, y, vacdb: None }
            }
        })
    }

    fn observe(&mut self, arms: &[DVector<f64>], choice: &Choice, o: bool, t: u64) -> Result<(), RunError> {
        match self {
            Learner::Vacdb(s) => s.observe(choice.vacdb.as_ref().expect("vacdb decision"), o, t)?,
            Learner::Single { state, .. } => state.single_update(&arms[choice.x], &arms[choice.y], o)?,
        }
        Ok(())
    }
}

/// Runs one `(scale, run, algorithm)` cell for the configured horizon.
pub fn run_cell(
    cfg: &ExperimentConfig,
    fitted: Option<&FittedModel>,
    scale: f64,
    run: usize,
    algo_index: usize,
) -> Result<Vec<RunRecord>, RunError> {
    let spec = &cfg.algorithms[algo_index];
    let env = build_cell_env(cfg, fitted, scale, run)?;
    let bounds = learner_bounds(cfg.link, env.instance.arm_bound);
    let learner_seed = stream_seed(env.cell_seed, Stream::Learner, algo_index as u64);
    let mut learner = Learner::new(spec, cfg, bounds, learner_seed)?;
    let mut duel_rng = DuelRng::seed_from_u64(env.env_seed);
    let mut arm_rng = ChaCha8Rng::seed_from_u64(env.arm_seed);
    let label: Arc<str> = Arc::from(spec.label.as_str());

    let mut arms = env.arms;
    let mut values: Vec<f64> = arms.iter().map(|a| env.instance.value(a)).collect();
    let mut best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut cum = 0.0;
    let mut out = Vec::with_capacity(cfg.horizon as usize);
    for t in 1..=cfg.horizon {
        if cfg.resample_arms && t > 1 {
            if let ArmSource::Sphere(k) = cfg.arm_source {
                arms = sphere_arms(k, cfg.d, &mut arm_rng)?;
                values = arms.iter().map(|a| env.instance.value(a)).collect();
                best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
        }
        let choice = learner.choose(&arms, t)?;
        let outcome = env.instance.duel(&arms[choice.x], &arms[choice.y], &mut duel_rng);
        let inst = average_regret(best, values[choice.x], values[choice.y]);
        cum += inst;
        learner.observe(&arms, &choice, outcome.o, t)?;

        let (layer, branch, psi_len, beta_hat) = match (&learner, &choice.vacdb) {
            (Learner::Vacdb(s), Some(d)) => {
                let ell = d.kind.layer();
                let l = s.layer(ell);
                (Some(ell), Some(d.kind.branch_name()), Some(l.psi.len()), Some(l.beta_hat))
            }
            _ => (None, None, None, None),
        };
        out.push(RunRecord {
            run_id: run,
            algo: label.clone(),
            scale,
            t,
            inst_regret: inst,
            cum_regret: cum,
            layer,
            branch,
            psi_len,
            beta_hat,
        });
    }
    Ok(out)
}

/// Resolves the worker count: explicit value, then `DUELBENCH_JOBS`, then 1.
pub fn resolve_jobs(jobs: Option<usize>) -> usize {
    jobs.or_else(|| std::env::var(JOBS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1)
}

/// Loads the fitted model named by the config's arm source, if any.
pub fn load_fitted(cfg: &ExperimentConfig) -> Result<Option<FittedModel>, HarnessError> {
    match &cfg.arm_source {
        ArmSource::Fitted(path) => {
            let model = FittedModel::load(path)?;
            if model.d != cfg.d {
                return Err(field_err("d", format!("fitted model has d = {}, config has d = {}", model.d, cfg.d)).into());
            }
            Ok(Some(model))
        }
        _ => Ok(None),
    }
}

/// Runs every `(scale, run, algorithm)` cell on `jobs` workers and returns the
/// records ordered by scale, run, algorithm and round.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunRecord>, HarnessError> {
    let fitted = load_fitted(cfg)?;
    let cells: Vec<(f64, usize, usize)> = cfg
        .scales
        .iter()
        .flat_map(|&s| (0..cfg.runs).flat_map(move |r| (0..cfg.algorithms.len()).map(move |a| (s, r, a))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let results: Vec<Vec<RunRecord>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(scale, run, a)| {
                run_cell(cfg, fitted.as_ref(), scale, run, a).map_err(|source| HarnessError::Run {
                    run,
                    scale,
                    algo: cfg.algorithms[a].label.clone(),
                    source,
                })
            })
            .collect::<Result<_, _>>()
    })?;
    Ok(results.into_iter().flatten().collect())
}

/// Ten significant digits in scientific notation.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.9e}")
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let context = context.into();
    move |source| HarnessError::Io { context, source }
}

/// Writes records in the order given, under [`CSV_HEADER`].
pub fn write_csv_to(records: &[RunRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    let mut line = String::with_capacity(128);
    for r in records {
        line.clear();
        let _ = write!(
            line,
            "{},{},{},{},{},{},",
            r.run_id,
            r.algo,
            fmt_float(r.scale),
            r.t,
            fmt_float(r.inst_regret),
            fmt_float(r.cum_regret)
        );
        if let Some(l) = r.layer {
            let _ = write!(line, "{l}");
        }
        line.push(',');
        if let Some(b) = r.branch {
            line.push_str(b);
        }
        writeln!(w, "{line}")?;
    }
    w.flush()
}

pub fn write_csv(records: &[RunRecord], path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(format!("cannot create {}", path.display())))?;
    write_csv_to(records, BufWriter::new(file)).map_err(io_err(format!("cannot write {}", path.display())))
}

/// Per-round diagnostics of VACDB records as JSON lines.
pub fn write_trace(records: &[RunRecord], path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(format!("cannot create {}", path.display())))?;
    let mut w = BufWriter::new(file);
    for r in records.iter().filter(|r| r.layer.is_some()) {
        let v = serde_json::json!({
            "run_id": r.run_id,
            "algo": &*r.algo,
            "scale": r.scale,
            "t": r.t,
            "layer": r.layer,
            "branch": r.branch,
            "psi_len": r.psi_len,
            "beta_hat": r.beta_hat,
        });
        writeln!(w, "{v}").map_err(io_err(format!("cannot write {}", path.display())))?;
    }
    w.flush().map_err(io_err(format!("cannot write {}", path.display())))
}

/// A row read back from a results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub run_id: usize,
    pub algo: String,
    pub scale: f64,
    pub t: u64,
    pub inst_regret: f64,
    pub cum_regret: f64,
    pub layer: Option<usize>,
    pub branch: Option<String>,
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>, HarnessError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(format!("cannot open {}", path.display())))?;
    read_csv_from(file)
}

pub fn read_csv_from(reader: impl std::io::Read) -> Result<Vec<CsvRow>, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| HarnessError::Csv(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(HarnessError::Csv(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| HarnessError::Csv(e.to_string()))?;
        let bad = |col: &str| HarnessError::Csv(format!("data row {}: bad {col}", n + 1));
        let num = |i: usize, col: &str| rec[i].parse::<f64>().map_err(|_| bad(col));
        rows.push(CsvRow {
            run_id: rec[0].parse().map_err(|_| bad("run_id"))?,
            algo: rec[1].to_string(),
            scale: num(2, "scale")?,
            t: rec[3].parse().map_err(|_| bad("t"))?,
            inst_regret: num(4, "inst_regret")?,
            cum_regret: num(5, "cum_regret")?,
            layer: if rec[6].is_empty() {
                None
            } else {
                Some(rec[6].parse().map_err(|_| bad("layer"))?)
            },
            branch: if rec[7].is_empty() { None } else { Some(rec[7].to_string()) },
        });
    }
    Ok(rows)
}

/// Final cumulative regret statistics of one `(algo, scale)` group.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub algo: String,
    pub scale: f64,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation (zero for a single run).
    pub std: f64,
    /// Standard error of the mean.
    pub stderr: f64,
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "algo={} scale={} runs={} final_cum_regret={:.4} ± {:.4} (se {:.4})",
            self.algo, self.scale, self.runs, self.mean, self.std, self.stderr
        )
    }
}

/// Groups rows by `(algo, scale)` in order of first appearance and summarizes the
/// last-round cumulative regret of every run.
pub fn summarize(rows: &[CsvRow]) -> Vec<Summary> {
    let mut groups: Vec<(String, f64, Vec<(usize, u64, f64)>)> = Vec::new();
    for r in rows {
        let g = match groups.iter_mut().position(|g| g.0 == r.algo && g.1 == r.scale) {
            Some(i) => &mut groups[i],
            None => {
                groups.push((r.algo.clone(), r.scale, Vec::new()));
                groups.last_mut().unwrap()
            }
        };
        match g.2.iter_mut().find(|(id, _, _)| *id == r.run_id) {
            Some(e) if r.t >= e.1 => {
                e.1 = r.t;
                e.2 = r.cum_regret;
            }
            Some(_) => {}
            None => g.2.push((r.run_id, r.t, r.cum_regret)),
        }
    }
    groups
        .into_iter()
        .map(|(algo, scale, finals)| {
            let v: Vec<f64> = finals.iter().map(|f| f.2).collect();
            let (mean, std) = mean_std(&v);
            Summary {
                algo,
                scale,
                runs: v.len(),
                mean,
                std,
                stderr: std / (v.len() as f64).sqrt(),
            }
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Final cumulative regret of every run of `algo` at `scale`, indexed by run id.
pub fn final_regrets(records: &[RunRecord], algo: &str, scale: f64) -> Vec<f64> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    let mut last_t: Vec<u64> = Vec::new();
    for r in records.iter().filter(|r| &*r.algo == algo && r.scale == scale) {
        match out.iter().position(|(id, _)| *id == r.run_id) {
            Some(i) if r.t >= last_t[i] => {
                out[i].1 = r.cum_regret;
                last_t[i] = r.t;
            }
            Some(_) => {}
            None => {
                out.push((r.run_id, r.cum_regret));
                last_t.push(r.t);
            }
        }
    }
    out.sort_by_key(|(id, _)| *id);
    out.into_iter().map(|(_, v)| v).collect()
}
