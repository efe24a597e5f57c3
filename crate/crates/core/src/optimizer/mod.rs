//! Solvers for the basic model, the mean–variance model and its relaxation.

pub mod basic;
pub mod engine;
pub mod quadratic;
pub mod relaxed;
pub mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{ConstraintError, FeasibilityReport};
use crate::contracts::ContractError;
use crate::forms::FormsError;
use crate::portfolio::{PortfolioError, PortfolioVariable};
use crate::tree::AdaptedProcess;

pub use basic::{solve_basic, BasicConfig};
pub use quadratic::{solve_quadratic_model, BetaPattern};
pub use relaxed::{solve_relaxed, RelaxedConfig};
pub use engine::{bound_multipliers, kkt_residual, ConvexProblem, EngineResult, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
    NumericalFailure,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Optimal => "optimal",
            Status::Infeasible => "infeasible",
            Status::Unbounded => "unbounded",
            Status::MaxIter => "max_iter",
            Status::NumericalFailure => "numerical_failure",
        }
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Stationarity/complementarity tolerance for `optimal`.
    pub kkt_tol: f64,
    /// Slack tolerance.
    pub feas_tol: f64,
    /// Phase-1 threshold above which a problem is infeasible.
    pub phase1_tol: f64,
    /// Total inner iterations.
    pub max_iter: usize,
    pub max_outer: usize,
    pub max_inner: usize,
    pub rho0: f64,
    pub rho_max: f64,
    pub prox_min: f64,
    pub unbounded_norm: f64,
    /// Random starts for uniqueness checks.
    pub starts: usize,
    pub seed: u64,
    /// Cessation patterns enumerated before switching to alternation.
    pub enumeration_cap: usize,
    /// Largest decision vector handled by the dense solver.
    pub max_dim: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-7,
            feas_tol: 1e-9,
            phase1_tol: 1e-7,
            max_iter: 100_000,
            max_outer: 2_000,
            max_inner: 200,
            rho0: 10.0,
            rho_max: 1e10,
            prox_min: 1e-8,
            unbounded_norm: 1e9,
            starts: 10,
            seed: 0,
            enumeration_cap: 4096,
            max_dim: 2000,
        }
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Portfolio(#[from] PortfolioError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Forms(#[from] FormsError),
    #[error("decision vector of dimension {dim} exceeds the cap {cap}")]
    DimensionCap { dim: usize, cap: usize },
    #[error("precondition failed: {name}: {detail}")]
    Precondition { name: &'static str, detail: String },
    #[error("invalid solver input: {0}")]
    Input(String),
}

/// Multiplier of one constraint at the returned point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Multiplier {
    pub label: Label,
    pub value: f64,
    /// `−g(x)` for inequalities, `−|h(x)|` for equalities.
    pub slack: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub problem: &'static str,
    pub status: Status,
    /// Set when the cessation pattern or dividend regime came from a
    /// heuristic rather than exhaustive enumeration.
    pub heuristic: bool,
    /// `E U(∞, x̂ + ξ)`.
    pub objective: f64,
    /// Decision vector in solver coordinates.
    pub x: Vec<f64>,
    pub eta: Option<AdaptedProcess>,
    pub portfolio: Option<PortfolioVariable>,
    pub multipliers: Vec<Multiplier>,
    /// Nonzero multipliers of active bounds `(index, value)`.
    pub bound_multipliers: Vec<(usize, f64)>,
    pub kkt_residual: f64,
    pub min_slack: f64,
    pub iterations: usize,
    /// Largest `H`-distance between multi-start solutions.
    pub starts_spread: Option<f64>,
    /// Sum-preserving directions in `(K⃗(0), D⃗)`, each of length
    /// `ℵ + ℵ·(#nodes − 1)` (K0 first, then D per node and subsidiary).
    pub degeneracy_basis: Vec<Vec<f64>>,
    /// Largest change of objective or slack along sampled basis directions.
    pub degeneracy_deviation: Option<f64>,
    pub patterns_tried: usize,
    pub feasibility: Option<FeasibilityReport>,
    pub notes: Vec<String>,
}

impl SolveReport {
    pub fn new(problem: &'static str, status: Status) -> Self {
        Self {
            problem,
            status,
            heuristic: false,
            objective: f64::NAN,
            x: vec![],
            eta: None,
            portfolio: None,
            multipliers: vec![],
            bound_multipliers: vec![],
            kkt_residual: f64::INFINITY,
            min_slack: f64::NEG_INFINITY,
            iterations: 0,
            starts_spread: None,
            degeneracy_basis: vec![],
            degeneracy_deviation: None,
            patterns_tried: 0,
            feasibility: None,
            notes: vec![],
        }
    }

    pub fn from_engine(problem: &'static str, p: &ConvexProblem, r: &EngineResult) -> Self {
        let values = p.values(&r.x);
        let multipliers: Vec<Multiplier> = p
            .constraints
            .iter()
            .zip(&r.multipliers)
            .zip(&values)
            .map(|((c, &m), &v)| Multiplier { label: c.label.clone(), value: m, slack: if c.is_equality() { -v.abs() } else { -v } })
            .collect();
        let bound_slack = (0..p.n).map(|i| (r.x[i] - p.lower[i]).min(p.upper[i] - r.x[i])).fold(f64::INFINITY, f64::min);
        let min_slack = multipliers.iter().map(|m| m.slack).fold(bound_slack, f64::min);
        let bound_multipliers = bound_multipliers(p, &r.x, &r.multipliers)
            .into_iter()
            .enumerate()
            .filter(|(_, v)| *v != 0.0)
            .collect();
        let mut status = r.status;
        // the optimality claim is re-checked on the returned point
        let kkt = kkt_residual(p, &r.x, &r.multipliers);
        if status == Status::Optimal && (kkt > 1e-7 || min_slack < -crate::constraints::FEAS_TOL) {
            status = Status::MaxIter;
        }
        Self {
            objective: r.objective,
            x: r.x.iter().copied().collect(),
            multipliers,
            bound_multipliers,
            kkt_residual: kkt,
            min_slack,
            iterations: r.iterations,
            ..Self::new(problem, status)
        }
    }
}
