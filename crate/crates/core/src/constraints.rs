//! Constraint evaluation: budgets, ROE floor, ruin and non-solvency
//! probabilities, their mean–variance replacements, market bounds,
//! supplementary dividend/equity constraints and the cessation rule.
//!
//! Every evaluation works on a fixed portfolio and reports slacks, where a
//! nonnegative slack means satisfied (up to [`FEAS_TOL`]).

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contracts::{ContractUniverse, Runoff};
use crate::portfolio::{
    delta_utility_processes, dividend_eval, equity_paths, DividendPolicy, EquityPaths, PortfolioError, PortfolioVariable,
};
use crate::tree::{AdaptedProcess, RandomVariable, TreeError};

/// Absolute tolerance on slacks.
pub const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error(transparent)]
    Portfolio(#[from] PortfolioError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("invalid constraint configuration: {0}")]
    Config(String),
    #[error("inconsistent market bounds for subsidiary {j}, type {i} at node {node}: lower {lower} > upper {upper}")]
    MarketBounds { j: usize, i: usize, node: usize, lower: f64, upper: f64 },
    #[error("containment hypothesis violated: {0}")]
    EpsilonSum(String),
    #[error("unknown subsidiary {0} in a supplementary constraint")]
    UnknownFunctional(usize),
    #[error("depth {0} beyond the horizon")]
    Depth(usize),
}

/// A per-time parameter: a constant or a list whose last value repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Constant(f64),
    PerTime(Vec<f64>),
}

impl Schedule {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::PerTime(v) => v.get(t).or(v.last()).copied().unwrap_or(0.0),
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Schedule::Constant(v) => vec![*v],
            Schedule::PerTime(v) => v.clone(),
        }
    }
}

impl From<f64> for Schedule {
    fn from(v: f64) -> Self {
        Schedule::Constant(v)
    }
}

/// Solvency margin `m^{(j)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarginSpec {
    #[default]
    Zero,
    /// `κ` times the volume written in the previous period (run-off written
    /// at `k = −1` for `t = 0`).
    VolumeProportional { kappa: f64 },
    /// Explicit value per node id.
    Table { values: Vec<f64> },
}

/// Market bounds on the underwriting levels of one subsidiary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarketBounds {
    Constant {
        #[serde(default)]
        lower: f64,
        #[serde(default)]
        upper: Option<f64>,
    },
    /// Bounds at `t = 0` as given, afterwards proportional to the level
    /// written one period earlier.
    Proportional {
        #[serde(default)]
        initial_lower: f64,
        #[serde(default)]
        initial_upper: Option<f64>,
        #[serde(default)]
        lower_factor: f64,
        #[serde(default)]
        upper_factor: Option<f64>,
    },
}

impl Default for MarketBounds {
    fn default() -> Self {
        MarketBounds::Constant { lower: 0.0, upper: None }
    }
}

impl MarketBounds {
    /// `(lower, upper)` at a node given the parent's level (`None` at the root).
    pub fn at(&self, previous: Option<f64>) -> (f64, f64) {
        match (self, previous) {
            (MarketBounds::Constant { lower, upper }, _) => (*lower, upper.unwrap_or(f64::INFINITY)),
            (MarketBounds::Proportional { initial_lower, initial_upper, .. }, None) => {
                (*initial_lower, initial_upper.unwrap_or(f64::INFINITY))
            }
            (MarketBounds::Proportional { lower_factor, upper_factor, .. }, Some(prev)) => {
                (lower_factor * prev, upper_factor.map_or(f64::INFINITY, |f| f * prev))
            }
        }
    }
}

/// Supplementary constraint `F ≤ C`, affine in `(α, K⃗(0), D⃗)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Functional {
    /// `|D^{(j)}(t)| ≤ 0` on every node.
    ZeroDividends { j: usize },
    /// `−K^{(j)}(0) ≤ −floor`.
    InitialEquityFloor { j: usize, floor: f64 },
    /// `Σ_t E D^{(j)}(t) ≤ cap`, summed over all subsidiaries when `j` is absent.
    ExpectedDividendCap {
        #[serde(default)]
        j: Option<usize>,
        cap: f64,
    },
    /// `Σ_j a_j K^{(j)}(0) + Σ_j b_j Σ_t E D^{(j)}(t) + Σ_i c_i Σ_t E α_i(t) ≤ cap`.
    Affine {
        #[serde(default)]
        k0: Vec<f64>,
        #[serde(default)]
        dividends: Vec<f64>,
        #[serde(default)]
        alpha: Vec<f64>,
        cap: f64,
    },
}

/// What a subsidiary does when its margin is met with equality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZeroMarginRule {
    #[default]
    Continue,
    Cease,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    /// Initial equity `K(0)` of the holding.
    #[serde(default)]
    pub k0: f64,
    /// ROE floor `c(t)`.
    #[serde(default = "zero_schedule")]
    pub roe_floor: Schedule,
    /// Acceptable ruin probability `ε(t)` of the holding.
    #[serde(default = "one_schedule")]
    pub ruin_tol: Schedule,
    /// Acceptable non-solvency probabilities `ε^{(j)}(t)` (one entry is broadcast).
    #[serde(default)]
    pub ruin_tol_sub: Vec<Schedule>,
    /// `ε′(t)`; the holding's mean–variance constraint is imposed when set.
    #[serde(default)]
    pub eps_quad: Option<Schedule>,
    /// `δ(t) > 0`.
    #[serde(default)]
    pub delta: Option<Schedule>,
    #[serde(default)]
    pub eps_quad_sub: Vec<Schedule>,
    #[serde(default)]
    pub delta_sub: Vec<Schedule>,
    /// Solvency margins per subsidiary (one entry is broadcast, none means zero).
    #[serde(default)]
    pub margin: Vec<MarginSpec>,
    /// Market bounds per subsidiary (one entry is broadcast, none means `η ≥ 0`).
    #[serde(default)]
    pub market: Vec<MarketBounds>,
    #[serde(default)]
    pub supplementary: Vec<Functional>,
    #[serde(default)]
    pub zero_margin_rule: ZeroMarginRule,
    /// Cap `c < 1` in `V(Σ D) ≤ c² V(U(∞))`.
    #[serde(default = "default_vol_cap")]
    pub dividend_vol_cap: f64,
}

fn zero_schedule() -> Schedule {
    Schedule::Constant(0.0)
}

fn one_schedule() -> Schedule {
    Schedule::Constant(1.0)
}

fn default_vol_cap() -> f64 {
    0.99
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            k0: 0.0,
            roe_floor: zero_schedule(),
            ruin_tol: one_schedule(),
            ruin_tol_sub: vec![],
            eps_quad: None,
            delta: None,
            eps_quad_sub: vec![],
            delta_sub: vec![],
            margin: vec![],
            market: vec![],
            supplementary: vec![],
            zero_margin_rule: ZeroMarginRule::Continue,
            dividend_vol_cap: default_vol_cap(),
        }
    }
}

fn broadcast<T>(v: &[T], j: usize) -> Option<&T> {
    match v.len() {
        0 => None,
        1 => v.first(),
        _ => v.get(j),
    }
}

impl ConstraintConfig {
    pub fn validate(&self, aleph: usize) -> Result<(), ConstraintError> {
        let err = |m: String| Err(ConstraintError::Config(m));
        if !(self.k0 >= 0.0) || !self.k0.is_finite() {
            return err(format!("K(0) must be finite and nonnegative, got {}", self.k0));
        }
        if self.roe_floor.values().iter().any(|&c| !(c >= 0.0)) {
            return err("ROE floor c(t) must be nonnegative".into());
        }
        let in_unit = |s: &Schedule| s.values().iter().all(|&e| (0.0..=1.0).contains(&e));
        if !in_unit(&self.ruin_tol) || !self.ruin_tol_sub.iter().all(in_unit) {
            return err("ruin tolerances must lie in [0, 1]".into());
        }
        if self.eps_quad.is_some() != self.delta.is_some() {
            return err("eps_quad and delta must be given together".into());
        }
        if self.eps_quad_sub.is_empty() != self.delta_sub.is_empty() {
            return err("eps_quad_sub and delta_sub must be given together".into());
        }
        let nonneg = |s: &Schedule| s.values().iter().all(|&e| e >= 0.0 && e.is_finite());
        let positive = |s: &Schedule| s.values().iter().all(|&d| d > 0.0 && d.is_finite());
        if !self.eps_quad.iter().chain(&self.eps_quad_sub).all(nonneg) {
            return err("ε′ must be nonnegative".into());
        }
        if !self.delta.iter().chain(&self.delta_sub).all(positive) {
            return err("δ must be strictly positive".into());
        }
        for (name, len) in [
            ("ruin_tol_sub", self.ruin_tol_sub.len()),
            ("eps_quad_sub", self.eps_quad_sub.len()),
            ("delta_sub", self.delta_sub.len()),
            ("margin", self.margin.len()),
            ("market", self.market.len()),
        ] {
            if len > 1 && len != aleph {
                return err(format!("{name} has {len} entries for {aleph} subsidiaries"));
            }
        }
        for m in &self.market {
            let (lo, lo_f) = match m {
                MarketBounds::Constant { lower, .. } => (*lower, 0.0),
                MarketBounds::Proportional { initial_lower, lower_factor, .. } => (*initial_lower, *lower_factor),
            };
            if lo < 0.0 || lo_f < 0.0 {
                return err("market lower bounds must be nonnegative".into());
            }
        }
        for m in &self.margin {
            if let MarginSpec::VolumeProportional { kappa } = m {
                if !kappa.is_finite() {
                    return err("margin coefficient must be finite".into());
                }
            }
        }
        for f in &self.supplementary {
            match f {
                Functional::ZeroDividends { j } | Functional::InitialEquityFloor { j, .. }
                | Functional::ExpectedDividendCap { j: Some(j), .. }
                    if *j >= aleph =>
                {
                    return Err(ConstraintError::UnknownFunctional(*j));
                }
                _ => {}
            }
        }
        if !(0.0..1.0).contains(&self.dividend_vol_cap) {
            return err(format!("dividend volatility cap must lie in [0, 1), got {}", self.dividend_vol_cap));
        }
        Ok(())
    }

    pub fn margin_spec(&self, j: usize) -> MarginSpec {
        broadcast(&self.margin, j).cloned().unwrap_or_default()
    }

    pub fn market_bounds(&self, j: usize) -> MarketBounds {
        broadcast(&self.market, j).cloned().unwrap_or_default()
    }

    pub fn ruin_tol_sub_at(&self, j: usize, t: usize) -> f64 {
        broadcast(&self.ruin_tol_sub, j).map_or(1.0, |s| s.at(t))
    }

    /// `(ε′^{(j)}(t), δ^{(j)}(t))` when the subsidiary constraint is imposed.
    pub fn quad_sub_at(&self, j: usize, t: usize) -> Option<(f64, f64)> {
        Some((broadcast(&self.eps_quad_sub, j)?.at(t), broadcast(&self.delta_sub, j)?.at(t)))
    }

    pub fn quad_at(&self, t: usize) -> Option<(f64, f64)> {
        Some((self.eps_quad.as_ref()?.at(t), self.delta.as_ref()?.at(t)))
    }

    /// Checks `Σ_{k≤t} ε′(k) ≤ ε(t)` (and per subsidiary) for `t ≤ horizon`.
    pub fn check_epsilon_sums(&self, aleph: usize, horizon: usize) -> Result<(), ConstraintError> {
        let tol = 1e-12;
        if let Some(eps) = &self.eps_quad {
            let mut acc = 0.0;
            for t in 0..=horizon {
                acc += eps.at(t);
                if acc > self.ruin_tol.at(t) + tol {
                    return Err(ConstraintError::EpsilonSum(format!(
                        "sum of eps_quad up to t = {t} is {acc}, exceeding ruin_tol {}",
                        self.ruin_tol.at(t)
                    )));
                }
            }
        }
        for j in 0..aleph {
            let Some(eps) = broadcast(&self.eps_quad_sub, j) else { continue };
            let mut acc = 0.0;
            for t in 0..=horizon {
                acc += eps.at(t);
                if acc > self.ruin_tol_sub_at(j, t) + tol {
                    return Err(ConstraintError::EpsilonSum(format!(
                        "sum of eps_quad_sub for subsidiary {j} up to t = {t} is {acc}, exceeding ruin_tol_sub {}",
                        self.ruin_tol_sub_at(j, t)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Solvency margins `m^{(j)}(t)` on all depths.
pub fn margins(
    universe: &ContractUniverse,
    x: &PortfolioVariable,
    xi: &Runoff,
    config: &ConstraintConfig,
) -> Result<Vec<AdaptedProcess>, ConstraintError> {
    let tree = universe.tree();
    let mut out = Vec::with_capacity(universe.aleph());
    for j in 0..universe.aleph() {
        let m = match config.margin_spec(j) {
            MarginSpec::Zero => AdaptedProcess::zeros_full(tree, 1),
            MarginSpec::VolumeProportional { kappa } => {
                let off = universe.offset(j);
                let nt = universe.n_types(j);
                let initial: f64 = xi.get(j, -1).map_or(0.0, |a| a.iter().sum());
                AdaptedProcess::from_fn(tree, 1, 0..=tree.horizon(), |n, row| {
                    row[0] = match tree.parent(n) {
                        None => kappa * initial,
                        Some(p) if tree.depth(p) <= universe.t_bar() => {
                            kappa * x.alpha.value(p)[off..off + nt].iter().sum::<f64>()
                        }
                        Some(_) => 0.0,
                    };
                })
            }
            MarginSpec::Table { values } => {
                if values.len() != tree.len() {
                    return Err(ConstraintError::Config(format!(
                        "margin table for subsidiary {j} has {} entries, the tree has {} nodes",
                        values.len(),
                        tree.len()
                    )));
                }
                AdaptedProcess::from_fn(tree, 1, 0..=tree.horizon(), |n, row| row[0] = values[n])
            }
        };
        out.push(m);
    }
    Ok(out)
}

/// Exact `Ψ(t) = P(min_{n≤t}(K(n) − m(n)) < 0)` by enumeration.
pub fn ruin_probability(k: &AdaptedProcess, m: &AdaptedProcess, t: usize) -> Result<f64, ConstraintError> {
    let tree = k.tree();
    if **m.tree() != **tree {
        return Err(TreeError::TreeMismatch.into());
    }
    if t > tree.horizon() {
        return Err(ConstraintError::Depth(t));
    }
    let run_min = running_min(k, m);
    Ok(tree.level(t).filter(|&n| run_min[n] < 0.0).map(|n| tree.abs_prob(n)).sum())
}

/// `s(n) = min over the path to n of K − m`.
pub fn running_min(k: &AdaptedProcess, m: &AdaptedProcess) -> Vec<f64> {
    let tree = k.tree();
    let mut s = vec![0.0; tree.len()];
    for n in 0..tree.len() {
        let here = k.get(n, 0) - m.get(n, 0);
        s[n] = match tree.parent(n) {
            None => here,
            Some(p) => s[p].min(here),
        };
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Entry {
    pub constraint: String,
    pub t: Option<usize>,
    pub j: Option<usize>,
    pub i: Option<usize>,
    pub value: f64,
    pub bound: f64,
    pub slack: f64,
    pub satisfied: bool,
}

impl Entry {
    fn new(constraint: &str, t: Option<usize>, j: Option<usize>, value: f64, bound: f64, slack: f64) -> Self {
        Self { constraint: constraint.into(), t, j, i: None, value, bound, slack, satisfied: slack >= -FEAS_TOL }
    }

    /// `value ≤ bound`
    fn le(constraint: &str, t: Option<usize>, j: Option<usize>, value: f64, bound: f64) -> Self {
        Self::new(constraint, t, j, value, bound, bound - value)
    }

    /// `value ≥ bound`
    fn ge(constraint: &str, t: Option<usize>, j: Option<usize>, value: f64, bound: f64) -> Self {
        Self::new(constraint, t, j, value, bound, value - bound)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub entries: Vec<Entry>,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.entries.iter().all(|e| e.satisfied)
    }

    pub fn worst(&self) -> Option<&Entry> {
        self.entries.iter().min_by(|a, b| a.slack.total_cmp(&b.slack))
    }

    pub fn min_slack(&self) -> f64 {
        self.worst().map_or(f64::INFINITY, |e| e.slack)
    }

    pub fn of(&self, constraint: &str) -> impl Iterator<Item = &Entry> {
        let c = constraint.to_string();
        self.entries.iter().filter(move |e| e.constraint == c)
    }

    pub fn extend(&mut self, other: FeasibilityReport) {
        self.entries.extend(other.entries);
    }

    /// Rows `constraint,t,j,i,value,bound,slack,satisfied`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["constraint", "t", "j", "i", "value", "bound", "slack", "satisfied"])?;
        let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
        for e in &self.entries {
            w.write_record([
                e.constraint.clone(),
                opt(e.t),
                opt(e.j),
                opt(e.i),
                e.value.to_string(),
                e.bound.to_string(),
                e.slack.to_string(),
                e.satisfied.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// All processes of one portfolio needed by the constraint families.
#[derive(Debug, Clone)]
pub struct Evaluation<'a> {
    pub universe: &'a ContractUniverse,
    pub x: &'a PortfolioVariable,
    pub config: &'a ConstraintConfig,
    pub paths: EquityPaths,
    pub margins: Vec<AdaptedProcess>,
    /// Holding dividends `D` from the policy.
    pub policy_dividends: AdaptedProcess,
    /// Aggregate results `ΔU`.
    pub aggregate_delta: AdaptedProcess,
}

fn scalar_rv(p: &AdaptedProcess, t: usize) -> RandomVariable {
    p.at_depth(t)
}

impl<'a> Evaluation<'a> {
    pub fn new(
        universe: &'a ContractUniverse,
        x: &'a PortfolioVariable,
        xi: &Runoff,
        config: &'a ConstraintConfig,
        policy: &DividendPolicy,
    ) -> Result<Self, ConstraintError> {
        config.validate(universe.aleph())?;
        let paths = equity_paths(universe, x, xi)?;
        let margins = margins(universe, x, xi, config)?;
        let tree = universe.tree();
        let du = delta_utility_processes(universe, x, xi)?;
        let aggregate_delta = AdaptedProcess::from_fn(tree, 1, 0..=tree.horizon(), |n, row| {
            row[0] = du.iter().map(|p| p.get(n, 0)).sum();
        });
        let policy_dividends = dividend_eval(policy, tree, &aggregate_delta)?;
        Ok(Self { universe, x, config, paths, margins, policy_dividends, aggregate_delta })
    }

    fn horizon(&self) -> usize {
        self.universe.horizon()
    }

    /// `K^{(j)} − m^{(j)}` on all depths.
    pub fn surplus(&self, j: usize) -> AdaptedProcess {
        self.paths.per_sub[j].lin_comb(1.0, &self.margins[j], -1.0).expect("same tree")
    }

    /// Budget identities: `K(0) = Σ K^{(j)}(0)` and `D = Σ D^{(j)}` per node.
    pub fn budget(&self) -> FeasibilityReport {
        let mut r = FeasibilityReport::default();
        let c1 = self.config.k0 - self.x.k0.iter().sum::<f64>();
        r.entries.push(Entry::new("c1", None, None, c1, 0.0, -c1.abs()));
        let tree = self.universe.tree();
        for t in 1..=self.horizon() {
            let worst = tree
                .level(t)
                .map(|n| self.policy_dividends.get(n, 0) - self.x.d.value(n).iter().sum::<f64>())
                .fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
            r.entries.push(Entry::new("c2", Some(t), None, worst, 0.0, -worst.abs()));
        }
        r
    }

    /// `E ΔU(t+1) ≥ c(t) E K(t)` for `0 ≤ t < T_max`.
    pub fn c3(&self) -> FeasibilityReport {
        let mut r = FeasibilityReport::default();
        for t in 0..self.horizon() {
            let edu = scalar_rv(&self.aggregate_delta, t + 1).expectation()[0];
            let ek = scalar_rv(&self.paths.total, t).expectation()[0];
            r.entries.push(Entry::ge("c3", Some(t), None, edu, self.config.roe_floor.at(t) * ek));
        }
        r
    }

    /// Exact ruin constraint of the holding, `Ψ(t, K, 0) ≤ ε(t)`.
    pub fn c4(&self) -> FeasibilityReport {
        let zero = AdaptedProcess::zeros_full(self.universe.tree(), 1);
        let mut r = FeasibilityReport::default();
        for t in 0..=self.horizon() {
            let psi = ruin_probability(&self.paths.total, &zero, t).expect("same tree");
            r.entries.push(Entry::le("c4", Some(t), None, psi, self.config.ruin_tol.at(t)));
        }
        r
    }

    /// Exact non-solvency constraints `Ψ^{(j)}(t) ≤ ε^{(j)}(t)`.
    pub fn c7(&self) -> FeasibilityReport {
        let mut r = FeasibilityReport::default();
        for j in 0..self.universe.aleph() {
            for t in 0..=self.horizon() {
                let psi = ruin_probability(&self.paths.per_sub[j], &self.margins[j], t).expect("same tree");
                r.entries.push(Entry::le("c7", Some(t), Some(j), psi, self.config.ruin_tol_sub_at(j, t)));
            }
        }
        r
    }

    /// Mean–variance constraints on the holding's equity.
    pub fn c4_quad(&self) -> FeasibilityReport {
        let mut r = FeasibilityReport::default();
        for t in 0..=self.horizon() {
            let Some((eps, delta)) = self.config.quad_at(t) else { break };
            let k = scalar_rv(&self.paths.total, t);
            let floor = delta * self.config.k0;
            r.entries.push(Entry::le("c4q_var", Some(t), None, k.variance(), eps * floor * floor));
            r.entries.push(Entry::ge("c4q_mean", Some(t), None, k.expectation()[0], floor));
        }
        r
    }

    /// Mean–variance constraints on each subsidiary's surplus over its margin.
    pub fn c7_quad(&self) -> FeasibilityReport {
        let mut r = FeasibilityReport::default();
        for j in 0..self.universe.aleph() {
            let s = self.surplus(j);
            for t in 0..=self.horizon() {
                let Some((eps, delta)) = self.config.quad_sub_at(j, t) else { break };
                let v = scalar_rv(&s, t);
                let floor = delta * self.config.k0;
                r.entries.push(Entry::le("c7q_var", Some(t), Some(j), v.variance(), eps * floor * floor));
                r.entries.push(Entry::ge("c7q_mean", Some(t), Some(j), v.expectation()[0], floor));
            }
        }
        r
    }

    /// Market bounds `(1 − β)(η − c̲) ≥ 0` and `(1 − β)(c̄ − η) ≥ 0`, worst
    /// node per `(j, i, t)`.
    pub fn c6(&self) -> Result<FeasibilityReport, ConstraintError> {
        let tree = self.universe.tree();
        let mut r = FeasibilityReport::default();
        for j in 0..self.universe.aleph() {
            let bounds = self.config.market_bounds(j);
            let off = self.universe.offset(j);
            for i in 0..self.universe.n_types(j) {
                for t in 0..=self.universe.t_bar() {
                    let mut lo_slack = f64::INFINITY;
                    let mut hi_slack = f64::INFINITY;
                    let (mut lo_val, mut hi_val) = (0.0, 0.0);
                    for n in tree.level(t) {
                        let prev = tree.parent(n).map(|p| self.x.alpha.get(p, off + i));
                        let (lo, hi) = bounds.at(prev);
                        if lo > hi {
                            return Err(ConstraintError::MarketBounds { j, i, node: n, lower: lo, upper: hi });
                        }
                        let on = 1.0 - self.x.beta.get(n, j);
                        let a = self.x.alpha.get(n, off + i);
                        let sl = on * (a - lo);
                        let sh = if hi.is_finite() { on * (hi - a) } else { f64::INFINITY };
                        if sl < lo_slack {
                            lo_slack = sl;
                            lo_val = a;
                        }
                        if sh < hi_slack {
                            hi_slack = sh;
                            hi_val = a;
                        }
                    }
                    let mut e = Entry::new("c6_lower", Some(t), Some(j), lo_val, lo_val - lo_slack, lo_slack);
                    e.i = Some(i);
                    r.entries.push(e);
                    let mut e = Entry::new("c6_upper", Some(t), Some(j), hi_val, hi_val + hi_slack, hi_slack);
                    e.i = Some(i);
                    r.entries.push(e);
                }
            }
        }
        Ok(r)
    }

    /// Residuals of the cessation rule per `(j, t)`, `1 ≤ t ≤ T_max`:
    /// `(1 − β(t)) s(t−1) ≥ 0`, `β(t) s(t−1) ≤ 0` and, at the step where
    /// cessation happens, `H(s(t−1)) (K(t−1) − m(t−1)) = 0`.
    pub fn c8(&self) -> FeasibilityReport {
        let tree = self.universe.tree();
        let mut r = FeasibilityReport::default();
        for j in 0..self.universe.aleph() {
            let surplus = self.surplus(j);
            let s = running_min(&self.paths.per_sub[j], &self.margins[j]);
            for t in 1..=self.horizon() {
                let (mut w4, mut w5, mut w6, mut wz) = (f64::INFINITY, f64::INFINITY, f64::INFINITY, f64::INFINITY);
                for n in tree.level(t) {
                    let p = tree.parent(n).expect("t ≥ 1");
                    let b = self.x.beta.get(n, j);
                    w4 = w4.min((1.0 - b) * s[p]);
                    w5 = w5.min(-b * s[p]);
                    let ceases_here = b == 1.0 && self.x.beta.get(p, j) == 0.0;
                    let h = if s[p] >= 0.0 { 1.0 } else { 0.0 };
                    let r6 = if ceases_here { h * surplus.get(p, 0) } else { 0.0 };
                    w6 = w6.min(-r6.abs());
                    if self.config.zero_margin_rule == ZeroMarginRule::Cease && b == 0.0 && s[p].abs() <= FEAS_TOL {
                        wz = wz.min(-1.0);
                    }
                }
                r.entries.push(Entry::new("c8_continue", Some(t), Some(j), w4, 0.0, w4));
                r.entries.push(Entry::new("c8_cease", Some(t), Some(j), -w5, 0.0, w5));
                r.entries.push(Entry::new("c8_step", Some(t), Some(j), -w6, 0.0, w6));
                if self.config.zero_margin_rule == ZeroMarginRule::Cease {
                    let slack = if wz.is_finite() { wz } else { 0.0 };
                    r.entries.push(Entry::new("c8_zero_margin", Some(t), Some(j), -slack, 0.0, slack));
                }
            }
        }
        r
    }

    /// Supplementary constraints `F ≤ C`.
    pub fn c5(&self) -> FeasibilityReport {
        let tree = self.universe.tree();
        let aleph = self.universe.aleph();
        let expected_div = |j: usize| -> f64 {
            (1..tree.len()).map(|n| tree.abs_prob(n) * self.x.d.get(n, j)).sum()
        };
        let mut r = FeasibilityReport::default();
        for (idx, f) in self.config.supplementary.iter().enumerate() {
            let name = format!("c5_{idx}");
            let e = match f {
                Functional::ZeroDividends { j } => {
                    let worst = (1..tree.len()).map(|n| self.x.d.get(n, *j).abs()).fold(0.0, f64::max);
                    Entry::le(&name, None, Some(*j), worst, 0.0)
                }
                Functional::InitialEquityFloor { j, floor } => Entry::le(&name, None, Some(*j), -self.x.k0[*j], -floor),
                Functional::ExpectedDividendCap { j, cap } => {
                    let v = match j {
                        Some(j) => expected_div(*j),
                        None => (0..aleph).map(expected_div).sum(),
                    };
                    Entry::le(&name, None, *j, v, *cap)
                }
                Functional::Affine { k0, dividends, alpha, cap } => {
                    let mut v = 0.0;
                    for (j, a) in k0.iter().enumerate().take(aleph) {
                        v += a * self.x.k0[j];
                    }
                    for (j, b) in dividends.iter().enumerate().take(aleph) {
                        v += b * expected_div(j);
                    }
                    for (i, c) in alpha.iter().enumerate().take(self.universe.total_dim()) {
                        for n in 0..tree.len() {
                            if tree.depth(n) <= self.universe.t_bar() {
                                v += c * tree.abs_prob(n) * self.x.alpha.get(n, i);
                            }
                        }
                    }
                    Entry::le(&name, None, None, v, *cap)
                }
            };
            r.entries.push(e);
        }
        r
    }

    /// `c² V(U(∞)) − V(Σ_{1≤k≤T_max} D(k))` for the holding's policy dividends.
    pub fn dividend_volatility_slack(&self) -> f64 {
        let tree = self.universe.tree();
        let h = self.horizon();
        let u_fin = RandomVariable::from_fn(tree, h, 1, |n, row| {
            row[0] = self.paths.utility.iter().map(|p| p.get(n, 0)).sum();
        });
        let d_sum = RandomVariable::from_fn(tree, h, 1, |n, row| {
            row[0] = tree.path(n).iter().skip(1).map(|&a| self.policy_dividends.get(a, 0)).sum();
        });
        let c = self.config.dividend_vol_cap;
        c * c * u_fin.variance() - d_sum.variance()
    }

    /// Constraint set of the mean–variance model, in the order budget, ROE,
    /// holding, supplementary, market, subsidiaries, cessation.
    pub fn quadratic_model(&self) -> Result<FeasibilityReport, ConstraintError> {
        let mut r = self.budget();
        r.extend(self.c3());
        r.extend(self.c4_quad());
        r.extend(self.c5());
        r.extend(self.c6()?);
        r.extend(self.c7_quad());
        r.extend(self.c8());
        Ok(r)
    }

    /// Constraint set of the original model with exact probabilities.
    pub fn exact_model(&self) -> Result<FeasibilityReport, ConstraintError> {
        let mut r = self.budget();
        r.extend(self.c3());
        r.extend(self.c4());
        r.extend(self.c5());
        r.extend(self.c6()?);
        r.extend(self.c7());
        r.extend(self.c8());
        Ok(r)
    }
}

pub fn eval_c3(u: &ContractUniverse, x: &PortfolioVariable, xi: &Runoff, config: &ConstraintConfig) -> Result<FeasibilityReport, ConstraintError> {
    Ok(Evaluation::new(u, x, xi, config, &DividendPolicy::Zero)?.c3())
}

pub fn eval_c4_quad(u: &ContractUniverse, x: &PortfolioVariable, xi: &Runoff, config: &ConstraintConfig) -> Result<FeasibilityReport, ConstraintError> {
    Ok(Evaluation::new(u, x, xi, config, &DividendPolicy::Zero)?.c4_quad())
}

pub fn eval_c7_quad(u: &ContractUniverse, x: &PortfolioVariable, xi: &Runoff, config: &ConstraintConfig) -> Result<FeasibilityReport, ConstraintError> {
    Ok(Evaluation::new(u, x, xi, config, &DividendPolicy::Zero)?.c7_quad())
}

pub fn eval_c6(u: &ContractUniverse, x: &PortfolioVariable, config: &ConstraintConfig) -> Result<FeasibilityReport, ConstraintError> {
    Evaluation::new(u, x, &Runoff::new(), config, &DividendPolicy::Zero)?.c6()
}

pub fn eval_c8(u: &ContractUniverse, x: &PortfolioVariable, xi: &Runoff, config: &ConstraintConfig) -> Result<FeasibilityReport, ConstraintError> {
    Ok(Evaluation::new(u, x, xi, config, &DividendPolicy::Zero)?.c8())
}

pub fn eval_c5(u: &ContractUniverse, x: &PortfolioVariable, config: &ConstraintConfig) -> Result<FeasibilityReport, ConstraintError> {
    Ok(Evaluation::new(u, x, &Runoff::new(), config, &DividendPolicy::Zero)?.c5())
}

pub fn eval_budget(
    u: &ContractUniverse,
    x: &PortfolioVariable,
    xi: &Runoff,
    config: &ConstraintConfig,
    policy: &DividendPolicy,
) -> Result<FeasibilityReport, ConstraintError> {
    Ok(Evaluation::new(u, x, xi, config, policy)?.budget())
}

pub fn dividend_volatility_check(
    u: &ContractUniverse,
    x: &PortfolioVariable,
    xi: &Runoff,
    policy: &DividendPolicy,
    config: &ConstraintConfig,
) -> Result<f64, ConstraintError> {
    Ok(Evaluation::new(u, x, xi, config, policy)?.dividend_volatility_slack())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainmentReport {
    /// The point satisfies the mean–variance constraints of holding and subsidiaries.
    pub quad_feasible: bool,
    /// Exact `Ψ(t)` and `ε(t)`.
    pub psi: Vec<f64>,
    pub eps: Vec<f64>,
    /// Exact `Ψ^{(j)}(t)` and `ε^{(j)}(t)`.
    pub psi_sub: Vec<Vec<f64>>,
    pub eps_sub: Vec<Vec<f64>>,
    pub exact_feasible: bool,
    /// A quad-feasible point violating an exact constraint.
    pub counterexample: bool,
}

/// Checks that satisfying the mean–variance constraints implies the exact
/// ruin and non-solvency constraints at this point.
pub fn chebyshev_containment(
    u: &ContractUniverse,
    x: &PortfolioVariable,
    xi: &Runoff,
    config: &ConstraintConfig,
) -> Result<ContainmentReport, ConstraintError> {
    config.check_epsilon_sums(u.aleph(), u.horizon())?;
    let ev = Evaluation::new(u, x, xi, config, &DividendPolicy::Zero)?;
    let mut quad = ev.c4_quad();
    quad.extend(ev.c7_quad());
    let quad_feasible = quad.entries.iter().all(|e| e.slack >= 0.0);
    let c4 = ev.c4();
    let c7 = ev.c7();
    let psi = c4.entries.iter().map(|e| e.value).collect();
    let eps = c4.entries.iter().map(|e| e.bound).collect();
    let h = u.horizon() + 1;
    let psi_sub = (0..u.aleph()).map(|j| c7.entries[j * h..(j + 1) * h].iter().map(|e| e.value).collect()).collect();
    let eps_sub = (0..u.aleph()).map(|j| c7.entries[j * h..(j + 1) * h].iter().map(|e| e.bound).collect()).collect();
    // exact probabilities are compared without tolerance
    let exact_feasible = c4.entries.iter().chain(&c7.entries).all(|e| e.value <= e.bound);
    Ok(ContainmentReport { quad_feasible, psi, eps, psi_sub, eps_sub, exact_feasible, counterexample: quad_feasible && !exact_feasible })
}
