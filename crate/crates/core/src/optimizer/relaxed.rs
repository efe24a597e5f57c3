//! Relaxed model: only the budget identities, the holding's mean–variance
//! constraint and `η ≥ 0`, with `D = 0` and no run-off. The underwriting
//! optimum is unique while equity and dividends are free up to their sums.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintConfig, Evaluation, FeasibilityReport, Schedule};
use crate::contracts::{ContractUniverse, Runoff};
use crate::linear::{Affine, Layout, LinearModel};
use crate::portfolio::{DividendPolicy, PortfolioVariable};
use crate::tree::AdaptedProcess;

use super::basic::h_distance;
use super::engine::{self, ConvexProblem, Label};
use super::{SolveError, SolveReport, SolverSettings, Status};

/// Number of random basis combinations checked for invariance.
pub const DEGENERACY_SAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxedConfig {
    pub k0: f64,
    pub eps_quad: Schedule,
    pub delta: Schedule,
}

impl RelaxedConfig {
    pub fn constraint_config(&self) -> ConstraintConfig {
        ConstraintConfig {
            k0: self.k0,
            eps_quad: Some(self.eps_quad.clone()),
            delta: Some(self.delta.clone()),
            ..Default::default()
        }
    }
}

pub fn build_relaxed(universe: &ContractUniverse, config: &RelaxedConfig) -> Result<(Layout, ConvexProblem), SolveError> {
    let cc = config.constraint_config();
    cc.validate(universe.aleph())?;
    let tree = universe.tree();
    let beta = AdaptedProcess::zeros_full(tree, universe.aleph());
    let model = LinearModel::new(universe, &beta, &Runoff::new(), &cc)?;
    let layout = model.layout;
    let mut p = ConvexProblem::new(layout.len());
    p.objective = model.objective();
    for i in 0..layout.n_alpha() {
        p.lower[i] = 0.0;
    }
    let mut c1 = Affine { terms: (0..layout.aleph).map(|j| (layout.k0(j), 1.0)).collect(), constant: -config.k0 };
    c1.canonicalize();
    p.push_eq(Label::new("c1"), c1);
    for n in 1..tree.len() {
        let mut row = Affine { terms: (0..layout.aleph).map(|j| (layout.d(n, j), 1.0)).collect(), constant: 0.0 };
        row.canonicalize();
        p.push_eq(Label::new("c2").t(tree.depth(n)).node(n), row);
    }
    for t in 0..=tree.horizon() {
        let Some((eps, delta)) = cc.quad_at(t) else { break };
        let floor = delta * config.k0;
        p.push_variance(Label::new("c4q_var").t(t), model.variance(t, |n| model.total_equity(n)), eps * floor * floor);
        let mut g = model.expectation(t, |n| model.total_equity(n)).scaled(-1.0);
        g.constant += floor;
        p.push_le(Label::new("c4q_mean").t(t), g);
    }
    Ok((layout, p))
}

/// Sum-preserving directions in `(K⃗(0), D⃗)`: `e_j − e_ℵ` in `K⃗(0)` and the
/// same per node in `D⃗`.
pub fn degeneracy_basis(layout: &Layout) -> Vec<Vec<f64>> {
    let aleph = layout.aleph;
    if aleph < 2 {
        return vec![];
    }
    let width = aleph * layout.tree_len;
    let mut out = vec![];
    for j in 0..aleph - 1 {
        let mut v = vec![0.0; width];
        v[j] = 1.0;
        v[aleph - 1] = -1.0;
        out.push(v);
    }
    for n in 1..layout.tree_len {
        for j in 0..aleph - 1 {
            let mut v = vec![0.0; width];
            v[aleph + (n - 1) * aleph + j] = 1.0;
            v[aleph + (n - 1) * aleph + aleph - 1] = -1.0;
            out.push(v);
        }
    }
    out
}

/// Shifts the `(K⃗(0), D⃗)` block of a packed vector by `dir`.
fn shifted(layout: &Layout, v: &DVector<f64>, dir: &[f64]) -> DVector<f64> {
    let mut w = v.clone();
    let base = layout.k0(0);
    for (k, d) in dir.iter().enumerate() {
        w[base + k] += d;
    }
    w
}

fn relaxed_values(universe: &ContractUniverse, x: &PortfolioVariable, cc: &ConstraintConfig) -> Result<(f64, FeasibilityReport), SolveError> {
    let ev = Evaluation::new(universe, x, &Runoff::new(), cc, &DividendPolicy::Zero)?;
    let tree = universe.tree();
    let objective = tree
        .leaves()
        .map(|n| tree.abs_prob(n) * ev.paths.utility.iter().map(|u| u.get(n, 0)).sum::<f64>())
        .sum();
    let mut r = ev.budget();
    r.extend(ev.c4_quad());
    Ok((objective, r))
}

/// Largest change of objective or of any (c1)(c2)(c4′) slack over
/// `samples` random combinations of the basis, evaluated independently of
/// the solver's linear model.
pub fn degeneracy_deviation(
    universe: &ContractUniverse,
    config: &RelaxedConfig,
    layout: &Layout,
    v: &DVector<f64>,
    basis: &[Vec<f64>],
    samples: usize,
    seed: u64,
) -> Result<f64, SolveError> {
    if basis.is_empty() {
        return Ok(0.0);
    }
    let cc = config.constraint_config();
    let beta = AdaptedProcess::zeros_full(universe.tree(), universe.aleph());
    let (obj0, rep0) = relaxed_values(universe, &layout.unpack(universe, v, &beta), &cc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = config.k0.abs().max(1.0);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut dir = vec![0.0; basis[0].len()];
        for b in basis {
            let g: f64 = rng.gen_range(-1.0..1.0) * scale;
            for (d, e) in dir.iter_mut().zip(b) {
                *d += g * e;
            }
        }
        let w = shifted(layout, v, &dir);
        let (obj, rep) = relaxed_values(universe, &layout.unpack(universe, &w, &beta), &cc)?;
        worst = worst.max((obj - obj0).abs());
        for (a, b) in rep.entries.iter().zip(&rep0.entries) {
            worst = worst.max((a.slack - b.slack).abs());
        }
    }
    Ok(worst)
}

pub fn solve_relaxed(universe: &ContractUniverse, config: &RelaxedConfig, settings: &SolverSettings) -> Result<SolveReport, SolveError> {
    if config.k0 < 0.0 {
        return Err(SolveError::Input(format!("K(0) must be nonnegative, got {}", config.k0)));
    }
    let (layout, p) = build_relaxed(universe, config)?;
    if layout.len() > settings.max_dim {
        return Err(SolveError::DimensionCap { dim: layout.len(), cap: settings.max_dim });
    }
    let tree = universe.tree();
    let start = super::quadratic::neutral_start(&layout, config.k0);
    let r = engine::solve(&p, &start, settings);
    let mut report = SolveReport::from_engine("relaxed", &p, &r);
    let beta = AdaptedProcess::zeros_full(tree, universe.aleph());
    if r.status != Status::Optimal {
        return Ok(report);
    }

    // uniqueness of the underwriting part across random starts
    let weights: Vec<f64> = (0..layout.n_alpha()).map(|i| tree.abs_prob(i / layout.n)).collect();
    let alpha = |x: &DVector<f64>| x.rows(0, layout.n_alpha()).into_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let scale = r.x.amax().max(1.0);
    let starts: Vec<DVector<f64>> =
        (0..settings.starts).map(|_| DVector::from_fn(layout.len(), |_, _| rng.gen_range(0.0..2.0 * scale))).collect();
    let results = crate::exec::map_slice(&starts, |s| engine::solve(&p, s, settings));
    let mut spread: f64 = 0.0;
    for other in &results {
        if other.status != Status::Optimal {
            report.notes.push(format!("a random start ended with status {}", other.status));
            continue;
        }
        spread = spread.max(h_distance(&weights, &alpha(&other.x), &alpha(&r.x)));
    }
    report.starts_spread = Some(spread);

    let basis = degeneracy_basis(&layout);
    let dev = degeneracy_deviation(universe, config, &layout, &r.x, &basis, DEGENERACY_SAMPLES, settings.seed)?;
    report.degeneracy_basis = basis;
    report.degeneracy_deviation = Some(dev);
    let x = layout.unpack(universe, &r.x, &beta);
    report.eta = Some(x.alpha.clone());
    let (_, feas) = relaxed_values(universe, &x, &config.constraint_config())?;
    report.min_slack = report.min_slack.min(feas.min_slack());
    report.feasibility = Some(feas);
    report.portfolio = Some(x);
    Ok(report)
}
