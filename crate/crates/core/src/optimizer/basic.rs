//! Basic model: maximize `E U(∞, η)` subject to the ROE floor, the variance
//! cap `𝔟(η) ≤ σ²` and `η ≥ 0`, over all components of the universe.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintConfig, Schedule};
use crate::contracts::{ContractUniverse, Runoff};
use crate::linear::{Layout, LinearModel, VarianceForm};
use crate::tree::AdaptedProcess;

use super::engine::{self, ConvexProblem, Label};
use super::{SolveError, SolveReport, SolverSettings, Status};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasicConfig {
    /// `K(0)` entering the ROE floor.
    #[serde(default)]
    pub k0: f64,
    /// ROE floor `c(t)`.
    #[serde(default = "zero")]
    pub roe_floor: Schedule,
    /// Variance cap `σ²` on the final utility.
    pub sigma2: f64,
    #[serde(default = "yes")]
    pub nonneg: bool,
}

fn zero() -> Schedule {
    Schedule::Constant(0.0)
}

fn yes() -> bool {
    true
}

impl BasicConfig {
    pub fn new(sigma2: f64) -> Self {
        Self { k0: 0.0, roe_floor: zero(), sigma2, nonneg: true }
    }
}

/// The basic problem in `η`-coordinates (indices of the `α` block).
pub struct BasicProblem {
    pub layout: Layout,
    pub problem: ConvexProblem,
    /// `𝔟(η)` as a variance form.
    pub variance: VarianceForm,
    /// `H`-norm weights per coordinate (node probabilities).
    pub weights: Vec<f64>,
}

pub fn build_basic(universe: &ContractUniverse, config: &BasicConfig) -> Result<BasicProblem, SolveError> {
    if !(config.sigma2 >= 0.0 && config.sigma2.is_finite()) {
        return Err(SolveError::Input(format!("σ² must be finite and nonnegative, got {}", config.sigma2)));
    }
    let tree = universe.tree();
    let beta = AdaptedProcess::zeros_full(tree, universe.aleph());
    let model = LinearModel::new(universe, &beta, &Runoff::new(), &ConstraintConfig::default())?;
    let layout = model.layout;
    let n = layout.n_alpha();
    let h = tree.horizon();
    let mut p = ConvexProblem::new(n);
    if config.nonneg {
        p.lower = vec![0.0; n];
    }
    p.objective = model.objective();
    for t in 0..h {
        // c(t)(K(0) + E U(t)) − E ΔU(t+1) ≤ 0
        let c = config.roe_floor.at(t);
        let eu = model.expectation(t, |v| model.total_utility(v));
        let edu = model.expectation(t + 1, |v| model.total_delta(v));
        let mut g = eu.scaled(c);
        g.constant += c * config.k0;
        g.add_scaled(&edu, -1.0);
        p.push_le(Label::new("C3").t(t), g);
    }
    let variance = model.variance(h, |v| model.total_utility(v));
    let variance = VarianceForm { l: variance.l.columns(0, n).into_owned(), offset: variance.offset };
    p.push_variance(Label::new("C4").t(h), variance.clone(), config.sigma2);
    let weights = (0..n).map(|i| tree.abs_prob(i / layout.n)).collect();
    Ok(BasicProblem { layout, problem: p, variance, weights })
}

pub(crate) fn h_distance(w: &[f64], a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    w.iter().zip(a.iter().zip(b.iter())).map(|(w, (x, y))| w * (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max mᵀη − λ𝔟(η)` over the affine constraints.
fn penalized(bp: &BasicProblem, lambda: f64) -> ConvexProblem {
    let mut q = bp.problem.clone();
    q.constraints.retain(|c| c.label.name == "C3");
    if lambda > 0.0 {
        q.penalties.push((lambda, bp.variance.clone()));
    }
    q
}

pub struct Bisection {
    pub lambda: f64,
    pub x: DVector<f64>,
    pub evaluations: usize,
    pub status: Status,
}

/// Bisection on the variance multiplier.
pub fn bisect_variance_multiplier(bp: &BasicProblem, start: &DVector<f64>, sigma2: f64, settings: &SolverSettings) -> Bisection {
    let mut evaluations = 0;
    let mut solve = |lambda: f64| {
        evaluations += 1;
        engine::solve(&penalized(bp, lambda), start, settings)
    };
    let r0 = solve(0.0);
    match r0.status {
        Status::Optimal if bp.variance.eval(&r0.x) <= sigma2 => {
            return Bisection { lambda: 0.0, x: r0.x, evaluations, status: Status::Optimal };
        }
        Status::Infeasible | Status::NumericalFailure => {
            return Bisection { lambda: 0.0, x: r0.x, evaluations, status: r0.status };
        }
        _ => {}
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut best = loop {
        let r = solve(hi);
        if r.status == Status::Optimal && bp.variance.eval(&r.x) <= sigma2 {
            break r;
        }
        lo = hi;
        hi *= 2.0;
        if hi > 1e15 {
            return Bisection { lambda: hi, x: r.x, evaluations, status: Status::MaxIter };
        }
    };
    let target_tol = 1e-13 * sigma2.max(1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let r = solve(mid);
        if r.status != Status::Optimal {
            lo = mid;
            continue;
        }
        let v = bp.variance.eval(&r.x);
        if v <= sigma2 {
            hi = mid;
            best = r;
            if sigma2 - v <= target_tol {
                break;
            }
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Bisection { lambda: hi, x: best.x, evaluations, status: Status::Optimal }
}

pub fn solve_basic(universe: &ContractUniverse, config: &BasicConfig, settings: &SolverSettings) -> Result<SolveReport, SolveError> {
    let bp = build_basic(universe, config)?;
    let n = bp.problem.n;
    if n > settings.max_dim {
        return Err(SolveError::DimensionCap { dim: n, cap: settings.max_dim });
    }
    let zero = DVector::zeros(n);
    let mut notes = Vec::new();

    // a zero cap turns the variance constraint into equalities: no multiplier to bisect
    let (start, warm) = if config.sigma2 > 0.0 {
        let b = bisect_variance_multiplier(&bp, &zero, config.sigma2, settings);
        notes.push(format!("variance multiplier by bisection: {:.12e} ({} inner solves)", b.lambda, b.evaluations));
        if b.status == Status::Infeasible {
            let mut report = SolveReport::new("basic", Status::Infeasible);
            report.notes = notes;
            report.x = b.x.iter().copied().collect();
            return Ok(report);
        }
        let mut warm = vec![0.0; bp.problem.constraints.len()];
        if let Some(last) = warm.last_mut() {
            *last = b.lambda;
        }
        (b.x, Some(warm))
    } else {
        (zero.clone(), None)
    };
    let mut r = engine::solve_from(&bp.problem, &start, warm.as_deref(), settings);
    if r.status != Status::Optimal {
        // retry with phase-1 from scratch
        let r2 = engine::solve(&bp.problem, &zero, settings);
        if r2.status == Status::Optimal || r2.status == Status::Infeasible {
            r = r2;
        }
    }
    notes.push(format!("engine polish moved the bisection point by {:.3e} in H-norm", h_distance(&bp.weights, &r.x, &start)));

    // uniqueness across random starts
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let scale = r.x.amax().max(1.0);
    let mut spread: f64 = 0.0;
    if r.status == Status::Optimal {
        let starts: Vec<DVector<f64>> =
            (0..settings.starts).map(|_| DVector::from_fn(n, |_, _| rng.gen_range(0.0..2.0 * scale))).collect();
        let results = crate::exec::map_slice(&starts, |s| engine::solve(&bp.problem, s, settings));
        for other in &results {
            if other.status != Status::Optimal {
                notes.push(format!("a random start ended with status {}", other.status));
                continue;
            }
            spread = spread.max(h_distance(&bp.weights, &other.x, &r.x));
        }
    }
    let mut report = SolveReport::from_engine("basic", &bp.problem, &r);
    report.starts_spread = Some(spread);
    let eta = AdaptedProcess::from_fn(universe.tree(), bp.layout.n, 0..=universe.t_bar(), |node, out| {
        for (c, o) in out.iter_mut().enumerate() {
            *o = r.x[bp.layout.alpha(node, c)];
        }
    });
    report.eta = Some(eta);
    report.notes.extend(notes);
    Ok(report)
}

/// Objective and variance of `η` in the basic model (for grid oracles).
pub fn evaluate_basic(bp: &BasicProblem, x: &DVector<f64>) -> (f64, bool) {
    let feasible = bp.problem.violation(x) <= 0.0;
    (bp.problem.objective_value(x), feasible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{generate_universe, GenSpec, IncrementLaw, Outcome, SubsidiaryGen, DEFAULT_MAX_LEAVES};
    use crate::forms::Forms;
    use crate::tree::TreeSpec;

    fn one_period(outcomes: Vec<Vec<(f64, f64)>>) -> ContractUniverse {
        let law = IncrementLaw::Independent { independent: outcomes.iter().map(|o| o.iter().map(|&(p, v)| [p, v]).collect()).collect() };
        let spec = GenSpec {
            t_bar: 0,
            settlement: 1,
            subsidiaries: vec![SubsidiaryGen { types: outcomes.len(), increments: vec![law], overrides: vec![], runoff: vec![] }],
            max_leaves: DEFAULT_MAX_LEAVES,
        };
        generate_universe(&spec, &TreeSpec::new(vec![])).unwrap()
    }

    #[test]
    fn one_asset_closed_form() {
        // mean 0.4, variance 0.25·(1.5 − (−0.5))² = 1
        let u = one_period(vec![vec![(0.5, 1.4), (0.5, -0.6)]]);
        let sigma2 = 2.25;
        let r = solve_basic(&u, &BasicConfig::new(sigma2), &SolverSettings::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        let eta = r.eta.as_ref().unwrap().get(0, 0);
        assert!((eta - 1.5).abs() < 1e-6, "{eta}");
        assert!((r.objective - 0.6).abs() < 1e-6);
        assert!(r.kkt_residual <= 1e-7);
        assert!(r.starts_spread.unwrap() < 1e-6);
    }

    #[test]
    fn negative_mean_gives_zero() {
        let u = one_period(vec![vec![(0.5, 0.6), (0.5, -1.4)]]);
        let r = solve_basic(&u, &BasicConfig::new(1.0), &SolverSettings::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        assert!(r.eta.unwrap().get(0, 0).abs() < 1e-9);
    }

    #[test]
    fn two_independent_contracts() {
        // means (1, 1), variances (1, 4)
        let u = one_period(vec![vec![(0.5, 2.0), (0.5, 0.0)], vec![(0.5, 3.0), (0.5, -1.0)]]);
        let sigma2 = 5.0;
        let r = solve_basic(&u, &BasicConfig::new(sigma2), &SolverSettings::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        let eta = r.eta.unwrap();
        let s = (sigma2 / 1.25f64).sqrt();
        assert!((eta.get(0, 0) - s).abs() < 1e-6 && (eta.get(0, 1) - s / 4.0).abs() < 1e-6);
    }

    #[test]
    fn roe_floor_infeasible() {
        // the only contract loses on average, so a positive floor with K(0) > 0 is unattainable
        let u = one_period(vec![vec![(0.5, 0.6), (0.5, -1.4)]]);
        let cfg = BasicConfig { k0: 1.0, roe_floor: Schedule::Constant(0.1), sigma2: 1.0, nonneg: true };
        let r = solve_basic(&u, &cfg, &SolverSettings::default()).unwrap();
        assert_eq!(r.status, Status::Infeasible);
    }

    #[test]
    fn variance_form_is_b() {
        let law = IncrementLaw::Joint {
            outcomes: vec![
                Outcome { prob: 0.2, values: vec![1.0, 0.0] },
                Outcome { prob: 0.5, values: vec![-0.5, 1.0] },
                Outcome { prob: 0.3, values: vec![0.3, -2.0] },
            ],
        };
        let spec = GenSpec {
            t_bar: 1,
            settlement: 1,
            subsidiaries: vec![SubsidiaryGen { types: 2, increments: vec![law], overrides: vec![], runoff: vec![] }],
            max_leaves: DEFAULT_MAX_LEAVES,
        };
        let u = generate_universe(&spec, &TreeSpec::uniform(&[2])).unwrap();
        let bp = build_basic(&u, &BasicConfig::new(1.0)).unwrap();
        let forms = Forms::new(&u);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let x = DVector::from_fn(bp.problem.n, |_, _| rng.gen_range(-1.0..1.0));
            let eta = AdaptedProcess::from_fn(u.tree(), 2, 0..=1, |node, out| {
                out[0] = x[bp.layout.alpha(node, 0)];
                out[1] = x[bp.layout.alpha(node, 1)];
            });
            assert!((bp.variance.eval(&x) - forms.form_b(&eta).unwrap()).abs() < 1e-10);
        }
    }
}
