//! Mean–variance model: cessation patterns are enumerated (or alternated on
//! large trees); each pattern is a convex problem in `(α, K⃗(0), D⃗)`.

use nalgebra::DVector;
use serde::Serialize;

use crate::constraints::{
    chebyshev_containment, ConstraintConfig, Evaluation, Functional, MarketBounds, ZeroMarginRule, FEAS_TOL,
};
use crate::contracts::{ContractUniverse, Runoff};
use crate::linear::{Affine, Layout, LinearModel};
use crate::portfolio::DividendPolicy;
use crate::tree::{AdaptedProcess, ScenarioTree};

use super::engine::{self, ConvexProblem, EngineResult, Label};
use super::{SolveError, SolveReport, SolverSettings, Status};

/// Surplus kept above zero by continuing subsidiaries under the cease-at-zero rule.
pub const STRICT_MARGIN: f64 = 1e-8;

/// Cessation of one subsidiary: either from the start, or after each
/// trigger node (its children and all their descendants cease).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Default)]
pub struct Cessation {
    pub at_root: bool,
    pub triggers: Vec<usize>,
}

/// A predictable cessation pattern, one entry per subsidiary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Default)]
pub struct BetaPattern {
    pub per_sub: Vec<Cessation>,
}

impl BetaPattern {
    pub fn never(aleph: usize) -> Self {
        Self { per_sub: vec![Cessation::default(); aleph] }
    }

    pub fn to_process(&self, tree: &std::sync::Arc<ScenarioTree>) -> AdaptedProcess {
        let mut ceased = vec![vec![false; tree.len()]; self.per_sub.len()];
        for (j, c) in self.per_sub.iter().enumerate() {
            for n in 0..tree.len() {
                ceased[j][n] = c.at_root
                    || tree.parent(n).is_some_and(|p| ceased[j][p] || c.triggers.binary_search(&p).is_ok());
            }
        }
        AdaptedProcess::from_fn(tree, self.per_sub.len(), 0..=tree.horizon(), |n, out| {
            for (j, o) in out.iter_mut().enumerate() {
                *o = if ceased[j][n] { 1.0 } else { 0.0 };
            }
        })
    }

    /// Pattern implied by the signs of the running surplus minima: a
    /// subsidiary ceases after the first node where it is negative.
    pub fn from_surplus(tree: &ScenarioTree, running_min: &[Vec<f64>], rule: ZeroMarginRule) -> Self {
        let per_sub = running_min
            .iter()
            .map(|s| {
                let breached = |n: usize| match rule {
                    ZeroMarginRule::Continue => s[n] < 0.0,
                    ZeroMarginRule::Cease => s[n] <= 0.0,
                };
                let triggers = (0..tree.len())
                    .filter(|&n| tree.depth(n) < tree.horizon() && breached(n) && tree.parent(n).is_none_or(|p| !breached(p)))
                    .collect();
                Cessation { at_root: false, triggers }
            })
            .collect();
        Self { per_sub }
    }
}

impl BetaPattern {
    /// Adds cessation after `node` for subsidiary `j`, dropping triggers below it.
    pub fn with_trigger(&self, tree: &ScenarioTree, j: usize, node: usize) -> Self {
        let mut out = self.clone();
        let c = &mut out.per_sub[j];
        let d = tree.depth(node);
        c.triggers.retain(|&t| tree.depth(t) <= d || tree.ancestor(t, d) != node);
        if !c.triggers.iter().any(|&t| tree.depth(t) < d && tree.ancestor(node, tree.depth(t)) == t) && !c.triggers.contains(&node) {
            c.triggers.push(node);
            c.triggers.sort_unstable();
        }
        out
    }
}

/// Number of trigger antichains below `n` (saturating).
fn antichain_count(tree: &ScenarioTree, n: usize) -> usize {
    if tree.depth(n) == tree.horizon() {
        return 1;
    }
    let below = tree.children(n).map(|c| antichain_count(tree, c)).fold(1usize, |a, b| a.saturating_mul(b));
    below.saturating_add(1)
}

fn antichains(tree: &ScenarioTree, n: usize) -> Vec<Vec<usize>> {
    if tree.depth(n) == tree.horizon() {
        return vec![vec![]];
    }
    let mut combos: Vec<Vec<usize>> = vec![vec![]];
    for c in tree.children(n) {
        let sub = antichains(tree, c);
        combos = combos.iter().flat_map(|a| sub.iter().map(move |b| [a.as_slice(), b.as_slice()].concat())).collect();
    }
    combos.insert(0, vec![n]);
    combos
}

/// Number of cessation patterns over all subsidiaries (saturating).
pub fn pattern_count(tree: &ScenarioTree, aleph: usize) -> usize {
    let per = antichain_count(tree, 0).saturating_add(1);
    (0..aleph).fold(1usize, |a, _| a.saturating_mul(per))
}

/// All predictable absorbing patterns, `None` when more than `cap`.
pub fn enumerate_patterns(tree: &ScenarioTree, aleph: usize, cap: usize) -> Option<Vec<BetaPattern>> {
    if pattern_count(tree, aleph) > cap {
        return None;
    }
    let mut single: Vec<Cessation> = antichains(tree, 0)
        .into_iter()
        .map(|mut t| {
            t.sort_unstable();
            Cessation { at_root: false, triggers: t }
        })
        .collect();
    // the empty antichain first: no cessation
    single.sort_by_key(|c| c.triggers.len());
    single.push(Cessation { at_root: true, triggers: vec![] });
    let mut out = vec![BetaPattern { per_sub: vec![] }];
    for _ in 0..aleph {
        out = out
            .iter()
            .flat_map(|p| {
                single.iter().map(move |c| {
                    let mut q = p.clone();
                    q.per_sub.push(c.clone());
                    q
                })
            })
            .collect();
    }
    Some(out)
}

/// The convex problem of one cessation pattern (and, for the threshold
/// policy, one dividend regime per node).
pub struct PatternProblem {
    pub model: LinearModel,
    pub problem: ConvexProblem,
    pub beta: AdaptedProcess,
}

pub fn build_pattern_problem(
    universe: &ContractUniverse,
    xi: &Runoff,
    config: &ConstraintConfig,
    policy: &DividendPolicy,
    beta: &AdaptedProcess,
    regime: Option<&[bool]>,
) -> Result<PatternProblem, SolveError> {
    let model = LinearModel::new(universe, beta, xi, config)?;
    let layout = model.layout;
    let tree = universe.tree();
    let h = tree.horizon();
    let aleph = universe.aleph();
    let mut p = ConvexProblem::new(layout.len());
    p.objective = model.objective();

    // market bounds and complementarity
    for j in 0..aleph {
        let off = universe.offset(j);
        let bounds = config.market_bounds(j);
        for n in 0..layout.alpha_nodes {
            for i in 0..universe.n_types(j) {
                let idx = layout.alpha(n, off + i);
                if beta.get(n, j) != 0.0 {
                    p.fix(idx, 0.0);
                    continue;
                }
                match (&bounds, tree.parent(n)) {
                    (MarketBounds::Proportional { lower_factor, upper_factor, .. }, Some(par)) => {
                        let prev = layout.alpha(par, off + i);
                        let label = Label::new("c6_lower").j(j).node(n);
                        p.push_le(label, Affine { terms: vec![(prev, *lower_factor), (idx, -1.0)], constant: 0.0 });
                        if let Some(f) = upper_factor {
                            let label = Label::new("c6_upper").j(j).node(n);
                            p.push_le(label, Affine { terms: vec![(idx, 1.0), (prev, -f)], constant: 0.0 });
                        }
                    }
                    _ => {
                        let (lo, hi) = bounds.at(None);
                        if lo > hi {
                            return Err(crate::constraints::ConstraintError::MarketBounds { j, i, node: n, lower: lo, upper: hi }.into());
                        }
                        p.lower[idx] = lo;
                        p.upper[idx] = hi;
                    }
                }
            }
        }
    }

    // (c1) and (c2)
    let mut c1 = Affine { terms: (0..aleph).map(|j| (layout.k0(j), 1.0)).collect(), constant: -config.k0 };
    c1.canonicalize();
    p.push_eq(Label::new("c1"), c1);
    for n in 1..tree.len() {
        let mut h_row = Affine { terms: (0..aleph).map(|j| (layout.d(n, j), 1.0)).collect(), constant: 0.0 };
        match policy {
            DividendPolicy::Zero => {}
            DividendPolicy::Table { values } => h_row.constant -= values[n],
            DividendPolicy::Threshold { x, c } => {
                let du = model.total_delta(n);
                let active = regime.is_some_and(|r| r[n]);
                if active {
                    let mut d = du.clone();
                    d.constant -= c;
                    h_row.add_scaled(&d, -x);
                    let mut g = du.scaled(-1.0);
                    g.constant += c;
                    p.push_le(Label::new("regime_on").node(n), g);
                } else {
                    let mut g = du;
                    g.constant -= c;
                    p.push_le(Label::new("regime_off").node(n), g);
                }
            }
        }
        h_row.canonicalize();
        p.push_eq(Label::new("c2").t(tree.depth(n)).node(n), h_row);
    }

    // (c3)
    for t in 0..h {
        let ek = model.expectation(t, |n| model.total_equity(n));
        let edu = model.expectation(t + 1, |n| model.total_delta(n));
        let mut g = ek.scaled(config.roe_floor.at(t));
        g.add_scaled(&edu, -1.0);
        p.push_le(Label::new("c3").t(t), g);
    }

    // (c4') holding
    for t in 0..=h {
        let Some((eps, delta)) = config.quad_at(t) else { break };
        let floor = delta * config.k0;
        p.push_variance(Label::new("c4q_var").t(t), model.variance(t, |n| model.total_equity(n)), eps * floor * floor);
        let mut g = model.expectation(t, |n| model.total_equity(n)).scaled(-1.0);
        g.constant += floor;
        p.push_le(Label::new("c4q_mean").t(t), g);
    }

    // (c5)
    let expected_div = |j: usize| Affine {
        terms: (1..tree.len()).map(|n| (layout.d(n, j), tree.abs_prob(n))).collect(),
        constant: 0.0,
    };
    for (idx, f) in config.supplementary.iter().enumerate() {
        let name = format!("c5_{idx}");
        match f {
            Functional::ZeroDividends { j } => {
                for n in 1..tree.len() {
                    p.fix(layout.d(n, *j), 0.0);
                }
            }
            Functional::InitialEquityFloor { j, floor } => {
                p.push_le(Label::new(&name).j(*j), Affine { terms: vec![(layout.k0(*j), -1.0)], constant: *floor });
            }
            Functional::ExpectedDividendCap { j, cap } => {
                let mut g = match j {
                    Some(j) => expected_div(*j),
                    None => Affine::combination((0..aleph).map(expected_div).collect::<Vec<_>>().iter().map(|a| (a, 1.0))),
                };
                g.constant -= cap;
                p.push_le(Label::new(&name), g);
            }
            Functional::Affine { k0, dividends, alpha, cap } => {
                let mut g = Affine::constant(-cap);
                for (j, a) in k0.iter().enumerate().take(aleph) {
                    g.terms.push((layout.k0(j), *a));
                }
                for (j, b) in dividends.iter().enumerate().take(aleph) {
                    g.add_scaled(&expected_div(j), *b);
                }
                for (i, c) in alpha.iter().enumerate().take(universe.total_dim()) {
                    for n in 0..layout.alpha_nodes {
                        g.terms.push((layout.alpha(n, i), c * tree.abs_prob(n)));
                    }
                }
                g.canonicalize();
                p.push_le(Label::new(&name), g);
            }
        }
    }

    // (c7') subsidiaries
    for j in 0..aleph {
        for t in 0..=h {
            let Some((eps, delta)) = config.quad_sub_at(j, t) else { break };
            let floor = delta * config.k0;
            p.push_variance(Label::new("c7q_var").t(t).j(j), model.variance(t, |n| model.surplus(j, n)), eps * floor * floor);
            let mut g = model.expectation(t, |n| model.surplus(j, n)).scaled(-1.0);
            g.constant += floor;
            p.push_le(Label::new("c7q_mean").t(t).j(j), g);
        }
    }

    // (c8) for the fixed pattern: continuing after p needs a nonnegative
    // surplus at p, ceasing after p a nonpositive one
    for j in 0..aleph {
        for par in 0..tree.len() {
            if tree.depth(par) == h || beta.get(par, j) != 0.0 {
                continue;
            }
            let child = tree.children(par).next().expect("internal node");
            let s = model.surplus(j, par);
            if beta.get(child, j) == 0.0 {
                let mut g = s.scaled(-1.0);
                if config.zero_margin_rule == ZeroMarginRule::Cease {
                    g.constant += STRICT_MARGIN;
                }
                p.push_le(Label::new("c8_continue").t(tree.depth(par) + 1).j(j).node(par), g);
            } else {
                p.push_le(Label::new("c8_cease").t(tree.depth(par) + 1).j(j).node(par), s);
            }
        }
    }
    Ok(PatternProblem { model, problem: p, beta: beta.clone() })
}

/// Starting point: zero underwriting, equal split of `K(0)`, no dividends.
pub fn neutral_start(layout: &Layout, k0: f64) -> DVector<f64> {
    let mut v = DVector::zeros(layout.len());
    for j in 0..layout.aleph {
        v[layout.k0(j)] = k0 / layout.aleph as f64;
    }
    v
}

/// Checks the dividend-volatility hypothesis on probe portfolios: no
/// underwriting and one unit of each contract type at the root.
pub fn check_dividend_volatility(
    universe: &ContractUniverse,
    xi: &Runoff,
    config: &ConstraintConfig,
    policy: &DividendPolicy,
) -> Result<f64, SolveError> {
    if *policy == DividendPolicy::Zero {
        return Ok(f64::INFINITY);
    }
    let layout = Layout::new(universe);
    let beta = AdaptedProcess::zeros_full(universe.tree(), universe.aleph());
    let mut worst = f64::INFINITY;
    for probe in 0..=universe.total_dim() {
        let mut v = neutral_start(&layout, config.k0);
        if probe > 0 {
            v[layout.alpha(0, probe - 1)] = 1.0;
        }
        let x = layout.unpack(universe, &v, &beta);
        let x = crate::portfolio::apply_policy(universe, &x, xi, policy)?;
        let slack = Evaluation::new(universe, &x, xi, config, policy)?.dividend_volatility_slack();
        worst = worst.min(slack);
        if slack < -1e-12 {
            let what = if probe == 0 { "the empty portfolio".to_string() } else { format!("a unit of component {}", probe - 1) };
            return Err(SolveError::Precondition {
                name: "dividend_volatility",
                detail: format!("V(sum of dividends) exceeds c^2 V(U(inf)) by {:.6e} for {what}", -slack),
            });
        }
    }
    Ok(worst)
}

fn regime_of(pp: &PatternProblem, x: &DVector<f64>, c: f64) -> Vec<bool> {
    let tree = pp.model.tree();
    (0..tree.len()).map(|n| n > 0 && pp.model.total_delta(n).eval(x) >= c).collect()
}

/// Outcome of one pattern.
pub struct PatternSolution {
    pub pattern: BetaPattern,
    pub problem: ConvexProblem,
    pub result: EngineResult,
    pub beta: AdaptedProcess,
    pub regime_rounds: usize,
}

fn solve_pattern(
    universe: &ContractUniverse,
    xi: &Runoff,
    config: &ConstraintConfig,
    policy: &DividendPolicy,
    pattern: &BetaPattern,
    settings: &SolverSettings,
) -> Result<PatternSolution, SolveError> {
    let beta = pattern.to_process(universe.tree());
    let layout = Layout::new(universe);
    let start = neutral_start(&layout, config.k0);
    match policy {
        DividendPolicy::Threshold { c, .. } => {
            // regimes: start from the neutral point, then flip nodes whose
            // regime constraint binds while the objective improves
            let probe = build_pattern_problem(universe, xi, config, policy, &beta, None)?;
            let mut regime = regime_of(&probe, &start, *c);
            let mut pp = build_pattern_problem(universe, xi, config, policy, &beta, Some(&regime))?;
            let mut r = engine::solve(&pp.problem, &start, settings);
            let mut rounds = 1;
            while rounds < 20 {
                let binding: Vec<usize> = pp
                    .problem
                    .constraints
                    .iter()
                    .zip(&r.multipliers)
                    .filter(|(c, m)| c.label.name.starts_with("regime") && **m > settings.kkt_tol)
                    .filter_map(|(c, _)| c.label.node)
                    .collect();
                if binding.is_empty() && r.status != Status::Infeasible {
                    break;
                }
                let mut next = regime.clone();
                if binding.is_empty() {
                    // infeasible regime: move to the one of the phase-1 point
                    next = regime_of(&pp, &r.x, *c);
                } else {
                    for n in binding {
                        next[n] = !next[n];
                    }
                }
                if next == regime {
                    break;
                }
                let cand = build_pattern_problem(universe, xi, config, policy, &beta, Some(&next))?;
                let rc = engine::solve(&cand.problem, &r.x, settings);
                rounds += 1;
                let better = match (rc.status, r.status) {
                    (Status::Optimal, Status::Optimal) => rc.objective > r.objective + 1e-12,
                    (Status::Optimal, _) => true,
                    _ => false,
                };
                if !better {
                    break;
                }
                regime = next;
                pp = cand;
                r = rc;
            }
            Ok(PatternSolution { pattern: pattern.clone(), problem: pp.problem, result: r, beta, regime_rounds: rounds })
        }
        _ => {
            let pp = build_pattern_problem(universe, xi, config, policy, &beta, None)?;
            let r = engine::solve(&pp.problem, &start, settings);
            Ok(PatternSolution { pattern: pattern.clone(), problem: pp.problem, result: r, beta, regime_rounds: 0 })
        }
    }
}

/// Objective gain needed to prefer a later pattern; ties keep the earlier
/// one, which ceases least.
const TIE_TOL: f64 = 1e-7;

fn better(a: &PatternSolution, b: &PatternSolution) -> bool {
    match (a.result.status, b.result.status) {
        (Status::Optimal, Status::Optimal) => a.result.objective > b.result.objective + TIE_TOL * b.result.objective.abs().max(1.0),
        (Status::Optimal, _) => true,
        _ => false,
    }
}

pub fn solve_quadratic_model(
    universe: &ContractUniverse,
    xi: &Runoff,
    config: &ConstraintConfig,
    policy: &DividendPolicy,
    settings: &SolverSettings,
) -> Result<SolveReport, SolveError> {
    config.validate(universe.aleph())?;
    policy.validate().map_err(SolveError::Input)?;
    if let DividendPolicy::Table { values } = policy {
        if values.len() != universe.tree().len() {
            return Err(SolveError::Input(format!("dividend table has {} entries for {} nodes", values.len(), universe.tree().len())));
        }
    }
    xi.validate(universe)?;
    let layout = Layout::new(universe);
    if layout.len() > settings.max_dim {
        return Err(SolveError::DimensionCap { dim: layout.len(), cap: settings.max_dim });
    }
    let probe_slack = check_dividend_volatility(universe, xi, config, policy)?;
    let tree = universe.tree();
    let mut notes = vec![];
    let mut heuristic = policy.depends_on_results();
    if heuristic {
        notes.push("dividend regimes of the threshold policy chosen by local search".to_string());
    }

    let (best, tried) = match enumerate_patterns(tree, universe.aleph(), settings.enumeration_cap) {
        Some(patterns) => {
            let sols = crate::exec::map_slice(&patterns, |pat| solve_pattern(universe, xi, config, policy, pat, settings));
            let sols = sols.into_iter().collect::<Result<Vec<_>, _>>()?;
            let tried = sols.len();
            let mut best: Option<PatternSolution> = None;
            for s in sols {
                if best.as_ref().is_none_or(|b| better(&s, b)) {
                    best = Some(s);
                }
            }
            (best.expect("at least one pattern"), tried)
        }
        None => {
            heuristic = true;
            notes.push(format!(
                "{} cessation patterns exceed the enumeration cap {}; alternating between solve and pattern update",
                pattern_count(tree, universe.aleph()),
                settings.enumeration_cap
            ));
            let mut pattern = BetaPattern::never(universe.aleph());
            let mut seen = vec![pattern.clone()];
            let mut best: Option<PatternSolution> = None;
            let mut converged = false;
            for _ in 0..50 {
                let sol = solve_pattern(universe, xi, config, policy, &pattern, settings)?;
                let x = layout.unpack(universe, &sol.result.x, &sol.beta);
                let ev = Evaluation::new(universe, &x, xi, config, policy)?;
                let mins: Vec<Vec<f64>> = (0..universe.aleph())
                    .map(|j| crate::constraints::running_min(&ev.paths.per_sub[j], &ev.margins[j]))
                    .collect();
                let mut next = BetaPattern::from_surplus(tree, &mins, config.zero_margin_rule);
                if next == pattern {
                    // fixed point: try ceasing where continuing binds
                    for (c, m) in sol.problem.constraints.iter().zip(&sol.result.multipliers) {
                        if c.label.name == "c8_continue" && *m > settings.kkt_tol {
                            next = next.with_trigger(tree, c.label.j.unwrap_or(0), c.label.node.unwrap_or(0));
                        }
                    }
                }
                if best.as_ref().is_none_or(|b| better(&sol, b)) {
                    best = Some(sol);
                }
                if next == pattern || seen.contains(&next) {
                    converged = true;
                    break;
                }
                seen.push(next.clone());
                pattern = next;
            }
            if !converged {
                notes.push("alternation did not reach a fixed point".to_string());
            }
            let tried = seen.len();
            (best.expect("at least one round"), tried)
        }
    };

    let mut report = SolveReport::from_engine("quadratic", &best.problem, &best.result);
    report.heuristic = heuristic;
    report.patterns_tried = tried;
    report.notes = notes;
    report.notes.push(format!("cessation pattern: {}", describe(&best.pattern)));
    if best.regime_rounds > 0 {
        report.notes.push(format!("dividend regime rounds: {}", best.regime_rounds));
    }
    if probe_slack.is_finite() {
        report.notes.push(format!("dividend volatility slack on probes: {probe_slack:.6e}"));
    }
    if report.status == Status::Optimal || report.status == Status::MaxIter {
        let v = DVector::from_column_slice(&report.x);
        let mut x = layout.unpack(universe, &v, &best.beta);
        // dividends of the holding follow the policy; the split is the solver's
        x.beta = best.beta.clone();
        let ev = Evaluation::new(universe, &x, xi, config, policy)?;
        let feas = ev.quadratic_model()?;
        let min_slack = feas.min_slack();
        if min_slack < -FEAS_TOL && report.status == Status::Optimal {
            report.status = Status::MaxIter;
            report.notes.push(format!("independent evaluation finds slack {min_slack:.3e}"));
        }
        report.min_slack = report.min_slack.min(min_slack);
        let vol = ev.dividend_volatility_slack();
        if vol < -1e-12 {
            report.notes.push(format!("dividend volatility hypothesis fails at the returned point (slack {vol:.6e})"));
        }
        if config.check_epsilon_sums(universe.aleph(), universe.horizon()).is_ok() {
            let c = chebyshev_containment(universe, &x, xi, config)?;
            if c.counterexample {
                report.notes.push("containment counterexample at the returned point".to_string());
            }
        }
        report.feasibility = Some(feas);
        report.portfolio = Some(x);
    }
    Ok(report)
}

pub fn describe(p: &BetaPattern) -> String {
    p.per_sub
        .iter()
        .enumerate()
        .map(|(j, c)| {
            if c.at_root {
                format!("j{j}: ceased from t=0")
            } else if c.triggers.is_empty() {
                format!("j{j}: never ceases")
            } else {
                format!("j{j}: ceases after nodes {:?}", c.triggers)
            }
        })
        .collect::<Vec<_>>()
        .join("; ")
}
