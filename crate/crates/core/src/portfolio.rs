//! Portfolio variable `x = (α, β, K⃗(0), D⃗)` and the utility, result,
//! equity and dividend processes it induces.
//!
//! `α` holds the underwriting levels of all subsidiaries concatenated
//! (components `offset(j)..offset(j)+N^(j)`), `β^{(j)} = 1` marks that
//! subsidiary `j` has ceased writing. Run-off stays on the books after
//! cessation.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contracts::{runoff_utility_stream, ContractError, ContractUniverse, Runoff, SubsidiaryBlock};
use crate::tree::{AdaptedProcess, RandomVariable, ScenarioTree, TreeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PortfolioError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error("portfolio does not match the universe: {0}")]
    Shape(String),
    #[error("beta must be 0 or 1 (node {node}, subsidiary {j}: {value})")]
    BetaNotBinary { node: usize, j: usize, value: f64 },
    #[error("beta is not absorbing at node {node}, subsidiary {j}")]
    BetaNotAbsorbing { node: usize, j: usize },
    #[error("nonzero underwriting after cessation at node {node}, subsidiary {j}")]
    Complementarity { node: usize, j: usize },
    #[error("depth {depth} outside 1..={horizon}")]
    Depth { depth: usize, horizon: usize },
    #[error("dividend table has {got} entries, the tree has {expected} nodes")]
    DividendTable { expected: usize, got: usize },
    #[error("dividend at the root must be 0")]
    RootDividend,
    #[error("price process must start at 0 and stay constant after the last writing time (node {0})")]
    PriceNormalization(usize),
}

#[derive(Debug, Clone)]
pub struct PortfolioVariable {
    /// `p∘η`, dim `N`, depths `0..=T̄`
    pub alpha: AdaptedProcess,
    /// `λ∘η`, dim `ℵ`, depths `0..=T_max`
    pub beta: AdaptedProcess,
    pub k0: Vec<f64>,
    /// `D⃗`, dim `ℵ`, depths `1..=T_max`
    pub d: AdaptedProcess,
}

impl PortfolioVariable {
    pub fn zeros(universe: &ContractUniverse) -> Self {
        let tree = universe.tree();
        let h = universe.horizon();
        Self {
            alpha: AdaptedProcess::zeros(tree, universe.total_dim(), 0..=universe.t_bar()),
            beta: AdaptedProcess::zeros(tree, universe.aleph(), 0..=h),
            k0: vec![0.0; universe.aleph()],
            d: AdaptedProcess::zeros(tree, universe.aleph(), 1..=h),
        }
    }

    /// Active portfolio with the given underwriting levels and initial equity.
    pub fn with_alpha(universe: &ContractUniverse, alpha: AdaptedProcess, k0: Vec<f64>) -> Self {
        let mut x = Self::zeros(universe);
        x.alpha = alpha;
        x.k0 = k0;
        x
    }

    pub fn check_shape(&self, universe: &ContractUniverse) -> Result<(), PortfolioError> {
        let tree = universe.tree();
        let same = |p: &AdaptedProcess| Arc::ptr_eq(p.tree(), tree) || **p.tree() == **tree;
        if !same(&self.alpha) || !same(&self.beta) || !same(&self.d) {
            return Err(TreeError::TreeMismatch.into());
        }
        if self.alpha.dim() != universe.total_dim() {
            return Err(PortfolioError::Shape(format!("alpha has dim {}, expected {}", self.alpha.dim(), universe.total_dim())));
        }
        if self.beta.dim() != universe.aleph() || self.d.dim() != universe.aleph() || self.k0.len() != universe.aleph() {
            return Err(PortfolioError::Shape("beta, D and K0 need one component per subsidiary".into()));
        }
        for d in universe.t_bar() + 1..=universe.horizon() {
            if self.alpha.is_active(d) && tree.level(d).any(|n| self.alpha.value(n).iter().any(|&v| v != 0.0)) {
                return Err(PortfolioError::Shape(format!("alpha must vanish after T̄ (depth {d})")));
            }
        }
        if tree.level(0).any(|n| self.d.value(n).iter().any(|&v| v != 0.0)) {
            return Err(PortfolioError::RootDividend);
        }
        Ok(())
    }

    /// Checks shape, binary and absorbing `β`, and `α^{(j)}β^{(j)} = 0`.
    pub fn validate(&self, universe: &ContractUniverse) -> Result<(), PortfolioError> {
        self.check_shape(universe)?;
        let tree = universe.tree();
        for n in 0..tree.len() {
            for j in 0..universe.aleph() {
                let b = self.beta.get(n, j);
                if b != 0.0 && b != 1.0 {
                    return Err(PortfolioError::BetaNotBinary { node: n, j, value: b });
                }
                if let Some(p) = tree.parent(n) {
                    if self.beta.get(p, j) == 1.0 && b != 1.0 {
                        return Err(PortfolioError::BetaNotAbsorbing { node: n, j });
                    }
                }
                if b == 1.0 && tree.depth(n) <= universe.t_bar() {
                    let off = universe.offset(j);
                    if self.alpha.value(n)[off..off + universe.n_types(j)].iter().any(|&v| v != 0.0) {
                        return Err(PortfolioError::Complementarity { node: n, j });
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether subsidiary `j` still writes business at node `n`.
    pub fn active(&self, n: usize, j: usize) -> bool {
        self.beta.get(n, j) == 0.0
    }
}

/// Contribution `Σ_{k ≤ t*} α^{(j)}(k)·u^{(j)}(k, t)` at node `n`; `next`
/// switches to `u(k, t+1) − u(k, t)` along the edge into `n`.
fn underwriting_term(universe: &ContractUniverse, x: &PortfolioVariable, j: usize, n: usize, increment: bool) -> f64 {
    let tree = universe.tree();
    let t = tree.depth(n);
    let last = if increment { t.saturating_sub(1) } else { t };
    if increment && t == 0 {
        return 0.0;
    }
    let off = universe.offset(j);
    let nt = universe.n_types(j);
    let mut acc = 0.0;
    for k in 0..=last.min(universe.t_bar()) {
        let a = tree.ancestor(n, k);
        if !x.active(a, j) {
            break;
        }
        let u = universe.writing(j, k);
        let alpha = &x.alpha.value(a)[off..off + nt];
        let un = u.value(n);
        if increment {
            let up = u.value(tree.parent(n).expect("t > 0"));
            acc += alpha.iter().zip(un.iter().zip(up)).map(|(a, (x1, x0))| a * (x1 - x0)).sum::<f64>();
        } else {
            acc += alpha.iter().zip(un).map(|(a, u)| a * u).sum::<f64>();
        }
    }
    acc
}

/// Per-subsidiary utilities `U^{(j)}(t, ξ^{(j)} + η^{(j)})` on all depths.
pub fn utility_processes(
    universe: &ContractUniverse,
    x: &PortfolioVariable,
    xi: &Runoff,
) -> Result<Vec<AdaptedProcess>, PortfolioError> {
    x.check_shape(universe)?;
    let runoff = runoff_utility_stream(universe, xi)?;
    let tree = universe.tree();
    Ok((0..universe.aleph())
        .map(|j| {
            AdaptedProcess::from_fn(tree, 1, 0..=tree.horizon(), |n, out| {
                out[0] = runoff[j].value(n)[0] + underwriting_term(universe, x, j, n, false);
            })
        })
        .collect())
}

/// Per-subsidiary results `ΔU^{(j)}(t)` computed from the increment form;
/// zero at the root.
pub fn delta_utility_processes(
    universe: &ContractUniverse,
    x: &PortfolioVariable,
    xi: &Runoff,
) -> Result<Vec<AdaptedProcess>, PortfolioError> {
    x.check_shape(universe)?;
    xi.validate(universe)?;
    let tree = universe.tree();
    Ok((0..universe.aleph())
        .map(|j| {
            AdaptedProcess::from_fn(tree, 1, 0..=tree.horizon(), |n, out| {
                let Some(parent) = tree.parent(n) else { return };
                let mut runoff = 0.0;
                for (jj, k, amounts) in xi.iter() {
                    if jj != j {
                        continue;
                    }
                    let p = universe.runoff_process(j, k).expect("validated");
                    runoff += amounts
                        .iter()
                        .zip(p.value(n).iter().zip(p.value(parent)))
                        .map(|(a, (u1, u0))| a * (u1 - u0))
                        .sum::<f64>();
                }
                out[0] = runoff + underwriting_term(universe, x, j, n, true);
            })
        })
        .collect())
}

fn sum_processes(tree: &Arc<ScenarioTree>, parts: &[AdaptedProcess]) -> AdaptedProcess {
    AdaptedProcess::from_fn(tree, 1, 0..=tree.horizon(), |n, out| {
        out[0] = parts.iter().map(|p| p.value(n)[0]).sum();
    })
}

/// Aggregate utility `U(t, ξ + η)` at depth `t`.
pub fn utility(universe: &ContractUniverse, x: &PortfolioVariable, xi: &Runoff, t: usize) -> Result<RandomVariable, PortfolioError> {
    if t > universe.horizon() {
        return Err(PortfolioError::Depth { depth: t, horizon: universe.horizon() });
    }
    let parts = utility_processes(universe, x, xi)?;
    Ok(sum_processes(universe.tree(), &parts).at_depth(t))
}

/// Aggregate result `ΔU(t)` for `1 ≤ t ≤ T_max`.
pub fn delta_utility(universe: &ContractUniverse, x: &PortfolioVariable, xi: &Runoff, t: usize) -> Result<RandomVariable, PortfolioError> {
    if t == 0 || t > universe.horizon() {
        return Err(PortfolioError::Depth { depth: t, horizon: universe.horizon() });
    }
    let parts = delta_utility_processes(universe, x, xi)?;
    Ok(sum_processes(universe.tree(), &parts).at_depth(t))
}

/// Final utility `U(∞, ξ + η)` on the leaf level.
pub fn final_utility(universe: &ContractUniverse, x: &PortfolioVariable, xi: &Runoff) -> Result<RandomVariable, PortfolioError> {
    utility(universe, x, xi, universe.horizon())
}

/// Dividend policy of the holding, a causal function of aggregate results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DividendPolicy {
    #[default]
    Zero,
    /// `D(t) = x (ΔU(t) − c)` when `ΔU(t) ≥ c`, otherwise 0.
    Threshold { x: f64, c: f64 },
    /// Explicit dividend per node id (root entry must be 0).
    Table { values: Vec<f64> },
}

impl DividendPolicy {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            DividendPolicy::Threshold { x, c } if !(0.0..=1.0).contains(x) || *c < 0.0 || !c.is_finite() => {
                Err(format!("threshold policy needs x in [0, 1] and c >= 0, got x = {x}, c = {c}"))
            }
            _ => Ok(()),
        }
    }

    /// Whether the policy's dividends depend on the portfolio.
    pub fn depends_on_results(&self) -> bool {
        matches!(self, DividendPolicy::Threshold { .. })
    }
}

/// Evaluates `D(t) = f_t(ΔU(1), …, ΔU(t))` on every node; `D(0) = 0`.
pub fn dividend_eval(
    policy: &DividendPolicy,
    tree: &Arc<ScenarioTree>,
    aggregate_du: &AdaptedProcess,
) -> Result<AdaptedProcess, PortfolioError> {
    let h = tree.horizon();
    match policy {
        DividendPolicy::Zero => Ok(AdaptedProcess::zeros(tree, 1, 1..=h)),
        DividendPolicy::Threshold { x, c } => Ok(AdaptedProcess::from_fn(tree, 1, 1..=h, |n, out| {
            let du = aggregate_du.value(n)[0];
            out[0] = if du >= *c { x * (du - c) } else { 0.0 };
        })),
        DividendPolicy::Table { values } => {
            if values.len() != tree.len() {
                return Err(PortfolioError::DividendTable { expected: tree.len(), got: values.len() });
            }
            if values[0] != 0.0 {
                return Err(PortfolioError::RootDividend);
            }
            Ok(AdaptedProcess::from_fn(tree, 1, 1..=h, |n, out| out[0] = values[n]))
        }
    }
}

/// Replaces `x.d` by the policy's dividends, split equally between the
/// subsidiaries (any split satisfies the budget identity).
pub fn apply_policy(
    universe: &ContractUniverse,
    x: &PortfolioVariable,
    xi: &Runoff,
    policy: &DividendPolicy,
) -> Result<PortfolioVariable, PortfolioError> {
    let du = delta_utility_processes(universe, x, xi)?;
    let tree = universe.tree();
    let total = sum_processes(tree, &du);
    let d = dividend_eval(policy, tree, &total)?;
    let aleph = universe.aleph() as f64;
    let mut out = x.clone();
    out.d = AdaptedProcess::from_fn(tree, universe.aleph(), 1..=tree.horizon(), |n, row| {
        row.iter_mut().for_each(|v| *v = d.value(n)[0] / aleph);
    });
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EquityPaths {
    /// `K^{(j)}(t)` per subsidiary
    pub per_sub: Vec<AdaptedProcess>,
    /// `K(t) = Σ_j K^{(j)}(t)`
    pub total: AdaptedProcess,
    pub utility: Vec<AdaptedProcess>,
    pub delta: Vec<AdaptedProcess>,
    /// `D^{(j)}(t)` per subsidiary (root value 0)
    pub dividends: Vec<AdaptedProcess>,
}

/// Equity by the one-period recursion `K(t+1) = K(t) + ΔU(t+1) − D(t+1)`.
pub fn equity_paths(universe: &ContractUniverse, x: &PortfolioVariable, xi: &Runoff) -> Result<EquityPaths, PortfolioError> {
    let tree = universe.tree();
    let utility = utility_processes(universe, x, xi)?;
    let delta = delta_utility_processes(universe, x, xi)?;
    let mut per_sub = Vec::with_capacity(universe.aleph());
    let mut dividends = Vec::with_capacity(universe.aleph());
    for j in 0..universe.aleph() {
        let mut k = AdaptedProcess::zeros_full(tree, 1);
        let mut dj = AdaptedProcess::zeros_full(tree, 1);
        for n in 0..tree.len() {
            match tree.parent(n) {
                None => k.set(n, 0, x.k0[j]),
                Some(p) => {
                    let d = x.d.get(n, j);
                    dj.set(n, 0, d);
                    let v = k.get(p, 0) + delta[j].get(n, 0) - d;
                    k.set(n, 0, v);
                }
            }
        }
        per_sub.push(k);
        dividends.push(dj);
    }
    let total = sum_processes(tree, &per_sub);
    Ok(EquityPaths { per_sub, total, utility, delta, dividends })
}

/// Equity by the closed form `K(t) = K(0) + U(t) − Σ_{1≤k≤t} D(k)`.
pub fn equity_closed_form(universe: &ContractUniverse, x: &PortfolioVariable, xi: &Runoff) -> Result<Vec<AdaptedProcess>, PortfolioError> {
    let tree = universe.tree();
    let utility = utility_processes(universe, x, xi)?;
    Ok((0..universe.aleph())
        .map(|j| {
            AdaptedProcess::from_fn(tree, 1, 0..=tree.horizon(), |n, out| {
                let paid: f64 = tree.path(n).iter().skip(1).map(|&a| x.d.get(a, j)).sum();
                out[0] = x.k0[j] + utility[j].get(n, 0) - paid;
            })
        })
        .collect())
}

impl EquityPaths {
    /// Rows `node,depth,j,K,D,U,dU`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node", "depth", "j", "K", "D", "U", "dU"])?;
        let tree = self.total.tree();
        for n in 0..tree.len() {
            for j in 0..self.per_sub.len() {
                w.write_record([
                    n.to_string(),
                    tree.depth(n).to_string(),
                    j.to_string(),
                    self.per_sub[j].get(n, 0).to_string(),
                    self.dividends[j].get(n, 0).to_string(),
                    self.utility[j].get(n, 0).to_string(),
                    self.delta[j].get(n, 0).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Turns a price process into a contract block whose utilities are
/// trading gains: `u(k, t′) = p(k+1) − p(k)` for `k < t′`.
pub fn invested_assets_adapter(price: &AdaptedProcess, t_bar: usize) -> Result<SubsidiaryBlock, PortfolioError> {
    let tree = price.tree();
    let h = tree.horizon();
    if (0..=h).any(|d| !price.is_active(d)) {
        return Err(PortfolioError::Shape("price process must cover every depth".into()));
    }
    if price.value(0).iter().any(|&v| v != 0.0) {
        return Err(PortfolioError::PriceNormalization(0));
    }
    for n in 1..tree.len() {
        if tree.depth(n) > t_bar && price.value(n) != price.value(tree.parent(n).expect("non-root")) {
            return Err(PortfolioError::PriceNormalization(n));
        }
    }
    let dim = price.dim();
    let writing = (0..=t_bar)
        .map(|k| {
            AdaptedProcess::from_fn(tree, dim, 0..=h, |n, out| {
                if tree.depth(n) > k {
                    let p1 = price.value(tree.ancestor(n, k + 1));
                    let p0 = price.value(tree.ancestor(n, k));
                    for (o, (a, b)) in out.iter_mut().zip(p1.iter().zip(p0)) {
                        *o = a - b;
                    }
                }
            })
        })
        .collect();
    Ok(SubsidiaryBlock { n_types: dim, writing, runoff: vec![] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{generate_universe, GenSpec, IncrementLaw, RunoffContract, SubsidiaryGen, DEFAULT_MAX_LEAVES};
    use crate::tree::TreeSpec;

    fn universe(t_bar: usize, settle: usize, laws: Vec<IncrementLaw>, runoff: Vec<RunoffContract>) -> ContractUniverse {
        let spec = GenSpec {
            t_bar,
            settlement: settle,
            subsidiaries: vec![SubsidiaryGen { types: 1, increments: laws, overrides: vec![], runoff }],
            max_leaves: DEFAULT_MAX_LEAVES,
        };
        generate_universe(&spec, &TreeSpec::new(vec![])).unwrap()
    }

    #[test]
    fn zero_portfolio_has_zero_utility() {
        let u = universe(1, 1, vec![IncrementLaw::fair_coin(&[1.0])], vec![]);
        let x = PortfolioVariable::zeros(&u);
        for t in 0..=u.horizon() {
            assert!(utility(&u, &x, &Runoff::new(), t).unwrap().values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scaled_single_contract() {
        let u = universe(0, 1, vec![IncrementLaw::fair_coin(&[1.0])], vec![]);
        let mut x = PortfolioVariable::zeros(&u);
        x.alpha.set(0, 0, 2.0);
        let fin = final_utility(&u, &x, &Runoff::new()).unwrap();
        let mut v = fin.values().to_vec();
        v.sort_by(f64::total_cmp);
        assert_eq!(v, vec![-2.0, 2.0]);
        assert_eq!(fin.expectation(), vec![0.0]);
        assert_eq!(fin.variance(), 4.0);
    }

    #[test]
    fn cessation_excludes_later_writing_on_one_branch() {
        // T̄ = 1, T = 1: two writing times, 4 leaves
        let u = universe(1, 1, vec![IncrementLaw::fair_coin(&[1.0])], vec![]);
        let tree = u.tree().clone();
        let mut x = PortfolioVariable::zeros(&u);
        x.alpha.set(0, 0, 1.0);
        for n in tree.level(1) {
            x.alpha.set(n, 0, 3.0);
        }
        // cease on the first depth-1 branch
        let ceased = tree.level(1).start;
        x.alpha.set(ceased, 0, 0.0);
        for n in std::iter::once(ceased).chain(tree.children(ceased)) {
            x.beta.set(n, 0, 1.0);
        }
        x.validate(&u).unwrap();
        let fin = final_utility(&u, &x, &Runoff::new()).unwrap();
        let u0 = u.writing(0, 0);
        let u1 = u.writing(0, 1);
        for leaf in tree.leaves() {
            let a1 = tree.ancestor(leaf, 1);
            let expected = u0.value(leaf)[0] + if a1 == ceased { 0.0 } else { 3.0 * u1.value(leaf)[0] };
            assert_eq!(fin.at(leaf)[0], expected);
        }
    }

    #[test]
    fn deterministic_stream_results() {
        // utility stream (0, 1, 1): one deterministic increment then settlement
        let u = universe(
            0,
            2,
            vec![IncrementLaw::Independent { independent: vec![vec![[0.5, 0.5], [0.5, 1.5]]] }, IncrementLaw::fair_coin(&[1.0])],
            vec![RunoffContract { time: -1, increments: vec![vec![1.0]] }],
        );
        let mut xi = Runoff::new();
        xi.insert(0, -1, vec![1.0]).unwrap();
        let x = PortfolioVariable::zeros(&u);
        let du1 = delta_utility(&u, &x, &xi, 1).unwrap();
        let du2 = delta_utility(&u, &x, &xi, 2).unwrap();
        assert!(du1.values().iter().all(|&v| v == 1.0));
        assert!(du2.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn runoff_only_results_hand_expansion() {
        let u = universe(
            0,
            3,
            vec![IncrementLaw::fair_coin(&[1.0]), IncrementLaw::fair_coin(&[1.0]), IncrementLaw::fair_coin(&[1.0])],
            vec![
                RunoffContract { time: -1, increments: vec![vec![2.0]] },
                RunoffContract { time: -2, increments: vec![vec![-0.5]] },
            ],
        );
        let mut xi = Runoff::new();
        xi.insert(0, -1, vec![3.0]).unwrap();
        xi.insert(0, -2, vec![4.0]).unwrap();
        let x = PortfolioVariable::zeros(&u);
        // ΔU(1) = 3·2 + 4·(−0.5) = 4, ΔU(2) = 0
        assert!(delta_utility(&u, &x, &xi, 1).unwrap().values().iter().all(|&v| v == 4.0));
        assert!(delta_utility(&u, &x, &xi, 2).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(delta_utility(&u, &x, &xi, 3).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(delta_utility(&u, &x, &xi, 4).is_err());
    }

    #[test]
    fn telescoping_and_equity_forms() {
        let u = universe(1, 2, vec![IncrementLaw::fair_coin(&[1.0]), IncrementLaw::fair_coin(&[0.5])], vec![]);
        let tree = u.tree().clone();
        let mut x = PortfolioVariable::zeros(&u);
        for n in 0..tree.len() {
            if tree.depth(n) <= 1 {
                x.alpha.set(n, 0, 1.0 + n as f64);
            }
            if tree.depth(n) >= 1 {
                x.d.set(n, 0, 0.1 * n as f64);
            }
        }
        x.k0 = vec![5.0];
        let xi = Runoff::new();
        let ut = utility_processes(&u, &x, &xi).unwrap();
        let du = delta_utility_processes(&u, &x, &xi).unwrap();
        for n in 1..tree.len() {
            let p = tree.parent(n).unwrap();
            assert!((ut[0].get(n, 0) - ut[0].get(p, 0) - du[0].get(n, 0)).abs() < 1e-12);
        }
        let rec = equity_paths(&u, &x, &xi).unwrap();
        let closed = equity_closed_form(&u, &x, &xi).unwrap();
        for n in 0..tree.len() {
            assert!((rec.per_sub[0].get(n, 0) - closed[0].get(n, 0)).abs() < 1e-10);
        }
    }

    #[test]
    fn equity_examples() {
        let u = universe(0, 1, vec![IncrementLaw::fair_coin(&[1.0])], vec![]);
        let mut x = PortfolioVariable::zeros(&u);
        x.k0 = vec![3.5];
        let eq = equity_paths(&u, &x, &Runoff::new()).unwrap();
        assert!(eq.total.raw().iter().all(|&v| v == 3.5));

        // K(0) = 10, ΔU(1) = 3, D(1) = 1 → K(1) = 12
        let u = universe(
            0,
            1,
            vec![IncrementLaw::fair_coin(&[1.0])],
            vec![],
        );
        let mut x = PortfolioVariable::zeros(&u);
        x.k0 = vec![10.0];
        x.alpha.set(0, 0, 3.0);
        let tree = u.tree().clone();
        let up = tree.level(1).find(|&n| u.writing(0, 0).get(n, 0) > 0.0).unwrap();
        x.d.set(up, 0, 1.0);
        let eq = equity_paths(&u, &x, &Runoff::new()).unwrap();
        assert_eq!(eq.total.get(up, 0), 12.0);
    }

    #[test]
    fn threshold_policy_path() {
        // chain with results (3, −1)
        let tree = Arc::new(ScenarioTree::build(&TreeSpec::uniform(&[1, 1])).unwrap());
        let mut du = AdaptedProcess::zeros_full(&tree, 1);
        du.set(1, 0, 3.0);
        du.set(2, 0, -1.0);
        let d = dividend_eval(&DividendPolicy::Threshold { x: 0.5, c: 2.0 }, &tree, &du).unwrap();
        assert_eq!(d.raw(), &[0.0, 0.5, 0.0]);
        let d = dividend_eval(&DividendPolicy::Zero, &tree, &du).unwrap();
        assert_eq!(d.raw(), &[0.0, 0.0, 0.0]);
        assert!(dividend_eval(&DividendPolicy::Table { values: vec![0.0, 1.0] }, &tree, &du).is_err());
        let d = dividend_eval(&DividendPolicy::Table { values: vec![0.0, 1.0, 2.0] }, &tree, &du).unwrap();
        assert_eq!(d.raw(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn validation_catches_bad_beta() {
        let u = universe(1, 1, vec![IncrementLaw::fair_coin(&[1.0])], vec![]);
        let mut x = PortfolioVariable::zeros(&u);
        x.beta.set(1, 0, 1.0);
        assert!(matches!(x.validate(&u), Err(PortfolioError::BetaNotAbsorbing { .. })));
        let mut x = PortfolioVariable::zeros(&u);
        x.beta.set(0, 0, 0.5);
        assert!(matches!(x.validate(&u), Err(PortfolioError::BetaNotBinary { .. })));
        let mut x = PortfolioVariable::zeros(&u);
        for n in 0..u.tree().len() {
            x.beta.set(n, 0, 1.0);
        }
        x.alpha.set(0, 0, 1.0);
        assert!(matches!(x.validate(&u), Err(PortfolioError::Complementarity { .. })));
    }

    fn price_tree() -> (Arc<ScenarioTree>, AdaptedProcess) {
        // T̄ = 2, T = 1: binary, binary, then a single branch
        let tree = Arc::new(ScenarioTree::build(&TreeSpec::uniform(&[2, 2, 1])).unwrap());
        let p = AdaptedProcess::from_fn(&tree, 1, 0..=3, |n, out| {
            let path = tree.path(n);
            let mut v = 0.0;
            for &a in path.iter().skip(1).take(2) {
                v += if tree.node(a).child_index == 0 { 1.0 } else { -1.0 };
            }
            out[0] = v;
        });
        (tree, p)
    }

    #[test]
    fn adapter_binary_price_hold_one() {
        let (tree, p) = price_tree();
        let block = invested_assets_adapter(&p, 2).unwrap();
        let u = ContractUniverse::from_blocks(Arc::clone(&tree), 2, 1, vec![block]).unwrap();
        let mut x = PortfolioVariable::zeros(&u);
        for n in 0..tree.len() {
            if tree.depth(n) <= 1 {
                x.alpha.set(n, 0, 1.0);
            }
        }
        let fin = final_utility(&u, &x, &Runoff::new()).unwrap();
        let mut gains: Vec<f64> = fin.values().to_vec();
        gains.sort_by(f64::total_cmp);
        assert_eq!(gains, vec![-2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn adapter_trading_gain_identity() {
        let (tree, p) = price_tree();
        let block = invested_assets_adapter(&p, 2).unwrap();
        let u = ContractUniverse::from_blocks(Arc::clone(&tree), 2, 1, vec![block]).unwrap();
        let mut x = PortfolioVariable::zeros(&u);
        for n in 0..tree.len() {
            if tree.depth(n) <= 2 {
                x.alpha.set(n, 0, 0.5 + 0.25 * n as f64);
            }
        }
        let ut = utility_processes(&u, &x, &Runoff::new()).unwrap();
        for n in 0..tree.len() {
            let t = tree.depth(n);
            let mut gain = 0.0;
            for k in 0..t {
                let a = tree.ancestor(n, k);
                let h = if k <= 2 { x.alpha.get(a, 0) } else { 0.0 };
                gain += h * (p.get(tree.ancestor(n, k + 1), 0) - p.get(a, 0));
            }
            assert_eq!(ut[0].get(n, 0), gain);
        }
    }

    #[test]
    fn adapter_constant_price_and_normalization() {
        let tree = Arc::new(ScenarioTree::build(&TreeSpec::uniform(&[2, 1])).unwrap());
        let zero = AdaptedProcess::zeros_full(&tree, 1);
        let block = invested_assets_adapter(&zero, 1).unwrap();
        assert!(block.writing.iter().all(|w| w.raw().iter().all(|&v| v == 0.0)));
        let mut bad = AdaptedProcess::zeros_full(&tree, 1);
        bad.set(0, 0, 1.0);
        assert!(invested_assets_adapter(&bad, 1).is_err());
        let mut late = AdaptedProcess::zeros_full(&tree, 1);
        late.set(3, 0, 1.0);
        assert!(invested_assets_adapter(&late, 1).is_err());
        // deterministic p(1) − p(0) = 1, buy 2 at t = 0 → gain 2
        let chain = Arc::new(ScenarioTree::build(&TreeSpec::uniform(&[1, 1])).unwrap());
        let mut p = AdaptedProcess::zeros_full(&chain, 1);
        p.set(1, 0, 1.0);
        p.set(2, 0, 1.0);
        let block = invested_assets_adapter(&p, 1).unwrap();
        let u = ContractUniverse::from_blocks(chain, 1, 1, vec![block]).unwrap();
        let mut x = PortfolioVariable::zeros(&u);
        x.alpha.set(0, 0, 2.0);
        assert_eq!(final_utility(&u, &x, &Runoff::new()).unwrap().values(), &[2.0]);
    }
}
