//! Affine representation of the model for a fixed cessation pattern.
//!
//! With `β` fixed, utilities, equities and volume margins are affine in the
//! decision vector `x = [α | K⃗(0) | D⃗]`; this module builds those rows so the
//! optimizer can work on plain vectors.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::constraints::{ConstraintConfig, ConstraintError, MarginSpec};
use crate::contracts::{runoff_utility_stream, ContractUniverse, Runoff};
use crate::portfolio::PortfolioVariable;
use crate::tree::{AdaptedProcess, ScenarioTree};

/// Index map of the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    /// Nodes carrying `α` (depths `0..=T̄`).
    pub alpha_nodes: usize,
    /// Components `N`.
    pub n: usize,
    pub aleph: usize,
    pub tree_len: usize,
}

impl Layout {
    pub fn new(universe: &ContractUniverse) -> Self {
        Self {
            alpha_nodes: universe.tree().level(universe.t_bar()).end,
            n: universe.total_dim(),
            aleph: universe.aleph(),
            tree_len: universe.tree().len(),
        }
    }

    pub fn n_alpha(&self) -> usize {
        self.alpha_nodes * self.n
    }

    pub fn len(&self) -> usize {
        self.n_alpha() + self.aleph + (self.tree_len - 1) * self.aleph
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alpha(&self, node: usize, c: usize) -> usize {
        debug_assert!(node < self.alpha_nodes && c < self.n);
        node * self.n + c
    }

    pub fn k0(&self, j: usize) -> usize {
        self.n_alpha() + j
    }

    /// `D^{(j)}` at a non-root node.
    pub fn d(&self, node: usize, j: usize) -> usize {
        debug_assert!(node >= 1);
        self.n_alpha() + self.aleph + (node - 1) * self.aleph + j
    }

    pub fn d_range(&self) -> std::ops::Range<usize> {
        self.n_alpha() + self.aleph..self.len()
    }

    pub fn pack(&self, x: &PortfolioVariable) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        for node in 0..self.alpha_nodes {
            for c in 0..self.n {
                v[self.alpha(node, c)] = x.alpha.get(node, c);
            }
        }
        for j in 0..self.aleph {
            v[self.k0(j)] = x.k0[j];
            for node in 1..self.tree_len {
                v[self.d(node, j)] = x.d.get(node, j);
            }
        }
        v
    }

    pub fn unpack(&self, universe: &ContractUniverse, v: &DVector<f64>, beta: &AdaptedProcess) -> PortfolioVariable {
        let tree = universe.tree();
        let mut x = PortfolioVariable::zeros(universe);
        x.alpha = AdaptedProcess::from_fn(tree, self.n, 0..=universe.t_bar(), |node, out| {
            for (c, o) in out.iter_mut().enumerate() {
                *o = v[self.alpha(node, c)];
            }
        });
        x.beta = beta.clone();
        x.k0 = (0..self.aleph).map(|j| v[self.k0(j)]).collect();
        x.d = AdaptedProcess::from_fn(tree, self.aleph, 1..=universe.horizon(), |node, out| {
            for (j, o) in out.iter_mut().enumerate() {
                *o = v[self.d(node, j)];
            }
        });
        x
    }
}

/// Sparse affine function `Σ coef·x[idx] + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Affine {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Self { terms: vec![], constant: c }
    }

    pub fn var(idx: usize, coef: f64) -> Self {
        Self { terms: vec![(idx, coef)], constant: 0.0 }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.constant
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { terms: self.terms.iter().map(|&(i, c)| (i, c * s)).collect(), constant: self.constant * s }
    }

    pub fn add_scaled(&mut self, other: &Affine, s: f64) {
        self.terms.extend(other.terms.iter().map(|&(i, c)| (i, c * s)));
        self.constant += other.constant * s;
        self.canonicalize();
    }

    /// Sorts terms and merges duplicates; exact zeros are dropped.
    pub fn canonicalize(&mut self) {
        self.terms.sort_by_key(|t| t.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(i, c) in &self.terms {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += c,
                _ => out.push((i, c)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        self.terms = out;
    }

    /// `Σ w_k f_k` over a family.
    pub fn combination<'a>(parts: impl IntoIterator<Item = (&'a Affine, f64)>) -> Affine {
        let mut acc = Affine::default();
        for (f, w) in parts {
            acc.terms.extend(f.terms.iter().map(|&(i, c)| (i, c * w)));
            acc.constant += f.constant * w;
        }
        acc.canonicalize();
        acc
    }

    pub fn gradient(&self, n: usize) -> DVector<f64> {
        let mut g = DVector::zeros(n);
        for &(i, c) in &self.terms {
            g[i] += c;
        }
        g
    }
}

/// Weighted centered rows: `‖L x + l‖² = Σ w (f − Σ w f)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceForm {
    pub l: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl VarianceForm {
    pub fn new(rows: &[&Affine], weights: &[f64], n: usize) -> Self {
        let mean = Affine::combination(rows.iter().copied().zip(weights.iter().copied()));
        let mut l = DMatrix::zeros(rows.len(), n);
        let mut offset = DVector::zeros(rows.len());
        for (r, (f, &w)) in rows.iter().zip(weights).enumerate() {
            let s = w.sqrt();
            for &(i, c) in &f.terms {
                l[(r, i)] += s * c;
            }
            for &(i, c) in &mean.terms {
                l[(r, i)] -= s * c;
            }
            offset[r] = s * (f.constant - mean.constant);
        }
        Self { l, offset }
    }

    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.l * x + &self.offset
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.residual(x).norm_squared()
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        2.0 * self.l.tr_mul(&self.residual(x))
    }

    /// `LᵀL` (half the Hessian).
    pub fn gram(&self) -> DMatrix<f64> {
        self.l.tr_mul(&self.l)
    }
}

/// Affine rows of `U^{(j)}`, `K^{(j)}` and `m^{(j)}` per node.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub layout: Layout,
    tree: Arc<ScenarioTree>,
    t_bar: usize,
    pub beta: AdaptedProcess,
    pub utility: Vec<Vec<Affine>>,
    pub equity: Vec<Vec<Affine>>,
    pub margin: Vec<Vec<Affine>>,
}

impl LinearModel {
    pub fn new(
        universe: &ContractUniverse,
        beta: &AdaptedProcess,
        xi: &Runoff,
        config: &ConstraintConfig,
    ) -> Result<Self, ConstraintError> {
        let layout = Layout::new(universe);
        let tree = Arc::clone(universe.tree());
        let runoff = runoff_utility_stream(universe, xi).map_err(|e| ConstraintError::Config(e.to_string()))?;
        let aleph = universe.aleph();
        let mut utility = Vec::with_capacity(aleph);
        let mut equity = Vec::with_capacity(aleph);
        let mut margin = Vec::with_capacity(aleph);
        for j in 0..aleph {
            let off = universe.offset(j);
            let nt = universe.n_types(j);
            let u_rows: Vec<Affine> = crate::exec::map_indices(tree.len(), |n| {
                let t = tree.depth(n);
                let mut row = Affine::constant(runoff[j].get(n, 0));
                for k in 0..=t.min(universe.t_bar()) {
                    let a = tree.ancestor(n, k);
                    if beta.get(a, j) != 0.0 {
                        break;
                    }
                    let u = universe.writing(j, k).value(n);
                    row.terms.extend((0..nt).map(|i| (layout.alpha(a, off + i), u[i])));
                }
                row.canonicalize();
                row
            });
            let k_rows: Vec<Affine> = (0..tree.len())
                .map(|n| {
                    let mut row = u_rows[n].clone();
                    row.terms.push((layout.k0(j), 1.0));
                    row.terms.extend(tree.path(n).iter().skip(1).map(|&a| (layout.d(a, j), -1.0)));
                    row.canonicalize();
                    row
                })
                .collect();
            let m_rows: Vec<Affine> = match config.margin_spec(j) {
                MarginSpec::Zero => vec![Affine::default(); tree.len()],
                MarginSpec::VolumeProportional { kappa } => {
                    let initial: f64 = xi.get(j, -1).map_or(0.0, |a| a.iter().sum());
                    (0..tree.len())
                        .map(|n| match tree.parent(n) {
                            None => Affine::constant(kappa * initial),
                            Some(p) if tree.depth(p) <= universe.t_bar() => Affine {
                                terms: (0..nt).map(|i| (layout.alpha(p, off + i), kappa)).collect(),
                                constant: 0.0,
                            },
                            Some(_) => Affine::default(),
                        })
                        .collect()
                }
                MarginSpec::Table { values } => {
                    if values.len() != tree.len() {
                        return Err(ConstraintError::Config(format!(
                            "margin table for subsidiary {j} has {} entries, the tree has {} nodes",
                            values.len(),
                            tree.len()
                        )));
                    }
                    values.iter().map(|&v| Affine::constant(v)).collect()
                }
            };
            utility.push(u_rows);
            equity.push(k_rows);
            margin.push(m_rows);
        }
        Ok(Self { layout, tree, t_bar: universe.t_bar(), beta: beta.clone(), utility, equity, margin })
    }

    pub fn tree(&self) -> &Arc<ScenarioTree> {
        &self.tree
    }

    pub fn t_bar(&self) -> usize {
        self.t_bar
    }

    pub fn aleph(&self) -> usize {
        self.layout.aleph
    }

    pub fn total_utility(&self, n: usize) -> Affine {
        Affine::combination(self.utility.iter().map(|u| (&u[n], 1.0)))
    }

    pub fn total_equity(&self, n: usize) -> Affine {
        Affine::combination(self.equity.iter().map(|k| (&k[n], 1.0)))
    }

    /// Aggregate result `ΔU` into a non-root node.
    pub fn total_delta(&self, n: usize) -> Affine {
        let p = self.tree.parent(n).expect("non-root node");
        Affine::combination(self.utility.iter().flat_map(|u| [(&u[n], 1.0), (&u[p], -1.0)]))
    }

    /// `K^{(j)} − m^{(j)}`.
    pub fn surplus(&self, j: usize, n: usize) -> Affine {
        Affine::combination([(&self.equity[j][n], 1.0), (&self.margin[j][n], -1.0)])
    }

    /// `E f(t)` for rows given per node.
    pub fn expectation(&self, t: usize, row: impl Fn(usize) -> Affine) -> Affine {
        let rows: Vec<(Affine, f64)> = self.tree.level(t).map(|n| (row(n), self.tree.abs_prob(n))).collect();
        Affine::combination(rows.iter().map(|(f, w)| (f, *w)))
    }

    /// Variance at depth `t` of a row family.
    pub fn variance(&self, t: usize, row: impl Fn(usize) -> Affine) -> VarianceForm {
        let rows: Vec<Affine> = self.tree.level(t).map(&row).collect();
        let weights: Vec<f64> = self.tree.level(t).map(|n| self.tree.abs_prob(n)).collect();
        let refs: Vec<&Affine> = rows.iter().collect();
        VarianceForm::new(&refs, &weights, self.layout.len())
    }

    /// `E U(∞, x + ξ)`.
    pub fn objective(&self) -> Affine {
        self.expectation(self.tree.horizon(), |n| self.total_utility(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::Evaluation;
    use crate::contracts::{generate_universe, GenSpec, IncrementLaw, RunoffContract, SubsidiaryGen, DEFAULT_MAX_LEAVES};
    use crate::portfolio::DividendPolicy;
    use crate::tree::TreeSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn universe() -> ContractUniverse {
        let sub = |law: IncrementLaw| SubsidiaryGen {
            types: 1,
            increments: vec![law.clone(), law],
            overrides: vec![],
            runoff: vec![RunoffContract { time: -1, increments: vec![vec![0.5]] }],
        };
        let spec = GenSpec {
            t_bar: 1,
            settlement: 2,
            subsidiaries: vec![
                sub(IncrementLaw::Independent { independent: vec![vec![[0.3, 1.5], [0.7, -0.2]]] }),
                sub(IncrementLaw::fair_coin(&[1.0])),
            ],
            max_leaves: DEFAULT_MAX_LEAVES,
        };
        generate_universe(&spec, &TreeSpec::uniform(&[2])).unwrap()
    }

    #[test]
    fn rows_match_direct_evaluation() {
        let u = universe();
        let tree = u.tree().clone();
        let layout = Layout::new(&u);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut xi = Runoff::new();
        xi.insert(0, -1, vec![2.0]).unwrap();
        xi.insert(1, -1, vec![0.5]).unwrap();
        let config = ConstraintConfig {
            margin: vec![MarginSpec::VolumeProportional { kappa: 0.3 }, MarginSpec::Zero],
            ..Default::default()
        };
        for trial in 0..20 {
            // cease subsidiary 0 below one depth-1 node in half the trials
            let beta = AdaptedProcess::from_fn(&tree, 2, 0..=tree.horizon(), |n, out| {
                if trial % 2 == 1 && tree.depth(n) >= 2 && tree.ancestor(n, 1) == 1 {
                    out[0] = 1.0;
                }
            });
            let v = DVector::from_fn(layout.len(), |i, _| {
                let node = i / layout.n;
                if i < layout.n_alpha() && tree.depth(node) >= 2 && trial % 2 == 1 {
                    0.0
                } else {
                    rng.gen_range(-1.0..2.0)
                }
            });
            let x = layout.unpack(&u, &v, &beta);
            assert_eq!(layout.pack(&x), v);
            let model = LinearModel::new(&u, &beta, &xi, &config).unwrap();
            let ev = Evaluation::new(&u, &x, &xi, &config, &DividendPolicy::Zero).unwrap();
            for n in 0..tree.len() {
                for j in 0..2 {
                    assert!((model.equity[j][n].eval(&v) - ev.paths.per_sub[j].get(n, 0)).abs() < 1e-12);
                    assert!((model.utility[j][n].eval(&v) - ev.paths.utility[j].get(n, 0)).abs() < 1e-12);
                    assert!((model.margin[j][n].eval(&v) - ev.margins[j].get(n, 0)).abs() < 1e-12);
                }
                if n > 0 {
                    assert!((model.total_delta(n).eval(&v) - ev.aggregate_delta.get(n, 0)).abs() < 1e-12);
                }
            }
            for t in 0..=tree.horizon() {
                let k = ev.paths.total.at_depth(t);
                let var = model.variance(t, |n| model.total_equity(n));
                assert!((var.eval(&v) - k.variance()).abs() < 1e-10);
                assert!((model.expectation(t, |n| model.total_equity(n)).eval(&v) - k.expectation()[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn variance_gradient_matches_differences() {
        let u = universe();
        let model = LinearModel::new(&u, &AdaptedProcess::zeros_full(u.tree(), 2), &Runoff::new(), &ConstraintConfig::default()).unwrap();
        let form = model.variance(2, |n| model.surplus(0, n));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DVector::from_fn(model.layout.len(), |_, _| rng.gen_range(-1.0..1.0));
        let g = form.gradient(&x);
        for i in 0..x.len() {
            let mut e = DVector::zeros(x.len());
            e[i] = 1e-6;
            let fd = (form.eval(&(&x + &e)) - form.eval(&(&x - &e))) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn affine_merge() {
        let mut a = Affine { terms: vec![(3, 1.0), (1, 2.0), (3, -1.0)], constant: 1.0 };
        a.canonicalize();
        assert_eq!(a.terms, vec![(1, 2.0)]);
        a.add_scaled(&Affine::var(1, 1.0), -2.0);
        assert!(a.terms.is_empty());
    }
}
