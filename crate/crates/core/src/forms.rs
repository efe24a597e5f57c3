//! Quadratic forms `𝔞(η) = E(U(∞,η)²)` and `𝔟(η) = V(U(∞,η))` of the
//! basic model, their operators `A`, `B` on the space of adapted
//! portfolios, and spectral bounds.
//!
//! Matrices use coordinates `y(n, c) = √p(n) η(n, c)` over the nodes of
//! depths `0..=T̄`, in which the H-inner product is the Euclidean one.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::contracts::ContractUniverse;
use crate::tree::{AdaptedProcess, ScenarioTree, TreeError};

pub const DEFAULT_MAX_DIM: usize = 2000;
/// Minimum eigenvalues at or below this flag a degenerate universe.
pub const DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormsError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("basis dimension {dim} exceeds the cap {cap}")]
    DimensionCap { dim: usize, cap: usize },
    #[error("B is not positive definite (smallest eigenvalue {c_lower:e}); the universe violates non-degeneracy or independence")]
    Degenerate { c_lower: f64 },
    #[error("iterative eigensolver did not converge")]
    NoConvergence,
    #[error("process has dimension {got}, expected {expected}")]
    Dim { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OperatorKind {
    A,
    B,
}

/// Final utilities of every writing time on the leaf level.
#[derive(Debug, Clone)]
pub struct Forms {
    tree: Arc<ScenarioTree>,
    t_bar: usize,
    n: usize,
    /// `leaf_u[k][ℓ·N + c]` = `u_c^∞(k)` at the `ℓ`-th leaf
    leaf_u: Vec<Vec<f64>>,
}

impl Forms {
    pub fn new(universe: &ContractUniverse) -> Self {
        let tree = Arc::clone(universe.tree());
        let n = universe.total_dim();
        let leaves = tree.leaves();
        let h = tree.horizon();
        let leaf_u = (0..=universe.t_bar())
            .map(|k| {
                let mut v = vec![0.0; leaves.len() * n];
                for j in 0..universe.aleph() {
                    let fin = universe.final_vector(j, k).lift(h).expect("lift to leaves");
                    let off = universe.offset(j);
                    let nt = universe.n_types(j);
                    for (li, leaf) in leaves.clone().enumerate() {
                        v[li * n + off..li * n + off + nt].copy_from_slice(fin.at(leaf));
                    }
                }
                v
            })
            .collect();
        Self { tree, t_bar: universe.t_bar(), n, leaf_u }
    }

    pub fn tree(&self) -> &Arc<ScenarioTree> {
        &self.tree
    }

    pub fn n_components(&self) -> usize {
        self.n
    }

    /// Nodes of depths `0..=T̄` (ids `0..basis_nodes`).
    pub fn basis_nodes(&self) -> usize {
        self.tree.level(self.t_bar).end
    }

    pub fn dim(&self) -> usize {
        self.basis_nodes() * self.n
    }

    fn check(&self, eta: &AdaptedProcess) -> Result<(), FormsError> {
        if eta.dim() != self.n {
            return Err(FormsError::Dim { expected: self.n, got: eta.dim() });
        }
        if **eta.tree() != *self.tree {
            return Err(TreeError::TreeMismatch.into());
        }
        Ok(())
    }

    /// `U(∞, η)` per leaf (no run-off, no cessation).
    pub fn final_utility(&self, eta: &AdaptedProcess) -> Vec<f64> {
        let n = self.n;
        self.tree
            .leaves()
            .enumerate()
            .map(|(li, leaf)| {
                let mut acc = 0.0;
                for (k, u) in self.leaf_u.iter().enumerate() {
                    let a = eta.value(self.tree.ancestor(leaf, k));
                    acc += a.iter().zip(&u[li * n..(li + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
                }
                acc
            })
            .collect()
    }

    fn leaf_probs(&self) -> Vec<f64> {
        self.tree.leaves().map(|l| self.tree.abs_prob(l)).collect()
    }

    pub fn form_a(&self, eta: &AdaptedProcess) -> Result<f64, FormsError> {
        self.check(eta)?;
        let u = self.final_utility(eta);
        Ok(self.leaf_probs().iter().zip(&u).map(|(p, v)| p * v * v).sum())
    }

    pub fn form_b(&self, eta: &AdaptedProcess) -> Result<f64, FormsError> {
        self.check(eta)?;
        let u = self.final_utility(eta);
        let p = self.leaf_probs();
        let mean: f64 = p.iter().zip(&u).map(|(p, v)| p * v).sum();
        Ok(p.iter().zip(&u).map(|(p, v)| p * (v - mean) * (v - mean)).sum())
    }

    /// `(Aη)(k) = E(U(∞,η) u^∞(k) | F_k)`, or with centered `U` for `B`.
    pub fn apply(&self, kind: OperatorKind, eta: &AdaptedProcess) -> Result<AdaptedProcess, FormsError> {
        self.check(eta)?;
        let mut u = self.final_utility(eta);
        if kind == OperatorKind::B {
            let p = self.leaf_probs();
            let mean: f64 = p.iter().zip(&u).map(|(p, v)| p * v).sum();
            u.iter_mut().for_each(|v| *v -= mean);
        }
        Ok(self.apply_to_leaf_values(&u))
    }

    fn apply_to_leaf_values(&self, u: &[f64]) -> AdaptedProcess {
        let tree = &self.tree;
        let n = self.n;
        let first_leaf = tree.leaves().start;
        let h = tree.horizon();
        AdaptedProcess::from_fn(tree, n, 0..=self.t_bar, |node, out| {
            let k = tree.depth(node);
            let pn = tree.abs_prob(node);
            let uk = &self.leaf_u[k];
            for leaf in tree.descendants_at(node, h) {
                let li = leaf - first_leaf;
                let w = tree.abs_prob(leaf) / pn * u[li];
                for c in 0..n {
                    out[c] += w * uk[li * n + c];
                }
            }
        })
    }

    /// `y = √p η` over the basis.
    pub fn to_coords(&self, eta: &AdaptedProcess) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(self.dim(), |i, _| {
            let node = i / n;
            self.tree.abs_prob(node).sqrt() * eta.get(node, i % n)
        })
    }

    pub fn from_coords(&self, y: &DVector<f64>) -> AdaptedProcess {
        let n = self.n;
        AdaptedProcess::from_fn(&self.tree, n, 0..=self.t_bar, |node, out| {
            let s = self.tree.abs_prob(node).sqrt();
            for c in 0..n {
                out[c] = y[node * n + c] / s;
            }
        })
    }

    /// Operator action in coordinates: `M y = √p · (Op η)`.
    pub fn apply_coords(&self, kind: OperatorKind, y: &DVector<f64>) -> DVector<f64> {
        let eta = self.from_coords(y);
        let out = self.apply(kind, &eta).expect("own process");
        self.to_coords(&out)
    }

    /// Vector `m` with `E U(∞, η) = mᵀ y`.
    pub fn mean_vector(&self) -> DVector<f64> {
        let tree = &self.tree;
        let n = self.n;
        let first_leaf = tree.leaves().start;
        let h = tree.horizon();
        let mut m = DVector::zeros(self.dim());
        for node in 0..self.basis_nodes() {
            let k = tree.depth(node);
            let s = tree.abs_prob(node).sqrt();
            for leaf in tree.descendants_at(node, h) {
                let li = leaf - first_leaf;
                for c in 0..n {
                    m[node * n + c] += tree.abs_prob(leaf) * self.leaf_u[k][li * n + c] / s;
                }
            }
        }
        m
    }

    /// Dense matrix of `A` or `B` in the orthonormal coordinates.
    pub fn assemble(&self, kind: OperatorKind, max_dim: usize) -> Result<OperatorMatrix, FormsError> {
        let dim = self.dim();
        if dim > max_dim {
            return Err(FormsError::DimensionCap { dim, cap: max_dim });
        }
        let tree = &self.tree;
        let n = self.n;
        let t_bar = self.t_bar;
        let first_leaf = tree.leaves().start;
        let scale: Vec<f64> = (0..self.basis_nodes()).map(|v| tree.abs_prob(v).sqrt()).collect();
        // row (node, c) couples with the basis entries on paths through node
        let rows: Vec<Vec<(usize, f64)>> = crate::exec::map_indices(dim, |row| {
            let node = row / n;
            let c = row % n;
            let k = tree.depth(node);
            let mut acc = vec![0.0; (t_bar + 1) * n];
            let mut cols: Vec<(usize, f64)> = Vec::new();
            // ancestors contribute through the leaves below `node`; descendants
            // through the leaves below themselves
            let mut partners: Vec<usize> = (0..=k).map(|d| tree.ancestor(node, d)).collect();
            for d in k + 1..=t_bar {
                partners.extend(tree.descendants_at(node, d));
            }
            for &other in &partners {
                let ko = tree.depth(other);
                let below = if ko >= k { other } else { node };
                acc.iter_mut().for_each(|v| *v = 0.0);
                for leaf in tree.descendants_at(below, tree.horizon()) {
                    let li = leaf - first_leaf;
                    let w = tree.abs_prob(leaf) * self.leaf_u[k][li * n + c];
                    for c2 in 0..n {
                        acc[c2] += w * self.leaf_u[ko][li * n + c2];
                    }
                }
                for c2 in 0..n {
                    cols.push((other * n + c2, acc[c2] / (scale[node] * scale[other])));
                }
            }
            cols
        });
        let mut m = DMatrix::zeros(dim, dim);
        for (r, cols) in rows.into_iter().enumerate() {
            for (col, v) in cols {
                m[(r, col)] = v;
            }
        }
        if kind == OperatorKind::B {
            let mv = self.mean_vector();
            m -= &mv * mv.transpose();
        }
        // exact symmetry up to summation order
        let sym = (&m + m.transpose()) * 0.5;
        Ok(OperatorMatrix { kind, n_components: n, matrix: sym })
    }
}

#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    pub kind: OperatorKind,
    pub n_components: usize,
    pub matrix: DMatrix<f64>,
}

impl OperatorMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut e: Vec<f64> = self.matrix.clone().symmetric_eigenvalues().iter().copied().collect();
        e.sort_by(f64::total_cmp);
        e
    }

    /// Rows `row,col,value` for nonzero entries.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "value"])?;
        for r in 0..self.dim() {
            for c in 0..self.dim() {
                let v = self.matrix[(r, c)];
                if v != 0.0 {
                    w.write_record([r.to_string(), c.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn form_a(universe: &ContractUniverse, eta: &AdaptedProcess) -> Result<f64, FormsError> {
    Forms::new(universe).form_a(eta)
}

pub fn form_b(universe: &ContractUniverse, eta: &AdaptedProcess) -> Result<f64, FormsError> {
    Forms::new(universe).form_b(eta)
}

pub fn apply_a(universe: &ContractUniverse, eta: &AdaptedProcess) -> Result<AdaptedProcess, FormsError> {
    Forms::new(universe).apply(OperatorKind::A, eta)
}

pub fn apply_b(universe: &ContractUniverse, eta: &AdaptedProcess) -> Result<AdaptedProcess, FormsError> {
    Forms::new(universe).apply(OperatorKind::B, eta)
}

pub fn assemble_matrix(universe: &ContractUniverse, kind: OperatorKind, max_dim: usize) -> Result<OperatorMatrix, FormsError> {
    Forms::new(universe).assemble(kind, max_dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SpectralMethod {
    Dense,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralBounds {
    /// `λ_min(B)`: `c‖η‖² ≤ 𝔟(η)`
    pub c_lower: f64,
    /// `λ_max(A)`: `𝔞(η) ≤ C‖η‖²`
    pub c_upper: f64,
    pub dim: usize,
    pub method: SpectralMethod,
    /// Full spectra (dense method only), ascending.
    pub eigenvalues_a: Vec<f64>,
    pub eigenvalues_b: Vec<f64>,
}

impl SpectralBounds {
    pub fn degenerate(&self) -> bool {
        self.c_lower <= DEGENERACY_TOL
    }
}

/// Extreme eigenvalues without the degeneracy check.
pub fn spectrum(universe: &ContractUniverse, max_dim: usize) -> Result<SpectralBounds, FormsError> {
    let forms = Forms::new(universe);
    let dim = forms.dim();
    if dim <= max_dim {
        let a = forms.assemble(OperatorKind::A, max_dim)?;
        let b = forms.assemble(OperatorKind::B, max_dim)?;
        let ea = a.eigenvalues();
        let eb = b.eigenvalues();
        return Ok(SpectralBounds {
            c_lower: eb[0],
            c_upper: *ea.last().expect("nonempty basis"),
            dim,
            method: SpectralMethod::Dense,
            eigenvalues_a: ea,
            eigenvalues_b: eb,
        });
    }
    let (c_upper, _) = power_iteration(dim, |y| forms.apply_coords(OperatorKind::A, y))?;
    let c_lower = inverse_iteration(dim, |y| forms.apply_coords(OperatorKind::B, y))?;
    Ok(SpectralBounds { c_lower, c_upper, dim, method: SpectralMethod::Iterative, eigenvalues_a: vec![], eigenvalues_b: vec![] })
}

/// `(c, C)` with `c‖η‖² ≤ 𝔟(η) ≤ 𝔞(η) ≤ C‖η‖²`; fails when `B` is
/// (numerically) singular.
pub fn spectral_bounds(universe: &ContractUniverse, max_dim: usize) -> Result<SpectralBounds, FormsError> {
    let s = spectrum(universe, max_dim)?;
    if s.degenerate() {
        return Err(FormsError::Degenerate { c_lower: s.c_lower });
    }
    Ok(s)
}

fn start_vector(dim: usize) -> DVector<f64> {
    // deterministic, not orthogonal to any coordinate axis
    let v = DVector::from_fn(dim, |i, _| 1.0 + ((i * 7919) % 101) as f64 / 101.0);
    let norm = v.norm();
    v / norm
}

/// Largest eigenvalue of a positive semidefinite operator.
pub(crate) fn power_iteration<F: Fn(&DVector<f64>) -> DVector<f64>>(dim: usize, op: F) -> Result<(f64, DVector<f64>), FormsError> {
    let mut v = start_vector(dim);
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w = op(&v);
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return Ok((0.0, v));
        }
        v = w / norm;
        if (next - lambda).abs() <= 1e-13 * next.abs().max(1.0) {
            return Ok((next, v));
        }
        lambda = next;
    }
    Err(FormsError::NoConvergence)
}

/// Conjugate gradients for a symmetric positive definite operator.
pub(crate) fn conjugate_gradient<F: Fn(&DVector<f64>) -> DVector<f64>>(
    op: &F,
    b: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Option<DVector<f64>> {
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let b_norm = b.norm().max(f64::MIN_POSITIVE);
    for _ in 0..max_iter {
        if rs.sqrt() <= tol * b_norm {
            return Some(x);
        }
        let ap = op(&p);
        let curvature = p.dot(&ap);
        if curvature <= 0.0 {
            return None;
        }
        let step = rs / curvature;
        x += step * &p;
        r -= step * &ap;
        let rs_next = r.dot(&r);
        p = &r + (rs_next / rs) * &p;
        rs = rs_next;
    }
    (rs.sqrt() <= 1e-6 * b_norm).then_some(x)
}

/// Smallest eigenvalue of a positive definite operator; a singular
/// operator reports 0.
fn inverse_iteration<F: Fn(&DVector<f64>) -> DVector<f64>>(dim: usize, op: F) -> Result<f64, FormsError> {
    let mut v = start_vector(dim);
    let mut mu = f64::INFINITY;
    for _ in 0..500 {
        let Some(w) = conjugate_gradient(&op, &v, 1e-12, 10 * dim + 100) else { return Ok(0.0) };
        let norm = w.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Ok(0.0);
        }
        v = w / norm;
        let next = v.dot(&op(&v));
        if (next - mu).abs() <= 1e-12 * next.abs().max(1e-300) {
            return Ok(next);
        }
        mu = next;
    }
    Err(FormsError::NoConvergence)
}

/// Rows `index,eig_a,eig_b`.
pub fn write_spectrum_csv<W: Write>(s: &SpectralBounds, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "eig_a", "eig_b"])?;
    for i in 0..s.eigenvalues_a.len().max(s.eigenvalues_b.len()) {
        let f = |v: &Vec<f64>| v.get(i).map_or(String::new(), |x| x.to_string());
        w.write_record([i.to_string(), f(&s.eigenvalues_a), f(&s.eigenvalues_b)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{generate_universe, GenSpec, IncrementLaw, Outcome, SubsidiaryGen, DEFAULT_MAX_LEAVES};
    use crate::tree::{inner_product_h, TreeSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(t_bar: usize, settle: usize, types: usize, laws: Vec<IncrementLaw>) -> GenSpec {
        GenSpec {
            t_bar,
            settlement: settle,
            subsidiaries: vec![SubsidiaryGen { types, increments: laws, overrides: vec![], runoff: vec![] }],
            max_leaves: DEFAULT_MAX_LEAVES,
        }
    }

    fn random_eta(f: &Forms, rng: &mut ChaCha8Rng) -> AdaptedProcess {
        let tree = f.tree().clone();
        let vals: Vec<f64> = (0..tree.len() * f.n_components()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = f.n_components();
        AdaptedProcess::from_fn(&tree, n, 0..=f.t_bar, |node, out| out.copy_from_slice(&vals[node * n..(node + 1) * n]))
    }

    fn two_period() -> ContractUniverse {
        let laws = vec![
            IncrementLaw::Joint {
                outcomes: vec![Outcome { prob: 0.4, values: vec![2.0, 0.0] }, Outcome { prob: 0.6, values: vec![-0.5, 1.0] }],
            },
            IncrementLaw::Independent { independent: vec![vec![[0.5, 1.0], [0.5, -0.25]], vec![[0.3, 2.0], [0.7, 0.0]]] },
        ];
        generate_universe(&spec(1, 2, 2, laws), &TreeSpec::uniform(&[2])).unwrap()
    }

    #[test]
    fn single_fair_contract() {
        let u = generate_universe(&spec(0, 1, 1, vec![IncrementLaw::fair_coin(&[1.0])]), &TreeSpec::new(vec![])).unwrap();
        let f = Forms::new(&u);
        let mut eta = AdaptedProcess::zeros(u.tree(), 1, 0..=0);
        assert_eq!(f.form_a(&eta).unwrap(), 0.0);
        eta.set(0, 0, 3.0);
        assert_eq!(f.form_a(&eta).unwrap(), 9.0);
        assert_eq!(f.form_b(&eta).unwrap(), 9.0);
        assert_eq!(f.apply(OperatorKind::B, &eta).unwrap().get(0, 0), 3.0);
        let s = spectral_bounds(&u, DEFAULT_MAX_DIM).unwrap();
        assert!((s.c_lower - 1.0).abs() < 1e-12 && (s.c_upper - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_one_contract() {
        let law = IncrementLaw::Joint { outcomes: vec![Outcome { prob: 0.5, values: vec![0.0] }, Outcome { prob: 0.5, values: vec![2.0] }] };
        let u = generate_universe(&spec(0, 1, 1, vec![law]), &TreeSpec::new(vec![])).unwrap();
        let f = Forms::new(&u);
        let mut eta = AdaptedProcess::zeros(u.tree(), 1, 0..=0);
        eta.set(0, 0, 1.5);
        assert!((f.form_b(&eta).unwrap() - 2.25).abs() < 1e-12);
        assert!((f.form_a(&eta).unwrap() - 4.5).abs() < 1e-12);
    }

    #[test]
    fn correlated_pair_spectrum() {
        let law = IncrementLaw::Joint {
            outcomes: vec![
                Outcome { prob: 0.375, values: vec![1.0, 1.0] },
                Outcome { prob: 0.375, values: vec![-1.0, -1.0] },
                Outcome { prob: 0.125, values: vec![1.0, -1.0] },
                Outcome { prob: 0.125, values: vec![-1.0, 1.0] },
            ],
        };
        let u = generate_universe(&spec(0, 1, 2, vec![law]), &TreeSpec::new(vec![])).unwrap();
        let b = assemble_matrix(&u, OperatorKind::B, DEFAULT_MAX_DIM).unwrap();
        assert!((b.matrix[(0, 0)] - 1.0).abs() < 1e-12 && (b.matrix[(0, 1)] - 0.5).abs() < 1e-12);
        let e = b.eigenvalues();
        assert!((e[0] - 0.5).abs() < 1e-12 && (e[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn matrix_agrees_with_operators() {
        let u = two_period();
        let f = Forms::new(&u);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in [OperatorKind::A, OperatorKind::B] {
            let m = f.assemble(kind, DEFAULT_MAX_DIM).unwrap();
            assert!(m.asymmetry() <= 1e-12);
            for _ in 0..20 {
                let eta = random_eta(&f, &mut rng);
                let y = f.to_coords(&eta);
                let direct = f.apply_coords(kind, &y);
                assert!((&m.matrix * &y - direct).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn polarization_and_ordering() {
        let u = two_period();
        let f = Forms::new(&u);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let xi = random_eta(&f, &mut rng);
            let eta = random_eta(&f, &mut rng);
            let bxi = f.apply(OperatorKind::B, &xi).unwrap();
            let beta = f.apply(OperatorKind::B, &eta).unwrap();
            assert!((inner_product_h(&xi, &beta).unwrap() - inner_product_h(&bxi, &eta).unwrap()).abs() < 1e-10);
            assert!((inner_product_h(&eta, &beta).unwrap() - f.form_b(&eta).unwrap()).abs() < 1e-10);
            let aeta = f.apply(OperatorKind::A, &eta).unwrap();
            let ua = f.final_utility(&eta);
            let p: Vec<f64> = u.tree().leaves().map(|l| u.tree().abs_prob(l)).collect();
            let mean: f64 = p.iter().zip(&ua).map(|(p, v)| p * v).sum();
            let diff = inner_product_h(&eta, &aeta).unwrap() - inner_product_h(&eta, &beta).unwrap();
            assert!((diff - mean * mean).abs() < 1e-10);
            assert!((f.form_a(&eta).unwrap() - f.form_b(&eta).unwrap() - mean * mean).abs() < 1e-10);
        }
    }

    #[test]
    fn a_minus_b_is_mean_times_conditional_mean() {
        let u = two_period();
        let f = Forms::new(&u);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eta = random_eta(&f, &mut rng);
        let a = f.apply(OperatorKind::A, &eta).unwrap();
        let b = f.apply(OperatorKind::B, &eta).unwrap();
        let tree = u.tree();
        let p: Vec<f64> = tree.leaves().map(|l| tree.abs_prob(l)).collect();
        let mean: f64 = p.iter().zip(f.final_utility(&eta)).map(|(p, v)| p * v).sum();
        for k in 0..=1 {
            let cond = u.final_vector(0, k).lift(tree.horizon()).unwrap().conditional_at(k).unwrap();
            for node in tree.level(k) {
                for c in 0..2 {
                    assert!((a.get(node, c) - b.get(node, c) - mean * cond.at(node)[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn eigenvector_of_b() {
        let u = two_period();
        let f = Forms::new(&u);
        let b = f.assemble(OperatorKind::B, DEFAULT_MAX_DIM).unwrap();
        let eig = b.matrix.clone().symmetric_eigen();
        for i in 0..b.dim() {
            let v = eig.eigenvectors.column(i).into_owned();
            let out = f.apply_coords(OperatorKind::B, &v);
            assert!((out - eig.eigenvalues[i] * &v).amax() < 1e-10);
        }
    }

    #[test]
    fn sandwich_and_iterative_agree() {
        let u = two_period();
        let f = Forms::new(&u);
        let dense = spectral_bounds(&u, DEFAULT_MAX_DIM).unwrap();
        let iter = spectrum(&u, 0).unwrap();
        assert_eq!(iter.method, SpectralMethod::Iterative);
        assert!((dense.c_lower - iter.c_lower).abs() < 1e-8, "{} vs {}", dense.c_lower, iter.c_lower);
        assert!((dense.c_upper - iter.c_upper).abs() < 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let eta = random_eta(&f, &mut rng);
            let nrm = eta.norm_sq_h();
            let a = f.form_a(&eta).unwrap();
            let b = f.form_b(&eta).unwrap();
            assert!(dense.c_lower * nrm - 1e-9 <= b && b <= a && a <= dense.c_upper * nrm + 1e-9);
        }
    }

    #[test]
    fn block_diagonal_under_independence() {
        // deterministic background: cross terms between writing times vanish in B
        let u = generate_universe(
            &spec(1, 1, 1, vec![IncrementLaw::Independent { independent: vec![vec![[0.25, 3.0], [0.75, -1.0]]] }]),
            &TreeSpec::new(vec![]),
        )
        .unwrap();
        let b = assemble_matrix(&u, OperatorKind::B, DEFAULT_MAX_DIM).unwrap();
        // basis: root (k = 0) then the depth-1 nodes (k = 1)
        for r in 1..b.dim() {
            assert!(b.matrix[(0, r)].abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_contract_is_flagged() {
        let tree = Arc::new(ScenarioTree::build(&TreeSpec::uniform(&[2])).unwrap());
        let mut p = AdaptedProcess::zeros_full(&tree, 2);
        p.value_mut(1).copy_from_slice(&[1.0, 1.0]);
        p.value_mut(2).copy_from_slice(&[-1.0, -1.0]);
        let u = ContractUniverse::from_blocks(tree, 0, 1, vec![crate::contracts::SubsidiaryBlock { n_types: 2, writing: vec![p], runoff: vec![] }])
            .unwrap();
        let s = spectrum(&u, DEFAULT_MAX_DIM).unwrap();
        assert!(s.degenerate());
        assert!(matches!(spectral_bounds(&u, DEFAULT_MAX_DIM), Err(FormsError::Degenerate { .. })));
        assert!(spectrum(&u, 0).unwrap().degenerate());
    }

    #[test]
    fn dimension_cap() {
        let u = two_period();
        assert!(matches!(assemble_matrix(&u, OperatorKind::A, 3), Err(FormsError::DimensionCap { .. })));
    }
}
