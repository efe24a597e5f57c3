//! Unit-contract utility universe.
//!
//! For every subsidiary `j`, contract type `i` and writing time `k` the
//! universe holds the accumulated utility `u(k, t)` of one unit contract as a
//! process over depths `t = 0..T_max`. Contracts written at `k ≥ 0` carry
//! nothing up to and including `t = k` and stop generating flows after
//! `k + T`; run-off contracts (`k < 0`) accumulate from `t = 0`.
//!
//! [`generate_universe`] builds the scenario tree together with the
//! utilities. Each period's branching is the product of an optional
//! background factor and one independent factor per live `(j, k)` pair, so
//! a contract's final utility depends only on branchings after its writing
//! time, and contracts of different writing times or subsidiaries are
//! independent.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{AdaptedProcess, RandomVariable, ScenarioTree, TreeError, TreeSpec, PROB_TOL};

pub const DEFAULT_HYPOTHESIS_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_LEAVES: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContractError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("invalid increment law for subsidiary {j}: {reason}")]
    BadLaw { j: usize, reason: String },
    #[error("final-utility covariance of subsidiary {j}, writing time {k} is singular (min eigenvalue {min_eig:e})")]
    SingularCovariance { j: usize, k: usize, min_eig: f64 },
    #[error("the generated tree needs {needed} scenarios, more than the cap of {cap}")]
    TooManyScenarios { needed: usize, cap: usize },
    #[error("base tree horizon {base} exceeds the model horizon {horizon}")]
    BaseTooDeep { base: usize, horizon: usize },
    #[error("invalid index: {0}")]
    Index(String),
    #[error("utility invariant violated: {0}")]
    Invariant(String),
    #[error("run-off amounts must be for writing times k < 0, got k = {0}")]
    RunoffTime(i64),
}

/// One outcome of a per-period increment vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outcome {
    pub prob: f64,
    pub values: Vec<f64>,
}

/// Finite law of the per-period increment vector of a contract block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IncrementLaw {
    /// Joint outcomes over all contract types.
    Joint { outcomes: Vec<Outcome> },
    /// Independent marginals, one list of `[prob, value]` pairs per type.
    Independent { independent: Vec<Vec<[f64; 2]>> },
    /// A certain increment.
    Deterministic { deterministic: Vec<f64> },
}

impl IncrementLaw {
    pub fn fair_coin(values: &[f64]) -> Self {
        IncrementLaw::Joint {
            outcomes: vec![
                Outcome { prob: 0.5, values: values.to_vec() },
                Outcome { prob: 0.5, values: values.iter().map(|v| -v).collect() },
            ],
        }
    }

    /// The joint outcome list (product of marginals for independent laws).
    pub fn outcomes(&self) -> Vec<Outcome> {
        match self {
            IncrementLaw::Joint { outcomes } => outcomes.clone(),
            IncrementLaw::Deterministic { deterministic } => {
                vec![Outcome { prob: 1.0, values: deterministic.clone() }]
            }
            IncrementLaw::Independent { independent } => {
                let mut acc = vec![Outcome { prob: 1.0, values: Vec::new() }];
                for marginal in independent {
                    let mut next = Vec::with_capacity(acc.len() * marginal.len());
                    for o in &acc {
                        for &[p, v] in marginal {
                            let mut values = o.values.clone();
                            values.push(v);
                            next.push(Outcome { prob: o.prob * p, values });
                        }
                    }
                    acc = next;
                }
                acc
            }
        }
    }

    fn validate(&self, j: usize, n_types: usize) -> Result<Vec<Outcome>, ContractError> {
        let bad = |reason: String| ContractError::BadLaw { j, reason };
        if let IncrementLaw::Independent { independent } = self {
            if independent.len() != n_types {
                return Err(bad(format!("{} marginals for {} types", independent.len(), n_types)));
            }
            for m in independent {
                let s: f64 = m.iter().map(|pv| pv[0]).sum();
                if (s - 1.0).abs() > PROB_TOL || m.iter().any(|pv| !(pv[0] > 0.0)) {
                    return Err(bad("marginal probabilities must be positive and sum to 1".into()));
                }
            }
        }
        let outcomes = self.outcomes();
        if outcomes.is_empty() {
            return Err(bad("no outcomes".into()));
        }
        let sum: f64 = outcomes.iter().map(|o| o.prob).sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(bad(format!("probabilities sum to {sum}")));
        }
        for o in &outcomes {
            if !(o.prob > 0.0 && o.prob <= 1.0) {
                return Err(bad(format!("probability {} outside (0, 1]", o.prob)));
            }
            if o.values.len() != n_types {
                return Err(bad(format!("outcome has {} values for {} types", o.values.len(), n_types)));
            }
            if o.values.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite increment".into()));
            }
        }
        Ok(outcomes)
    }

    fn mean_and_cov(outcomes: &[Outcome], n: usize) -> (Vec<f64>, DMatrix<f64>) {
        let mut mean = vec![0.0; n];
        for o in outcomes {
            for i in 0..n {
                mean[i] += o.prob * o.values[i];
            }
        }
        let mut cov = DMatrix::zeros(n, n);
        for o in outcomes {
            for a in 0..n {
                for b in 0..n {
                    cov[(a, b)] += o.prob * (o.values[a] - mean[a]) * (o.values[b] - mean[b]);
                }
            }
        }
        (mean, cov)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WritingOverride {
    pub time: usize,
    pub increments: Vec<IncrementLaw>,
}

/// Deterministic run-off contract: increments per period `t → t+1`,
/// starting at `t = 0`, one vector of per-type values per period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunoffContract {
    pub time: i64,
    pub increments: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsidiaryGen {
    pub types: usize,
    /// Increment law for each lag `0..T` after writing, shared by all
    /// writing times unless overridden.
    pub increments: Vec<IncrementLaw>,
    #[serde(default)]
    pub overrides: Vec<WritingOverride>,
    #[serde(default)]
    pub runoff: Vec<RunoffContract>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    /// Last writing time `T̄`.
    pub t_bar: usize,
    /// Settlement lag `T ≥ 1`.
    pub settlement: usize,
    pub subsidiaries: Vec<SubsidiaryGen>,
    #[serde(default = "default_max_leaves")]
    pub max_leaves: usize,
}

fn default_max_leaves() -> usize {
    DEFAULT_MAX_LEAVES
}

impl SubsidiaryGen {
    fn laws(&self, k: usize) -> &[IncrementLaw] {
        self.overrides
            .iter()
            .find(|o| o.time == k)
            .map(|o| o.increments.as_slice())
            .unwrap_or(&self.increments)
    }
}

/// Utilities of one subsidiary's contract types.
#[derive(Debug, Clone)]
pub struct SubsidiaryBlock {
    pub n_types: usize,
    /// `writing[k]` carries `u(k, t)` on every depth, `k = 0..=T̄`.
    pub writing: Vec<AdaptedProcess>,
    /// Run-off writing times `k < 0` with their `u(k, t)`.
    pub runoff: Vec<(i64, AdaptedProcess)>,
}

#[derive(Debug, Clone)]
pub struct ContractUniverse {
    tree: Arc<ScenarioTree>,
    t_bar: usize,
    settlement: usize,
    blocks: Vec<SubsidiaryBlock>,
}

impl ContractUniverse {
    /// Assembles a universe from explicit utility processes and checks the
    /// structural invariants (zero before writing, constant after settlement).
    pub fn from_blocks(
        tree: Arc<ScenarioTree>,
        t_bar: usize,
        settlement: usize,
        blocks: Vec<SubsidiaryBlock>,
    ) -> Result<Self, ContractError> {
        if settlement == 0 {
            return Err(ContractError::Invariant("settlement lag must be at least 1".into()));
        }
        if tree.horizon() < t_bar + settlement {
            return Err(ContractError::Invariant(format!(
                "tree horizon {} is shorter than T̄ + T = {}",
                tree.horizon(),
                t_bar + settlement
            )));
        }
        if blocks.is_empty() {
            return Err(ContractError::Invariant("at least one subsidiary is required".into()));
        }
        let u = Self { tree, t_bar, settlement, blocks };
        for j in 0..u.blocks.len() {
            u.check_block(j)?;
        }
        Ok(u)
    }

    fn check_block(&self, j: usize) -> Result<(), ContractError> {
        let b = &self.blocks[j];
        if b.n_types == 0 {
            return Err(ContractError::Invariant(format!("subsidiary {j} has no contract types")));
        }
        if b.writing.len() != self.t_bar + 1 {
            return Err(ContractError::Invariant(format!(
                "subsidiary {j}: {} writing times, expected {}",
                b.writing.len(),
                self.t_bar + 1
            )));
        }
        let horizon = self.tree.horizon();
        let check = |k: i64, p: &AdaptedProcess| -> Result<(), ContractError> {
            if !Arc::ptr_eq(p.tree(), &self.tree) && **p.tree() != *self.tree {
                return Err(ContractError::Tree(TreeError::TreeMismatch));
            }
            if p.dim() != b.n_types {
                return Err(ContractError::Invariant(format!("subsidiary {j}, k = {k}: wrong dimension")));
            }
            if (0..=horizon).any(|d| !p.is_active(d)) {
                return Err(ContractError::Invariant(format!("subsidiary {j}, k = {k}: utility must cover all depths")));
            }
            for id in 0..self.tree.len() {
                let t = self.tree.depth(id) as i64;
                if k >= 0 && t <= k && p.value(id).iter().any(|&v| v != 0.0) {
                    return Err(ContractError::Invariant(format!(
                        "subsidiary {j}: u({k}, {t}) must vanish at node {id}"
                    )));
                }
                if k < 0 && t == 0 && p.value(id).iter().any(|&v| v != 0.0) {
                    return Err(ContractError::Invariant(format!("subsidiary {j}: run-off u({k}, 0) must vanish")));
                }
                let settle = k + self.settlement as i64;
                if t > settle.max(0) {
                    let parent = self.tree.parent(id).expect("depth > 0");
                    if p.value(id) != p.value(parent) {
                        return Err(ContractError::Invariant(format!(
                            "subsidiary {j}: u({k}, {t}) changes after settlement at node {id}"
                        )));
                    }
                }
            }
            Ok(())
        };
        for (k, p) in b.writing.iter().enumerate() {
            check(k as i64, p)?;
        }
        for (k, p) in &b.runoff {
            if *k >= 0 {
                return Err(ContractError::RunoffTime(*k));
            }
            check(*k, p)?;
        }
        Ok(())
    }

    pub fn tree(&self) -> &Arc<ScenarioTree> {
        &self.tree
    }

    pub fn t_bar(&self) -> usize {
        self.t_bar
    }

    pub fn settlement(&self) -> usize {
        self.settlement
    }

    pub fn horizon(&self) -> usize {
        self.tree.horizon()
    }

    /// Number of subsidiaries `ℵ`.
    pub fn aleph(&self) -> usize {
        self.blocks.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.n_types).collect()
    }

    pub fn n_types(&self, j: usize) -> usize {
        self.blocks[j].n_types
    }

    /// Total number of contract types `N = Σ_j N^(j)`.
    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.n_types).sum()
    }

    /// Offset of subsidiary `j`'s types in the concatenated component list.
    pub fn offset(&self, j: usize) -> usize {
        self.blocks[..j].iter().map(|b| b.n_types).sum()
    }

    pub fn block(&self, j: usize) -> &SubsidiaryBlock {
        &self.blocks[j]
    }

    /// `u^{(j)}(k, ·)` for a writing time `k ≥ 0`.
    pub fn writing(&self, j: usize, k: usize) -> &AdaptedProcess {
        &self.blocks[j].writing[k]
    }

    /// Depth at which contracts written at `k` are settled.
    pub fn final_depth(&self, k: i64) -> usize {
        (k + self.settlement as i64).clamp(0, self.horizon() as i64) as usize
    }

    /// Final utility vector `u^{(j)∞}(k)` (all types) on its settlement level.
    pub fn final_vector(&self, j: usize, k: usize) -> RandomVariable {
        self.blocks[j].writing[k].at_depth(self.final_depth(k as i64))
    }

    /// Final utility of contract type `i` written at `k`, on the leaf level.
    pub fn final_utility(&self, j: usize, i: usize, k: usize) -> Result<RandomVariable, ContractError> {
        if j >= self.aleph() {
            return Err(ContractError::Index(format!("subsidiary {j} of {}", self.aleph())));
        }
        if i >= self.blocks[j].n_types {
            return Err(ContractError::Index(format!("type {i} of {}", self.blocks[j].n_types)));
        }
        if k > self.t_bar {
            return Err(ContractError::Index(format!("writing time {k} beyond T̄ = {}", self.t_bar)));
        }
        Ok(self.final_vector(j, k).component(i).lift(self.horizon())?)
    }

    pub fn runoff_process(&self, j: usize, k: i64) -> Option<&AdaptedProcess> {
        self.blocks.get(j)?.runoff.iter().find(|(t, _)| *t == k).map(|(_, p)| p)
    }

    /// Replaces `u^{(j)}(k, ·)`; the invariants are re-checked.
    pub fn replace_writing(&mut self, j: usize, k: usize, utility: AdaptedProcess) -> Result<(), ContractError> {
        if j >= self.aleph() || k > self.t_bar {
            return Err(ContractError::Index(format!("(j, k) = ({j}, {k})")));
        }
        let old = std::mem::replace(&mut self.blocks[j].writing[k], utility);
        if let Err(e) = self.check_block(j) {
            self.blocks[j].writing[k] = old;
            return Err(e);
        }
        Ok(())
    }

    /// Appends a subsidiary block (e.g. invested assets).
    pub fn push_block(&mut self, block: SubsidiaryBlock) -> Result<(), ContractError> {
        self.blocks.push(block);
        if let Err(e) = self.check_block(self.blocks.len() - 1) {
            self.blocks.pop();
            return Err(e);
        }
        Ok(())
    }

    /// Writes `j,i,k,node,value` rows for every utility process.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["j", "i", "k", "node", "value"])?;
        for (j, b) in self.blocks.iter().enumerate() {
            let mut all: Vec<(i64, &AdaptedProcess)> = b.runoff.iter().map(|(k, p)| (*k, p)).collect();
            all.extend(b.writing.iter().enumerate().map(|(k, p)| (k as i64, p)));
            for (k, p) in all {
                for i in 0..b.n_types {
                    for id in 0..self.tree.len() {
                        w.write_record([
                            j.to_string(),
                            i.to_string(),
                            k.to_string(),
                            id.to_string(),
                            p.get(id, i).to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

enum Factor {
    Base(Vec<f64>),
    Contract { j: usize, k: usize, outcomes: Vec<Outcome> },
}

impl Factor {
    fn radix(&self) -> usize {
        match self {
            Factor::Base(p) => p.len(),
            Factor::Contract { outcomes, .. } => outcomes.len(),
        }
    }

    fn prob(&self, o: usize) -> f64 {
        match self {
            Factor::Base(p) => p[o],
            Factor::Contract { outcomes, .. } => outcomes[o].prob,
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub(crate) fn min_eigenvalue(m: DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Builds the scenario tree and the unit-contract utilities described by
/// `spec`. `base` adds an independent background branching per depth (it
/// may be shorter than the model horizon).
pub fn generate_universe(spec: &GenSpec, base: &TreeSpec) -> Result<ContractUniverse, ContractError> {
    let t_bar = spec.t_bar;
    let settle = spec.settlement;
    if settle == 0 {
        return Err(ContractError::Invariant("settlement lag must be at least 1".into()));
    }
    if spec.subsidiaries.is_empty() {
        return Err(ContractError::Invariant("at least one subsidiary is required".into()));
    }
    let horizon = t_bar + settle;
    if base.horizon() > horizon {
        return Err(ContractError::BaseTooDeep { base: base.horizon(), horizon });
    }
    for (depth, probs) in base.levels.iter().enumerate() {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(TreeError::BadProbability { depth, prob: probs.first().copied().unwrap_or(0.0) }.into());
        }
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(TreeError::ProbabilitySum { depth, sum }.into());
        }
    }

    // validated outcomes per (j, k, lag)
    let mut laws: Vec<Vec<Vec<Vec<Outcome>>>> = Vec::new();
    for (j, sub) in spec.subsidiaries.iter().enumerate() {
        if sub.types == 0 {
            return Err(ContractError::BadLaw { j, reason: "no contract types".into() });
        }
        for o in &sub.overrides {
            if o.time > t_bar {
                return Err(ContractError::BadLaw { j, reason: format!("override for k = {} > T̄", o.time) });
            }
        }
        let mut per_k = Vec::new();
        for k in 0..=t_bar {
            let lag_laws = sub.laws(k);
            if lag_laws.len() != settle {
                return Err(ContractError::BadLaw {
                    j,
                    reason: format!("{} lag laws for settlement lag {settle}", lag_laws.len()),
                });
            }
            let outcomes = lag_laws
                .iter()
                .map(|l| l.validate(j, sub.types))
                .collect::<Result<Vec<_>, _>>()?;
            let mut cov = DMatrix::zeros(sub.types, sub.types);
            for o in &outcomes {
                cov += IncrementLaw::mean_and_cov(o, sub.types).1;
            }
            let scale = cov.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            let min_eig = min_eigenvalue(cov);
            if min_eig <= DEFAULT_HYPOTHESIS_TOL * scale {
                return Err(ContractError::SingularCovariance { j, k, min_eig });
            }
            per_k.push(outcomes);
        }
        laws.push(per_k);
    }

    // factor list and branching per period
    let mut periods: Vec<Vec<Factor>> = Vec::with_capacity(horizon);
    let mut levels = Vec::with_capacity(horizon);
    let mut leaves: usize = 1;
    for t in 0..horizon {
        let mut factors = vec![Factor::Base(base.levels.get(t).cloned().unwrap_or_else(|| vec![1.0]))];
        for (j, per_k) in laws.iter().enumerate() {
            for (k, lags) in per_k.iter().enumerate() {
                if k <= t && t < k + settle {
                    factors.push(Factor::Contract { j, k, outcomes: lags[t - k].clone() });
                }
            }
        }
        let width: usize = factors.iter().map(Factor::radix).product();
        leaves = leaves.saturating_mul(width);
        if leaves > spec.max_leaves {
            return Err(ContractError::TooManyScenarios { needed: leaves, cap: spec.max_leaves });
        }
        let probs: Vec<f64> = (0..width)
            .map(|c| decode(&factors, c).iter().zip(&factors).map(|(&o, f)| f.prob(o)).product())
            .collect();
        levels.push(probs);
        periods.push(factors);
    }
    // products of probabilities may drift from 1 by a few ulps
    for probs in &mut levels {
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
    }
    let tree = Arc::new(ScenarioTree::build(&TreeSpec::new(levels))?);

    let mut blocks = Vec::with_capacity(spec.subsidiaries.len());
    for (j, sub) in spec.subsidiaries.iter().enumerate() {
        let n = sub.types;
        let mut writing: Vec<AdaptedProcess> =
            (0..=t_bar).map(|_| AdaptedProcess::zeros_full(&tree, n)).collect();
        for id in 1..tree.len() {
            let node = tree.node(id);
            let t = node.depth - 1;
            let parent = node.parent.expect("non-root");
            let choice = decode(&periods[t], node.child_index);
            for (k, proc_k) in writing.iter_mut().enumerate() {
                if k > t {
                    continue;
                }
                let mut v = proc_k.value(parent).to_vec();
                for (f, &o) in periods[t].iter().zip(&choice) {
                    if let Factor::Contract { j: fj, k: fk, outcomes } = f {
                        if *fj == j && *fk == k {
                            for (x, inc) in v.iter_mut().zip(&outcomes[o].values) {
                                *x += inc;
                            }
                        }
                    }
                }
                proc_k.value_mut(id).copy_from_slice(&v);
            }
        }
        let mut runoff = Vec::new();
        for rc in &sub.runoff {
            if rc.time >= 0 {
                return Err(ContractError::RunoffTime(rc.time));
            }
            if rc.increments.len() > horizon {
                return Err(ContractError::BadLaw { j, reason: "run-off stream longer than the horizon".into() });
            }
            let mut p = AdaptedProcess::zeros_full(&tree, n);
            let mut acc = vec![0.0; n];
            let mut per_depth = vec![acc.clone()];
            for t in 0..horizon {
                if let Some(inc) = rc.increments.get(t) {
                    if inc.len() != n {
                        return Err(ContractError::BadLaw { j, reason: "run-off increment has the wrong length".into() });
                    }
                    if (t as i64) >= rc.time + settle as i64 && inc.iter().any(|&v| v != 0.0) {
                        return Err(ContractError::BadLaw {
                            j,
                            reason: format!("run-off written at {} flows after settlement (period {t})", rc.time),
                        });
                    }
                    acc.iter_mut().zip(inc).for_each(|(a, b)| *a += b);
                }
                per_depth.push(acc.clone());
            }
            for id in 0..tree.len() {
                p.value_mut(id).copy_from_slice(&per_depth[tree.depth(id)]);
            }
            runoff.push((rc.time, p));
        }
        blocks.push(SubsidiaryBlock { n_types: n, writing, runoff });
    }
    ContractUniverse::from_blocks(tree, t_bar, settle, blocks)
}

/// Mixed-radix decoding of a child index into per-factor outcomes; the
/// first factor is the most significant digit.
fn decode(factors: &[Factor], mut c: usize) -> Vec<usize> {
    let mut out = vec![0; factors.len()];
    for (slot, f) in out.iter_mut().zip(factors).rev() {
        *slot = c % f.radix();
        c /= f.radix();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenEntry {
    pub j: usize,
    pub k: usize,
    pub min_eigenvalue: f64,
}

/// A pair of final utilities `u_i^{(j)∞}(k)` and `u_l^{(r)∞}(m)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossPair {
    pub j: usize,
    pub k: usize,
    pub i: usize,
    pub r: usize,
    pub m: usize,
    pub l: usize,
    pub covariance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub tol: f64,
    pub h1_ok: bool,
    /// max |Cov(u^∞(k), 1_A)| over depth-k node events A
    pub h1_max_indicator_cov: f64,
    /// max total-variation distance between conditional and unconditional laws
    pub h1_max_law_distance: f64,
    pub h1_worst: Option<(usize, usize)>,
    /// max conditional second moment `E(|u(k,t)|² | F_k)`; finite on a finite tree
    pub h1_2_max_second_moment: f64,
    pub h2_ok: bool,
    pub h2_min_eigenvalues: Vec<EigenEntry>,
    pub h3_ok: bool,
    pub h3_max_cross_cov: f64,
    pub h3_worst: Option<CrossPair>,
    pub h4_ok: bool,
    pub h4_max_cross_cov: f64,
    pub h4_worst: Option<CrossPair>,
}

impl HypothesisReport {
    pub fn all_ok(&self) -> bool {
        self.h1_ok && self.h2_ok && self.h3_ok && self.h4_ok
    }
}

fn law_key(v: &[f64]) -> Vec<i64> {
    v.iter().map(|x| (x * 1e9).round() as i64).collect()
}

/// Checks independence from the past (h1), non-degeneracy (h2) and
/// independence across writing times (h3) and subsidiaries (h4).
pub fn verify_hypotheses(universe: &ContractUniverse, tol: f64) -> HypothesisReport {
    let tree = universe.tree();
    let horizon = universe.horizon();
    let t_bar = universe.t_bar();

    // leaf-level final utilities, centered
    struct Final {
        j: usize,
        k: usize,
        n: usize,
        centered: Vec<f64>,
    }
    let leaves = tree.leaves();
    let probs: Vec<f64> = leaves.clone().map(|id| tree.abs_prob(id)).collect();
    let mut finals = Vec::new();
    for j in 0..universe.aleph() {
        for k in 0..=t_bar {
            let rv = universe.final_vector(j, k).lift(horizon).expect("lift to leaves");
            let mean = rv.expectation();
            let n = rv.dim();
            let centered = rv.values().iter().enumerate().map(|(idx, v)| v - mean[idx % n]).collect();
            finals.push(Final { j, k, n, centered });
        }
    }

    // h1
    let mut h1_cov: f64 = 0.0;
    let mut h1_tv: f64 = 0.0;
    let mut h1_worst = None;
    let mut second_moment: f64 = 0.0;
    for j in 0..universe.aleph() {
        for k in 0..=t_bar {
            let fin = universe.final_vector(j, k);
            let fd = fin.depth();
            let mean = fin.expectation();
            let mut uncond: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
            for id in tree.level(fd) {
                *uncond.entry(law_key(fin.at(id))).or_default() += tree.abs_prob(id);
            }
            let mut worst_here: f64 = 0.0;
            for n in tree.level(k) {
                let pn = tree.abs_prob(n);
                let mut cond: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
                let mut cmean = vec![0.0; fin.dim()];
                for id in tree.descendants_at(n, fd) {
                    let w = tree.abs_prob(id) / pn;
                    *cond.entry(law_key(fin.at(id))).or_default() += w;
                    for (c, v) in fin.at(id).iter().enumerate() {
                        cmean[c] += w * v;
                    }
                }
                for c in 0..fin.dim() {
                    let cov = (pn * (cmean[c] - mean[c])).abs();
                    worst_here = worst_here.max(cov);
                    h1_cov = h1_cov.max(cov);
                }
                let mut tv = 0.0;
                for (key, p) in &uncond {
                    tv += (p - cond.get(key).copied().unwrap_or(0.0)).abs();
                }
                for (key, q) in &cond {
                    if !uncond.contains_key(key) {
                        tv += q;
                    }
                }
                h1_tv = h1_tv.max(0.5 * tv);
                worst_here = worst_here.max(0.5 * tv);
                // conditional second moments of intermediate utilities
                for t in k + 1..=horizon {
                    let u = universe.writing(j, k);
                    let mut m2 = 0.0;
                    for id in tree.descendants_at(n, t) {
                        let sq: f64 = u.value(id).iter().map(|v| v * v).sum();
                        m2 += tree.abs_prob(id) / pn * sq;
                    }
                    second_moment = second_moment.max(m2);
                }
            }
            if worst_here > tol && h1_worst.is_none() {
                h1_worst = Some((j, k));
            }
        }
    }

    // h2
    let mut eig = Vec::new();
    for f in &finals {
        let mut cov = DMatrix::zeros(f.n, f.n);
        for (li, p) in probs.iter().enumerate() {
            let row = &f.centered[li * f.n..(li + 1) * f.n];
            for a in 0..f.n {
                for b in 0..f.n {
                    cov[(a, b)] += p * row[a] * row[b];
                }
            }
        }
        eig.push(EigenEntry { j: f.j, k: f.k, min_eigenvalue: min_eigenvalue(cov) });
    }
    let h2_ok = eig.iter().all(|e| e.min_eigenvalue > tol);

    // h3 and h4
    let mut h3: (f64, Option<CrossPair>) = (0.0, None);
    let mut h4: (f64, Option<CrossPair>) = (0.0, None);
    for (a, fa) in finals.iter().enumerate() {
        for fb in finals.iter().skip(a + 1) {
            let same_sub = fa.j == fb.j;
            if same_sub && fa.k == fb.k {
                continue;
            }
            for i in 0..fa.n {
                for l in 0..fb.n {
                    let cov: f64 = probs
                        .iter()
                        .enumerate()
                        .map(|(li, p)| p * fa.centered[li * fa.n + i] * fb.centered[li * fb.n + l])
                        .sum();
                    let slot = if same_sub { &mut h3 } else { &mut h4 };
                    if (cov.abs() > slot.0 || slot.1.is_none()) && cov.abs() >= slot.0 {
                        slot.0 = cov.abs();
                        slot.1 = Some(CrossPair { j: fa.j, k: fa.k, i, r: fb.j, m: fb.k, l, covariance: cov });
                    }
                }
            }
        }
    }

    HypothesisReport {
        tol,
        h1_ok: h1_cov <= tol && h1_tv <= tol,
        h1_max_indicator_cov: h1_cov,
        h1_max_law_distance: h1_tv,
        h1_worst,
        h1_2_max_second_moment: second_moment,
        h2_ok,
        h2_min_eigenvalues: eig,
        h3_ok: h3.0 < tol,
        h3_max_cross_cov: h3.0,
        h3_worst: h3.1.filter(|p| p.covariance.abs() >= tol),
        h4_ok: h4.0 < tol,
        h4_max_cross_cov: h4.0,
        h4_worst: h4.1.filter(|p| p.covariance.abs() >= tol),
    }
}

/// Certain run-off amounts `ξ^{(j)}(k)`, `k < 0`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Runoff {
    entries: BTreeMap<(usize, i64), Vec<f64>>,
}

impl Runoff {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, j: usize, k: i64, amounts: Vec<f64>) -> Result<(), ContractError> {
        if k >= 0 {
            return Err(ContractError::RunoffTime(k));
        }
        self.entries.insert((j, k), amounts);
        Ok(())
    }

    pub fn get(&self, j: usize, k: i64) -> Option<&[f64]> {
        self.entries.get(&(j, k)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, i64, &[f64])> {
        self.entries.iter().map(|(&(j, k), v)| (j, k, v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().all(|v| v.iter().all(|&x| x == 0.0))
    }

    pub fn scaled(&self, a: f64) -> Runoff {
        Runoff {
            entries: self.entries.iter().map(|(key, v)| (*key, v.iter().map(|x| a * x).collect())).collect(),
        }
    }

    /// Checks that every entry refers to a run-off contract of `universe`.
    pub fn validate(&self, universe: &ContractUniverse) -> Result<(), ContractError> {
        for (&(j, k), v) in &self.entries {
            let p = universe
                .runoff_process(j, k)
                .ok_or_else(|| ContractError::Index(format!("no run-off contract for subsidiary {j} at k = {k}")))?;
            if v.len() != p.dim() {
                return Err(ContractError::Index(format!("run-off ({j}, {k}) has {} amounts for {} types", v.len(), p.dim())));
            }
        }
        Ok(())
    }
}

/// Accumulated utility `U^{(j)}(t, ξ^{(j)})` of the run-off, one scalar
/// process per subsidiary.
pub fn runoff_utility_stream(universe: &ContractUniverse, xi: &Runoff) -> Result<Vec<AdaptedProcess>, ContractError> {
    xi.validate(universe)?;
    let tree = universe.tree();
    let mut out: Vec<AdaptedProcess> = (0..universe.aleph()).map(|_| AdaptedProcess::zeros_full(tree, 1)).collect();
    for (j, k, amounts) in xi.iter() {
        let p = universe.runoff_process(j, k).expect("validated");
        for id in 0..tree.len() {
            let dot: f64 = p.value(id).iter().zip(amounts).map(|(u, a)| u * a).sum();
            out[j].value_mut(id)[0] += dot;
        }
    }
    Ok(out)
}
