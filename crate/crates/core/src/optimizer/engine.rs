//! Convex solver for problems with a linear objective (minus variance
//! penalties), box bounds, affine equalities and inequalities, and variance
//! constraints.
//!
//! Outer loop: proximal augmented Lagrangian (PHR) with multiplier updates.
//! Inner loop: two-metric projected Newton on the box with Armijo search.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::linear::{Affine, VarianceForm};

use super::{SolverSettings, Status};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Label {
    pub name: String,
    pub t: Option<usize>,
    pub j: Option<usize>,
    pub node: Option<usize>,
}

impl Label {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), t: None, j: None, node: None }
    }

    pub fn t(mut self, t: usize) -> Self {
        self.t = Some(t);
        self
    }

    pub fn j(mut self, j: usize) -> Self {
        self.j = Some(j);
        self
    }

    pub fn node(mut self, node: usize) -> Self {
        self.node = Some(node);
        self
    }
}

#[derive(Debug, Clone)]
pub enum Kind {
    /// `h(x) = 0`
    Eq(Affine),
    /// `g(x) ≤ 0`
    Le(Affine),
    /// `‖Lx + l‖² + a(x) − bound ≤ 0`
    Var { form: VarianceForm, linear: Affine, bound: f64 },
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub label: Label,
    pub kind: Kind,
}

impl Constraint {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match &self.kind {
            Kind::Eq(a) | Kind::Le(a) => a.eval(x),
            Kind::Var { form, linear, bound } => form.eval(x) + linear.eval(x) - bound,
        }
    }

    pub fn is_equality(&self) -> bool {
        matches!(self.kind, Kind::Eq(_))
    }

    fn violation(&self, v: f64) -> f64 {
        if self.is_equality() {
            v.abs()
        } else {
            v.max(0.0)
        }
    }
}

/// Maximize `c·x − Σ w_q ‖L_q x + l_q‖²` subject to the constraints.
#[derive(Debug, Clone)]
pub struct ConvexProblem {
    pub n: usize,
    pub objective: Affine,
    pub penalties: Vec<(f64, VarianceForm)>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

impl ConvexProblem {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            objective: Affine::default(),
            penalties: vec![],
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            constraints: vec![],
        }
    }

    pub fn push_eq(&mut self, label: Label, h: Affine) {
        self.constraints.push(Constraint { label, kind: Kind::Eq(h) });
    }

    pub fn push_le(&mut self, label: Label, g: Affine) {
        self.constraints.push(Constraint { label, kind: Kind::Le(g) });
    }

    /// `‖Lx + l‖² ≤ bound`; a zero bound becomes one equality per row.
    pub fn push_variance(&mut self, label: Label, form: VarianceForm, bound: f64) {
        if bound <= 0.0 {
            for r in 0..form.l.nrows() {
                let mut row = Affine::constant(form.offset[r]);
                row.terms = (0..self.n).filter(|&i| form.l[(r, i)] != 0.0).map(|i| (i, form.l[(r, i)])).collect();
                if row.terms.is_empty() && row.constant == 0.0 {
                    continue;
                }
                let mut l = label.clone();
                l.name = format!("{}_row{r}", label.name);
                self.push_eq(l, row);
            }
        } else {
            self.constraints.push(Constraint { label, kind: Kind::Var { form, linear: Affine::default(), bound } });
        }
    }

    pub fn fix(&mut self, i: usize, v: f64) {
        self.lower[i] = v;
        self.upper[i] = v;
    }

    /// Objective being maximized.
    pub fn objective_value(&self, x: &DVector<f64>) -> f64 {
        self.objective.eval(x) - self.penalties.iter().map(|(w, f)| w * f.eval(x)).sum::<f64>()
    }

    pub fn values(&self, x: &DVector<f64>) -> Vec<f64> {
        self.constraints.iter().map(|c| c.value(x)).collect()
    }

    /// Largest constraint or bound violation.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let cons = self.constraints.iter().map(|c| c.violation(c.value(x))).fold(0.0, f64::max);
        let bounds = (0..self.n).map(|i| (self.lower[i] - x[i]).max(x[i] - self.upper[i]).max(0.0)).fold(0.0, f64::max);
        cons.max(bounds)
    }

    pub fn project(&self, x: &mut DVector<f64>) {
        for i in 0..self.n {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.lower.len() != self.n || self.upper.len() != self.n {
            return Err("bound vectors have the wrong length".into());
        }
        if let Some(i) = (0..self.n).find(|&i| !(self.lower[i] <= self.upper[i])) {
            return Err(format!("empty box for variable {i}"));
        }
        Ok(())
    }
}

/// Gradient of the Lagrangian of the minimization form `−objective`.
fn lagrangian_gradient(p: &ConvexProblem, x: &DVector<f64>, multipliers: &[f64]) -> DVector<f64> {
    let mut g = -p.objective.gradient(p.n);
    for (w, f) in &p.penalties {
        g += *w * f.gradient(x);
    }
    for (c, &m) in p.constraints.iter().zip(multipliers) {
        if m == 0.0 {
            continue;
        }
        add_constraint_gradient(c, x, m, &mut g);
    }
    g
}

fn add_constraint_gradient(c: &Constraint, x: &DVector<f64>, scale: f64, g: &mut DVector<f64>) {
    match &c.kind {
        Kind::Eq(a) | Kind::Le(a) => {
            for &(i, v) in &a.terms {
                g[i] += scale * v;
            }
        }
        Kind::Var { form, linear, .. } => {
            *g += scale * form.gradient(x);
            for &(i, v) in &linear.terms {
                g[i] += scale * v;
            }
        }
    }
}

/// Multipliers of the box bounds implied by the Lagrangian gradient:
/// positive at an active lower bound, negative at an active upper bound.
pub fn bound_multipliers(p: &ConvexProblem, x: &DVector<f64>, multipliers: &[f64]) -> Vec<f64> {
    let g = lagrangian_gradient(p, x, multipliers);
    (0..p.n)
        .map(|i| {
            let at_lo = x[i] <= p.lower[i];
            let at_hi = x[i] >= p.upper[i];
            if (at_lo && g[i] > 0.0) || (at_hi && g[i] < 0.0) {
                g[i]
            } else {
                0.0
            }
        })
        .collect()
}

/// Projected stationarity of the Lagrangian plus complementarity, dual
/// sign and primal violations (max norm).
pub fn kkt_residual(p: &ConvexProblem, x: &DVector<f64>, multipliers: &[f64]) -> f64 {
    let g = lagrangian_gradient(p, x, multipliers);
    let stationarity = (0..p.n).map(|i| (x[i] - (x[i] - g[i]).clamp(p.lower[i], p.upper[i])).abs()).fold(0.0, f64::max);
    let mut rest = p.violation(x);
    for (c, &m) in p.constraints.iter().zip(multipliers) {
        if !c.is_equality() {
            let v = c.value(x);
            rest = rest.max((m * v).abs()).max(-m);
        }
    }
    stationarity.max(rest)
}

#[derive(Debug, Clone)]
pub struct EngineResult {
    pub x: DVector<f64>,
    pub multipliers: Vec<f64>,
    pub status: Status,
    pub kkt: f64,
    pub violation: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Optimal value of the phase-1 problem (minimal uniform violation).
    pub phase1: Option<f64>,
}

/// Cached second-order data.
struct Prepared<'a> {
    p: &'a ConvexProblem,
    grams: Vec<Option<DMatrix<f64>>>,
    penalty_hessian: DMatrix<f64>,
}

impl<'a> Prepared<'a> {
    fn new(p: &'a ConvexProblem) -> Self {
        let grams = p
            .constraints
            .iter()
            .map(|c| match &c.kind {
                Kind::Var { form, .. } => Some(form.gram()),
                _ => None,
            })
            .collect();
        let mut penalty_hessian = DMatrix::zeros(p.n, p.n);
        for (w, f) in &p.penalties {
            penalty_hessian += 2.0 * *w * f.gram();
        }
        Self { p, grams, penalty_hessian }
    }

    /// Value and gradient of the proximal augmented Lagrangian.
    fn phi(&self, x: &DVector<f64>, lam: &[f64], rho: f64, center: &DVector<f64>, mu: f64, grad: bool) -> (f64, Option<DVector<f64>>) {
        let p = self.p;
        let mut val = -p.objective.eval(x);
        let mut g = grad.then(|| -p.objective.gradient(p.n));
        for (w, f) in &p.penalties {
            val += w * f.eval(x);
            if let Some(g) = g.as_mut() {
                *g += *w * f.gradient(x);
            }
        }
        for (c, &l) in p.constraints.iter().zip(lam) {
            let v = c.value(x);
            let coef = if c.is_equality() {
                val += l * v + 0.5 * rho * v * v;
                l + rho * v
            } else {
                let shifted = (l + rho * v).max(0.0);
                val += (shifted * shifted - l * l) / (2.0 * rho);
                shifted
            };
            if let Some(g) = g.as_mut() {
                if coef != 0.0 {
                    add_constraint_gradient(c, x, coef, g);
                }
            }
        }
        let dx = x - center;
        val += 0.5 * mu * dx.norm_squared();
        if let Some(g) = g.as_mut() {
            *g += mu * dx;
        }
        (val, g)
    }

    fn hessian(&self, x: &DVector<f64>, lam: &[f64], rho: f64, mu: f64) -> DMatrix<f64> {
        let p = self.p;
        let mut h = self.penalty_hessian.clone();
        for (idx, (c, &l)) in p.constraints.iter().zip(lam).enumerate() {
            let v = c.value(x);
            let (coef, active) = if c.is_equality() { (l + rho * v, true) } else { ((l + rho * v).max(0.0), l + rho * v > 0.0) };
            if !active {
                continue;
            }
            match &c.kind {
                Kind::Eq(a) | Kind::Le(a) => {
                    for &(i, vi) in &a.terms {
                        for &(k, vk) in &a.terms {
                            h[(i, k)] += rho * vi * vk;
                        }
                    }
                }
                Kind::Var { .. } => {
                    h += 2.0 * coef * self.grams[idx].as_ref().expect("gram of a variance constraint");
                    let mut gv = DVector::zeros(p.n);
                    add_constraint_gradient(c, x, 1.0, &mut gv);
                    h.ger(rho, &gv, &gv, 1.0);
                }
            }
        }
        for i in 0..p.n {
            h[(i, i)] += mu;
        }
        h
    }

    /// Minimizes the proximal augmented Lagrangian over the box.
    fn inner(&self, x: &mut DVector<f64>, lam: &[f64], rho: f64, center: &DVector<f64>, mu: f64, tol: f64, max_iter: usize) -> usize {
        let p = self.p;
        let mut iters = 0;
        while iters < max_iter {
            iters += 1;
            let (phi0, g) = self.phi(x, lam, rho, center, mu, true);
            let g = g.expect("gradient requested");
            let pg = (0..p.n).map(|i| (x[i] - (x[i] - g[i]).clamp(p.lower[i], p.upper[i])).abs()).fold(0.0, f64::max);
            if pg <= tol {
                break;
            }
            let eps = pg.min(1e-6);
            let free: Vec<usize> = (0..p.n)
                .filter(|&i| {
                    p.lower[i] < p.upper[i]
                        && !((x[i] <= p.lower[i] + eps && g[i] > 0.0) || (x[i] >= p.upper[i] - eps && g[i] < 0.0))
                })
                .collect();
            let mut d = -g.clone();
            if !free.is_empty() {
                let h = self.hessian(x, lam, rho, mu);
                let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
                let gf = DVector::from_fn(free.len(), |a, _| g[free[a]]);
                let scale = hf.diagonal().amax().max(1.0);
                let mut shift = 0.0;
                let df = loop {
                    let mut m = hf.clone();
                    for a in 0..free.len() {
                        m[(a, a)] += shift;
                    }
                    if let Some(ch) = m.cholesky() {
                        break ch.solve(&(-&gf));
                    }
                    shift = if shift == 0.0 { 1e-12 * scale } else { shift * 10.0 };
                };
                for (a, &i) in free.iter().enumerate() {
                    d[i] = df[a];
                }
            }
            // Armijo along the projection arc
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-20 {
                let mut xt = &*x + t * &d;
                p.project(&mut xt);
                let decrease = g.dot(&(&xt - &*x));
                let (phit, _) = self.phi(&xt, lam, rho, center, mu, false);
                if phit <= phi0 + 1e-4 * decrease || (decrease == 0.0 && phit <= phi0) {
                    *x = xt;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // fall back to a projected gradient step before giving up
                let mut t = 1.0 / self.hessian(x, lam, rho, mu).diagonal().amax().max(1e-12);
                let mut moved = false;
                while t > 1e-30 {
                    let mut xt = &*x - t * &g;
                    p.project(&mut xt);
                    let (phit, _) = self.phi(&xt, lam, rho, center, mu, false);
                    if phit < phi0 {
                        *x = xt;
                        moved = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !moved {
                    break;
                }
            }
        }
        iters
    }
}

/// Solves the problem from `start` (projected onto the box) with optional
/// warm-start multipliers; no phase-1 classification.
pub fn solve_from(p: &ConvexProblem, start: &DVector<f64>, warm: Option<&[f64]>, settings: &SolverSettings) -> EngineResult {
    if let Err(e) = p.check() {
        panic!("malformed problem: {e}");
    }
    let prepared = Prepared::new(p);
    let mut x = start.clone();
    p.project(&mut x);
    let mut lam: Vec<f64> = match warm {
        Some(w) if w.len() == p.constraints.len() => w.to_vec(),
        _ => vec![0.0; p.constraints.len()],
    };
    for (c, l) in p.constraints.iter().zip(lam.iter_mut()) {
        if !c.is_equality() {
            *l = l.max(0.0);
        }
    }
    let mut rho = settings.rho0;
    let mut mu = 1.0 / rho;
    let mut prev_viol = f64::INFINITY;
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let mut viol = f64::INFINITY;
    let mut status = Status::MaxIter;
    for _ in 0..settings.max_outer {
        let center = x.clone();
        let budget = settings.max_iter.saturating_sub(iterations).max(1);
        let inner_tol = (0.1 * kkt.min(1.0)).clamp(1e-13, 1e-3).min(settings.kkt_tol * 1e-2);
        iterations += prepared.inner(&mut x, &lam, rho, &center, mu, inner_tol, budget.min(settings.max_inner));
        let values = p.values(&x);
        for ((c, l), v) in p.constraints.iter().zip(lam.iter_mut()).zip(&values) {
            *l = if c.is_equality() { *l + rho * v } else { (*l + rho * v).max(0.0) };
        }
        viol = p.violation(&x);
        kkt = kkt_residual(p, &x, &lam);
        if !x.iter().all(|v| v.is_finite()) {
            status = Status::NumericalFailure;
            break;
        }
        if viol <= settings.feas_tol && kkt <= settings.kkt_tol {
            status = Status::Optimal;
            break;
        }
        if x.amax() > settings.unbounded_norm {
            status = Status::Unbounded;
            break;
        }
        if iterations >= settings.max_iter {
            break;
        }
        if viol > settings.feas_tol && viol > 0.25 * prev_viol {
            rho = (rho * 10.0).min(settings.rho_max);
        }
        // shrink the proximal weight once primal feasibility is reached
        mu = if viol <= settings.feas_tol { (mu * 0.1).max(settings.prox_min) } else { mu.min(1.0 / rho).max(settings.prox_min) };
        prev_viol = viol;
    }
    let objective = p.objective_value(&x);
    EngineResult { x, multipliers: lam, status, kkt, violation: viol, objective, iterations, phase1: None }
}

/// Phase-1 problem `min s` subject to every constraint relaxed by `s ≥ 0`.
fn phase_one_problem(p: &ConvexProblem) -> ConvexProblem {
    let n = p.n + 1;
    let s = p.n;
    let mut q = ConvexProblem::new(n);
    q.lower[..p.n].copy_from_slice(&p.lower);
    q.upper[..p.n].copy_from_slice(&p.upper);
    q.lower[s] = 0.0;
    q.objective = Affine::var(s, -1.0);
    let relaxed = |a: &Affine, sign: f64| {
        let mut r = a.scaled(sign);
        r.terms.push((s, -1.0));
        r
    };
    for c in &p.constraints {
        match &c.kind {
            Kind::Eq(a) => {
                q.push_le(c.label.clone(), relaxed(a, 1.0));
                q.push_le(c.label.clone(), relaxed(a, -1.0));
            }
            Kind::Le(a) => q.push_le(c.label.clone(), relaxed(a, 1.0)),
            Kind::Var { form, linear, bound } => {
                let l = form.l.clone().insert_column(p.n, 0.0);
                let f = VarianceForm { l, offset: form.offset.clone() };
                q.constraints.push(Constraint { label: c.label.clone(), kind: Kind::Var { form: f, linear: relaxed(linear, 1.0), bound: *bound } });
            }
        }
    }
    q
}

/// Full solve: phase-1 feasibility, then the optimization from the phase-1
/// point.
pub fn solve(p: &ConvexProblem, start: &DVector<f64>, settings: &SolverSettings) -> EngineResult {
    let mut x0 = start.clone();
    p.project(&mut x0);
    let mut phase1 = None;
    if !p.constraints.is_empty() && p.violation(&x0) > settings.feas_tol {
        let q = phase_one_problem(p);
        let mut y0 = x0.clone().insert_row(p.n, 0.0);
        y0[p.n] = p.violation(&x0);
        let r = solve_from(&q, &y0, None, settings);
        let s = r.x[p.n];
        phase1 = Some(s);
        let x1 = r.x.rows(0, p.n).into_owned();
        if s > settings.phase1_tol && p.violation(&x1) > settings.phase1_tol {
            return EngineResult {
                objective: p.objective_value(&x1),
                violation: p.violation(&x1),
                x: x1,
                multipliers: vec![0.0; p.constraints.len()],
                status: Status::Infeasible,
                kkt: f64::INFINITY,
                iterations: r.iterations,
                phase1,
            };
        }
        x0 = x1;
    }
    let mut r = solve_from(p, &x0, None, settings);
    r.phase1 = phase1;
    r
}
