//! Discrete optimal transport between uniform empirical measures.
//!
//! [`sinkhorn`] is the workhorse (entropic, log-domain); [`exact_ot`] solves
//! the equal-size uniform case exactly as an assignment problem and is used
//! to bound the entropic error.

use log::{debug, warn};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::distributions::{
    add_label_penalty, class_means, sq_distances, GroundCost, LabeledMeasure,
};
use crate::error::{Error, Result};

/// Default cap on the size of exact assignment problems.
pub const EXACT_OT_CAP: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornParams {
    /// Entropic regularization. Interpreted as a multiple of the mean
    /// (feature) cost when `relative` is set.
    pub epsilon: f64,
    pub relative: bool,
    pub max_iters: usize,
    /// Threshold on the max absolute marginal deviation.
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            relative: true,
            max_iters: 1000,
            tol: 1e-6,
        }
    }
}

impl SinkhornParams {
    pub fn relative(factor: f64) -> Self {
        Self {
            epsilon: factor,
            relative: true,
            ..Self::default()
        }
    }

    pub fn absolute(epsilon: f64) -> Self {
        Self {
            epsilon,
            relative: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(
                "sinkhorn epsilon must be positive".into(),
            ));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "sinkhorn tol and max_iters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Absolute epsilon for a cost whose typical magnitude is `scale`.
    pub fn resolve(&self, scale: f64) -> f64 {
        if self.relative && scale > 0.0 {
            self.epsilon * scale
        } else {
            self.epsilon
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Solver {
    Sinkhorn { epsilon: f64 },
    Exact,
}

/// A coupling between two uniform measures.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    /// `<coupling, C>`, entropy excluded.
    pub cost_value: f64,
    pub solver: Solver,
    pub marginal_error: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl TransportPlan {
    /// Turns a non-converged plan into [`Error::NotConverged`].
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                marginal_error: self.marginal_error,
            })
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<f64>> = self.coupling.outer_iter().map(|r| r.to_vec()).collect();
        serde_json::json!({
            "solver": self.solver,
            "cost_value": self.cost_value,
            "marginal_error": self.marginal_error,
            "iterations": self.iterations,
            "converged": self.converged,
            "coupling": rows,
        })
    }
}

fn check_cost(c: &Array2<f64>) -> Result<()> {
    if c.nrows() == 0 || c.ncols() == 0 {
        return Err(Error::EmptyMeasure);
    }
    if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFiniteCost);
    }
    Ok(())
}

fn marginal_error(coupling: &Array2<f64>) -> f64 {
    let (n, m) = coupling.dim();
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    let rows = coupling
        .sum_axis(Axis(1))
        .iter()
        .fold(0.0f64, |e, s| e.max((s - a).abs()));
    coupling
        .sum_axis(Axis(0))
        .iter()
        .fold(rows, |e, s| e.max((s - b).abs()))
}

/// Entropic OT with epsilon resolved against the mean of `c`.
pub fn sinkhorn(c: &Array2<f64>, params: &SinkhornParams) -> Result<TransportPlan> {
    check_cost(c)?;
    let scale = c.mean().unwrap_or(0.0);
    sinkhorn_with_epsilon(c, params.resolve(scale), params)
}

/// Log-domain Sinkhorn between uniform marginals at a fixed absolute epsilon.
///
/// Small epsilons are reached by annealing from the cost scale with
/// warm-started potentials. The final coupling is rounded onto the exact
/// marginals, so it is always feasible; a run that misses `tol` within
/// `max_iters` is still returned, with `converged = false`.
pub fn sinkhorn_with_epsilon(
    c: &Array2<f64>,
    epsilon: f64,
    params: &SinkhornParams,
) -> Result<TransportPlan> {
    params.validate()?;
    check_cost(c)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter("epsilon must be positive".into()));
    }
    let (n, m) = c.dim();
    let c_std = c.as_standard_layout();
    let ct = c.t().as_standard_layout().into_owned();
    let cs = c_std.as_slice().unwrap();
    let cts = ct.as_slice().unwrap();

    let mut state = Potentials {
        f: vec![0.0; n],
        g: vec![0.0; m],
    };
    let c_max = c.iter().copied().fold(0.0f64, f64::max);
    let mut iterations = 0;
    let mut eps = c_max;
    while eps > ANNEAL_RATIO * epsilon {
        let (used, _) = state.iterate(cs, cts, eps, ANNEAL_STAGE_ITERS, params.tol);
        iterations += used;
        eps *= 0.5;
    }
    let (used, converged) = state.iterate(cs, cts, epsilon, params.max_iters, params.tol);
    iterations += used;

    let mut coupling = state.plan(cs, epsilon);
    let raw_error = marginal_error(&coupling);
    if !converged {
        warn!("sinkhorn stopped after {iterations} iterations, marginal error {raw_error:.3e}");
    } else {
        debug!("sinkhorn converged in {iterations} iterations");
    }
    round_to_marginals(&mut coupling);
    let cost_value = (&coupling * c).sum();
    Ok(TransportPlan {
        marginal_error: marginal_error(&coupling).max(if converged { 0.0 } else { raw_error }),
        coupling,
        cost_value,
        solver: Solver::Sinkhorn { epsilon },
        iterations,
        converged,
    })
}

const ANNEAL_RATIO: f64 = 4.0;
const ANNEAL_STAGE_ITERS: usize = 200;

/// Dual potentials in cost units.
struct Potentials {
    f: Vec<f64>,
    g: Vec<f64>,
}

impl Potentials {
    /// Sinkhorn at fixed `eps` in the scaling domain, with the kernel
    /// rebuilt from the potentials whenever a scaling leaves
    /// `[1/ABSORB, ABSORB]`. Rows or columns whose kernel underflows
    /// entirely get a log-domain step. Returns the iteration count and
    /// whether both marginals are within `tol`.
    fn iterate(&mut self, cs: &[f64], cts: &[f64], eps: f64, max_iters: usize, tol: f64) -> (usize, bool) {
        const ABSORB: f64 = 1e50;
        let (n, m) = (self.f.len(), self.g.len());
        let a = 1.0 / n as f64;
        let b = 1.0 / m as f64;
        let inv = 1.0 / eps;
        let mut kernel = vec![0.0; n * m];
        let mut u = vec![1.0; n];
        let mut v = vec![1.0; m];
        let mut kv = vec![0.0; n];
        let mut ktu = vec![0.0; m];
        let mut fresh = false;
        let mut it = 0;
        while it < max_iters {
            if !fresh {
                self.absorb(&mut u, &mut v, eps);
                self.kernel(cs, inv, &mut kernel);
                fresh = true;
            }
            it += 1;
            for i in 0..n {
                kv[i] = kernel[i * m..(i + 1) * m].iter().zip(&v).map(|(k, v)| k * v).sum();
            }
            if kv.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                // whole kernel row underflowed: take one log-domain step
                self.absorb(&mut u, &mut v, eps);
                self.log_step(cs, cts, eps);
                fresh = false;
                continue;
            }
            for i in 0..n {
                u[i] = a / kv[i];
            }
            ktu.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..n {
                let row = &kernel[i * m..(i + 1) * m];
                for (acc, k) in ktu.iter_mut().zip(row) {
                    *acc += k * u[i];
                }
            }
            if ktu.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                self.absorb(&mut u, &mut v, eps);
                self.log_step(cs, cts, eps);
                fresh = false;
                continue;
            }
            let mut col_err = 0.0f64;
            for j in 0..m {
                col_err = col_err.max((v[j] * ktu[j] - b).abs());
                v[j] = b / ktu[j];
            }
            let drifted = u.iter().chain(&v).any(|&x| !(1.0 / ABSORB..=ABSORB).contains(&x));
            if col_err <= tol {
                let row_err = (0..n)
                    .map(|i| {
                        let s: f64 = kernel[i * m..(i + 1) * m].iter().zip(&v).map(|(k, v)| k * v).sum();
                        (u[i] * s - a).abs()
                    })
                    .fold(0.0, f64::max);
                if row_err <= tol {
                    self.absorb(&mut u, &mut v, eps);
                    return (it, true);
                }
            }
            if drifted {
                fresh = false;
            }
        }
        self.absorb(&mut u, &mut v, eps);
        (it, false)
    }

    fn absorb(&mut self, u: &mut [f64], v: &mut [f64], eps: f64) {
        for (f, x) in self.f.iter_mut().zip(u.iter_mut()) {
            *f += eps * x.ln();
            *x = 1.0;
        }
        for (g, x) in self.g.iter_mut().zip(v.iter_mut()) {
            *g += eps * x.ln();
            *x = 1.0;
        }
    }

    fn kernel(&self, cs: &[f64], inv: f64, out: &mut [f64]) {
        let m = self.g.len();
        for (i, f) in self.f.iter().enumerate() {
            for j in 0..m {
                out[i * m + j] = ((f + self.g[j] - cs[i * m + j]) * inv).exp();
            }
        }
    }

    /// One alternating log-domain update.
    fn log_step(&mut self, cs: &[f64], cts: &[f64], eps: f64) {
        let (n, m) = (self.f.len(), self.g.len());
        let inv = 1.0 / eps;
        let log_a = -(n as f64).ln();
        let log_b = -(m as f64).ln();
        for i in 0..n {
            self.f[i] = eps * (log_a - log_sum_exp(&self.g, &cs[i * m..(i + 1) * m], inv));
        }
        for j in 0..m {
            self.g[j] = eps * (log_b - log_sum_exp(&self.f, &cts[j * n..(j + 1) * n], inv));
        }
    }

    fn plan(&self, cs: &[f64], eps: f64) -> Array2<f64> {
        let (n, m) = (self.f.len(), self.g.len());
        let inv = 1.0 / eps;
        Array2::from_shape_fn((n, m), |(i, j)| {
            ((self.f[i] + self.g[j] - cs[i * m + j]) * inv).exp()
        })
    }
}

/// Projects a nonnegative matrix onto the transport polytope with uniform
/// marginals: scale down overfull rows and columns, then redistribute the
/// missing mass as a rank-one correction.
fn round_to_marginals(p: &mut Array2<f64>) {
    let (n, m) = p.dim();
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    let rows = p.sum_axis(Axis(1));
    for (mut row, r) in p.outer_iter_mut().zip(rows.iter()) {
        if *r > a {
            row *= a / r;
        }
    }
    let cols = p.sum_axis(Axis(0));
    for (mut col, s) in p.axis_iter_mut(Axis(1)).zip(cols.iter()) {
        if *s > b {
            col *= b / s;
        }
    }
    let err_r: Array1<f64> = p.sum_axis(Axis(1)).mapv(|r| (a - r).max(0.0));
    let err_c: Array1<f64> = p.sum_axis(Axis(0)).mapv(|s| (b - s).max(0.0));
    let total = err_r.sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..m {
                p[[i, j]] += err_r[i] * err_c[j] / total;
            }
        }
    }
}

/// `log Σ_j exp((pot_j - cost_j) / eps)` with `inv = 1 / eps`.
fn log_sum_exp(pot: &[f64], cost: &[f64], inv: f64) -> f64 {
    let max = pot
        .iter()
        .zip(cost)
        .fold(f64::NEG_INFINITY, |acc, (p, c)| acc.max((p - c) * inv));
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = pot
        .iter()
        .zip(cost)
        .map(|(p, c)| ((p - c) * inv - max).exp())
        .sum();
    max + sum.ln()
}

/// Exact OT between two uniform measures of equal size, via a
/// shortest-augmenting-path Hungarian algorithm in O(n³).
pub fn exact_ot(c: &Array2<f64>) -> Result<TransportPlan> {
    exact_ot_capped(c, EXACT_OT_CAP)
}

pub fn exact_ot_capped(c: &Array2<f64>, cap: usize) -> Result<TransportPlan> {
    let (n, m) = c.dim();
    if n != m {
        return Err(Error::NotSquare { rows: n, cols: m });
    }
    if n > cap {
        return Err(Error::CapExceeded { n, cap });
    }
    if n == 0 {
        return Err(Error::EmptyMeasure);
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCost);
    }
    let assignment = hungarian(c);
    let mut coupling = Array2::zeros((n, n));
    let mass = 1.0 / n as f64;
    let mut total = 0.0;
    for (i, &j) in assignment.iter().enumerate() {
        coupling[[i, j]] = mass;
        total += c[[i, j]];
    }
    Ok(TransportPlan {
        coupling,
        cost_value: total * mass,
        solver: Solver::Exact,
        marginal_error: 0.0,
        iterations: n,
        converged: true,
    })
}

/// Row-to-column assignment minimizing the total cost of a square matrix.
pub fn hungarian(c: &Array2<f64>) -> Vec<usize> {
    let n = c.nrows();
    // 1-based potentials; column 0 is the virtual start
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Cost matrix plus the mean of its label-free part, which sets the
/// entropic scale so that a large label penalty does not blur the plan.
pub(crate) fn cost_and_scale(
    a: &LabeledMeasure,
    b: &LabeledMeasure,
    cost: GroundCost,
) -> Result<(Array2<f64>, f64)> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let mut c = sq_distances(a.support().view(), b.support().view());
    let scale = c.mean().unwrap_or(0.0);
    if let GroundCost::LabelAugmented { beta } = cost {
        add_label_penalty(&mut c, a.require_labels()?, b.require_labels()?, beta);
    }
    Ok((c, scale))
}

/// Entropic estimate of the transport cost between two measures. For
/// [`GroundCost::SqEuclidean`] the W₂ distance is the square root of the value.
pub fn wasserstein(
    a: &LabeledMeasure,
    b: &LabeledMeasure,
    cost: GroundCost,
    params: &SinkhornParams,
) -> Result<(f64, TransportPlan)> {
    let (c, scale) = cost_and_scale(a, b, cost)?;
    let plan = sinkhorn_with_epsilon(&c, params.resolve(scale), params)?;
    Ok((plan.cost_value, plan))
}

/// Linear-kernel MMD: distance between the support means.
pub fn linear_mmd(a: &LabeledMeasure, b: &LabeledMeasure) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let diff = a.mean() - b.mean();
    Ok(diff.dot(&diff).sqrt())
}

/// Sum over classes of squared class-mean differences. Classes missing from
/// either side contribute nothing.
pub fn class_mmd_sq(p: &LabeledMeasure, q: &LabeledMeasure) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: q.dim(),
        });
    }
    if p.n_classes() != q.n_classes() {
        return Err(Error::InvalidParameter("class counts differ".into()));
    }
    let mp = class_means(p)?;
    let mq = class_means(q)?;
    let mut total = 0.0;
    for c in 0..p.n_classes() {
        match (mp.get(c), mq.get(c)) {
            (Some(x), Some(y)) => {
                let d = &x - &y;
                total += d.dot(&d);
            }
            _ => warn!("class {c} is empty on one side; skipped in class-conditional MMD"),
        }
    }
    Ok(total)
}

/// Maps each source point to the plan-weighted average of the target support.
pub fn barycentric_map(plan: &TransportPlan, target_support: &Array2<f64>) -> Result<Array2<f64>> {
    if plan.coupling.ncols() != target_support.nrows() {
        return Err(Error::DimensionMismatch {
            expected: plan.coupling.ncols(),
            found: target_support.nrows(),
        });
    }
    let mass: Array1<f64> = plan.coupling.sum_axis(Axis(1));
    if let Some(i) = mass.iter().position(|&r| !(r > f64::MIN_POSITIVE)) {
        return Err(Error::ZeroRowMass(i));
    }
    let mut out = plan.coupling.dot(target_support);
    for (mut row, r) in out.outer_iter_mut().zip(mass.iter()) {
        row /= *r;
    }
    Ok(out)
}
