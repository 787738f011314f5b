//! Free-support Wasserstein barycenters by fixed-point iteration.
//!
//! Each outer step solves one entropic plan per input measure and moves
//! every barycenter point to the α-weighted average of its barycentric
//! projections. Labeled barycenters keep their labels (and therefore their
//! per-class counts) from initialization onwards.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{add_label_penalty, max_sq_distance, sq_distances, LabeledMeasure};
use crate::error::{Error, Result};
use crate::ot::{sinkhorn_with_epsilon, SinkhornParams};

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BarycenterInit {
    /// Points drawn from the pooled inputs (class-conditionally when labeled).
    #[default]
    RandomSubset,
    /// Gaussian draws around the pooled (class) mean with pooled per-feature spread.
    GaussianAroundPooledMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarycenterParams {
    pub support_size: usize,
    pub max_outer_iters: usize,
    /// Stop once the mean point displacement falls below this.
    pub support_tol: f64,
    pub sinkhorn: SinkhornParams,
    pub init: BarycenterInit,
    pub seed: u64,
    /// Label penalty multiplier: `beta = kappa * max squared distance`.
    pub beta_kappa: f64,
}

impl Default for BarycenterParams {
    fn default() -> Self {
        Self {
            support_size: 1,
            max_outer_iters: 50,
            support_tol: 1e-4,
            sinkhorn: SinkhornParams::default(),
            init: BarycenterInit::RandomSubset,
            seed: 0,
            beta_kappa: 10.0,
        }
    }
}

impl BarycenterParams {
    pub fn validate(&self) -> Result<()> {
        self.sinkhorn.validate()?;
        if self.support_size == 0 || self.max_outer_iters == 0 {
            return Err(Error::InvalidParameter(
                "support_size and max_outer_iters must be positive".into(),
            ));
        }
        if !(self.support_tol > 0.0) || !(self.beta_kappa > 0.0) {
            return Err(Error::InvalidParameter(
                "support_tol and beta_kappa must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Result of a barycenter computation.
#[derive(Debug, Clone)]
pub struct Barycenter {
    pub measure: LabeledMeasure,
    /// `Σ_k α_k <π_k, C_k>` before each support update, plus one entry for
    /// the returned support.
    pub history: Vec<f64>,
    /// Same, with the entropic term: `Σ_k α_k (<π_k, C_k> - ε_k H(π_k))`.
    /// This is the quantity each fixed-point step cannot increase.
    pub entropic_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn check_simplex(alpha: &[f64]) -> Result<()> {
    let sum: f64 = alpha.iter().sum();
    let min = alpha.iter().copied().fold(f64::INFINITY, f64::min);
    if alpha.is_empty() || (sum - 1.0).abs() > SIMPLEX_TOL || min < -SIMPLEX_TOL || !sum.is_finite()
    {
        return Err(Error::SimplexViolation { sum, min });
    }
    Ok(())
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "projection of an empty vector");
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn validate_inputs(measures: &[&LabeledMeasure], alpha: &[f64]) -> Result<()> {
    if measures.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    if alpha.len() != measures.len() {
        return Err(Error::DimensionMismatch {
            expected: measures.len(),
            found: alpha.len(),
        });
    }
    check_simplex(alpha)?;
    let d = measures[0].dim();
    for m in measures {
        if m.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: m.dim(),
            });
        }
    }
    Ok(())
}

fn labeled_mode(measures: &[&LabeledMeasure]) -> Result<bool> {
    let labeled = measures.iter().filter(|m| m.is_labeled()).count();
    match labeled {
        0 => Ok(false),
        n if n == measures.len() => Ok(true),
        _ => Err(Error::LabelMixing),
    }
}

/// Barycenter of `measures` with weights `alpha`. Labeled when every input
/// is labeled, in which case the support size must be a multiple of the
/// class count and the label-augmented cost is used.
pub fn free_support_barycenter(
    measures: &[&LabeledMeasure],
    alpha: &[f64],
    params: &BarycenterParams,
) -> Result<Barycenter> {
    params.validate()?;
    validate_inputs(measures, alpha)?;
    let labeled = labeled_mode(measures)?;
    let init = initial_support(measures, labeled, params)?;
    free_support_barycenter_from(measures, alpha, init, params)
}

/// Same as [`free_support_barycenter`] from a caller-supplied initial support.
pub fn free_support_barycenter_from(
    measures: &[&LabeledMeasure],
    alpha: &[f64],
    init: LabeledMeasure,
    params: &BarycenterParams,
) -> Result<Barycenter> {
    params.validate()?;
    validate_inputs(measures, alpha)?;
    let labeled = labeled_mode(measures)?;
    if init.is_labeled() && !labeled {
        return Err(Error::LabelMixing);
    }
    if init.dim() != measures[0].dim() {
        return Err(Error::DimensionMismatch {
            expected: measures[0].dim(),
            found: init.dim(),
        });
    }
    let beta = if init.is_labeled() {
        Some(label_penalty(measures, params.beta_kappa)?)
    } else {
        None
    };
    let opts = FixedPointOptions {
        evaluate_final: true,
        solve_all: false,
    };
    let out = fixed_point(measures, alpha, &init, beta, params, opts)?;
    Ok(Barycenter {
        measure: init.with_support(out.support)?,
        history: out.history,
        entropic_history: out.entropic_history,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// `kappa` times the squared diameter of the union of supports. Barycenter
/// points stay inside the convex hull of that union, so the penalty dominates
/// every feature cost for the whole run.
pub fn label_penalty(measures: &[&LabeledMeasure], kappa: f64) -> Result<f64> {
    let pooled = LabeledMeasure::concat(measures)?;
    let diam = max_sq_distance(pooled.support().view(), pooled.support().view());
    let beta = kappa * diam;
    if !(beta > 0.0) {
        return Err(Error::DegenerateBeta);
    }
    Ok(beta)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FixedPointOptions {
    /// Solve one more round for the returned support.
    pub evaluate_final: bool,
    /// Also solve plans for zero-weight measures (needed for weight gradients).
    pub solve_all: bool,
}

pub(crate) struct FixedPointOutput {
    pub support: Array2<f64>,
    pub history: Vec<f64>,
    pub entropic_history: Vec<f64>,
    /// Plans used for the final support update; `None` for skipped zero weights.
    pub last_plans: Vec<Option<Array2<f64>>>,
    pub iterations: usize,
    pub converged: bool,
}

struct Round {
    plans: Vec<Option<Array2<f64>>>,
    objective: f64,
    entropic: f64,
}

fn solve_round(
    support: &Array2<f64>,
    labels: Option<&[usize]>,
    measures: &[&LabeledMeasure],
    alpha: &[f64],
    beta: Option<f64>,
    epsilons: &mut Vec<f64>,
    sinkhorn: &SinkhornParams,
    solve_all: bool,
) -> Result<Round> {
    let first = epsilons.is_empty();
    let solved: Vec<Option<(Array2<f64>, f64, f64, f64)>> = measures
        .par_iter()
        .enumerate()
        .map(|(k, m)| {
            if alpha[k] <= 0.0 && !solve_all {
                return Ok(None);
            }
            let mut c = sq_distances(support.view(), m.support().view());
            let eps = if first {
                sinkhorn.resolve(c.mean().unwrap_or(0.0))
            } else {
                epsilons[k]
            };
            if let (Some(beta), Some(lb)) = (beta, labels) {
                add_label_penalty(&mut c, lb, m.require_labels()?, beta);
            }
            let plan = sinkhorn_with_epsilon(&c, eps, sinkhorn)?;
            let neg_entropy: f64 = plan
                .coupling
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum();
            Ok(Some((
                plan.coupling,
                plan.cost_value,
                eps,
                plan.cost_value + eps * neg_entropy,
            )))
        })
        .collect::<Result<_>>()?;
    if first {
        *epsilons = solved
            .iter()
            .map(|s| s.as_ref().map_or(sinkhorn.epsilon, |(_, _, e, _)| *e))
            .collect();
    }
    let mut objective = 0.0;
    let mut entropic = 0.0;
    let plans = solved
        .into_iter()
        .enumerate()
        .map(|(k, s)| {
            s.map(|(p, v, _, e)| {
                objective += alpha[k] * v;
                entropic += alpha[k] * e;
                p
            })
        })
        .collect();
    Ok(Round {
        plans,
        objective,
        entropic,
    })
}

/// `X ← Σ_k α_k m π_k Y_k`, renormalizing rows whose mass is off by >10%.
pub(crate) fn support_update(
    plans: &[Option<Array2<f64>>],
    measures: &[&LabeledMeasure],
    alpha: &[f64],
    m: usize,
    d: usize,
) -> Array2<f64> {
    let mut next = Array2::<f64>::zeros((m, d));
    let nominal = 1.0 / m as f64;
    for (k, plan) in plans.iter().enumerate() {
        let Some(plan) = plan else { continue };
        if alpha[k] <= 0.0 {
            continue;
        }
        let mut proj = plan.dot(measures[k].support());
        let mass = plan.sum_axis(Axis(1));
        for (mut row, &r) in proj.outer_iter_mut().zip(mass.iter()) {
            let scale = if (r - nominal).abs() > 0.1 * nominal && r > 0.0 {
                1.0 / r
            } else {
                m as f64
            };
            row *= alpha[k] * scale;
        }
        next += &proj;
    }
    next
}

pub(crate) fn fixed_point(
    measures: &[&LabeledMeasure],
    alpha: &[f64],
    init: &LabeledMeasure,
    beta: Option<f64>,
    params: &BarycenterParams,
    opts: FixedPointOptions,
) -> Result<FixedPointOutput> {
    let labels = if beta.is_some() { init.labels() } else { None };
    let (m, d) = init.support().dim();
    let mut support = init.support().clone();
    let mut epsilons = Vec::new();
    let mut history = Vec::new();
    let mut entropic_history = Vec::new();
    let mut last_plans = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_outer_iters {
        iterations += 1;
        let round = solve_round(
            &support,
            labels,
            measures,
            alpha,
            beta,
            &mut epsilons,
            &params.sinkhorn,
            opts.solve_all,
        )?;
        history.push(round.objective);
        entropic_history.push(round.entropic);
        let next = support_update(&round.plans, measures, alpha, m, d);
        let displacement = (&next - &support)
            .outer_iter()
            .map(|r| r.dot(&r).sqrt())
            .sum::<f64>()
            / m as f64;
        support = next;
        last_plans = round.plans;
        log::trace!(
            "barycenter iter {iterations}: objective {:.6e}, displacement {displacement:.3e}",
            round.objective
        );
        if displacement < params.support_tol {
            converged = true;
            break;
        }
    }
    if opts.evaluate_final {
        let round = solve_round(
            &support,
            labels,
            measures,
            alpha,
            beta,
            &mut epsilons,
            &params.sinkhorn,
            opts.solve_all,
        )?;
        history.push(round.objective);
        entropic_history.push(round.entropic);
    }
    Ok(FixedPointOutput {
        support,
        history,
        entropic_history,
        last_plans,
        iterations,
        converged,
    })
}

/// Pooled points in a canonical order (label, then coordinates), so that the
/// initialization does not depend on the order of the input measures.
fn canonical_pool(measures: &[&LabeledMeasure]) -> Result<LabeledMeasure> {
    let pooled = LabeledMeasure::concat(measures)?;
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    let x = pooled.support();
    let labels = pooled.labels();
    order.sort_by(|&i, &j| {
        let by_label = match labels {
            Some(l) => l[i].cmp(&l[j]),
            None => Ordering::Equal,
        };
        by_label.then_with(|| {
            x.row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    });
    Ok(pooled.select(&order))
}

fn draw_rows<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if k <= n {
        index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

fn gaussian_rows<R: Rng>(points: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let mean = points.mean_axis(Axis(0)).unwrap();
    let std: Array1<f64> = points.std_axis(Axis(0), 0.0);
    Array2::from_shape_fn((k, points.ncols()), |(_, j)| {
        let z: f64 = StandardNormal.sample(rng);
        mean[j] + std[j] * z
    })
}

/// Initial barycenter support. Labeled mode allocates `support_size / n_c`
/// points per class, drawn class-conditionally.
pub fn initial_support(
    measures: &[&LabeledMeasure],
    labeled: bool,
    params: &BarycenterParams,
) -> Result<LabeledMeasure> {
    let pool = canonical_pool(measures)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let m = params.support_size;
    if !labeled {
        let support = match params.init {
            BarycenterInit::RandomSubset => {
                let rows = draw_rows(pool.len(), m, &mut rng);
                pool.support().select(Axis(0), &rows)
            }
            BarycenterInit::GaussianAroundPooledMean => gaussian_rows(pool.support(), m, &mut rng),
        };
        return LabeledMeasure::unlabeled(support, pool.n_classes());
    }
    let n_c = pool.n_classes();
    if m % n_c != 0 {
        return Err(Error::InvalidParameter(format!(
            "labeled barycenter needs support_size divisible by {n_c} classes, got {m}"
        )));
    }
    let spc = m / n_c;
    let labels = pool.require_labels()?;
    let mut blocks = Vec::with_capacity(n_c);
    let mut out_labels = Vec::with_capacity(m);
    for c in 0..n_c {
        let members: Vec<usize> = (0..pool.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let class_points = pool.support().select(Axis(0), &members);
        let block = match params.init {
            BarycenterInit::RandomSubset => {
                let rows = draw_rows(members.len(), spc, &mut rng);
                class_points.select(Axis(0), &rows)
            }
            BarycenterInit::GaussianAroundPooledMean => gaussian_rows(&class_points, spc, &mut rng),
        };
        blocks.push(block);
        out_labels.extend(std::iter::repeat(c).take(spc));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let support = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    LabeledMeasure::labeled(support, out_labels, n_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dirac(x: &[f64]) -> LabeledMeasure {
        LabeledMeasure::unlabeled(Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap(), 1)
            .unwrap()
    }

    #[test]
    fn project_simplex_examples() {
        assert_eq!(project_simplex(&[0.2, 0.3, 0.5]), vec![0.2, 0.3, 0.5]);
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        assert_eq!(project_simplex(&[-4.0]), vec![1.0]);
        let p = project_simplex(&[0.5, 0.5, 0.5]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn simplex_check() {
        assert!(check_simplex(&[0.5, 0.5]).is_ok());
        assert!(matches!(
            check_simplex(&[0.6, 0.6]),
            Err(Error::SimplexViolation { .. })
        ));
        assert!(matches!(
            check_simplex(&[1.5, -0.5]),
            Err(Error::SimplexViolation { .. })
        ));
    }

    #[test]
    fn dirac_pair_barycenter_is_weighted_mean() {
        let a = dirac(&[0.0, 1.0]);
        let b = dirac(&[4.0, -3.0]);
        for alpha in [[0.5, 0.5], [0.3, 0.7]] {
            let out =
                free_support_barycenter(&[&a, &b], &alpha, &BarycenterParams::default()).unwrap();
            let x = out.measure.support();
            assert!((x[[0, 0]] - (alpha[0] * 0.0 + alpha[1] * 4.0)).abs() < 1e-6);
            assert!((x[[0, 1]] - (alpha[0] * 1.0 + alpha[1] * -3.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_measures_are_a_fixed_point() {
        let x = array![[0.0, 0.0], [3.0, 1.0], [-1.0, 4.0], [2.0, -2.0]];
        let m = LabeledMeasure::unlabeled(x.clone(), 1).unwrap();
        let params = BarycenterParams {
            support_size: 4,
            sinkhorn: SinkhornParams {
                max_iters: 10_000,
                ..SinkhornParams::relative(1e-3)
            },
            ..BarycenterParams::default()
        };
        let out = free_support_barycenter_from(&[&m, &m, &m], &[0.2, 0.3, 0.5], m.clone(), &params)
            .unwrap();
        assert!((out.measure.support() - &x).iter().all(|v| v.abs() < 1e-6));
        assert!(*out.history.last().unwrap() <= 1e-6);
    }

    #[test]
    fn errors() {
        let a = dirac(&[0.0]);
        let b = LabeledMeasure::labeled(array![[1.0]], vec![0], 1).unwrap();
        let p = BarycenterParams::default();
        assert!(matches!(
            free_support_barycenter(&[&a, &b], &[0.5, 0.5], &p),
            Err(Error::LabelMixing)
        ));
        assert!(matches!(
            free_support_barycenter(&[&a, &a], &[0.5, 0.6], &p),
            Err(Error::SimplexViolation { .. })
        ));
        let c = dirac(&[0.0, 1.0]);
        assert!(matches!(
            free_support_barycenter(&[&a, &c], &[0.5, 0.5], &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn labeled_barycenter_keeps_class_counts() {
        let x = array![[0.0], [0.5], [10.0], [10.5], [20.0], [20.5]];
        let a = LabeledMeasure::labeled(x.clone(), vec![0, 0, 1, 1, 2, 2], 3).unwrap();
        let b = LabeledMeasure::labeled(x + 1.0, vec![0, 0, 1, 1, 2, 2], 3).unwrap();
        let params = BarycenterParams {
            support_size: 6,
            ..BarycenterParams::default()
        };
        let out = free_support_barycenter(&[&a, &b], &[0.5, 0.5], &params).unwrap();
        assert_eq!(out.measure.class_counts().unwrap(), vec![2, 2, 2]);
        // each point sits near its class cluster
        for (p, &l) in out
            .measure
            .support()
            .column(0)
            .iter()
            .zip(out.measure.labels().unwrap())
        {
            assert!((p - (10.0 * l as f64 + 0.75)).abs() < 1.0, "{p} label {l}");
        }
        let bad = BarycenterParams {
            support_size: 4,
            ..params
        };
        assert!(matches!(
            free_support_barycenter(&[&a, &b], &[0.5, 0.5], &bad),
            Err(Error::InvalidParameter(_))
        ));
    }
}
