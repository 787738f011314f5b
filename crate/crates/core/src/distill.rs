//! Summaries of the target domain: random baselines, Wasserstein
//! barycenter transport and class-conditional distribution matching.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::barycenter::{free_support_barycenter, BarycenterParams};
use crate::distributions::{
    class_means, stratified_sample, ClassMeans, GroundCost, LabeledMeasure, MultiDomainDataset,
};
use crate::error::{Error, Result};
use crate::ot::{barycentric_map, wasserstein, SinkhornParams, TransportPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RandomSource,
    RandomTargetOracle,
    Wbt,
    MsdaDm,
    Dadil,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::RandomSource,
        Method::RandomTargetOracle,
        Method::Wbt,
        Method::MsdaDm,
        Method::Dadil,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::RandomSource => "random_source",
            Method::RandomTargetOracle => "random_target_oracle",
            Method::Wbt => "wbt",
            Method::MsdaDm => "msda_dm",
            Method::Dadil => "dadil",
        }
    }

    /// Uses held-out target labels; a best-case reference, not a distiller.
    pub fn is_oracle(self) -> bool {
        self == Method::RandomTargetOracle
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown method `{s}`")))
    }
}

/// A distilled labeled summary of the target domain, `spc` points per class.
#[derive(Debug, Clone)]
pub struct Summary {
    pub measure: LabeledMeasure,
    pub method: Method,
    pub spc: usize,
    pub seed: u64,
    pub diagnostics: BTreeMap<String, serde_json::Value>,
}

impl Summary {
    pub fn new(measure: LabeledMeasure, method: Method, spc: usize, seed: u64) -> Result<Self> {
        let counts = measure.class_counts()?;
        if let Some(c) = counts.iter().position(|&k| k != spc) {
            return Err(Error::InvalidParameter(format!(
                "summary has {} points in class {c}, expected {spc}",
                counts[c]
            )));
        }
        let mut diagnostics = BTreeMap::new();
        if method.is_oracle() {
            diagnostics.insert("label_oracle".to_string(), json!(true));
        }
        Ok(Self {
            measure,
            method,
            spc,
            seed,
            diagnostics,
        })
    }

    pub fn diagnostics_json(&self) -> serde_json::Value {
        json!({
            "method": self.method,
            "spc": self.spc,
            "seed": self.seed,
            "n_points": self.measure.len(),
            "diagnostics": self.diagnostics,
        })
    }
}

fn check_spc(spc: usize) -> Result<()> {
    if spc == 0 {
        return Err(Error::InvalidParameter("spc must be positive".into()));
    }
    Ok(())
}

/// Stratified sample of the pooled sources; no adaptation.
pub fn distill_random_source(
    dataset: &MultiDomainDataset,
    spc: usize,
    seed: u64,
) -> Result<Summary> {
    check_spc(spc)?;
    let pooled = dataset.pooled_sources()?;
    Summary::new(
        stratified_sample(&pooled, spc, seed)?,
        Method::RandomSource,
        spc,
        seed,
    )
}

/// Stratified sample of the target using held-out labels.
pub fn distill_random_target_oracle(
    dataset: &MultiDomainDataset,
    target_labels: &[usize],
    spc: usize,
    seed: u64,
) -> Result<Summary> {
    check_spc(spc)?;
    let target = dataset.target();
    if target_labels.len() != target.len() {
        return Err(Error::LabelLengthMismatch {
            expected: target.len(),
            found: target_labels.len(),
        });
    }
    let labeled = LabeledMeasure::labeled(
        target.support().clone(),
        target_labels.to_vec(),
        dataset.n_classes(),
    )?;
    Summary::new(
        stratified_sample(&labeled, spc, seed)?,
        Method::RandomTargetOracle,
        spc,
        seed,
    )
}

/// Wasserstein barycenter transport: labeled barycenter of the sources,
/// then mapped onto the target through the barycentric projection.
pub fn distill_wbt(
    dataset: &MultiDomainDataset,
    spc: usize,
    ot: &SinkhornParams,
    bary: &BarycenterParams,
    seed: u64,
) -> Result<Summary> {
    distill_wbt_with_plan(dataset, spc, ot, bary, seed).map(|(s, _)| s)
}

/// [`distill_wbt`], also returning the barycenter-to-target plan.
pub fn distill_wbt_with_plan(
    dataset: &MultiDomainDataset,
    spc: usize,
    ot: &SinkhornParams,
    bary: &BarycenterParams,
    seed: u64,
) -> Result<(Summary, TransportPlan)> {
    check_spc(spc)?;
    let sources = dataset.source_measures();
    let alpha = vec![1.0 / sources.len() as f64; sources.len()];
    let params = BarycenterParams {
        support_size: spc * dataset.n_classes(),
        seed,
        ..bary.clone()
    };
    let bc = free_support_barycenter(&sources, &alpha, &params)?;

    let target = dataset.target();
    let (value, plan) = wasserstein(
        &bc.measure.without_labels(),
        target,
        GroundCost::SqEuclidean,
        ot,
    )?;
    let mapped = barycentric_map(&plan, target.support()).map_err(|e| match e {
        Error::ZeroRowMass(i) => Error::DegenerateTransport(i),
        other => other,
    })?;
    let mut summary = Summary::new(bc.measure.with_support(mapped)?, Method::Wbt, spc, seed)?;
    let d = &mut summary.diagnostics;
    d.insert("barycenter_objective".into(), json!(bc.history));
    d.insert("barycenter_iterations".into(), json!(bc.iterations));
    d.insert("barycenter_converged".into(), json!(bc.converged));
    d.insert("transport_objective".into(), json!(value));
    d.insert("transport_converged".into(), json!(plan.converged));
    Ok((summary, plan))
}

/// How the target term of the distribution-matching objective is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetMmd {
    /// `‖μ_P − μ_T‖`
    #[default]
    Unsquared,
    /// `‖μ_P − μ_T‖²`
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmParams {
    pub learning_rate: f64,
    pub iters: usize,
    pub target_weight: f64,
    pub target_mmd: TargetMmd,
    pub max_halvings: usize,
}

impl Default for DmParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            iters: 500,
            target_weight: 1.0,
            target_mmd: TargetMmd::Unsquared,
            max_halvings: 20,
        }
    }
}

/// `w · MMD(P, T) + Σ_ℓ MMD_c²(P, S_ℓ)` as a function of the summary
/// coordinates, with summary labels held fixed.
pub struct DmObjective {
    target_mean: Array1<f64>,
    sources: Vec<ClassMeans>,
    labels: Vec<usize>,
    counts: Vec<usize>,
    target_weight: f64,
    target_mmd: TargetMmd,
}

impl DmObjective {
    pub fn new(
        target: &LabeledMeasure,
        sources: &[&LabeledMeasure],
        summary_labels: &[usize],
        n_classes: usize,
        params: &DmParams,
    ) -> Result<Self> {
        let sources = sources
            .iter()
            .map(|s| class_means(s))
            .collect::<Result<Vec<_>>>()?;
        let mut counts = vec![0usize; n_classes];
        for &l in summary_labels {
            counts[l] += 1;
        }
        Ok(Self {
            target_mean: target.mean(),
            sources,
            labels: summary_labels.to_vec(),
            counts,
            target_weight: params.target_weight,
            target_mmd: params.target_mmd,
        })
    }

    fn summary_class_means(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut means = Array2::<f64>::zeros((self.counts.len(), x.ncols()));
        for (row, &l) in x.outer_iter().zip(&self.labels) {
            let mut m = means.row_mut(l);
            m += &row;
        }
        for (mut m, &k) in means.outer_iter_mut().zip(&self.counts) {
            if k > 0 {
                m /= k as f64;
            }
        }
        means
    }

    pub fn value(&self, x: &Array2<f64>) -> f64 {
        let diff = x.mean_axis(Axis(0)).unwrap() - &self.target_mean;
        let sq = diff.dot(&diff);
        let target = match self.target_mmd {
            TargetMmd::Unsquared => sq.sqrt(),
            TargetMmd::Squared => sq,
        };
        let means = self.summary_class_means(x);
        let mut total = self.target_weight * target;
        for src in &self.sources {
            for c in 0..self.counts.len() {
                if let (true, Some(mu)) = (self.counts[c] > 0, src.get(c)) {
                    let d = &means.row(c) - &mu;
                    total += d.dot(&d);
                }
            }
        }
        total
    }

    /// Analytic gradient; the unsquared target term uses a zero subgradient
    /// when the means coincide.
    pub fn gradient(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut grad = self.smooth_gradient(x);
        if self.target_mmd == TargetMmd::Unsquared {
            let diff = x.mean_axis(Axis(0)).unwrap() - &self.target_mean;
            let norm = diff.dot(&diff).sqrt();
            if norm > 0.0 {
                grad += &(&diff * (self.target_weight / (norm * x.nrows() as f64)));
            }
        }
        grad
    }

    /// Gradient of every term except the unsquared target term.
    fn smooth_gradient(&self, x: &Array2<f64>) -> Array2<f64> {
        let m = x.nrows() as f64;
        let target_grad: Array1<f64> = match self.target_mmd {
            TargetMmd::Unsquared => Array1::zeros(x.ncols()),
            TargetMmd::Squared => {
                let diff = x.mean_axis(Axis(0)).unwrap() - &self.target_mean;
                &diff * (2.0 * self.target_weight / m)
            }
        };
        let means = self.summary_class_means(x);
        let mut class_grad = Array2::<f64>::zeros(means.dim());
        for src in &self.sources {
            for c in 0..self.counts.len() {
                if let (true, Some(mu)) = (self.counts[c] > 0, src.get(c)) {
                    let mut g = class_grad.row_mut(c);
                    g += &((&means.row(c) - &mu) * (2.0 / self.counts[c] as f64));
                }
            }
        }
        let mut grad = Array2::<f64>::zeros(x.dim());
        for (mut g, &l) in grad.outer_iter_mut().zip(&self.labels) {
            g.assign(&(&class_grad.row(l) + &target_grad));
        }
        grad
    }

    /// One step of size `lr`. The unsquared target term is not differentiable
    /// where the means meet, so it is handled by its proximal map (a block
    /// soft-threshold on the summary mean) instead of a subgradient.
    ///
    /// `lr` is per unit of class mass: each point carries 1/spc of its class,
    /// so the raw gradient shrinks with spc and the step is scaled back up.
    fn step(&self, x: &Array2<f64>, lr: f64) -> Array2<f64> {
        let occupied = self.counts.iter().filter(|&&n| n > 0).count().max(1);
        let lr = lr * x.nrows() as f64 / occupied as f64;
        let mut next = x - &(self.smooth_gradient(x) * lr);
        if self.target_mmd == TargetMmd::Unsquared && self.target_weight > 0.0 {
            let m = x.nrows() as f64;
            let diff = next.mean_axis(Axis(0)).unwrap() - &self.target_mean;
            let norm = diff.dot(&diff).sqrt();
            let threshold = lr * self.target_weight / m;
            let shrink = if norm > threshold { threshold / norm } else { 1.0 };
            next -= &(&diff * shrink);
        }
        next
    }
}

/// Proximal gradient descent with per-step backtracking on the
/// distribution-matching objective. Returns the optimized support and the
/// objective curve.
pub fn minimize_dm(
    objective: &DmObjective,
    init: Array2<f64>,
    params: &DmParams,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut x = init;
    let mut value = objective.value(&x);
    let mut curve = vec![value];
    for _ in 0..params.iters {
        if objective.gradient(&x).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let mut lr = params.learning_rate;
        let mut accepted = None;
        for _ in 0..=params.max_halvings {
            let candidate = objective.step(&x, lr);
            let v = objective.value(&candidate);
            if !v.is_finite() {
                return Err(Error::NonFiniteGradient);
            }
            if v <= value {
                accepted = Some((candidate, v));
                break;
            }
            lr *= 0.5;
        }
        match accepted {
            Some((candidate, v)) => {
                let stalled = value - v <= f64::EPSILON * value.abs();
                x = candidate;
                value = v;
                curve.push(value);
                if stalled {
                    break;
                }
            }
            None => break,
        }
    }
    Ok((x, curve))
}

/// Multi-source distribution matching: summary coordinates descend
/// `MMD(P, T) + Σ_ℓ MMD_c(P, S_ℓ)` from a stratified source sample.
pub fn distill_msda_dm(
    dataset: &MultiDomainDataset,
    spc: usize,
    opt: &DmParams,
    seed: u64,
) -> Result<Summary> {
    check_spc(spc)?;
    if !(opt.learning_rate > 0.0) || opt.target_weight < 0.0 {
        return Err(Error::InvalidParameter(
            "learning_rate must be positive, target_weight nonnegative".into(),
        ));
    }
    let pooled = dataset.pooled_sources()?;
    let init = stratified_sample(&pooled, spc, seed)?;
    let sources = dataset.source_measures();
    let objective = DmObjective::new(
        dataset.target(),
        &sources,
        init.require_labels()?,
        dataset.n_classes(),
        opt,
    )?;
    let (x, curve) = minimize_dm(&objective, init.support().clone(), opt)?;
    let mut summary = Summary::new(init.with_support(x)?, Method::MsdaDm, spc, seed)?;
    summary
        .diagnostics
        .insert("initial_objective".into(), json!(curve[0]));
    summary
        .diagnostics
        .insert("final_objective".into(), json!(curve[curve.len() - 1]));
    summary.diagnostics.insert("objective".into(), json!(curve));
    Ok(summary)
}
