//! Linear classifier on summaries, target accuracy, and SPC sweeps.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::barycenter::BarycenterParams;
use crate::dadil::{dadil_compress_target, dadil_fit, DadilParams, Dictionary};
use crate::distill::{
    distill_msda_dm, distill_random_source, distill_random_target_oracle, distill_wbt, DmParams, Method, Summary,
};
use crate::distributions::{standardize, LabeledMeasure, MultiDomainDataset};
use crate::ot::SinkhornParams;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierParams {
    pub l2: f64,
    pub iters: usize,
    pub lr: f64,
    /// Seeds the small random weight initialization.
    pub seed: u64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            iters: 300,
            lr: 0.5,
            seed: 0,
        }
    }
}

impl ClassifierParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0) || !(self.lr > 0.0) || self.iters == 0 {
            return Err(Error::InvalidParameter(
                "classifier needs l2 >= 0, lr > 0 and iters > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Multiclass linear model: `scores = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Regularized empirical risk before and after training.
    pub initial_risk: f64,
    pub final_risk: f64,
}

impl LinearModel {
    pub fn scores(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        self.scores(x)
            .outer_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &s)| if s > best.1 { (c, s) } else { best })
                    .0
            })
            .collect()
    }
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut p = scores.clone();
    for mut row in p.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

/// Mean cross-entropy plus `l2/2 ‖W‖²` (biases unpenalized).
pub fn risk(w: &Array2<f64>, b: &Array1<f64>, x: &Array2<f64>, y: &[usize], l2: f64) -> f64 {
    let scores = x.dot(&w.t()) + b;
    let mut total = 0.0;
    for (row, &label) in scores.outer_iter().zip(y) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / y.len() as f64 + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of [`risk`] with respect to weights and biases.
pub fn risk_gradient(
    w: &Array2<f64>,
    b: &Array1<f64>,
    x: &Array2<f64>,
    y: &[usize],
    l2: f64,
) -> (Array2<f64>, Array1<f64>) {
    let mut delta = softmax_rows(&(x.dot(&w.t()) + b));
    for (mut row, &label) in delta.outer_iter_mut().zip(y) {
        row[label] -= 1.0;
    }
    delta /= y.len() as f64;
    let gw = delta.t().dot(x) + &(w * l2);
    let gb = delta.sum_axis(Axis(0));
    (gw, gb)
}

/// Full-batch gradient descent on the regularized softmax risk; a step that
/// would increase the risk is retried at half the rate.
pub fn fit_linear(summary: &LabeledMeasure, params: &ClassifierParams) -> Result<LinearModel> {
    params.validate()?;
    if summary.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    let y = summary.require_labels()?;
    if let Some(c) = summary.class_counts()?.iter().position(|&k| k == 0) {
        return Err(Error::EmptyClass(c));
    }
    let x = summary.support();
    let (n_c, d) = (summary.n_classes(), summary.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let init = Normal::new(0.0, 1e-3).expect("valid normal");
    let mut w = Array2::from_shape_fn((n_c, d), |_| init.sample(&mut rng));
    let mut b = Array1::<f64>::zeros(n_c);
    let initial_risk = risk(&w, &b, x, y, params.l2);
    let mut current = initial_risk;
    if !current.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let mut lr = params.lr;
    for _ in 0..params.iters {
        let (gw, gb) = risk_gradient(&w, &b, x, y, params.l2);
        let mut accepted = false;
        for _ in 0..30 {
            let w_next = &w - &(&gw * lr);
            let b_next = &b - &(&gb * lr);
            let r = risk(&w_next, &b_next, x, y, params.l2);
            if !r.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            if r <= current {
                w = w_next;
                b = b_next;
                current = r;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(LinearModel {
        weights: w,
        bias: b,
        initial_risk,
        final_risk: current,
    })
}

/// Fraction of correct argmax predictions on `x` against `labels`.
pub fn evaluate(model: &LinearModel, x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != x.nrows() {
        return Err(Error::LabelLengthMismatch {
            expected: x.nrows(),
            found: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    let correct = model.predict(x).iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// `spc × n_c` over the total number of samples.
pub fn compression_ratio(dataset: &MultiDomainDataset, spc: usize) -> f64 {
    compression_ratio_for(dataset.n_classes(), dataset.total_samples(), spc)
}

pub fn compression_ratio_for(n_classes: usize, total_samples: usize, spc: usize) -> f64 {
    (spc * n_classes) as f64 / total_samples as f64
}

/// Percentage cut (not rounded) to two decimals, e.g. `0.0016774 -> 0.16`.
pub fn percent_truncated(ratio: f64) -> f64 {
    (ratio * 1e4).trunc() / 100.0
}

/// Percentage rounded half away from zero to two decimals.
pub fn percent_rounded(ratio: f64) -> f64 {
    (ratio * 1e4).round() / 100.0
}

/// Parameter blocks for every distiller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MethodParams {
    pub ot: SinkhornParams,
    pub barycenter: BarycenterParams,
    pub dm: DmParams,
    pub dadil: DadilParams,
}

/// Run one distiller. `hidden_labels` is only read by the oracle baseline;
/// `dictionary` lets callers reuse a DaDiL fit across SPC values.
pub fn run_method(
    method: Method,
    dataset: &MultiDomainDataset,
    hidden_labels: Option<&[usize]>,
    spc: usize,
    seed: u64,
    params: &MethodParams,
    dictionary: Option<&Dictionary>,
) -> Result<Summary> {
    match method {
        Method::RandomSource => distill_random_source(dataset, spc, seed),
        Method::RandomTargetOracle => {
            let labels = hidden_labels.ok_or(Error::MissingLabels)?;
            distill_random_target_oracle(dataset, labels, spc, seed)
        }
        Method::Wbt => distill_wbt(dataset, spc, &params.ot, &params.barycenter, seed),
        Method::MsdaDm => distill_msda_dm(dataset, spc, &params.dm, seed),
        Method::Dadil => {
            let fitted;
            let dict = match dictionary {
                Some(d) => d,
                None => {
                    fitted = dadil_fit(dataset, &dadil_params_for(params, seed))?;
                    &fitted
                }
            };
            dadil_compress_target(dict, spc, &params.barycenter, seed)
        }
    }
}

fn dadil_params_for(params: &MethodParams, seed: u64) -> DadilParams {
    DadilParams {
        seed,
        ..params.dadil.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub benchmark: String,
    pub methods: Vec<Method>,
    pub spc_values: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Standardize features over all domains before distilling.
    pub standardize: bool,
    pub params: MethodParams,
    pub classifier: ClassifierParams,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            benchmark: "synthetic".into(),
            methods: Method::ALL.to_vec(),
            spc_values: vec![1, 10, 50],
            seeds: vec![0, 1, 2, 3, 4],
            standardize: true,
            params: MethodParams::default(),
            classifier: ClassifierParams::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.spc_values.is_empty() || self.seeds.is_empty() {
            return Err(Error::ConfigInvalid(
                "methods, spc_values and seeds must be non-empty".into(),
            ));
        }
        if self.spc_values.contains(&0) {
            return Err(Error::ConfigInvalid("spc values must be positive".into()));
        }
        self.params.ot.validate()?;
        self.params.barycenter.validate()?;
        self.classifier.validate()
    }
}

pub const RECORD_SCHEMA: u32 = 1;

/// One sweep cell. Wall-times are kept out of the serialized form so that
/// record files are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub schema: u32,
    pub benchmark: String,
    pub target: String,
    pub method: Method,
    pub spc: usize,
    pub seed: u64,
    /// `None` when the cell failed; see `error`.
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub diagnostics: serde_json::Value,
    #[serde(skip)]
    pub train_seconds: f64,
    #[serde(skip)]
    pub eval_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub spc: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub n_seeds: usize,
}

/// Mean and `1.96 · s / √n` over successful cells, grouped by (method, spc)
/// in method order then increasing SPC.
pub fn aggregate(records: &[RunRecord]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(usize, usize), (Method, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let key = (Method::ALL.iter().position(|&m| m == r.method).unwrap_or(usize::MAX), r.spc);
        let entry = groups.entry(key).or_insert_with(|| (r.method, Vec::new()));
        if let Some(a) = r.accuracy {
            entry.1.push(a);
        }
    }
    groups
        .into_iter()
        .map(|((_, spc), (method, accs))| {
            let n = accs.len();
            let mean = if n > 0 { accs.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let ci95 = if n > 1 {
                let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                1.96 * var.sqrt() / (n as f64).sqrt()
            } else {
                0.0
            };
            Aggregate {
                method,
                spc,
                mean_acc: mean,
                ci95,
                n_seeds: n,
            }
        })
        .collect()
}

fn run_cell(
    cfg: &SweepConfig,
    dataset: &MultiDomainDataset,
    hidden: &[usize],
    dicts: &BTreeMap<u64, std::result::Result<Dictionary, String>>,
    (method, spc, seed): (Method, usize, u64),
) -> RunRecord {
    let mut record = RunRecord {
        schema: RECORD_SCHEMA,
        benchmark: cfg.benchmark.clone(),
        target: dataset.target_name().to_string(),
        method,
        spc,
        seed,
        accuracy: None,
        error: None,
        diagnostics: json!({}),
        train_seconds: 0.0,
        eval_seconds: 0.0,
    };
    let started = Instant::now();
    let summary = match (method, dicts.get(&seed)) {
        (Method::Dadil, Some(Err(msg))) => Err(msg.clone()),
        (Method::Dadil, Some(Ok(dict))) => {
            run_method(method, dataset, Some(hidden), spc, seed, &cfg.params, Some(dict)).map_err(tag)
        }
        _ => run_method(method, dataset, Some(hidden), spc, seed, &cfg.params, None).map_err(tag),
    };
    let classifier = ClassifierParams {
        seed,
        ..cfg.classifier.clone()
    };
    let outcome = summary.and_then(|s| {
        let model = fit_linear(&s.measure, &classifier).map_err(tag)?;
        Ok((s, model))
    });
    record.train_seconds = started.elapsed().as_secs_f64();
    match outcome {
        Ok((summary, model)) => {
            let started = Instant::now();
            match evaluate(&model, dataset.target().support(), hidden) {
                Ok(acc) => record.accuracy = Some(acc),
                Err(e) => record.error = Some(tag(e)),
            }
            record.eval_seconds = started.elapsed().as_secs_f64();
            let mut diag = summary.diagnostics;
            diag.insert("classifier_final_risk".into(), json!(model.final_risk));
            record.diagnostics = json!(diag);
        }
        Err(msg) => {
            log::warn!("{} spc={spc} seed={seed} failed: {msg}", method.as_str());
            record.error = Some(msg);
        }
    }
    record
}

fn tag(e: Error) -> String {
    format!("{}: {e}", e.category().as_str())
}

/// Every (method, spc, seed) cell, run on a pool of `jobs` threads. Failed
/// cells are kept with an error tag. Records come back in grid order
/// regardless of scheduling.
pub fn sweep(
    dataset: &MultiDomainDataset,
    hidden_labels: &[usize],
    cfg: &SweepConfig,
    jobs: Option<usize>,
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    if hidden_labels.len() != dataset.target().len() {
        return Err(Error::LabelLengthMismatch {
            expected: dataset.target().len(),
            found: hidden_labels.len(),
        });
    }
    let standardized;
    let dataset = if cfg.standardize {
        standardized = standardize(dataset)?.0;
        &standardized
    } else {
        dataset
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::ConfigInvalid(format!("thread pool: {e}")))?;

    let cells: Vec<(Method, usize, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| {
            cfg.spc_values
                .iter()
                .flat_map(move |&spc| cfg.seeds.iter().map(move |&seed| (m, spc, seed)))
        })
        .collect();

    Ok(pool.install(|| {
        // one dictionary per seed, shared by every SPC value
        let dicts: BTreeMap<u64, std::result::Result<Dictionary, String>> = if cfg.methods.contains(&Method::Dadil) {
            cfg.seeds
                .par_iter()
                .map(|&seed| (seed, dadil_fit(dataset, &dadil_params_for(&cfg.params, seed)).map_err(tag)))
                .collect::<Vec<_>>()
                .into_iter()
                .collect()
        } else {
            BTreeMap::new()
        };
        cells
            .par_iter()
            .map(|&cell| run_cell(cfg, dataset, hidden_labels, &dicts, cell))
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Domain;
    use rand_distr::StandardNormal;

    fn two_blobs(seed: u64, n: usize, sep: f64) -> LabeledMeasure {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let sign = if labels[i] == 0 { -1.0 } else { 1.0 };
            0.2 * z + if j == 0 { sign * sep } else { 0.0 }
        });
        LabeledMeasure::labeled(x, labels, 2).unwrap()
    }

    fn model(weights: Array2<f64>, bias: Array1<f64>) -> LinearModel {
        LinearModel {
            weights,
            bias,
            initial_risk: 0.0,
            final_risk: 0.0,
        }
    }

    #[test]
    fn separable_training_accuracy() {
        let data = two_blobs(0, 40, 2.0);
        let params = ClassifierParams {
            l2: 1e-4,
            ..ClassifierParams::default()
        };
        let m = fit_linear(&data, &params).unwrap();
        assert_eq!(evaluate(&m, data.support(), data.labels().unwrap()).unwrap(), 1.0);
        assert!(m.final_risk <= m.initial_risk);
    }

    #[test]
    fn one_point_per_class_matches_nearest_mean() {
        let x = ndarray::array![[-1.0, 0.5], [1.0, 0.5]];
        let summary = LabeledMeasure::labeled(x.clone(), vec![0, 1], 2).unwrap();
        let m = fit_linear(&summary, &ClassifierParams::default()).unwrap();
        let probe = two_blobs(3, 200, 1.0);
        let pred = m.predict(probe.support());
        for (row, p) in probe.support().outer_iter().zip(pred) {
            let d0 = (&row - &x.row(0)).mapv(|v| v * v).sum();
            let d1 = (&row - &x.row(1)).mapv(|v| v * v).sum();
            let nearest = if d0 < d1 { 0 } else { 1 };
            if (d0 - d1).abs() > 1e-6 {
                assert_eq!(p, nearest);
            }
        }
    }

    #[test]
    fn risk_gradient_matches_finite_differences() {
        let data = two_blobs(1, 10, 1.0);
        let y = data.labels().unwrap();
        let x = data.support();
        let w = ndarray::array![[0.3, -0.2], [0.1, 0.4]];
        let b = ndarray::array![0.05, -0.1];
        let l2 = 0.01;
        let (gw, gb) = risk_gradient(&w, &b, x, y, l2);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[[i, j]] += h;
                wm[[i, j]] -= h;
                let fd = (risk(&wp, &b, x, y, l2) - risk(&wm, &b, x, y, l2)) / (2.0 * h);
                assert!((fd - gw[[i, j]]).abs() <= 1e-5 * fd.abs().max(1e-8));
            }
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[i] += h;
            bm[i] -= h;
            let fd = (risk(&w, &bp, x, y, l2) - risk(&w, &bm, x, y, l2)) / (2.0 * h);
            assert!((fd - gb[i]).abs() <= 1e-5 * fd.abs().max(1e-8));
        }
    }

    #[test]
    fn evaluate_contracts() {
        let x = Array2::zeros((4, 2));
        let always_zero = model(Array2::zeros((2, 2)), ndarray::array![1.0, 0.0]);
        assert_eq!(evaluate(&always_zero, &x, &[0, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(
            evaluate(&always_zero, &x, &[0, 1]),
            Err(Error::LabelLengthMismatch { .. })
        ));
        let data = two_blobs(2, 20, 2.0);
        let perfect = model(ndarray::array![[-1.0, 0.0], [1.0, 0.0]], Array1::zeros(2));
        assert_eq!(evaluate(&perfect, data.support(), data.labels().unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn random_models_hover_at_chance() {
        let n_c = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400;
        let x = Array2::from_shape_fn((n, 3), |_| StandardNormal.sample(&mut rng));
        let labels: Vec<usize> = (0..n).map(|i| i % n_c).collect();
        let mut accs = Vec::new();
        for _ in 0..50 {
            let w = Array2::from_shape_fn((n_c, 3), |_| StandardNormal.sample(&mut rng));
            accs.push(evaluate(&model(w, Array1::zeros(n_c)), &x, &labels).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        // binomial sd of the mean over 50 × 400 draws is about 0.003
        assert!((mean - 0.25).abs() < 0.03, "{mean}");
    }

    #[test]
    fn weight_shift_keeps_decisions() {
        let data = two_blobs(4, 30, 1.0);
        let m = fit_linear(&data, &ClassifierParams::default()).unwrap();
        let shifted = model(&m.weights + &ndarray::array![[3.0, -2.0]], m.bias.clone());
        assert_eq!(m.predict(data.support()), shifted.predict(data.support()));
    }

    #[test]
    fn accuracy_ignores_row_order() {
        let data = two_blobs(5, 30, 0.5);
        let probe = two_blobs(6, 100, 0.5);
        let order: Vec<usize> = (0..data.len()).rev().collect();
        let a = fit_linear(&data, &ClassifierParams::default()).unwrap();
        let b = fit_linear(&data.select(&order), &ClassifierParams::default()).unwrap();
        let y = probe.labels().unwrap();
        let acc_a = evaluate(&a, probe.support(), y).unwrap();
        let acc_b = evaluate(&b, probe.support(), y).unwrap();
        assert!((acc_a - acc_b).abs() < 1e-12);
    }

    #[test]
    fn table_one_ratios() {
        let cases = [(10, 24000, 0.04), (29, 17289, 0.16), (10, 2533, 0.39), (13, 2860, 0.45)];
        for (n_c, total, want) in cases {
            let r = compression_ratio_for(n_c, total, 1);
            assert!((percent_truncated(r) - want).abs() < 1e-9, "{n_c} {total}");
        }
        assert!((compression_ratio_for(29, 17289, 1) - 0.00168).abs() < 1e-5);
    }

    fn small_dataset() -> (MultiDomainDataset, Vec<usize>) {
        let target = two_blobs(8, 40, 1.0);
        let hidden = target.labels().unwrap().to_vec();
        let domains = vec![
            Domain {
                name: "a".into(),
                measure: two_blobs(7, 40, 1.0),
            },
            Domain {
                name: "t".into(),
                measure: target.without_labels(),
            },
        ];
        (MultiDomainDataset::new(domains, vec!["x".into(), "y".into()]).unwrap(), hidden)
    }

    #[test]
    fn sweep_counts_and_determinism() {
        let (ds, hidden) = small_dataset();
        let cfg = SweepConfig {
            methods: vec![Method::RandomSource],
            spc_values: vec![2],
            seeds: vec![0, 1, 2],
            ..SweepConfig::default()
        };
        let records = sweep(&ds, &hidden, &cfg, Some(2)).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(aggregate(&records).len(), 1);
        let again = sweep(&ds, &hidden, &cfg, Some(1)).unwrap();
        let accs = |r: &[RunRecord]| r.iter().map(|x| x.accuracy).collect::<Vec<_>>();
        assert_eq!(accs(&records), accs(&again));
    }

    #[test]
    fn sweep_records_failures() {
        let (ds, hidden) = small_dataset();
        let cfg = SweepConfig {
            methods: vec![Method::RandomSource, Method::MsdaDm],
            spc_values: vec![1],
            seeds: vec![0],
            params: MethodParams {
                dm: DmParams {
                    learning_rate: -1.0,
                    ..DmParams::default()
                },
                ..MethodParams::default()
            },
            ..SweepConfig::default()
        };
        let records = sweep(&ds, &hidden, &cfg, Some(1)).unwrap();
        assert!(records[0].accuracy.is_some());
        assert!(records[1].accuracy.is_none());
        assert!(records[1].error.as_deref().unwrap().starts_with("config_invalid"));
        let agg = aggregate(&records);
        assert_eq!(agg[1].n_seeds, 0);
    }

    #[test]
    fn ci_uses_sample_deviation() {
        let rec = |acc: f64, seed: u64| RunRecord {
            schema: RECORD_SCHEMA,
            benchmark: "b".into(),
            target: "t".into(),
            method: Method::Wbt,
            spc: 1,
            seed,
            accuracy: Some(acc),
            error: None,
            diagnostics: json!({}),
            train_seconds: 0.0,
            eval_seconds: 0.0,
        };
        let agg = aggregate(&[rec(0.5, 0), rec(0.7, 1)]);
        assert!((agg[0].mean_acc - 0.6).abs() < 1e-12);
        let sd = (0.02f64).sqrt();
        assert!((agg[0].ci95 - 1.96 * sd / 2f64.sqrt()).abs() < 1e-12);
    }
}
