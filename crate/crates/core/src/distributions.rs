//! Empirical measures, multi-domain datasets, ground costs and the
//! sampling/standardization helpers built on top of them.
//!
//! Every measure carries implicit uniform weights `1/n`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// An empirical distribution: `n` support points in `R^d`, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMeasure {
    support: Array2<f64>,
    labels: Option<Vec<usize>>,
    n_classes: usize,
}

impl LabeledMeasure {
    pub fn labeled(support: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.len() != support.nrows() {
            return Err(Error::LabelLengthMismatch {
                expected: support.nrows(),
                found: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
        Self::build(support, Some(labels), n_classes)
    }

    pub fn unlabeled(support: Array2<f64>, n_classes: usize) -> Result<Self> {
        Self::build(support, None, n_classes)
    }

    fn build(support: Array2<f64>, labels: Option<Vec<usize>>, n_classes: usize) -> Result<Self> {
        if support.nrows() == 0 || support.ncols() == 0 {
            return Err(Error::EmptyMeasure);
        }
        if n_classes == 0 {
            return Err(Error::InvalidParameter("n_classes must be positive".into()));
        }
        for (row, point) in support.outer_iter().enumerate() {
            if point.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteSupport { row });
            }
        }
        Ok(Self {
            support,
            labels,
            n_classes,
        })
    }

    pub fn support(&self) -> &Array2<f64> {
        &self.support
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(Error::MissingLabels)
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.support.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.support.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.support.ncols()
    }

    /// Same labels, new coordinates.
    pub fn with_support(&self, support: Array2<f64>) -> Result<Self> {
        if support.dim() != self.support.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: support.nrows(),
            });
        }
        Self::build(support, self.labels.clone(), self.n_classes)
    }

    pub fn without_labels(&self) -> Self {
        Self {
            support: self.support.clone(),
            labels: None,
            n_classes: self.n_classes,
        }
    }

    pub fn mean(&self) -> Array1<f64> {
        self.support.mean_axis(Axis(0)).expect("non-empty measure")
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let labels = self.require_labels()?;
        let mut counts = vec![0; self.n_classes];
        for &l in labels {
            counts[l] += 1;
        }
        Ok(counts)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let support = self.support.select(Axis(0), indices);
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self {
            support,
            labels,
            n_classes: self.n_classes,
        }
    }

    /// Stacks measures; the result is labeled only if every input is.
    pub fn concat(measures: &[&LabeledMeasure]) -> Result<Self> {
        let first = measures.first().ok_or(Error::EmptyMeasure)?;
        let d = first.dim();
        let n_classes = first.n_classes;
        let all_labeled = measures.iter().all(|m| m.is_labeled());
        let mut views = Vec::with_capacity(measures.len());
        let mut labels = Vec::new();
        for m in measures {
            if m.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: m.dim(),
                });
            }
            views.push(m.support.view());
            if all_labeled {
                labels.extend_from_slice(m.labels.as_ref().unwrap());
            }
        }
        let support = ndarray::concatenate(Axis(0), &views).expect("shapes checked");
        Ok(Self {
            support,
            labels: all_labeled.then_some(labels),
            n_classes,
        })
    }
}

/// A named domain in a multi-domain dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub measure: LabeledMeasure,
}

/// Several labeled source domains plus exactly one unlabeled target.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainDataset {
    domains: Vec<Domain>,
    target: usize,
    n_classes: usize,
    feature_dim: usize,
    class_names: Vec<String>,
}

impl MultiDomainDataset {
    pub fn new(domains: Vec<Domain>, class_names: Vec<String>) -> Result<Self> {
        let first = domains.first().ok_or(Error::EmptyMeasure)?;
        let n_classes = class_names.len();
        let feature_dim = first.measure.dim();
        let mut target: Option<usize> = None;
        for (i, dom) in domains.iter().enumerate() {
            if dom.measure.dim() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    found: dom.measure.dim(),
                });
            }
            if dom.measure.n_classes() != n_classes {
                return Err(Error::InvalidParameter(format!(
                    "domain {} declares {} classes, dataset has {}",
                    dom.name,
                    dom.measure.n_classes(),
                    n_classes
                )));
            }
            if !dom.measure.is_labeled() {
                if let Some(t) = target {
                    return Err(Error::MultipleUnlabeledDomains(
                        domains[t].name.clone(),
                        dom.name.clone(),
                    ));
                }
                target = Some(i);
            }
        }
        let target = target.ok_or(Error::NoUnlabeledDomain)?;
        Ok(Self {
            domains,
            target,
            n_classes,
            feature_dim,
            class_names,
        })
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn target(&self) -> &LabeledMeasure {
        &self.domains[self.target].measure
    }

    pub fn target_name(&self) -> &str {
        &self.domains[self.target].name
    }

    pub fn sources(&self) -> impl Iterator<Item = &Domain> {
        let t = self.target;
        self.domains
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != t)
            .map(|(_, d)| d)
    }

    pub fn source_measures(&self) -> Vec<&LabeledMeasure> {
        self.sources().map(|d| &d.measure).collect()
    }

    pub fn n_sources(&self) -> usize {
        self.domains.len() - 1
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn total_samples(&self) -> usize {
        self.domains.iter().map(|d| d.measure.len()).sum()
    }

    /// All source samples stacked, in domain order.
    pub fn pooled_sources(&self) -> Result<LabeledMeasure> {
        LabeledMeasure::concat(&self.source_measures())
    }

    fn map_supports(&self, f: impl Fn(&Array2<f64>) -> Array2<f64>) -> Result<Self> {
        let domains = self
            .domains
            .iter()
            .map(|d| {
                Ok(Domain {
                    name: d.name.clone(),
                    measure: d.measure.with_support(f(d.measure.support()))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            domains,
            ..self.clone()
        })
    }
}

/// Per-feature affine standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Scaler {
    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.std
    }

    pub fn inverse_transform(&self, x: &Array2<f64>) -> Array2<f64> {
        x * &self.std + &self.mean
    }
}

/// What to do with a feature that is constant over the pooled data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConstantFeature {
    #[default]
    Error,
    /// Center it and leave the scale at 1.
    Keep,
}

/// Standardizes every feature to zero mean and unit (population) variance,
/// with statistics pooled over all domains, sources and target alike.
pub fn standardize(dataset: &MultiDomainDataset) -> Result<(MultiDomainDataset, Scaler)> {
    standardize_with(dataset, ConstantFeature::Error)
}

pub fn standardize_with(
    dataset: &MultiDomainDataset,
    on_constant: ConstantFeature,
) -> Result<(MultiDomainDataset, Scaler)> {
    let d = dataset.feature_dim();
    let n = dataset.total_samples() as f64;
    let mut mean = Array1::<f64>::zeros(d);
    for dom in dataset.domains() {
        mean += &dom.measure.support().sum_axis(Axis(0));
    }
    mean /= n;
    let mut var = Array1::<f64>::zeros(d);
    for dom in dataset.domains() {
        for row in dom.measure.support().outer_iter() {
            let diff = &row - &mean;
            var += &(&diff * &diff);
        }
    }
    var /= n;
    let mut std = var.mapv(f64::sqrt);
    for (j, s) in std.iter_mut().enumerate() {
        if *s <= f64::EPSILON * (1.0 + mean[j].abs()) {
            match on_constant {
                ConstantFeature::Error => return Err(Error::ZeroVarianceFeature(j)),
                ConstantFeature::Keep => *s = 1.0,
            }
        }
    }
    let scaler = Scaler { mean, std };
    let out = dataset.map_supports(|x| scaler.transform(x))?;
    Ok((out, scaler))
}

/// Ground cost between support points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroundCost {
    SqEuclidean,
    /// `‖x - x'‖² + beta ‖onehot(y) - onehot(y')‖²`
    LabelAugmented {
        beta: f64,
    },
}

impl GroundCost {
    pub fn label_augmented(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::DegenerateBeta);
        }
        Ok(GroundCost::LabelAugmented { beta })
    }
}

/// Pairwise squared Euclidean distances between the rows of `x` and `y`.
pub fn sq_distances(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let x = x.as_standard_layout();
    let y = y.as_standard_layout();
    let (xs, ys) = (x.as_slice().unwrap(), y.as_slice().unwrap());
    let d = x.ncols();
    let mut out = Array2::zeros((x.nrows(), y.nrows()));
    if d == 0 {
        return out;
    }
    for (i, xi) in xs.chunks_exact(d).enumerate() {
        for (j, yj) in ys.chunks_exact(d).enumerate() {
            out[[i, j]] = xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum();
        }
    }
    out
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

pub fn cost_matrix(
    a: &LabeledMeasure,
    b: &LabeledMeasure,
    cost: GroundCost,
) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let mut c = sq_distances(a.support().view(), b.support().view());
    if let GroundCost::LabelAugmented { beta } = cost {
        add_label_penalty(&mut c, a.require_labels()?, b.require_labels()?, beta);
    }
    Ok(c)
}

/// Adds `2 beta` to every entry whose one-hot labels differ.
pub(crate) fn add_label_penalty(c: &mut Array2<f64>, la: &[usize], lb: &[usize], beta: f64) {
    for (i, &yi) in la.iter().enumerate() {
        for (j, &yj) in lb.iter().enumerate() {
            if yi != yj {
                c[[i, j]] += 2.0 * beta;
            }
        }
    }
}

/// Largest squared distance between a point of `a` and a point of `b`.
pub fn max_sq_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut best = 0.0f64;
    for x in a.outer_iter() {
        for y in b.outer_iter() {
            best = best.max(sq_dist(x, y));
        }
    }
    best
}

/// `kappa * max_{i,j} ‖a_i - b_j‖²`.
pub fn beta_heuristic(a: &LabeledMeasure, b: &LabeledMeasure, kappa: f64) -> f64 {
    kappa * max_sq_distance(a.support().view(), b.support().view())
}

/// Label-augmented cost with the heuristic penalty; fails when every point coincides.
pub fn label_augmented_for(
    a: &LabeledMeasure,
    b: &LabeledMeasure,
    kappa: f64,
) -> Result<GroundCost> {
    GroundCost::label_augmented(beta_heuristic(a, b, kappa))
}

/// Indices of a class-stratified sample: `spc` per class, grouped by class
/// in increasing order. Classes with fewer than `spc` members contribute all
/// of them, topped up by draws with replacement.
pub fn stratified_indices<R: Rng>(
    labels: &[usize],
    n_classes: usize,
    spc: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut out = Vec::with_capacity(spc * n_classes);
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        if members.len() >= spc {
            let picked = index::sample(rng, members.len(), spc);
            out.extend(picked.iter().map(|k| members[k]));
        } else {
            out.extend_from_slice(members);
            for _ in members.len()..spc {
                out.push(members[rng.random_range(0..members.len())]);
            }
        }
    }
    Ok(out)
}

pub fn stratified_sample(m: &LabeledMeasure, spc: usize, seed: u64) -> Result<LabeledMeasure> {
    if spc == 0 {
        return Err(Error::InvalidParameter("spc must be positive".into()));
    }
    let labels = m.require_labels()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = stratified_indices(labels, m.n_classes(), spc, &mut rng)?;
    Ok(m.select(&idx))
}

/// Per-class mean vectors; classes without samples are marked absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub means: Array2<f64>,
    pub counts: Vec<usize>,
}

impl ClassMeans {
    pub fn get(&self, class: usize) -> Option<ArrayView1<'_, f64>> {
        (self.counts[class] > 0).then(|| self.means.row(class))
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }
}

pub fn class_means(m: &LabeledMeasure) -> Result<ClassMeans> {
    let labels = m.require_labels()?;
    let mut means = Array2::<f64>::zeros((m.n_classes(), m.dim()));
    let mut counts = vec![0usize; m.n_classes()];
    for (row, &l) in m.support().outer_iter().zip(labels) {
        let mut acc = means.slice_mut(s![l, ..]);
        acc += &row;
        counts[l] += 1;
    }
    for (c, &k) in counts.iter().enumerate() {
        if k > 0 {
            let mut r = means.row_mut(c);
            r /= k as f64;
        }
    }
    Ok(ClassMeans { means, counts })
}
