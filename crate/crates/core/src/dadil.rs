//! Dataset dictionary learning: labeled atoms and per-domain barycentric
//! coordinates, trained with frozen-plan gradients.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::{
    check_simplex, fixed_point, free_support_barycenter, label_penalty, project_simplex, BarycenterParams,
    FixedPointOptions,
};
use crate::distill::{Method, Summary};
use crate::distributions::{stratified_indices, GroundCost, LabeledMeasure, MultiDomainDataset};
use crate::ot::wasserstein;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DadilParams {
    /// Number of atoms; `None` means one more than the number of sources.
    pub k: Option<usize>,
    /// Points per atom; `None` means `max(2 n_c, 50)` rounded up to a multiple of `n_c`.
    pub n_atom: Option<usize>,
    pub iters: usize,
    pub lr_atoms: f64,
    pub lr_coords: f64,
    pub batch_size: usize,
    /// Fixed-point steps used to reconstruct each domain during training.
    pub inner_iters: usize,
    /// Std of the Gaussian jitter added to the initial atom samples.
    pub atom_jitter: f64,
    pub bary: BarycenterParams,
    pub seed: u64,
}

impl Default for DadilParams {
    fn default() -> Self {
        Self {
            k: None,
            n_atom: None,
            iters: 100,
            lr_atoms: 0.1,
            lr_coords: 0.01,
            batch_size: 128,
            inner_iters: 5,
            atom_jitter: 0.1,
            bary: BarycenterParams::default(),
            seed: 0,
        }
    }
}

impl DadilParams {
    pub fn resolve_k(&self, n_sources: usize) -> usize {
        self.k.unwrap_or(n_sources + 1)
    }

    pub fn resolve_n_atom(&self, n_classes: usize) -> usize {
        self.n_atom
            .unwrap_or_else(|| (2 * n_classes).max(50).div_ceil(n_classes) * n_classes)
    }

    fn validate(&self, n_classes: usize, n_sources: usize) -> Result<()> {
        self.bary.validate()?;
        let k = self.resolve_k(n_sources);
        let n_atom = self.resolve_n_atom(n_classes);
        if k == 0 {
            return Err(Error::InvalidParameter("k must be positive".into()));
        }
        if n_atom < n_classes || n_atom % n_classes != 0 {
            return Err(Error::InvalidParameter(format!(
                "n_atom must be a positive multiple of {n_classes} classes, got {n_atom}"
            )));
        }
        if self.iters == 0 || self.batch_size == 0 || self.inner_iters == 0 {
            return Err(Error::InvalidParameter(
                "iters, batch_size and inner_iters must be positive".into(),
            ));
        }
        if !(self.lr_atoms > 0.0) || !(self.lr_coords >= 0.0) || !(self.atom_jitter >= 0.0) {
            return Err(Error::InvalidParameter(
                "learning rates and jitter must be nonnegative (lr_atoms positive)".into(),
            ));
        }
        Ok(())
    }
}

/// Learned atoms plus one coordinate vector per domain (target last).
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub atoms: Vec<LabeledMeasure>,
    pub coords: Vec<Vec<f64>>,
    pub domain_names: Vec<String>,
    /// Total loss before each update, plus one final evaluation.
    pub history: Vec<f64>,
    pub beta: f64,
}

#[derive(Serialize, Deserialize)]
struct AtomJson {
    support: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DictionaryJson {
    n_classes: usize,
    atoms: Vec<AtomJson>,
    coords: Vec<Vec<f64>>,
    domain_names: Vec<String>,
    history: Vec<f64>,
    beta: f64,
}

impl Dictionary {
    pub fn target_coords(&self) -> &[f64] {
        self.coords.last().expect("dictionary has a target row")
    }

    pub fn n_classes(&self) -> usize {
        self.atoms[0].n_classes()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let atoms = self
            .atoms
            .iter()
            .map(|a| AtomJson {
                support: a.support().outer_iter().map(|r| r.to_vec()).collect(),
                labels: a.labels().unwrap_or_default().to_vec(),
            })
            .collect();
        serde_json::to_value(DictionaryJson {
            n_classes: self.n_classes(),
            atoms,
            coords: self.coords.clone(),
            domain_names: self.domain_names.clone(),
            history: self.history.clone(),
            beta: self.beta,
        })
        .expect("dictionary is serializable")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let raw: DictionaryJson = serde_json::from_value(value)?;
        let atoms = raw
            .atoms
            .into_iter()
            .map(|a| {
                let d = a.support.first().map_or(0, Vec::len);
                let n = a.support.len();
                let flat: Vec<f64> = a.support.into_iter().flatten().collect();
                let support = Array2::from_shape_vec((n, d), flat)
                    .map_err(|e| Error::ConfigInvalid(format!("atom support: {e}")))?;
                LabeledMeasure::labeled(support, a.labels, raw.n_classes)
            })
            .collect::<Result<Vec<_>>>()?;
        if atoms.is_empty() || raw.coords.iter().any(|c| c.len() != atoms.len()) {
            return Err(Error::ConfigInvalid("dictionary coords do not match atoms".into()));
        }
        for c in &raw.coords {
            check_simplex(c)?;
        }
        Ok(Self {
            atoms,
            coords: raw.coords,
            domain_names: raw.domain_names,
            history: raw.history,
            beta: raw.beta,
        })
    }
}

/// Atoms drawn class-stratified from the pooled sources with Gaussian jitter,
/// one seed per atom; coordinates start uniform.
pub fn initial_dictionary(dataset: &MultiDomainDataset, params: &DadilParams) -> Result<Dictionary> {
    let n_c = dataset.n_classes();
    params.validate(n_c, dataset.n_sources())?;
    let k = params.resolve_k(dataset.n_sources());
    let n_atom = params.resolve_n_atom(n_c);
    let pooled = dataset.pooled_sources()?;
    let noise = Normal::new(0.0, params.atom_jitter).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let atoms = (0..k)
        .map(|a| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(a as u64 + 1));
            let idx = stratified_indices(pooled.require_labels()?, n_c, n_atom / n_c, &mut rng)?;
            let base = pooled.select(&idx);
            let jittered = base.support().mapv(|v| v + noise.sample(&mut rng));
            base.with_support(jittered)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut measures: Vec<&LabeledMeasure> = dataset.domains().iter().map(|d| &d.measure).collect();
    measures.extend(atoms.iter());
    let beta = label_penalty_any(&measures, params.bary.beta_kappa)?;
    let n_domains = dataset.domains().len();
    let mut domain_names: Vec<String> = dataset.sources().map(|d| d.name.clone()).collect();
    domain_names.push(dataset.target_name().to_string());
    debug_assert_eq!(domain_names.len(), n_domains);
    Ok(Dictionary {
        atoms,
        coords: vec![vec![1.0 / k as f64; k]; n_domains],
        domain_names,
        history: Vec::new(),
        beta,
    })
}

fn label_penalty_any(measures: &[&LabeledMeasure], kappa: f64) -> Result<f64> {
    let unlabeled: Vec<LabeledMeasure> = measures.iter().map(|m| m.without_labels()).collect();
    let refs: Vec<&LabeledMeasure> = unlabeled.iter().collect();
    label_penalty(&refs, kappa)
}

/// Frozen quantities for one domain: the reconstruction plans `π_k`
/// (barycenter rows × atom columns) and the loss plan `γ` (data rows ×
/// barycenter columns).
#[derive(Debug, Clone)]
pub struct FrozenPlans {
    pub recon: Vec<Array2<f64>>,
    pub loss: Array2<f64>,
}

/// `X_B = Σ_k α_k m π_k X_k`.
pub fn reconstruct(atoms: &[Array2<f64>], alpha: &[f64], recon: &[Array2<f64>]) -> Array2<f64> {
    let m = recon[0].nrows();
    let mut xb = Array2::<f64>::zeros((m, atoms[0].ncols()));
    for ((x, &a), p) in atoms.iter().zip(alpha).zip(recon) {
        xb.scaled_add(a * m as f64, &p.dot(x));
    }
    xb
}

/// Feature part of the loss at frozen plans: `Σ_ij γ_ij ‖q_i − x_j^B‖²`.
pub fn frozen_loss(atoms: &[Array2<f64>], alpha: &[f64], plans: &FrozenPlans, data: &Array2<f64>) -> f64 {
    let xb = reconstruct(atoms, alpha, &plans.recon);
    let c = crate::distributions::sq_distances(data.view(), xb.view());
    (&plans.loss * &c).sum()
}

/// Gradients of [`frozen_loss`] with respect to every atom support and to
/// the coordinates.
pub fn frozen_gradients(
    atoms: &[Array2<f64>],
    alpha: &[f64],
    plans: &FrozenPlans,
    data: &Array2<f64>,
) -> (Vec<Array2<f64>>, Vec<f64>) {
    let xb = reconstruct(atoms, alpha, &plans.recon);
    let m = xb.nrows() as f64;
    let col_mass = plans.loss.sum_axis(Axis(0));
    // ∂L/∂x_j^B = 2 (Σ_i γ_ij) x_j^B − 2 Σ_i γ_ij q_i
    let mut g_b = &xb * &col_mass.insert_axis(Axis(1));
    g_b -= &plans.loss.t().dot(data);
    g_b *= 2.0;
    let atom_grads = plans
        .recon
        .iter()
        .zip(alpha)
        .map(|(p, &a)| p.t().dot(&g_b) * (a * m))
        .collect();
    let coord_grads = plans
        .recon
        .iter()
        .zip(atoms)
        .map(|(p, x)| (&g_b * &p.dot(x)).sum() * m)
        .collect();
    (atom_grads, coord_grads)
}

struct DomainStep {
    loss: f64,
    atom_grads: Vec<Array2<f64>>,
    coord_grads: Vec<f64>,
}

/// Reconstruct one domain from the atoms, solve its loss plan against
/// `data`, and differentiate at the frozen plans.
fn domain_step(
    atoms: &[LabeledMeasure],
    alpha: &[f64],
    data: &LabeledMeasure,
    beta: f64,
    params: &DadilParams,
) -> Result<DomainStep> {
    let refs: Vec<&LabeledMeasure> = atoms.iter().collect();
    let supports: Vec<Array2<f64>> = atoms.iter().map(|a| a.support().clone()).collect();
    let mut init = Array2::<f64>::zeros(supports[0].dim());
    for (x, &a) in supports.iter().zip(alpha) {
        init.scaled_add(a, x);
    }
    let init = atoms[0].with_support(init)?;
    let inner = BarycenterParams {
        max_outer_iters: params.inner_iters,
        ..params.bary.clone()
    };
    let opts = FixedPointOptions {
        evaluate_final: false,
        solve_all: true,
    };
    let out = fixed_point(&refs, alpha, &init, Some(beta), &inner, opts)?;
    let recon: Vec<Array2<f64>> = out
        .last_plans
        .into_iter()
        .map(|p| p.expect("all plans requested"))
        .collect();
    let bary = init.with_support(out.support)?;
    let cost = if data.is_labeled() {
        GroundCost::label_augmented(beta)?
    } else {
        GroundCost::SqEuclidean
    };
    let bary = if data.is_labeled() { bary } else { bary.without_labels() };
    let (loss, plan) = wasserstein(data, &bary, cost, &params.bary.sinkhorn)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let plans = FrozenPlans {
        recon,
        loss: plan.coupling,
    };
    let (atom_grads, coord_grads) = frozen_gradients(&supports, alpha, &plans, data.support());
    Ok(DomainStep {
        loss,
        atom_grads,
        coord_grads,
    })
}

/// Minibatch for one domain: class-stratified for labeled domains, a plain
/// random subset for the target.
fn batch<R: Rng>(m: &LabeledMeasure, size: usize, rng: &mut R) -> Result<LabeledMeasure> {
    if size >= m.len() {
        return Ok(m.clone());
    }
    match m.labels() {
        Some(labels) => {
            let spc = (size / m.n_classes()).max(1);
            Ok(m.select(&stratified_indices(labels, m.n_classes(), spc, rng)?))
        }
        None => Ok(m.select(&rand::seq::index::sample(rng, m.len(), size).into_vec())),
    }
}

/// Domains in dictionary order: sources, then the target.
fn ordered_domains(dataset: &MultiDomainDataset) -> Vec<&LabeledMeasure> {
    let mut out = dataset.source_measures();
    out.push(dataset.target());
    out
}

/// Per-domain losses of `dict` on minibatches drawn with `seed` (no update).
pub fn evaluate_losses(
    dict: &Dictionary,
    dataset: &MultiDomainDataset,
    params: &DadilParams,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = ordered_domains(dataset)
        .into_iter()
        .map(|m| batch(m, params.batch_size, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    batches
        .par_iter()
        .zip(&dict.coords)
        .map(|(b, alpha)| domain_step(&dict.atoms, alpha, b, dict.beta, params).map(|s| s.loss))
        .collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = f64>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
        }
    }
}

/// Learn atoms and coordinates by alternating plan solves and Adam steps at
/// frozen plans. Returns the best dictionary seen when the final loss
/// exceeds it by more than 10%.
pub fn dadil_fit(dataset: &MultiDomainDataset, params: &DadilParams) -> Result<Dictionary> {
    let mut dict = initial_dictionary(dataset, params)?;
    let domains = ordered_domains(dataset);
    let k = dict.atoms.len();
    let atom_len = dict.atoms[0].len() * dict.atoms[0].dim();
    let mut atom_opt: Vec<Adam> = (0..k).map(|_| Adam::new(atom_len)).collect();
    let mut coord_opt: Vec<Adam> = (0..domains.len()).map(|_| Adam::new(k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(f64, Vec<LabeledMeasure>, Vec<Vec<f64>>)> = None;

    for it in 0..=params.iters {
        let batches = domains
            .iter()
            .map(|m| batch(m, params.batch_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let steps = batches
            .par_iter()
            .zip(&dict.coords)
            .map(|(b, alpha)| domain_step(&dict.atoms, alpha, b, dict.beta, params))
            .collect::<Result<Vec<_>>>()?;
        let loss: f64 = steps.iter().map(|s| s.loss).sum();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        dict.history.push(loss);
        let best_loss = best.as_ref().map_or(f64::INFINITY, |b| b.0);
        if loss > 10.0 * best_loss {
            return Err(Error::Diverged { loss, best: best_loss });
        }
        if loss < best_loss {
            best = Some((loss, dict.atoms.clone(), dict.coords.clone()));
        }
        log::debug!("dadil iter {it}: loss {loss:.6e}");
        if it == params.iters {
            break;
        }

        let mut atom_grads: Vec<Array2<f64>> = dict.atoms.iter().map(|a| Array2::zeros(a.support().dim())).collect();
        for s in &steps {
            for (acc, g) in atom_grads.iter_mut().zip(&s.atom_grads) {
                *acc += g;
            }
        }
        if atom_grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient);
        }
        for ((atom, g), opt) in dict.atoms.iter_mut().zip(&atom_grads).zip(&mut atom_opt) {
            let mut x = atom.support().clone();
            opt.step(x.iter_mut(), g.iter().copied(), params.lr_atoms);
            *atom = atom.with_support(x)?;
        }
        for ((alpha, s), opt) in dict.coords.iter_mut().zip(&steps).zip(&mut coord_opt) {
            if s.coord_grads.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient);
            }
            opt.step(alpha.iter_mut(), s.coord_grads.iter().copied(), params.lr_coords);
            *alpha = project_simplex(alpha);
            check_simplex(alpha)?;
        }
    }

    let last = *dict.history.last().expect("at least one evaluation");
    if let Some((best_loss, atoms, coords)) = best {
        if last > 1.1 * best_loss {
            log::info!("dadil: final loss {last:.4e} above best {best_loss:.4e}; keeping best");
            dict.atoms = atoms;
            dict.coords = coords;
        }
    }
    Ok(dict)
}

/// Labeled barycenter of the atoms at the target coordinates with
/// `spc × n_c` points.
pub fn dadil_compress_target(
    dict: &Dictionary,
    spc: usize,
    bary: &BarycenterParams,
    seed: u64,
) -> Result<Summary> {
    if spc == 0 {
        return Err(Error::InvalidParameter("spc must be positive".into()));
    }
    let refs: Vec<&LabeledMeasure> = dict.atoms.iter().collect();
    let params = BarycenterParams {
        support_size: spc * dict.n_classes(),
        seed,
        ..bary.clone()
    };
    let bc = free_support_barycenter(&refs, dict.target_coords(), &params)?;
    let mut summary = Summary::new(bc.measure, Method::Dadil, spc, seed)?;
    let d = &mut summary.diagnostics;
    d.insert("barycenter_objective".into(), serde_json::json!(bc.history));
    d.insert("target_coords".into(), serde_json::json!(dict.target_coords()));
    d.insert("training_loss".into(), serde_json::json!(dict.history));
    Ok(summary)
}
