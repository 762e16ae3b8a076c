//! Select–calculate–erase merging of policy checkpoints.
//!
//! Every reduction over the K models runs in a canonical order (values
//! sorted by bit pattern), so permuting the inputs cannot change a single
//! bit of the result.

use crate::policy::{Matrix, ParamsError, PolicyParams};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusRule {
    #[default]
    Unanimity,
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    PerMatrix,
    WholeModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub top_p: f64,
    pub consensus_rule: ConsensusRule,
    pub scope: Scope,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            top_p: 1.0,
            consensus_rule: ConsensusRule::Unanimity,
            scope: Scope::PerMatrix,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), MergeError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(MergeError::InvalidConfig(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MergeError {
    #[error("no models to merge")]
    NoModels,
    #[error("model {index} does not match the base: {detail}")]
    ShapeMismatch { index: usize, detail: String },
    #[error("invalid merge config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

pub type Delta = BTreeMap<String, Matrix>;
/// One binary value per coordinate, keyed by matrix name.
pub type Mask = BTreeMap<String, Vec<bool>>;
/// One weight per model, keyed by matrix name.
pub type Weights = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVectorSet {
    pub base: PolicyParams,
    pub models: Vec<PolicyParams>,
    pub deltas: Vec<Delta>,
}

impl TaskVectorSet {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    fn names(&self) -> impl Iterator<Item = &String> {
        self.base.matrices().keys()
    }

    fn column(&self, name: &str) -> Vec<&[f64]> {
        self.deltas.iter().map(|d| d[name].as_slice()).collect()
    }

    /// Scope units: each matrix alone, or all matrices concatenated in name order.
    fn units(&self, scope: Scope) -> Vec<Vec<String>> {
        match scope {
            Scope::PerMatrix => self.names().map(|n| vec![n.clone()]).collect(),
            Scope::WholeModel => vec![self.names().cloned().collect()],
        }
    }

    fn unit_values(&self, unit: &[String]) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                unit.iter()
                    .flat_map(|n| self.deltas[i][n].as_slice().iter().copied())
                    .collect()
            })
            .collect()
    }
}

/// `θ_i − θ_base` for every model, in input order.
pub fn task_vectors(
    base: &PolicyParams,
    models: &[PolicyParams],
) -> Result<TaskVectorSet, MergeError> {
    if models.is_empty() {
        return Err(MergeError::NoModels);
    }
    let mut deltas = Vec::with_capacity(models.len());
    for (index, m) in models.iter().enumerate() {
        if m.meta() != base.meta() || !m.same_shape(base) {
            return Err(MergeError::ShapeMismatch {
                index,
                detail: format!("{:?} vs {:?}", m.meta(), base.meta()),
            });
        }
        let d = base
            .matrices()
            .iter()
            .map(|(name, b)| {
                let x = &m.matrices()[name];
                let data = x
                    .as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(x, b)| x - b)
                    .collect();
                (name.clone(), Matrix::from_vec(b.rows(), b.cols(), data))
            })
            .collect();
        deltas.push(d);
    }
    Ok(TaskVectorSet {
        base: base.clone(),
        models: models.to_vec(),
        deltas,
    })
}

fn sorted_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.into_iter().sum()
}

/// `w_i = e_i / Σ_j e_j` for squared norms `e`; uniform when all are zero.
pub fn normalize_energies(energies: &[f64]) -> Vec<f64> {
    weights_from_norms(&energies.iter().map(|e| e.sqrt()).collect::<Vec<_>>())
}

/// Same weights computed from norms, scaled by the largest so that huge
/// deltas do not overflow.
pub fn weights_from_norms(norms: &[f64]) -> Vec<f64> {
    let top = norms.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return vec![1.0 / norms.len() as f64; norms.len()];
    }
    let rel: Vec<f64> = norms.iter().map(|n| (n / top) * (n / top)).collect();
    let total = sorted_sum(rel.clone());
    rel.iter().map(|r| r / total).collect()
}

/// Overflow-safe Euclidean norm of several slices taken together.
fn norm_of<'a>(parts: impl Iterator<Item = &'a [f64]> + Clone) -> f64 {
    let top = parts
        .clone()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    if top == 0.0 || !top.is_finite() {
        return top;
    }
    let mut sq: Vec<f64> = parts
        .flat_map(|p| p.iter())
        .map(|x| (x / top) * (x / top))
        .collect();
    sq.sort_by(f64::total_cmp);
    top * sq.into_iter().sum::<f64>().sqrt()
}

/// Normalized squared-Frobenius energy of each delta, per scope unit.
pub fn energy_weights(set: &TaskVectorSet, scope: Scope) -> Weights {
    let mut out = Weights::new();
    for unit in set.units(scope) {
        let norms: Vec<f64> = (0..set.len())
            .map(|i| norm_of(unit.iter().map(|n| set.deltas[i][n].as_slice())))
            .collect();
        let w = weights_from_norms(&norms);
        for n in unit {
            out.insert(n, w.clone());
        }
    }
    out
}

/// Values at one coordinate in canonical order.
fn sorted_at(deltas: &[impl AsRef<[f64]>], d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = deltas.iter().map(|x| x.as_ref()[d]).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn population_variance(sorted: &[f64]) -> f64 {
    let k = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / k;
    sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k
}

/// Keeps the `⌈top_p·count⌉` highest-variance coordinates of one unit;
/// ties go to the lower coordinate index.
pub fn variance_topp_flat(deltas: &[impl AsRef<[f64]>], top_p: f64) -> Vec<bool> {
    let count = deltas.first().map_or(0, |d| d.as_ref().len());
    if deltas.len() < 2 || top_p >= 1.0 {
        return vec![true; count];
    }
    let var: Vec<f64> = (0..count)
        .map(|d| population_variance(&sorted_at(deltas, d)))
        .collect();
    let keep = ((top_p * count as f64 - 1e-9).ceil().max(0.0) as usize).min(count);
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    let mut mask = vec![false; count];
    for &d in &order[..keep] {
        mask[d] = true;
    }
    mask
}

pub fn variance_topp_mask(set: &TaskVectorSet, top_p: f64, scope: Scope) -> Mask {
    let mut out = Mask::new();
    for unit in set.units(scope) {
        let flat = variance_topp_flat(&set.unit_values(&unit), top_p);
        let mut at = 0;
        for n in unit {
            let len = set.base.matrices()[&n].as_slice().len();
            out.insert(n, flat[at..at + len].to_vec());
            at += len;
        }
    }
    out
}

/// Weighted sum `Σ w_i x_i` in canonical order.
fn weighted_sum(xs: &[f64], w: &[f64]) -> f64 {
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(w.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pairs.into_iter().map(|(x, w)| w * x).sum()
}

fn sign(x: f64) -> i8 {
    match x.partial_cmp(&0.0) {
        Some(Ordering::Greater) => 1,
        Some(Ordering::Less) => -1,
        _ => 0,
    }
}

/// Sign consensus for one coordinate given the K delta values and weights.
pub fn consensus_at(xs: &[f64], w: &[f64], rule: ConsensusRule) -> bool {
    if xs.iter().all(|x| *x == 0.0) {
        return true;
    }
    let s = sign(weighted_sum(xs, w));
    match rule {
        ConsensusRule::Unanimity => xs.iter().filter(|x| **x != 0.0).all(|x| sign(*x) == s),
        ConsensusRule::Majority => {
            let nonzero: Vec<f64> = xs
                .iter()
                .zip(w)
                .filter(|(x, _)| **x != 0.0)
                .map(|(_, w)| *w)
                .collect();
            let agree: Vec<f64> = xs
                .iter()
                .zip(w)
                .filter(|(x, _)| **x != 0.0 && sign(**x) == s)
                .map(|(_, w)| *w)
                .collect();
            let (agree, nonzero) = (sorted_sum(agree), sorted_sum(nonzero));
            nonzero > 0.0 && agree / nonzero > 0.5
        }
    }
}

pub fn sign_consensus_flat(
    deltas: &[impl AsRef<[f64]>],
    weights: &[f64],
    rule: ConsensusRule,
) -> Vec<bool> {
    let count = deltas.first().map_or(0, |d| d.as_ref().len());
    (0..count)
        .map(|d| {
            let xs: Vec<f64> = deltas.iter().map(|x| x.as_ref()[d]).collect();
            consensus_at(&xs, weights, rule)
        })
        .collect()
}

pub fn sign_consensus_mask(set: &TaskVectorSet, weights: &Weights, rule: ConsensusRule) -> Mask {
    set.names()
        .map(|n| {
            (
                n.clone(),
                sign_consensus_flat(&set.column(n), &weights[n], rule),
            )
        })
        .collect()
}

/// `θ_base + (Σ_i w_i Δ_i) ⊙ C ⊙ M`.
///
/// Where every model holds the same bits the fused value is that value,
/// which the formula gives in exact arithmetic; this keeps identity merges
/// bit-exact.
pub fn fuse(
    set: &TaskVectorSet,
    weights: &Weights,
    consensus: &Mask,
    select: &Mask,
) -> Result<PolicyParams, MergeError> {
    let mut out = BTreeMap::new();
    for (name, base) in set.base.matrices() {
        let (c, m, w) = (&consensus[name], &select[name], &weights[name]);
        let cols = set.column(name);
        let models: Vec<&[f64]> = set
            .models
            .iter()
            .map(|p| p.matrices()[name].as_slice())
            .collect();
        if c.len() != base.as_slice().len() || m.len() != c.len() || w.len() != set.len() {
            return Err(MergeError::ShapeMismatch {
                index: 0,
                detail: format!("mask or weights for {name}"),
            });
        }
        let data = base
            .as_slice()
            .iter()
            .enumerate()
            .map(|(d, b)| {
                if !(c[d] && m[d]) {
                    return *b;
                }
                let first = models[0][d];
                if models.iter().all(|x| x[d].to_bits() == first.to_bits()) {
                    return first;
                }
                let xs: Vec<f64> = cols.iter().map(|x| x[d]).collect();
                b + weighted_sum(&xs, w)
            })
            .collect();
        out.insert(
            name.clone(),
            Matrix::from_vec(base.rows(), base.cols(), data),
        );
    }
    Ok(PolicyParams::from_parts(set.base.meta(), out)?)
}

/// The full pipeline on in-memory parameters.
pub fn merge(
    base: &PolicyParams,
    models: &[PolicyParams],
    cfg: &MergeConfig,
) -> Result<PolicyParams, MergeError> {
    cfg.validate()?;
    let set = task_vectors(base, models)?;
    let weights = energy_weights(&set, cfg.scope);
    let select = variance_topp_mask(&set, cfg.top_p, cfg.scope);
    let consensus = sign_consensus_mask(&set, &weights, cfg.consensus_rule);
    fuse(&set, &weights, &consensus, &select)
}

/// Loads checkpoints, merges them and writes the fused checkpoint atomically.
pub fn merge_checkpoints(
    base: &Path,
    models: &[&Path],
    cfg: &MergeConfig,
    out: &Path,
) -> Result<PolicyParams, MergeError> {
    let base = PolicyParams::load(base)?;
    let models = models
        .iter()
        .map(|p| PolicyParams::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let fused = merge(&base, &models, cfg)?;
    fused.save(out)?;
    Ok(fused)
}
