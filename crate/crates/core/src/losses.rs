//! Identity, identity-consistency and dense triplet losses.
//!
//! The tape builders (`*_on`) are what training differentiates; the plain
//! functions evaluate the same builders on constants, or are direct loops
//! where the formula is a one-liner.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, PersonDescriptor, SpatialMap};

pub const BN_EPS: f64 = 1e-5;

/// Weights of the combined objective plus the margin and temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ic: f64,
    pub lambda_dt: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ic: 1.0,
            lambda_dt: 0.5,
            alpha: 0.3,
            beta: 50.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ic, self.lambda_dt, self.alpha, self.beta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Which normalization statistics the head uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the descriptors being classified (training).
    Batch,
    /// Stored running statistics (evaluation).
    Running,
}

/// Batch normalization followed by a bias-free linear layer to identity logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub d: usize,
    pub k: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// `d × k`, row-major.
    pub weight: Vec<f32>,
}

impl ClassifierHead {
    pub fn new(d: usize, k: usize, weight: Vec<f32>) -> Result<Self> {
        if weight.len() != d * k {
            return Err(Error::dim("ClassifierHead::new", &[d, k], &[weight.len()]));
        }
        Ok(Self {
            d,
            k,
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
            weight,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            gamma: tape.leaf(f32_tensor(vec![self.d], &self.gamma)),
            beta: tape.leaf(f32_tensor(vec![self.d], &self.beta)),
            weight: tape.leaf(f32_tensor(vec![self.d, self.k], &self.weight)),
            running_mean: tape.constant(f32_tensor(vec![self.d], &self.running_mean)),
            running_var: tape.constant(f32_tensor(vec![self.d], &self.running_var)),
        }
    }

    /// Identity logits for a batch of descriptors.
    pub fn logits(&self, descs: &[PersonDescriptor], mode: NormMode) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = stack_descriptors(&mut tape, descs, self.d)?;
        let stats = match mode {
            NormMode::Batch => batch_stats(&mut tape, x),
            NormMode::Running => vars.running_stats(),
        };
        let logits = head_logits(&mut tape, &vars, x, stats);
        Ok(tape.data(logits).chunks(self.k).map(<[f64]>::to_vec).collect())
    }

    pub(crate) fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.k {
            return Err(Error::Index {
                op: "classification",
                index: label,
                limit: self.k,
            });
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ClassifierHead`].
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub gamma: Var,
    pub beta: Var,
    pub weight: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

impl HeadVars {
    pub fn running_stats(&self) -> (Var, Var) {
        (self.running_mean, self.running_var)
    }
}

pub(crate) fn f32_tensor(shape: Vec<usize>, v: &[f32]) -> Tensor {
    Tensor::new(shape, v.iter().map(|&x| x as f64).collect())
}

fn stack_descriptors(tape: &mut Tape, descs: &[PersonDescriptor], d: usize) -> Result<Var> {
    if descs.is_empty() {
        return Err(Error::Config("empty descriptor batch".into()));
    }
    let mut data = Vec::with_capacity(descs.len() * d);
    for desc in descs {
        if desc.channels() != d {
            return Err(Error::dim("descriptor batch", &[d], &[desc.channels()]));
        }
        data.extend_from_slice(desc.as_slice());
    }
    Ok(tape.constant(Tensor::new(vec![descs.len(), d], data)))
}

pub fn batch_stats(tape: &mut Tape, x: Var) -> (Var, Var) {
    (tape.col_mean(x), tape.col_var(x))
}

pub fn head_logits(tape: &mut Tape, head: &HeadVars, x: Var, (mean, var): (Var, Var)) -> Var {
    let normed = tape.batch_norm(x, mean, var, head.gamma, head.beta, BN_EPS);
    tape.matmul(normed, head.weight, false, false)
}

/// Batch-hard triplet on the rows of `x`: each anchor pairs with its
/// farthest same-label row and nearest other-label row. Anchors without a
/// positive are skipped.
pub fn batch_hard_triplet_on(tape: &mut Tape, x: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let n = labels.len();
    check_triplet_batch(labels)?;
    let dist = tape.pair_dist(x);
    let dv = tape.data(dist).to_vec();
    let mut pos_idx = Vec::with_capacity(n);
    let mut neg_idx = Vec::with_capacity(n);
    let mut gaps = Vec::new();
    for i in 0..n {
        let row = &dv[i * n..(i + 1) * n];
        let pos = pick(row, (0..n).filter(|&j| j != i && labels[j] == labels[i]), true);
        let neg = pick(row, (0..n).filter(|&j| labels[j] != labels[i]), false);
        if let (Some((jp, gp)), Some((jn, gn))) = (pos, neg) {
            pos_idx.push(i * n + jp);
            neg_idx.push(i * n + jn);
            gaps.extend([gp, gn]);
        }
    }
    for g in gaps {
        tape.note_kink(g);
    }
    let dp = tape.gather(dist, pos_idx);
    let dn = tape.gather(dist, neg_idx);
    let diff = tape.sub(dp, dn);
    let shifted = tape.add_scalar(diff, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// Extreme candidate (max if `hardest_far`) and its gap to the runner-up.
pub(crate) fn pick(row: &[f64], cands: impl Iterator<Item = usize>, hardest_far: bool) -> Option<(usize, f64)> {
    let cands: Vec<usize> = cands.collect();
    let mut best = *cands.first()?;
    for &j in &cands[1..] {
        let better = if hardest_far { row[j] > row[best] } else { row[j] < row[best] };
        if better {
            best = j;
        }
    }
    let gap = cands
        .iter()
        .filter(|&&j| j != best)
        .map(|&j| (row[j] - row[best]).abs())
        .fold(f64::INFINITY, f64::min);
    Some((best, gap))
}

fn check_triplet_batch(labels: &[usize]) -> Result<()> {
    let first = labels.first().copied();
    if labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::Config(
            "batch-hard triplet needs at least two identities in the batch".into(),
        ));
    }
    let has_pair = labels
        .iter()
        .enumerate()
        .any(|(i, l)| labels[i + 1..].contains(l));
    if !has_pair {
        return Err(Error::Config(
            "batch-hard triplet needs two samples of some identity".into(),
        ));
    }
    Ok(())
}

/// Cross-entropy of the head's prediction for one descriptor, using the
/// head's running statistics.
pub fn classification_loss(desc: &PersonDescriptor, label: usize, head: &ClassifierHead) -> Result<f64> {
    head.check_label(label)?;
    let logits = head.logits(std::slice::from_ref(desc), NormMode::Running)?;
    Ok(crate::autograd::log_sum_exp(&logits[0]) - logits[0][label])
}

pub fn batch_hard_triplet(descs: &[PersonDescriptor], labels: &[usize], margin: f64) -> Result<f64> {
    if descs.len() != labels.len() {
        return Err(Error::dim("batch_hard_triplet", &[descs.len()], &[labels.len()]));
    }
    let d = descs.first().map_or(0, PersonDescriptor::channels);
    let mut tape = Tape::new();
    let x = stack_descriptors(&mut tape, descs, d)?;
    let loss = batch_hard_triplet_on(&mut tape, x, labels, margin)?;
    Ok(tape.item(loss))
}

/// Mean classification loss over both modalities plus batch-hard triplet
/// over the pooled batch.
pub fn id_loss(
    descs_a: &[PersonDescriptor],
    labels_a: &[usize],
    descs_b: &[PersonDescriptor],
    labels_b: &[usize],
    head: &ClassifierHead,
    margin: f64,
    mode: NormMode,
) -> Result<f64> {
    let descs: Vec<PersonDescriptor> = descs_a.iter().chain(descs_b).cloned().collect();
    let labels: Vec<usize> = labels_a.iter().chain(labels_b).copied().collect();
    if descs.len() != labels.len() {
        return Err(Error::dim("id_loss", &[descs.len()], &[labels.len()]));
    }
    for &l in &labels {
        head.check_label(l)?;
    }
    let mut tape = Tape::new();
    let vars = head.bind(&mut tape);
    let x = stack_descriptors(&mut tape, &descs, head.d)?;
    let loss = id_loss_on(&mut tape, &vars, x, &labels, margin, mode)?;
    Ok(tape.item(loss.total))
}

#[derive(Debug, Clone, Copy)]
pub struct IdLossVars {
    pub classification: Var,
    pub triplet: Var,
    pub total: Var,
    pub stats: (Var, Var),
}

pub fn id_loss_on(
    tape: &mut Tape,
    head: &HeadVars,
    x: Var,
    labels: &[usize],
    margin: f64,
    mode: NormMode,
) -> Result<IdLossVars> {
    let stats = match mode {
        NormMode::Batch => batch_stats(tape, x),
        NormMode::Running => head.running_stats(),
    };
    let logits = head_logits(tape, head, x, stats);
    let classification = tape.cross_entropy(logits, labels);
    let triplet = batch_hard_triplet_on(tape, x, labels, margin)?;
    let total = tape.add(classification, triplet);
    Ok(IdLossVars {
        classification,
        triplet,
        total,
        stats,
    })
}

/// A descriptor pooled from a reconstruction of `target` built out of
/// `source` features. Both must carry the same identity.
#[derive(Debug, Clone)]
pub struct ReconstructedDescriptor {
    pub descriptor: PersonDescriptor,
    pub target_label: usize,
    pub source_label: usize,
}

/// Mean cross-entropy of the head on reconstructed descriptors, using the
/// head's running statistics.
pub fn id_consistency_loss(recon: &[ReconstructedDescriptor], head: &ClassifierHead) -> Result<f64> {
    if recon.is_empty() {
        return Err(Error::Config("no reconstructed descriptors".into()));
    }
    let mut total = 0.0;
    for (i, r) in recon.iter().enumerate() {
        if r.target_label != r.source_label {
            return Err(Error::Pairing(format!(
                "pair {i} mixes identities {} and {}",
                r.target_label, r.source_label
            )));
        }
        total += classification_loss(&r.descriptor, r.target_label, head)?;
    }
    Ok(total / recon.len() as f64)
}

/// Per-position distance between an anchor map and a reconstruction.
pub fn local_distance(f_anchor: &FeatureMap, f_recon: &FeatureMap) -> Result<SpatialMap> {
    f_anchor.check_same_shape(f_recon, "local_distance")?;
    let data = (0..f_anchor.positions())
        .map(|p| {
            f_anchor
                .at(p)
                .iter()
                .zip(f_recon.at(p))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(SpatialMap::from_parts(f_anchor.height(), f_anchor.width(), data))
}

/// `Σ_p A(p) [d_pos(p) - d_neg(p) + α]₊`, unnormalized.
pub fn dense_triplet_loss(d_pos: &SpatialMap, d_neg: &SpatialMap, attention: &SpatialMap, alpha: f64) -> Result<f64> {
    if d_pos.shape() != d_neg.shape() {
        return Err(Error::dim("dense_triplet_loss", &d_pos.shape(), &d_neg.shape()));
    }
    if d_pos.shape() != attention.shape() {
        return Err(Error::dim("dense_triplet_loss", &d_pos.shape(), &attention.shape()));
    }
    Ok(d_pos
        .data()
        .iter()
        .zip(d_neg.data())
        .zip(attention.data())
        .map(|((p, n), a)| a * (p - n + alpha).max(0.0))
        .sum())
}

pub fn dense_triplet_on(tape: &mut Tape, d_pos: Var, d_neg: Var, attention: Vec<f64>, alpha: f64) -> Var {
    let diff = tape.sub(d_pos, d_neg);
    let shifted = tape.add_scalar(diff, alpha);
    let hinge = tape.relu(shifted);
    tape.dot_const(hinge, attention)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossComponents {
    pub id: f64,
    pub ic: f64,
    pub dt: f64,
}

pub fn total_loss(c: LossComponents, w: &LossWeights) -> f64 {
    c.id + w.lambda_ic * c.ic + w.lambda_dt * c.dt
}
