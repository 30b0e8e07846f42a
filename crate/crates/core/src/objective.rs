//! The combined training objective on a cross-modal batch.
//!
//! Inputs are feature batches `[n, h, w, d]` for modality A and B, one pair
//! per alignment layer, plus the final-layer batches that feed the image
//! descriptors. Row `i` of the A half and row `i` of the B half need not
//! share an identity; positives and negatives are mined per anchor from
//! descriptor distances, across modalities only.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::field;
use crate::linalg;
use crate::losses::{self, HeadVars, LossWeights, NormMode};
use crate::cmalign::COSINE_EPS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    /// Margin of the image-level batch-hard triplet.
    pub id_margin: f64,
    pub gem_power: f64,
    /// When false the dense triplet weights every position by 1.
    pub co_attention: bool,
    /// Stop gradients through person masks inside the reconstruction.
    pub detach_masks: bool,
    /// Divide each dense triplet sum by the total attention weight.
    pub normalize_dense: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            id_margin: 0.3,
            gem_power: field::DEFAULT_GEM_POWER,
            co_attention: true,
            detach_masks: false,
            normalize_dense: false,
        }
    }
}

/// Feature batches of both modalities at one alignment layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerFeatures {
    pub layer: usize,
    pub a: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub l_id: Var,
    pub l_ic: Var,
    pub l_dt: Var,
    pub total: Var,
    /// Batch mean and variance of the original descriptors.
    pub stats: (Var, Var),
    /// Pooled descriptors `[2n, d]`, A half first.
    pub descriptors: Var,
    /// Dense triplet weights, one per (layer, triplet) in build order.
    pub attention: Vec<Vec<f64>>,
}

/// Maps a batch of reconstructed maps at `layer` to final-layer maps.
pub type Lift<'a> = dyn FnMut(&mut Tape, usize, Var) -> Var + 'a;

/// Cross-modal mining result for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Hardest cross-modal positive and negative for every anchor of both
/// halves, from Euclidean descriptor distances. Indices address the pooled
/// `[2n]` batch. Also returns the smallest selection gap.
pub fn mine_cross_modal(desc: &[f64], d: usize, labels: &[usize]) -> (Vec<Triplet>, f64) {
    let total = labels.len();
    let n = total / 2;
    let dist = |i: usize, j: usize| -> f64 {
        desc[i * d..(i + 1) * d]
            .iter()
            .zip(&desc[j * d..(j + 1) * d])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut out = Vec::with_capacity(total);
    let mut gap = f64::INFINITY;
    for anchor in 0..total {
        let other = if anchor < n { n..total } else { 0..n };
        let row: Vec<f64> = (0..total).map(|j| if other.contains(&j) { dist(anchor, j) } else { 0.0 }).collect();
        let pos = losses::pick(&row, other.clone().filter(|&j| labels[j] == labels[anchor]), true);
        let neg = losses::pick(&row, other.filter(|&j| labels[j] != labels[anchor]), false);
        if let (Some((p, gp)), Some((q, gq))) = (pos, neg) {
            gap = gap.min(gp).min(gq);
            out.push(Triplet {
                anchor,
                positive: p,
                negative: q,
            });
        }
    }
    (out, gap)
}

pub(crate) struct Reconstruction {
    pub(crate) recon: Var,
    pub(crate) prob: Vec<f64>,
}

/// Soft-warps `src` onto `tgt` and blends by the target mask.
pub(crate) fn reconstruct(tape: &mut Tape, tgt: Var, src: Var, mask: Var, beta: f64) -> Reconstruction {
    let nt = tape.normalize_rows(tgt, COSINE_EPS);
    let ns = tape.normalize_rows(src, COSINE_EPS);
    let sim = tape.matmul(nt, ns, false, true);
    let prob = tape.softmax(sim, beta);
    let warped = tape.matmul(prob, src, false, false);
    let keep = tape.one_minus(mask);
    let from_src = tape.mul_rows(warped, mask);
    let from_tgt = tape.mul_rows(tgt, keep);
    let recon = tape.add(from_src, from_tgt);
    Reconstruction {
        recon,
        prob: tape.data(prob).to_vec(),
    }
}

pub(crate) fn person_mask_on(tape: &mut Tape, f: Var, detach: bool) -> Var {
    let norms = tape.row_norm(f);
    let m = tape.minmax(norms);
    if detach {
        tape.detach(m)
    } else {
        m
    }
}

/// Constant co-attention weights from mask and probability values.
fn co_attention_values(mask_tgt: &[f64], mask_src: &[f64], prob: &[f64]) -> Vec<f64> {
    let s = mask_tgt.len();
    let warped = linalg::matmul(prob, mask_src, s, s, 1, false, false);
    let raw: Vec<f64> = mask_tgt.iter().zip(&warped).map(|(a, b)| a * b).collect();
    field::minmax_slice(&raw)
}

#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    tape: &mut Tape,
    head: &HeadVars,
    final_a: Var,
    final_b: Var,
    layers: &[LayerFeatures],
    labels_a: &[usize],
    labels_b: &[usize],
    cfg: &ObjectiveConfig,
    lift: &mut Lift<'_>,
) -> Result<ObjectiveOutput> {
    build_objective_with(tape, head, final_a, final_b, layers, labels_a, labels_b, cfg, lift, None)
}

/// [`build_objective`] with the dense triplet weights taken from `frozen`
/// instead of being computed. Used to finite-difference the objective as
/// its gradient sees it.
#[allow(clippy::too_many_arguments)]
pub fn build_objective_with(
    tape: &mut Tape,
    head: &HeadVars,
    final_a: Var,
    final_b: Var,
    layers: &[LayerFeatures],
    labels_a: &[usize],
    labels_b: &[usize],
    cfg: &ObjectiveConfig,
    lift: &mut Lift<'_>,
    frozen: Option<&[Vec<f64>]>,
) -> Result<ObjectiveOutput> {
    let n = labels_a.len();
    if labels_b.len() != n || tape.shape(final_a)[0] != n || tape.shape(final_b)[0] != n {
        return Err(Error::dim("objective batch", &[n, n], &[labels_b.len(), tape.shape(final_b)[0]]));
    }
    let labels: Vec<usize> = labels_a.iter().chain(labels_b).copied().collect();

    let desc_a = pooled(tape, final_a, cfg.gem_power);
    let desc_b = pooled(tape, final_b, cfg.gem_power);
    let x = tape.concat(&[desc_a, desc_b]);
    let id = losses::id_loss_on(tape, head, x, &labels, cfg.id_margin, NormMode::Batch)?;

    let d = tape.shape(x)[1];
    let (triplets, gap) = mine_cross_modal(tape.data(x), d, &labels);
    tape.note_kink(gap);
    if triplets.is_empty() {
        return Err(Error::Config("no cross-modal triplets in batch".into()));
    }

    let mut ic_terms = Vec::new();
    let mut dt_terms = Vec::new();
    let mut weights: Vec<Vec<f64>> = Vec::new();
    for lf in layers {
        let shape = tape.shape(lf.a).to_vec();
        let [_, h, w, c] = shape[..] else {
            return Err(Error::dim("objective layer", &[0, 0, 0, 0], &shape));
        };
        if tape.shape(lf.b) != shape.as_slice() {
            return Err(Error::dim("objective layer", &shape, tape.shape(lf.b)));
        }
        let map = |tape: &mut Tape, idx: usize| -> Var {
            let (batch, i) = if idx < n { (lf.a, idx) } else { (lf.b, idx - n) };
            let s = tape.select(batch, i);
            tape.reshape(s, vec![h * w, c])
        };

        let mut recons = Vec::with_capacity(triplets.len());
        let mut dt_a = Vec::new();
        let mut dt_b = Vec::new();
        for t in &triplets {
            let fa = map(tape, t.anchor);
            let fp = map(tape, t.positive);
            let fn_ = map(tape, t.negative);
            let ma = person_mask_on(tape, fa, cfg.detach_masks);
            let pos = reconstruct(tape, fa, fp, ma, cfg.weights.beta);
            let neg = reconstruct(tape, fa, fn_, ma, cfg.weights.beta);

            let attention = if let Some(f) = frozen {
                f.get(weights.len())
                    .filter(|a| a.len() == h * w)
                    .cloned()
                    .ok_or_else(|| Error::dim("frozen attention", &[weights.len() + 1], &[f.len()]))?
            } else if cfg.co_attention {
                let mp = field::minmax_slice(&field::row_norms(tape.data(fp), c));
                co_attention_values(tape.data(ma), &mp, &pos.prob)
            } else {
                vec![1.0; h * w]
            };
            let weight_sum: f64 = attention.iter().sum();
            weights.push(attention.clone());

            let dpos_diff = tape.sub(fa, pos.recon);
            let dpos = tape.row_norm_untracked(dpos_diff);
            let dneg_diff = tape.sub(fa, neg.recon);
            let dneg = tape.row_norm_untracked(dneg_diff);
            // where the mask is exactly zero the residual vanishes identically
            let margin = tape
                .data(ma)
                .iter()
                .zip(tape.data(dpos).iter().zip(tape.data(dneg)))
                .filter(|(m, _)| **m > 0.0)
                .map(|(_, (p, q))| p.min(*q))
                .fold(f64::INFINITY, f64::min);
            tape.note_kink(margin);
            let mut term = losses::dense_triplet_on(tape, dpos, dneg, attention, cfg.weights.alpha);
            if cfg.normalize_dense && weight_sum > 0.0 {
                term = tape.scale(term, 1.0 / weight_sum);
            }
            if t.anchor < n {
                dt_a.push(term);
            } else {
                dt_b.push(term);
            }
            recons.push(tape.reshape(pos.recon, vec![h, w, c]));
        }

        let mut dt = None;
        for half in [dt_a, dt_b] {
            if half.is_empty() {
                continue;
            }
            let st = tape.stack(&half);
            let m = tape.mean(st);
            dt = Some(match dt {
                Some(prev) => tape.add(prev, m),
                None => m,
            });
        }
        dt_terms.extend(dt);

        let batch = tape.stack(&recons);
        let lifted = lift(tape, lf.layer, batch);
        let recon_desc = pooled(tape, lifted, cfg.gem_power);
        let logits = losses::head_logits(tape, head, recon_desc, id.stats);
        let recon_labels: Vec<usize> = triplets.iter().map(|t| labels[t.anchor]).collect();
        ic_terms.push(tape.cross_entropy(logits, &recon_labels));
    }

    let l_ic = sum_or_zero(tape, &ic_terms);
    let l_dt = sum_or_zero(tape, &dt_terms);
    let mut total = id.total;
    if cfg.weights.lambda_ic != 0.0 {
        let t = tape.scale(l_ic, cfg.weights.lambda_ic);
        total = tape.add(total, t);
    }
    if cfg.weights.lambda_dt != 0.0 {
        let t = tape.scale(l_dt, cfg.weights.lambda_dt);
        total = tape.add(total, t);
    }
    Ok(ObjectiveOutput {
        l_id: id.total,
        l_ic,
        l_dt,
        total,
        stats: id.stats,
        descriptors: x,
        attention: weights,
    })
}

/// GeM over the spatial axes of `[n, h, w, d]`, giving `[n, d]`.
fn pooled(tape: &mut Tape, batch: Var, p: f64) -> Var {
    let s = tape.shape(batch).to_vec();
    let flat = tape.reshape(batch, vec![s[0], s[1] * s[2], s[3]]);
    tape.gem(flat, p)
}

fn sum_or_zero(tape: &mut Tape, terms: &[Var]) -> Var {
    match terms {
        [] => tape.constant(crate::autograd::Tensor::scalar(0.0)),
        [one] => *one,
        many => {
            let st = tape.stack(many);
            tape.sum(st)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mining_stays_cross_modal() {
        // 2 per half, d = 1
        let desc = [0.0, 1.0, 0.2, 3.0];
        let labels = [0, 1, 0, 1];
        let (t, _) = mine_cross_modal(&desc, 1, &labels);
        assert_eq!(t.len(), 4);
        for tr in &t {
            let a_half = tr.anchor < 2;
            assert_eq!(tr.positive < 2, !a_half);
            assert_eq!(tr.negative < 2, !a_half);
            assert_eq!(labels[tr.positive], labels[tr.anchor]);
            assert_ne!(labels[tr.negative], labels[tr.anchor]);
        }
        assert_eq!(t[0], Triplet { anchor: 0, positive: 2, negative: 3 });
    }

    #[test]
    fn co_attention_values_match_plain_op() {
        use crate::cmalign::{co_attention, MatchProbability};
        use crate::tensor::SpatialMap;
        let mt = [0.0, 0.5, 1.0, 0.25];
        let ms = [1.0, 0.0, 0.75, 0.5];
        let prob = [0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 0.7, 0.1, 0.1, 0.1, 0.0, 0.0, 0.5, 0.5];
        let got = co_attention_values(&mt, &ms, &prob);
        let p = MatchProbability::from_rows(2, 2, 1.0, prob.to_vec()).unwrap();
        let want = co_attention(
            &SpatialMap::new(2, 2, mt.to_vec()).unwrap(),
            &SpatialMap::new(2, 2, ms.to_vec()).unwrap(),
            &p,
        )
        .unwrap();
        assert_eq!(got, want.data());
    }
}
