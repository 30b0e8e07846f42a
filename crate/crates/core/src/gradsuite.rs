//! Finite-difference checks of every differentiable building block.
//!
//! Each case draws random inputs from a seed, reduces its output to a
//! scalar through fixed random weights and compares tape gradients with
//! central differences. Draws whose kink margin falls below
//! [`KINK_EXCLUSION`] are redrawn.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::gradcheck::{finite_diff_check, DEFAULT_STEP};
use crate::autograd::{Tape, Tensor, Var};
use crate::cmalign::COSINE_EPS;
use crate::error::{Error, Result};
use crate::losses::{self, HeadVars, BN_EPS};
use crate::objective::{build_objective_with, person_mask_on, reconstruct, LayerFeatures, ObjectiveConfig};

pub const DEFAULT_TOL: f64 = 1e-4;
/// Smallest acceptable distance of any hinge input, selection gap or
/// min/max tie from its kink.
pub const KINK_EXCLUSION: f64 = 1e-3;
const MAX_DRAWS: u64 = 200;

type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One runnable check: inputs plus the function of them.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub f: Case,
}

pub type Generator = fn(&mut ChaCha8Rng) -> Instance;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Reduces `x` with fixed random weights.
fn project(t: &mut Tape, x: Var, w: &[f64]) -> Var {
    t.dot_const(x, w.to_vec())
}

macro_rules! instance {
    ($rng:ident, [$($input:expr),* $(,)?], |$t:ident, $v:ident, $w:ident| $body:expr) => {{
        let inputs = vec![$($input),*];
        let $w = weights($rng, 256);
        Instance {
            inputs,
            f: Box::new(move |$t: &mut Tape, $v: &[Var]| {
                let $w = &$w;
                Ok($body)
            }),
        }
    }};
}

fn case_add(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![3, 4], -1.0, 1.0), uniform(rng, vec![3, 4], -1.0, 1.0)], |t, v, w| {
        let s = t.add(v[0], v[1]);
        let d = t.sub(s, v[1]);
        let m = t.mul(d, v[1]);
        let k = t.scale(m, 1.5);
        let k = t.add_scalar(k, 0.25);
        let k = t.one_minus(k);
        project(t, k, &w[..12])
    })
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![3, 4], -1.0, 1.0), uniform(rng, vec![4, 2], -1.0, 1.0), uniform(rng, vec![2, 4], -1.0, 1.0)], |t, v, w| {
        let ab = t.matmul(v[0], v[1], false, false);
        let abt = t.matmul(v[0], v[2], false, true);
        let ata = t.matmul(v[0], v[0], true, false);
        let s1 = project(t, ab, &w[..6]);
        let s2 = project(t, abt, &w[6..12]);
        let s3 = project(t, ata, &w[12..28]);
        let s = t.add(s1, s2);
        t.add(s, s3)
    })
}

fn case_mul_rows(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![5, 3], -1.0, 1.0), uniform(rng, vec![5], -1.0, 1.0)], |t, v, w| {
        let y = t.mul_rows(v[0], v[1]);
        project(t, y, &w[..15])
    })
}

fn case_normalize_rows(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![4, 3], -1.0, 1.0)], |t, v, w| {
        let n = t.normalize_rows(v[0], COSINE_EPS);
        let r = t.row_norm(v[0]);
        let a = project(t, n, &w[..12]);
        let b = project(t, r, &w[12..16]);
        t.add(a, b)
    })
}

fn case_softmax(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![3, 5], -1.0, 1.0)], |t, v, w| {
        let p = t.softmax(v[0], 10.0);
        project(t, p, &w[..15])
    })
}

fn case_minmax(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![9], 0.0, 2.0)], |t, v, w| {
        let m = t.minmax(v[0]);
        project(t, m, &w[..9])
    })
}

fn case_gem(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![2, 9, 4], 0.05, 1.0)], |t, v, w| {
        let g = t.gem(v[0], 3.0);
        project(t, g, &w[..8])
    })
}

fn case_relu(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![8], -1.0, 1.0)], |t, v, w| {
        let r = t.relu(v[0]);
        project(t, r, &w[..8])
    })
}

fn case_leaky_relu(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![8], -1.0, 1.0)], |t, v, w| {
        let r = t.leaky_relu(v[0], 0.1);
        project(t, r, &w[..8])
    })
}

fn case_reductions(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![4, 3], -1.0, 1.0)], |t, v, w| {
        let m = t.col_mean(v[0]);
        let s = t.col_var(v[0]);
        let a = project(t, m, &w[..3]);
        let b = project(t, s, &w[3..6]);
        let sq = t.mul(v[0], v[0]);
        let c = t.sum(sq);
        let d = t.mean(v[0]);
        let ab = t.add(a, b);
        let cd = t.add(c, d);
        t.add(ab, cd)
    })
}

fn case_structural(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![2, 3, 2], -1.0, 1.0), uniform(rng, vec![1, 3, 2], -1.0, 1.0)], |t, v, w| {
        let c = t.concat(&[v[0], v[1]]);
        let s = t.select(c, 2);
        let st = t.stack(&[s, s]);
        let r = t.reshape(st, vec![12]);
        let g = t.gather(r, vec![0, 3, 3, 11]);
        let sl = t.slice(c, 4, vec![2, 3]);
        let sq = t.mul(sl, sl);
        let a = project(t, g, &w[..4]);
        let b = project(t, sq, &w[4..10]);
        t.add(a, b)
    })
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> Instance {
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    instance!(rng, [uniform(rng, vec![4, 3], -2.0, 2.0)], |t, v, _w| t.cross_entropy(v[0], &labels))
}

fn case_batch_norm(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![5, 3], -1.0, 1.0), uniform(rng, vec![3], 0.5, 1.5), uniform(rng, vec![3], -0.5, 0.5)], |t, v, w| {
        let (m, s) = losses::batch_stats(t, v[0]);
        let y = t.batch_norm(v[0], m, s, v[1], v[2], BN_EPS);
        project(t, y, &w[..15])
    })
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![2, 5, 4, 3], -1.0, 1.0), uniform(rng, vec![3, 3, 3, 2], -1.0, 1.0), uniform(rng, vec![2], -1.0, 1.0)], |t, v, w| {
        let y = t.conv2d(v[0], v[1], v[2], 2, 1);
        let z = t.conv2d(v[0], v[1], v[2], 1, 1);
        let a = project(t, y, &w[..24]);
        let b = project(t, z, &w[24..104]);
        t.add(a, b)
    })
}

fn case_pair_dist(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![4, 3], -1.0, 1.0)], |t, v, w| {
        let d = t.pair_dist(v[0]);
        project(t, d, &w[..16])
    })
}

fn cmalign_pair(rng: &mut ChaCha8Rng) -> [Tensor; 2] {
    [uniform(rng, vec![9, 4], 0.0, 1.0), uniform(rng, vec![9, 4], 0.0, 1.0)]
}

fn case_cosine_similarity(rng: &mut ChaCha8Rng) -> Instance {
    let [a, b] = cmalign_pair(rng);
    instance!(rng, [a, b], |t, v, w| {
        let na = t.normalize_rows(v[0], COSINE_EPS);
        let nb = t.normalize_rows(v[1], COSINE_EPS);
        let c = t.matmul(na, nb, false, true);
        project(t, c, &w[..81])
    })
}

fn case_matching_probability(rng: &mut ChaCha8Rng) -> Instance {
    let [a, b] = cmalign_pair(rng);
    instance!(rng, [a, b], |t, v, w| {
        let na = t.normalize_rows(v[0], COSINE_EPS);
        let nb = t.normalize_rows(v[1], COSINE_EPS);
        let c = t.matmul(na, nb, false, true);
        let p = t.softmax(c, 50.0);
        project(t, p, &w[..81])
    })
}

fn case_soft_warp(rng: &mut ChaCha8Rng) -> Instance {
    instance!(rng, [uniform(rng, vec![9, 9], -1.0, 1.0), uniform(rng, vec![9, 4], 0.0, 1.0)], |t, v, w| {
        let p = t.softmax(v[0], 10.0);
        let y = t.matmul(p, v[1], false, false);
        project(t, y, &w[..36])
    })
}

fn case_person_mask(rng: &mut ChaCha8Rng) -> Instance {
    let [a, _] = cmalign_pair(rng);
    instance!(rng, [a], |t, v, w| {
        let m = person_mask_on(t, v[0], false);
        project(t, m, &w[..9])
    })
}

fn case_align(rng: &mut ChaCha8Rng) -> Instance {
    let [a, b] = cmalign_pair(rng);
    instance!(rng, [a, b], |t, v, w| {
        let m = person_mask_on(t, v[0], false);
        let r = reconstruct(t, v[0], v[1], m, 50.0);
        project(t, r.recon, &w[..36])
    })
}

fn case_local_distance(rng: &mut ChaCha8Rng) -> Instance {
    let [a, b] = cmalign_pair(rng);
    instance!(rng, [a, b], |t, v, w| {
        let d = t.sub(v[0], v[1]);
        let n = t.row_norm(d);
        project(t, n, &w[..9])
    })
}

fn case_dense_triplet(rng: &mut ChaCha8Rng) -> Instance {
    let att: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
    instance!(rng, [uniform(rng, vec![9], 0.0, 1.0), uniform(rng, vec![9], 0.0, 1.0)], |t, v, _w| {
        losses::dense_triplet_on(t, v[0], v[1], att.clone(), 0.3)
    })
}

fn case_batch_hard_triplet(rng: &mut ChaCha8Rng) -> Instance {
    let labels = vec![0, 0, 1, 1, 2, 2];
    instance!(rng, [uniform(rng, vec![6, 3], -1.0, 1.0)], |t, v, _w| {
        losses::batch_hard_triplet_on(t, v[0], &labels, 0.3)?
    })
}

/// Softmax matching, warp, GeM and classification on 3×3×4 maps.
fn case_chain(rng: &mut ChaCha8Rng) -> Instance {
    let [a, b] = cmalign_pair(rng);
    instance!(rng, [a, b, uniform(rng, vec![4, 3], -1.0, 1.0)], |t, v, _w| {
        let na = t.normalize_rows(v[0], COSINE_EPS);
        let nb = t.normalize_rows(v[1], COSINE_EPS);
        let c = t.matmul(na, nb, false, true);
        let p = t.softmax(c, 50.0);
        let warped = t.matmul(p, v[1], false, false);
        let g = t.gem(warped, 3.0);
        let g = t.reshape(g, vec![1, 4]);
        let logits = t.matmul(g, v[2], false, false);
        t.cross_entropy(logits, &[1])
    })
}

/// Full objective on a two-identity batch of 3×3×4 maps: two images per
/// identity and modality, depth-4 leaves lifted to depth 5 by a 3×3
/// convolution, and a two-class head.
fn case_total_loss(rng: &mut ChaCha8Rng) -> Instance {
    let (n, h, w, d) = (4, 3, 3, 4);
    let labels = vec![0, 0, 1, 1];
    let inputs = vec![
        uniform(rng, vec![n, h, w, d], 0.05, 1.0),
        uniform(rng, vec![n, h, w, d], 0.05, 1.0),
        // non-negative lift keeps GeM inputs clear of its floor
        uniform(rng, vec![3, 3, d, d], 0.0, 0.4),
        uniform(rng, vec![d], 0.05, 0.2),
        uniform(rng, vec![d], 0.5, 1.5),
        uniform(rng, vec![d], -0.5, 0.5),
        uniform(rng, vec![d, 2], -1.0, 1.0),
    ];
    let frozen: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    Instance {
        inputs,
        f: Box::new(move |t: &mut Tape, v: &[Var]| {
            let running = t.constant(Tensor::zeros(vec![d]));
            let head = HeadVars {
                gamma: v[4],
                beta: v[5],
                weight: v[6],
                running_mean: running,
                running_var: running,
            };
            let (cw, cb) = (v[2], v[3]);
            let mut lift = |t: &mut Tape, layer: usize, x: Var| if layer >= 5 { x } else { t.conv2d(x, cw, cb, 1, 1) };
            let fa = lift(t, 4, v[0]);
            let fb = lift(t, 4, v[1]);
            let layers = [
                LayerFeatures { layer: 4, a: v[0], b: v[1] },
                LayerFeatures { layer: 5, a: fa, b: fb },
            ];
            // co-attention is a constant weight to the gradient, so it is
            // frozen at the unperturbed point (the first evaluation)
            let cfg = ObjectiveConfig::default();
            let out = build_objective_with(
                t,
                &head,
                fa,
                fb,
                &layers,
                &labels,
                &labels,
                &cfg,
                &mut lift,
                frozen.get().map(Vec::as_slice),
            )?;
            if frozen.get().is_none() {
                let _ = frozen.set(out.attention.clone());
            }
            Ok(out.total)
        }),
    }
}

/// Every registered check, by name.
pub fn cases() -> Vec<(&'static str, Generator)> {
    vec![
        ("elementwise", case_add as Generator),
        ("matmul", case_matmul),
        ("mul_rows", case_mul_rows),
        ("normalize_rows", case_normalize_rows),
        ("softmax", case_softmax),
        ("minmax", case_minmax),
        ("gem", case_gem),
        ("relu", case_relu),
        ("leaky_relu", case_leaky_relu),
        ("reductions", case_reductions),
        ("structural", case_structural),
        ("cross_entropy", case_cross_entropy),
        ("batch_norm", case_batch_norm),
        ("conv2d", case_conv2d),
        ("pair_dist", case_pair_dist),
        ("cosine_similarity", case_cosine_similarity),
        ("matching_probability", case_matching_probability),
        ("soft_warp", case_soft_warp),
        ("person_mask", case_person_mask),
        ("align", case_align),
        ("local_distance", case_local_distance),
        ("dense_triplet", case_dense_triplet),
        ("batch_hard_triplet", case_batch_hard_triplet),
        ("chain", case_chain),
        ("total_loss", case_total_loss),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteConfig {
    pub tol: f64,
    pub seeds: u64,
    pub step: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            seeds: 10,
            step: DEFAULT_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub op: &'static str,
    /// Worst error over all seeds.
    pub max_rel_error: f64,
    pub seeds: u64,
    /// Draws rejected for sitting near a kink.
    pub redraws: u64,
    pub passed: bool,
}

/// Selects cases by a comma list of names, or `all`.
pub fn select(filter: &str) -> Result<Vec<(&'static str, Generator)>> {
    let all = cases();
    if filter.trim() == "all" {
        return Ok(all);
    }
    filter
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            all.iter().find(|(n, _)| *n == name).copied().ok_or_else(|| {
                let known: Vec<&str> = all.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("unknown gradcheck op {name:?}; known: {}", known.join(", ")))
            })
        })
        .collect()
}

pub fn run_case(name: &'static str, gen: Generator, cfg: &SuiteConfig) -> Result<CaseReport> {
    let mut worst: f64 = 0.0;
    let mut redraws = 0;
    for seed in 0..cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut done = false;
        for _ in 0..MAX_DRAWS {
            let inst = gen(&mut rng);
            let rep = finite_diff_check(&inst.f, &inst.inputs, cfg.step)?;
            if rep.kink_margin < KINK_EXCLUSION {
                redraws += 1;
                continue;
            }
            worst = worst.max(rep.max_rel_error);
            done = true;
            break;
        }
        if !done {
            return Err(Error::Numeric {
                op: name.into(),
                detail: format!("no draw clear of kinks after {MAX_DRAWS} tries (seed {seed})"),
            });
        }
    }
    Ok(CaseReport {
        op: name,
        max_rel_error: worst,
        seeds: cfg.seeds,
        redraws,
        passed: worst < cfg.tol,
    })
}

pub fn run_suite(filter: &str, cfg: &SuiteConfig) -> Result<Vec<CaseReport>> {
    select(filter)?.into_iter().map(|(n, g)| run_case(n, g, cfg)).collect()
}

/// Fixed-width table of reports.
pub fn format_table(reports: &[CaseReport]) -> String {
    let mut s = format!("{:<22} {:>14} {:>6} {:>8}  {}\n", "op", "max_rel_error", "seeds", "redraws", "status");
    for r in reports {
        s.push_str(&format!(
            "{:<22} {:>14.3e} {:>6} {:>8}  {}\n",
            r.op,
            r.max_rel_error,
            r.seeds,
            r.redraws,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    s
}
