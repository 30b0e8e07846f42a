//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the lines show in `cargo test` output.
//!
//! Set `CMALIGN_SKIP_ABLATION=1` to skip the slow training comparison
//! (reported as SKIP, which still fails the run).

use std::time::{Duration, Instant};

use cmalign::ablation::{run_ablation, AblationConfig, Variant};
use cmalign::cmalign::{
    align, co_attention, cosine_similarity, matching_probability, soft_warp, SimilarityTensor,
};
use cmalign::eval::{average_precision, evaluate_retrieval};
use cmalign::gradsuite::{run_suite, SuiteConfig};
use cmalign::losses::{dense_triplet_loss, local_distance};
use cmalign::schedule::lr_schedule;
use cmalign::train::TrainConfig;
use cmalign::{FeatureMap, PersonDescriptor, SpatialMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-6;
const ORACLE_INSTANCES: usize = 10;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const ROW_SUM_TOL: f64 = 1e-6;
const ROW_SUM_TRIALS: usize = 100;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 10;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const IDENTITY_TRIALS: usize = 100;
const MIN_MAP_GAIN: f64 = 2.0;
const AP_INSTANCES: usize = 50;
const SCHEDULE_TOL: f64 = 1e-15;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

// ---- brute-force references -------------------------------------------

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    FeatureMap::new(h, w, d, (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SpatialMap {
    SpatialMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn ref_cosine(a: &FeatureMap, b: &FeatureMap) -> Vec<Vec<f64>> {
    let n = a.positions();
    let d = a.channels();
    let mut out = vec![vec![0.0; n]; n];
    for (p, row) in out.iter_mut().enumerate() {
        for (q, v) in row.iter_mut().enumerate() {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for k in 0..d {
                let (x, y) = (a.get(p / a.width(), p % a.width(), k), b.get(q / b.width(), q % b.width(), k));
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            *v = dot / (na.sqrt().max(1e-8) * nb.sqrt().max(1e-8));
        }
    }
    out
}

fn ref_softmax(c: &[Vec<f64>], beta: f64) -> Vec<Vec<f64>> {
    c.iter()
        .map(|row| {
            let e: Vec<f64> = row.iter().map(|v| (beta * v).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn ref_warp(p: &[Vec<f64>], src: &[Vec<f64>]) -> Vec<Vec<f64>> {
    p.iter()
        .map(|row| {
            let mut acc = vec![0.0; src[0].len()];
            for (q, &w) in row.iter().enumerate() {
                for (a, s) in acc.iter_mut().zip(&src[q]) {
                    *a += w * s;
                }
            }
            acc
        })
        .collect()
}

fn rows(f: &FeatureMap) -> Vec<Vec<f64>> {
    (0..f.positions()).map(|p| f.at(p).to_vec()).collect()
}

fn ref_minmax(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        x.iter().map(|v| v.clamp(0.0, 1.0)).collect()
    } else {
        x.iter().map(|v| (v - lo) / (hi - lo)).collect()
    }
}

fn max_abs(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- criteria -----------------------------------------------------------

fn reference_oracles() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..ORACLE_INSTANCES {
        let (h, w, d) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=8));
        let beta = rng.gen_range(1.0..50.0);
        let (fa, fb, fc) = (random_map(&mut rng, h, w, d), random_map(&mut rng, h, w, d), random_map(&mut rng, h, w, d));
        let (ma, mb) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let alpha = rng.gen_range(0.0..1.0);

        let c = cosine_similarity(&fa, &fb).unwrap();
        let c_ref = ref_cosine(&fa, &fb);
        worst = worst.max(max_abs(c.data().iter().copied(), c_ref.iter().flatten().copied()));

        let p = matching_probability(&c, beta).unwrap();
        let p_ref = ref_softmax(&c_ref, beta);
        worst = worst.max(max_abs(p.data().iter().copied(), p_ref.iter().flatten().copied()));

        let warped = soft_warp(&p, &fb).unwrap();
        let warped_ref = ref_warp(&p_ref, &rows(&fb));
        worst = worst.max(max_abs(warped.data().iter().copied(), warped_ref.iter().flatten().copied()));

        let aligned = align(&fa, &fb, &ma, &p).unwrap();
        let aligned_ref: Vec<f64> = (0..h * w)
            .flat_map(|q| {
                let m = ma.data()[q];
                let t = fa.at(q).to_vec();
                warped_ref[q].iter().zip(t).map(move |(s, t)| m * s + (1.0 - m) * t).collect::<Vec<_>>()
            })
            .collect();
        worst = worst.max(max_abs(aligned.data().iter().copied(), aligned_ref.iter().copied()));

        let co = co_attention(&ma, &mb, &p).unwrap();
        let mb_rows: Vec<Vec<f64>> = mb.data().iter().map(|&v| vec![v]).collect();
        let warped_mask = ref_warp(&p_ref, &mb_rows);
        let raw: Vec<f64> = ma.data().iter().zip(&warped_mask).map(|(a, b)| a * b[0]).collect();
        worst = worst.max(max_abs(co.data().iter().copied(), ref_minmax(&raw)));

        let dp = local_distance(&fa, &aligned).unwrap();
        let dn = local_distance(&fa, &fc).unwrap();
        let dist = |x: &FeatureMap, y: &FeatureMap| -> Vec<f64> {
            (0..h * w)
                .map(|q| x.at(q).iter().zip(y.at(q)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect()
        };
        let (dp_ref, dn_ref) = (dist(&fa, &aligned), dist(&fa, &fc));
        worst = worst.max(max_abs(dp.data().iter().copied(), dp_ref.iter().copied()));
        worst = worst.max(max_abs(dn.data().iter().copied(), dn_ref.iter().copied()));

        let loss = dense_triplet_loss(&dp, &dn, &co, alpha).unwrap();
        let mut loss_ref = 0.0;
        for q in 0..h * w {
            let hinge = dp_ref[q] - dn_ref[q] + alpha;
            if hinge > 0.0 {
                loss_ref += co.data()[q] * hinge;
            }
        }
        worst = worst.max((loss - loss_ref).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst < ORACLE_TOL && elapsed < ORACLE_BUDGET,
        format!("max abs error {worst:.2e} (tol {ORACLE_TOL:.0e}), {:.2}s", elapsed.as_secs_f64()),
    )
}

fn stochasticity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for beta in [1.0, 10.0, 50.0] {
        for _ in 0..ROW_SUM_TRIALS {
            let (h, w) = (rng.gen_range(1..=9), rng.gen_range(1..=5));
            let n = h * w;
            let c = SimilarityTensor::new(h, w, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let p = matching_probability(&c, beta).unwrap();
            for i in 0..n {
                worst = worst.max((p.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    outcome(worst < ROW_SUM_TOL, format!("max |row sum - 1| {worst:.2e}"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = SuiteConfig {
        tol: GRAD_TOL,
        seeds: GRAD_SEEDS,
        ..SuiteConfig::default()
    };
    let reports = match run_suite("all", &cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let elapsed = start.elapsed();
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op).collect();
    let has_total = reports.iter().any(|r| r.op == "total_loss");
    outcome(
        failing.is_empty() && has_total && elapsed < GRAD_BUDGET,
        format!(
            "{} ops, worst {} at {:.2e}, failing [{}], {:.1}s",
            reports.len(),
            worst.op,
            worst.max_rel_error,
            failing.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn alignment_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut zero_bad, mut one_bad, mut argmax_bad, mut unique) = (0, 0, 0, 0);
    for _ in 0..IDENTITY_TRIALS {
        let (h, w, d) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=8));
        let (ft, fs) = (random_map(&mut rng, h, w, d), random_map(&mut rng, h, w, d));
        let c = cosine_similarity(&ft, &fs).unwrap();
        let p = matching_probability(&c, rng.gen_range(1.0..50.0)).unwrap();
        let zero = align(&ft, &fs, &SpatialMap::filled(h, w, 0.0), &p).unwrap();
        let one = align(&ft, &fs, &SpatialMap::filled(h, w, 1.0), &p).unwrap();
        let warped = soft_warp(&p, &fs).unwrap();
        let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        zero_bad += usize::from(bits(zero.data()) != bits(ft.data()));
        one_bad += usize::from(bits(one.data()) != bits(warped.data()));
        for i in 0..h * w {
            let row = c.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if row.iter().filter(|&&v| v == max).count() != 1 {
                continue;
            }
            unique += 1;
            let want = row.iter().position(|&v| v == max).unwrap();
            argmax_bad += usize::from(p.argmax(i) != want);
        }
    }
    outcome(
        zero_bad == 0 && one_bad == 0 && argmax_bad == 0,
        format!("M=0 mismatches {zero_bad}, M=1 mismatches {one_bad}, argmax mismatches {argmax_bad}/{unique} rows"),
    )
}

fn ablation_trend() -> Outcome {
    if std::env::var_os("CMALIGN_SKIP_ABLATION").is_some() {
        return outcome(false, "SKIP requested by CMALIGN_SKIP_ABLATION");
    }
    let start = Instant::now();
    let cfg = AblationConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let report = match run_ablation(&cfg, dir.path(), |r| {
        println!("    seed {} {:<16} mAP {:6.2}", r.seed, r.variant, 100.0 * r.m_ap)
    }) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let (full, id_only, no_co) = (
        report.mean_map(Variant::Full),
        report.mean_map(Variant::IdOnly),
        report.mean_map(Variant::NoCoAttention),
    );
    let gain = full - id_only;
    outcome(
        gain >= MIN_MAP_GAIN && no_co <= full,
        format!(
            "mean mAP full {full:.2}, id-only {id_only:.2} (gain {gain:+.2}, need >= {MIN_MAP_GAIN}), co-attention off {no_co:.2}, {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

/// AP by enumerating, for each positive, how many items outrank it.
fn brute_ap(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let rank = |j: usize| {
        (0..scores.len())
            .filter(|&i| scores[i] > scores[j] || (scores[i] == scores[j] && i < j))
            .count()
    };
    let mut pos_ranks: Vec<usize> = (0..scores.len()).filter(|&j| positive[j]).map(rank).collect();
    if pos_ranks.is_empty() {
        return None;
    }
    pos_ranks.sort_unstable();
    let mut sum = 0.0;
    for (hits, &r) in pos_ranks.iter().enumerate() {
        sum += (hits + 1) as f64 / (r + 1) as f64;
    }
    Some(sum / pos_ranks.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    PersonDescriptor(a.to_vec()).cosine(&PersonDescriptor(b.to_vec()))
}

fn retrieval_evaluator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut mismatches, mut non_monotone) = (0, 0);
    for _ in 0..AP_INSTANCES {
        let d = rng.gen_range(1..=6);
        let classes = rng.gen_range(1..=4);
        let (ng, nq) = (rng.gen_range(1..=10), rng.gen_range(1..=6));
        let mut draw = |n: usize| -> Vec<(usize, PersonDescriptor)> {
            (0..n)
                .map(|_| {
                    let v = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    (rng.gen_range(0..classes), PersonDescriptor(v))
                })
                .collect()
        };
        let gallery = draw(ng);
        let queries = draw(nq);
        let r = evaluate_retrieval(&queries, &gallery).unwrap();
        let aps: Vec<f64> = queries
            .iter()
            .filter_map(|(l, q)| {
                let scores: Vec<f64> = gallery.iter().map(|(_, g)| cosine(&q.0, &g.0)).collect();
                let pos: Vec<bool> = gallery.iter().map(|(gl, _)| gl == l).collect();
                brute_ap(&scores, &pos)
            })
            .collect();
        let want = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
        mismatches += usize::from(r.m_ap != want || r.per_query_ap != aps);
        non_monotone += usize::from(!r.cmc.windows(2).all(|w| w[0] <= w[1]));
    }
    // the library helper agrees with enumeration on a fixed ranking
    let fixed = average_precision(&[false, true, true, false, true]) == brute_ap(&[5.0, 4.0, 3.0, 2.0, 1.0], &[false, true, true, false, true]);
    outcome(
        mismatches == 0 && non_monotone == 0 && fixed,
        format!("{mismatches} AP mismatches, {non_monotone} non-monotone CMC curves over {AP_INSTANCES} instances"),
    )
}

fn determinism() -> Outcome {
    let run_once = || -> Result<Vec<u8>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
        let sets = |extra: &[String]| -> Vec<String> {
            let mut v: Vec<String> = [
                "data.n_identities=12",
                "data.images_per_identity=4",
                "data.train_identities=8",
                "train.epochs=2",
                "train.identities_per_modality=4",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            v.extend(extra.iter().cloned());
            v.into_iter().flat_map(|s| ["--set".to_string(), s]).collect()
        };
        let call = |cmd: &str, extra: &[String], out: &str| -> Result<(), String> {
            let mut args = vec!["cmalign".to_string(), cmd.to_string(), "--seed".into(), "7".into()];
            args.extend(sets(extra));
            args.extend(["--out".to_string(), out.to_string()]);
            match cmalign::cli::run(&args) {
                0 => Ok(()),
                code => Err(format!("{cmd} exited with {code}")),
            }
        };
        let root = format!("data.root={:?}", p("data"));
        call("gen", &[], &p("data"))?;
        call("train", std::slice::from_ref(&root), &p("run"))?;
        let ckpt = format!("eval.checkpoint={:?}", p("run/checkpoint"));
        call("eval", &[root, ckpt], &p("eval"))?;
        std::fs::read(dir.path().join("eval/metrics.json")).map_err(|e| e.to_string())
    };
    match (run_once(), run_once()) {
        (Ok(a), Ok(b)) => outcome(
            a == b,
            format!("metrics.json {} bytes, identical: {}", a.len(), a == b),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn schedule_check() -> Outcome {
    let cfg = TrainConfig::default();
    let close = |(a, b): (f64, f64), (x, y): (f64, f64)| (a - x).abs() < SCHEDULE_TOL && (b - y).abs() < SCHEDULE_TOL;
    let end_of_warmup = cfg.warmup_epochs - 1;
    let warm = (end_of_warmup..20).all(|e| close(lr_schedule(e, &cfg), (1e-2, 1e-1)));
    let late = (50..200).all(|e| close(lr_schedule(e, &cfg), (1e-4, 1e-3)));
    outcome(
        warm && late,
        format!(
            "epoch {end_of_warmup}: {:?}, epoch 50: {:?}",
            lr_schedule(end_of_warmup, &cfg),
            lr_schedule(50, &cfg)
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 reference oracles", reference_oracles),
        ("2 probability rows are stochastic", stochasticity),
        ("3 gradient suite", gradient_suite),
        ("4 alignment identities", alignment_identities),
        ("5 ablation trend", ablation_trend),
        ("6 retrieval evaluator", retrieval_evaluator),
        ("7 determinism", determinism),
        ("8 learning-rate schedule", schedule_check),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        println!("{} {name}: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.ok);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
