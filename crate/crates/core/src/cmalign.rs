//! Dense cross-modal correspondence.
//!
//! Every tensor here is indexed `(p, q)` with `p` a position in the target
//! map and `q` a position in the source map, both flattened row-major. The
//! reverse alignment direction is obtained by swapping the arguments.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::minmax_normalize;
use crate::linalg;
use crate::tensor::{FeatureMap, SpatialMap};

/// Floor applied to feature norms inside [`cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-8;

pub const DEFAULT_TEMPERATURE: f64 = 50.0;

/// Number of matches per position exported by default.
pub const DEFAULT_TOP_K: usize = 20;

/// Cosine similarities between every target and source position.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTensor {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl SimilarityTensor {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        let n = h * w;
        if data.len() != n * n {
            return Err(Error::dim("SimilarityTensor::new", &[h, w, h, w], &[data.len()]));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.data[p * self.positions() + q]
    }

    pub fn row(&self, p: usize) -> &[f64] {
        let n = self.positions();
        &self.data[p * n..(p + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Swaps the roles of target and source.
    pub fn transpose(&self) -> SimilarityTensor {
        let n = self.positions();
        let mut data = vec![0.0; n * n];
        for p in 0..n {
            for q in 0..n {
                data[q * n + p] = self.data[p * n + q];
            }
        }
        SimilarityTensor { data, ..*self }
    }
}

/// Row-stochastic matching probabilities `P(p, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchProbability {
    h: usize,
    w: usize,
    beta: f64,
    data: Vec<f64>,
}

impl MatchProbability {
    /// Wraps externally computed probabilities. Rows must be stochastic.
    pub fn from_rows(h: usize, w: usize, beta: f64, data: Vec<f64>) -> Result<Self> {
        let n = h * w;
        if data.len() != n * n {
            return Err(Error::dim("MatchProbability::from_rows", &[h, w, h, w], &[data.len()]));
        }
        for (p, row) in data.chunks_exact(n).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("row {p} is not a probability distribution")));
            }
        }
        Ok(Self { h, w, beta, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn temperature(&self) -> f64 {
        self.beta
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.data[p * self.positions() + q]
    }

    pub fn row(&self, p: usize) -> &[f64] {
        let n = self.positions();
        &self.data[p * n..(p + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Hard correspondence: the most probable source position for `p`.
    pub fn argmax(&self, p: usize) -> usize {
        argmax(self.row(p))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn cosine_similarity(f_tgt: &FeatureMap, f_src: &FeatureMap) -> Result<SimilarityTensor> {
    f_tgt.check_same_shape(f_src, "cosine_similarity")?;
    let d = f_tgt.channels();
    let n = f_tgt.positions();
    let (nt, _) = linalg::normalize_rows(f_tgt.data(), d, COSINE_EPS);
    let (ns, _) = linalg::normalize_rows(f_src.data(), d, COSINE_EPS);
    let mut data = linalg::matmul(&nt, &ns, n, d, n, false, true);
    for v in &mut data {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(SimilarityTensor {
        h: f_tgt.height(),
        w: f_tgt.width(),
        data,
    })
}

/// Softmax over source positions with temperature `beta`.
pub fn matching_probability(c: &SimilarityTensor, beta: f64) -> Result<MatchProbability> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {beta}")));
    }
    Ok(MatchProbability {
        h: c.h,
        w: c.w,
        beta,
        data: linalg::softmax_rows(&c.data, c.positions(), beta),
    })
}

/// `out(p) = Σ_q P(p, q) f_src(q)`.
pub fn soft_warp(p: &MatchProbability, f_src: &FeatureMap) -> Result<FeatureMap> {
    if p.h != f_src.height() || p.w != f_src.width() {
        return Err(Error::dim(
            "soft_warp",
            &[p.h, p.w, p.h, p.w],
            &f_src.shape(),
        ));
    }
    let n = p.positions();
    let d = f_src.channels();
    let data = linalg::matmul(&p.data, f_src.data(), n, n, d, false, false);
    Ok(FeatureMap::from_parts(p.h, p.w, d, data))
}

pub fn soft_warp_map(p: &MatchProbability, m_src: &SpatialMap) -> Result<SpatialMap> {
    let warped = soft_warp(p, &m_src.to_feature_map())?;
    Ok(SpatialMap::from_parts(p.h, p.w, warped.into_data()))
}

/// Mask-blended reconstruction of the target from warped source features.
pub fn align(
    f_tgt: &FeatureMap,
    f_src: &FeatureMap,
    m_tgt: &SpatialMap,
    p: &MatchProbability,
) -> Result<FeatureMap> {
    f_tgt.check_same_shape(f_src, "align")?;
    if m_tgt.shape() != [f_tgt.height(), f_tgt.width()] {
        return Err(Error::dim("align", &f_tgt.shape(), &m_tgt.shape()));
    }
    let warped = soft_warp(p, f_src)?;
    Ok(blend(f_tgt, &warped, m_tgt))
}

pub(crate) fn blend(f_tgt: &FeatureMap, warped: &FeatureMap, m: &SpatialMap) -> FeatureMap {
    let d = f_tgt.channels();
    let mut out = Vec::with_capacity(f_tgt.data().len());
    for (pos, &mv) in m.data().iter().enumerate() {
        let t = f_tgt.at(pos);
        let s = warped.at(pos);
        out.extend(t.iter().zip(s).map(|(tv, sv)| mv * sv + (1.0 - mv) * tv));
    }
    FeatureMap::from_parts(f_tgt.height(), f_tgt.width(), d, out)
}

/// Mutually visible region: target mask times the warped source mask,
/// min-max normalized.
pub fn co_attention(m_tgt: &SpatialMap, m_src: &SpatialMap, p: &MatchProbability) -> Result<SpatialMap> {
    if m_tgt.shape() != m_src.shape() {
        return Err(Error::dim("co_attention", &m_tgt.shape(), &m_src.shape()));
    }
    let warped = soft_warp_map(p, m_src)?;
    let raw: Vec<f64> = m_tgt
        .data()
        .iter()
        .zip(warped.data())
        .map(|(a, b)| a * b)
        .collect();
    Ok(minmax_normalize(&SpatialMap::from_parts(m_tgt.height(), m_tgt.width(), raw)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub p_row: usize,
    pub p_col: usize,
    pub q_row: usize,
    pub q_col: usize,
    pub prob: f64,
}

pub const MATCH_CSV_HEADER: &str = "p_row,p_col,q_row,q_col,prob";

/// The `k` most probable source positions for every target position,
/// capped at `h * w`. Ties keep the lower source index first.
pub fn top_k_matches(p: &MatchProbability, k: usize) -> Vec<Match> {
    let n = p.positions();
    let k = k.min(n);
    let mut out = Vec::with_capacity(n * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for pi in 0..n {
        let row = p.row(pi);
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &q in &order[..k] {
            out.push(Match {
                p_row: pi / p.w,
                p_col: pi % p.w,
                q_row: q / p.w,
                q_col: q % p.w,
                prob: row[q],
            });
        }
    }
    out
}

pub fn write_matches_csv(path: impl AsRef<Path>, matches: &[Match]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    writeln!(buf, "{MATCH_CSV_HEADER}").expect("write to vec");
    for m in matches {
        writeln!(buf, "{},{},{},{},{:e}", m.p_row, m.p_col, m.q_row, m.q_col, m.prob).expect("write to vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_matches_csv(path: impl AsRef<Path>) -> Result<Vec<Match>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = text.lines();
    if lines.next() != Some(MATCH_CSV_HEADER) {
        return Err(bad("missing match header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("line {}: expected 5 fields", i + 2)));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", i + 2)));
            Ok(Match {
                p_row: int(f[0])?,
                p_col: int(f[1])?,
                q_row: int(f[2])?,
                q_col: int(f[3])?,
                prob: f[4].parse().map_err(|e| bad(format!("line {}: {e}", i + 2)))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
        FeatureMap::from_fn(h, w, d, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_stochastic(rng: &mut ChaCha8Rng, h: usize, w: usize) -> MatchProbability {
        let n = h * w;
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n {
            let row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        MatchProbability::from_rows(h, w, 1.0, data).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let f = FeatureMap::from_fn(1, 3, 3, |_, c, k| if c == k { 1.0 } else { 0.0 });
        let c = cosine_similarity(&f, &f).unwrap();
        for p in 0..3 {
            assert_eq!(c.get(p, p), 1.0);
            for q in 0..3 {
                if p != q {
                    assert_eq!(c.get(p, q), 0.0);
                }
            }
        }
        let t = FeatureMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let s = FeatureMap::new(1, 1, 2, vec![1.0, 1.0]).unwrap();
        let c = cosine_similarity(&t, &s).unwrap();
        assert!((c.get(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_shape_error_names_both() {
        let a = FeatureMap::zeros(2, 2, 3);
        let b = FeatureMap::zeros(2, 2, 4);
        let err = cosine_similarity(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 2, 3]") && err.contains("[2, 2, 4]"), "{err}");
    }

    #[test]
    fn cosine_zero_vector_is_finite() {
        let a = FeatureMap::zeros(1, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_map(&mut rng, 1, 2, 3);
        let c = cosine_similarity(&a, &b).unwrap();
        assert!(c.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn probability_examples() {
        let one = SimilarityTensor::new(1, 1, vec![0.3]).unwrap();
        assert_eq!(matching_probability(&one, 50.0).unwrap().data(), &[1.0]);

        let c = SimilarityTensor::new(1, 2, vec![0.2, 0.2, 0.7, -0.1]).unwrap();
        let p = matching_probability(&c, 10.0).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);

        let c = SimilarityTensor::new(1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = matching_probability(&c, 50.0).unwrap();
        // e^-50 / (1 + e^-50)
        assert!((p.get(0, 1) - 1.928_749_847_963_918e-22).abs() < 1e-30);
        assert!((p.get(0, 0) - 1.0).abs() < 1e-15);

        assert!(matching_probability(&c, 0.0).is_err());
    }

    #[test]
    fn warp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_map(&mut rng, 2, 2, 3);
        // one-hot permutation p -> 3 - p
        let mut data = vec![0.0; 16];
        for p in 0..4 {
            data[p * 4 + (3 - p)] = 1.0;
        }
        let perm = MatchProbability::from_rows(2, 2, 1.0, data).unwrap();
        let w = soft_warp(&perm, &f).unwrap();
        for p in 0..4 {
            assert_eq!(w.at(p), f.at(3 - p));
        }

        let uni = MatchProbability::from_rows(2, 2, 1.0, vec![0.25; 16]).unwrap();
        let w = soft_warp(&uni, &f).unwrap();
        for k in 0..3 {
            let mean = (0..4).map(|q| f.at(q)[k]).sum::<f64>() / 4.0;
            for p in 0..4 {
                assert!((w.at(p)[k] - mean).abs() < 1e-12);
            }
        }

        let p = random_stochastic(&mut rng, 2, 1);
        let f = random_map(&mut rng, 2, 1, 3);
        let w = soft_warp(&p, &f).unwrap();
        for pi in 0..2 {
            for k in 0..3 {
                let mut s = 0.0;
                for q in 0..2 {
                    s += p.get(pi, q) * f.get(q, 0, k);
                }
                assert!((w.at(pi)[k] - s).abs() < 1e-12);
            }
        }

        let bad = FeatureMap::zeros(3, 1, 3);
        assert!(soft_warp(&p, &bad).is_err());
    }

    #[test]
    fn align_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_map(&mut rng, 2, 3, 4);
        let s = random_map(&mut rng, 2, 3, 4);
        let p = random_stochastic(&mut rng, 2, 3);
        let zero = align(&t, &s, &SpatialMap::filled(2, 3, 0.0), &p).unwrap();
        assert_eq!(zero, t);
        let one = align(&t, &s, &SpatialMap::filled(2, 3, 1.0), &p).unwrap();
        assert_eq!(one, soft_warp(&p, &s).unwrap());

        let uni = MatchProbability::from_rows(2, 3, 1.0, vec![1.0 / 6.0; 36]).unwrap();
        let half = align(&t, &s, &SpatialMap::filled(2, 3, 0.5), &uni).unwrap();
        for pos in 0..6 {
            for k in 0..4 {
                let mean = (0..6).map(|q| s.at(q)[k]).sum::<f64>() / 6.0;
                assert!((half.at(pos)[k] - (mean + t.at(pos)[k]) / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn co_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_stochastic(&mut rng, 3, 3);
        let ones = SpatialMap::filled(3, 3, 1.0);
        let a = co_attention(&ones, &ones, &p).unwrap();
        assert!(a.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let m = SpatialMap::new(3, 3, (0..9).map(|i| i as f64 / 8.0).collect()).unwrap();
        let a = co_attention(&SpatialMap::filled(3, 3, 0.0), &m, &p).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn top_k_caps_and_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_stochastic(&mut rng, 2, 2);
        assert_eq!(top_k_matches(&p, 1).len(), 4);
        let all = top_k_matches(&p, 100);
        assert_eq!(all.len(), 16);
        for chunk in all.chunks(4) {
            assert!(chunk.windows(2).all(|w| w[0].prob >= w[1].prob));
        }
    }

    #[test]
    fn transpose_swaps_roles() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_map(&mut rng, 2, 2, 3);
        let b = random_map(&mut rng, 2, 2, 3);
        let ab = cosine_similarity(&a, &b).unwrap();
        let ba = cosine_similarity(&b, &a).unwrap();
        for (x, y) in ab.transpose().data().iter().zip(ba.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn rows_stochastic(seed in any::<u64>(), beta in prop::sample::select(vec![1.0, 10.0, 50.0])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_map(&mut rng, 3, 2, 4);
            let b = random_map(&mut rng, 3, 2, 4);
            let p = matching_probability(&cosine_similarity(&a, &b).unwrap(), beta).unwrap();
            for pi in 0..6 {
                let s: f64 = p.row(pi).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(p.row(pi).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(seed in any::<u64>(), shift in -8i32..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // dyadic values so adding an integer shift is exact
            let data: Vec<f64> = (0..16).map(|_| rng.gen_range(-1024i32..1024) as f64 / 1024.0).collect();
            let mut shifted = data.clone();
            for v in &mut shifted[4..8] {
                *v += shift as f64;
            }
            let p = matching_probability(&SimilarityTensor::new(2, 2, data).unwrap(), 10.0).unwrap();
            let q = matching_probability(&SimilarityTensor::new(2, 2, shifted).unwrap(), 10.0).unwrap();
            let pb: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u64> = q.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(pb, qb);
        }

        #[test]
        fn warp_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_stochastic(&mut rng, 2, 3);
            let f = random_map(&mut rng, 2, 3, 4);
            let g = random_map(&mut rng, 2, 3, 4);
            let lhs = soft_warp(&p, &f.lin_comb(a, &g, b).unwrap()).unwrap();
            let rhs = soft_warp(&p, &f).unwrap().lin_comb(a, &soft_warp(&p, &g).unwrap(), b).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn argmax_consistent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_map(&mut rng, 2, 3, 5);
            let b = random_map(&mut rng, 2, 3, 5);
            let c = cosine_similarity(&a, &b).unwrap();
            let p = matching_probability(&c, 50.0).unwrap();
            for pi in 0..6 {
                prop_assert_eq!(p.argmax(pi), argmax(c.row(pi)));
            }
        }
    }
}
