//! Inspection artifacts: grey-map images of masks and match lists.

use std::fs;
use std::path::{Path, PathBuf};

use crate::cmalign::{self, Match};
use crate::cmft::CmftTensor;
use crate::error::{Error, Result};
use crate::field;
use crate::model::{Modality, TwoStreamExtractor, LAYER4, LAYER5};
use crate::tensor::SpatialMap;

/// Binary 8-bit PGM bytes, min-max scaled. A constant map becomes mid grey.
pub fn encode_pgm(map: &SpatialMap) -> Vec<u8> {
    let (lo, hi) = (map.min(), map.max());
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if hi - lo > 0.0 {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            128
        }
    }));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, map: &SpatialMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path, e))
}

/// What [`export_artifacts`] wrote.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub mask_a: PathBuf,
    pub mask_b: PathBuf,
    pub co_attention: PathBuf,
    pub matches: PathBuf,
    pub match_list: Vec<Match>,
}

/// Settings for one exported image pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchSettings {
    pub modality_a: Modality,
    pub modality_b: Modality,
    /// 4 or 5.
    pub layer: usize,
    pub k: usize,
    pub beta: f64,
}

impl Default for MatchSettings {
    fn default() -> Self {
        Self {
            modality_a: Modality::A,
            modality_b: Modality::B,
            layer: LAYER5,
            k: cmalign::DEFAULT_TOP_K,
            beta: cmalign::DEFAULT_TEMPERATURE,
        }
    }
}

/// Writes `mask_a.pgm`, `mask_b.pgm`, `co_attention.pgm` and `matches.csv`
/// into `out`. Image A is the target: matches and co-attention are for its
/// positions, warped from image B.
pub fn export_artifacts(
    ex: &TwoStreamExtractor,
    image_a: &CmftTensor,
    image_b: &CmftTensor,
    s: &MatchSettings,
    out: impl AsRef<Path>,
) -> Result<Artifacts> {
    let slot = match s.layer {
        LAYER4 => 0,
        LAYER5 => 1,
        other => return Err(Error::Config(format!("match layer must be 4 or 5, got {other}"))),
    };
    let fa = ex.forward(image_a, s.modality_a)?.swap_remove(slot);
    let fb = ex.forward(image_b, s.modality_b)?.swap_remove(slot);
    let ma = field::person_mask(&fa);
    let mb = field::person_mask(&fb);
    let c = cmalign::cosine_similarity(&fa, &fb)?;
    let p = cmalign::matching_probability(&c, s.beta)?;
    let co = cmalign::co_attention(&ma, &mb, &p)?;
    let matches = cmalign::top_k_matches(&p, s.k);

    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let art = Artifacts {
        mask_a: out.join("mask_a.pgm"),
        mask_b: out.join("mask_b.pgm"),
        co_attention: out.join("co_attention.pgm"),
        matches: out.join("matches.csv"),
        match_list: matches,
    };
    write_pgm(&art.mask_a, &ma)?;
    write_pgm(&art.mask_b, &mb)?;
    write_pgm(&art.co_attention, &co)?;
    cmalign::write_matches_csv(&art.matches, &art.match_list)?;
    Ok(art)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn constant_map_is_uniform_grey() {
        let bytes = encode_pgm(&SpatialMap::filled(2, 3, 0.7));
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[128; 6]);
    }

    #[test]
    fn ramp_spans_full_range() {
        let bytes = encode_pgm(&SpatialMap::new(1, 3, vec![-1.0, 0.0, 1.0]).unwrap());
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn identical_images_match_themselves() {
        let ex = TwoStreamExtractor::new(ModelConfig::default(), 2).unwrap();
        let img = crate::data::synthetic::render(
            &crate::data::SyntheticConfig::default(),
            &crate::data::SyntheticIdentitySpec::draw(&crate::data::SyntheticConfig::default(), 0),
            0,
            Modality::A,
        )
        .unwrap();
        let s = MatchSettings {
            modality_b: Modality::A,
            k: 1,
            ..MatchSettings::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let art = export_artifacts(&ex, &img, &img, &s, dir.path()).unwrap();
        let (h, w) = ModelConfig::default().feature_size();
        assert_eq!(art.match_list.len(), h * w);
        let f = ex.forward(&img, Modality::A).unwrap().swap_remove(1);
        let c = cmalign::cosine_similarity(&f, &f).unwrap();
        for m in &art.match_list {
            let p = m.p_row * w + m.p_col;
            let row = c.row(p);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if row.iter().filter(|&&v| v == max).count() == 1 {
                assert_eq!((m.q_row, m.q_col), (m.p_row, m.p_col));
            }
        }
        let back = cmalign::read_matches_csv(&art.matches).unwrap();
        for (a, b) in back.iter().zip(&art.match_list) {
            assert!((a.prob - b.prob).abs() < 1e-6);
        }
    }
}
