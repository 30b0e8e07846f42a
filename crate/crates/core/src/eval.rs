//! Descriptor extraction and cross-modal retrieval metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Modality, TwoStreamExtractor};
use crate::tensor::PersonDescriptor;

/// Number of CMC ranks reported.
pub const CMC_RANKS: usize = 10;

const EXTRACT_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    #[serde(rename = "mAP")]
    pub m_ap: f64,
    /// `cmc[k - 1]` is the fraction of queries with a positive in the top `k`.
    pub cmc: Vec<f64>,
    #[serde(skip)]
    pub per_query_ap: Vec<f64>,
    pub excluded_queries: usize,
}

/// Query or gallery direction of an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Modality B queries against a modality A gallery.
    B2a,
    /// Modality A queries against a modality B gallery.
    A2b,
}

impl Direction {
    /// `(query, gallery)` modalities.
    pub fn modalities(self) -> (Modality, Modality) {
        match self {
            Direction::B2a => (Modality::B, Modality::A),
            Direction::A2b => (Modality::A, Modality::B),
        }
    }
}

/// GeM-pooled final-layer descriptors of every `modality` image whose
/// identity is in `ids`, in manifest order. Values are rounded to `f32`
/// so they survive a CMFT dump unchanged.
pub fn extract_descriptors(
    ex: &TwoStreamExtractor,
    ds: &Dataset,
    modality: Modality,
    ids: &[usize],
) -> Result<Vec<(usize, PersonDescriptor)>> {
    let idx = ds.indices(modality, ids);
    let chunks: Vec<&[usize]> = idx.chunks(EXTRACT_CHUNK).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let imgs: Vec<_> = chunk.iter().map(|&i| &ds.images[i]).collect();
            ex.descriptors(&imgs, modality)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(idx
        .iter()
        .zip(parts.into_iter().flatten())
        .map(|(&i, d)| {
            let rounded = d.0.iter().map(|&v| v as f32 as f64).collect();
            (ds.entries[i].identity, PersonDescriptor(rounded))
        })
        .collect())
}

/// Average precision of one ranking: mean precision at each positive's rank.
pub fn average_precision(is_positive: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &p) in is_positive.iter().enumerate() {
        if p {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Ranks the gallery for each query by descending cosine similarity, ties
/// by gallery index, and reports mAP and CMC@1..10. Queries without any
/// gallery positive are skipped and counted.
pub fn evaluate_retrieval(
    queries: &[(usize, PersonDescriptor)],
    gallery: &[(usize, PersonDescriptor)],
) -> Result<RetrievalResult> {
    if gallery.is_empty() {
        return Err(Error::Config("retrieval gallery is empty".into()));
    }
    let d = gallery[0].1.channels();
    if let Some((_, bad)) = queries.iter().chain(gallery).find(|(_, x)| x.channels() != d) {
        return Err(Error::dim("evaluate_retrieval", &[d], &[bad.channels()]));
    }
    let per_query: Vec<Option<(f64, usize)>> = queries
        .par_iter()
        .map(|(label, q)| {
            let mut order: Vec<(f64, usize)> = gallery.iter().enumerate().map(|(j, (_, g))| (q.cosine(g), j)).collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let hits: Vec<bool> = order.iter().map(|&(_, j)| gallery[j].0 == *label).collect();
            let first = hits.iter().position(|&h| h)?;
            Some((average_precision(&hits)?, first))
        })
        .collect();
    let kept: Vec<(f64, usize)> = per_query.iter().flatten().copied().collect();
    let excluded = per_query.len() - kept.len();
    if kept.is_empty() {
        return Ok(RetrievalResult {
            m_ap: 0.0,
            cmc: vec![0.0; CMC_RANKS],
            per_query_ap: Vec::new(),
            excluded_queries: excluded,
        });
    }
    let n = kept.len() as f64;
    let cmc = (1..=CMC_RANKS)
        .map(|k| kept.iter().filter(|&&(_, first)| first < k).count() as f64 / n)
        .collect();
    let per_query_ap: Vec<f64> = kept.iter().map(|&(ap, _)| ap).collect();
    Ok(RetrievalResult {
        m_ap: per_query_ap.iter().sum::<f64>() / n,
        cmc,
        per_query_ap,
        excluded_queries: excluded,
    })
}
