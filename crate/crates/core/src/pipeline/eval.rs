//! Cross-view retrieval evaluation.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{ensure, Result};
use crate::features::ModelInput;
use crate::losses::sequence_dist;
use crate::pipeline::model::ModelParams;

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    /// `[P × C_m]`
    pub metric: Array2<f64>,
    pub identity: usize,
    pub view: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryProbeResult {
    /// rank → fraction of counted probes whose identity is in the top `rank`
    pub rank_k_accuracy: BTreeMap<usize, f64>,
    /// per counted probe: (probe identity, nearest gallery identity, distance)
    pub per_query_nearest: Vec<(usize, usize, f64)>,
    /// probes skipped because every gallery entry shared their view
    pub excluded_probes: usize,
}

impl GalleryProbeResult {
    pub fn rank1(&self) -> f64 {
        self.rank_k_accuracy.get(&1).copied().unwrap_or(0.0)
    }
}

/// Ranks the gallery for every probe by mean-over-parts Euclidean distance,
/// ignoring gallery entries recorded under the probe's own view. Equal
/// distances keep gallery order.
pub fn rank_eval(gallery: &[GalleryEntry], probe: &[GalleryEntry], ranks: &[usize]) -> Result<GalleryProbeResult> {
    ensure!(!gallery.is_empty(), "gallery is empty");
    ensure!(ranks.iter().all(|&k| k >= 1), "ranks start at 1");
    let mut hits: BTreeMap<usize, usize> = ranks.iter().map(|&k| (k, 0)).collect();
    let mut nearest = Vec::new();
    let mut excluded = 0;
    for q in probe {
        let mut scored: Vec<(f64, usize)> = Vec::with_capacity(gallery.len());
        for (i, e) in gallery.iter().enumerate() {
            if e.view != q.view {
                scored.push((sequence_dist(&q.metric, &e.metric)?, i));
            }
        }
        if scored.is_empty() {
            excluded += 1;
            continue;
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let first_hit = scored.iter().position(|&(_, i)| gallery[i].identity == q.identity);
        for (&k, count) in hits.iter_mut() {
            if first_hit.is_some_and(|pos| pos < k) {
                *count += 1;
            }
        }
        let (d, i) = scored[0];
        nearest.push((q.identity, gallery[i].identity, d));
    }
    let counted = nearest.len();
    let rank_k_accuracy = hits
        .into_iter()
        .map(|(k, h)| (k, if counted == 0 { 0.0 } else { h as f64 / counted as f64 }))
        .collect();
    Ok(GalleryProbeResult {
        rank_k_accuracy,
        per_query_nearest: nearest,
        excluded_probes: excluded,
    })
}

pub fn embed_all(model: &ModelParams, inputs: &[ModelInput]) -> Result<Vec<GalleryEntry>> {
    inputs
        .iter()
        .map(|inp| {
            Ok(GalleryEntry {
                metric: model.embed(inp)?,
                identity: inp.identity(),
                view: inp.view(),
            })
        })
        .collect()
}

/// Embeds gallery and probe sets and evaluates ranks 1 and 5.
pub fn evaluate(model: &ModelParams, gallery: &[ModelInput], probe: &[ModelInput]) -> Result<GalleryProbeResult> {
    let g = embed_all(model, gallery)?;
    let p = embed_all(model, probe)?;
    rank_eval(&g, &p, &[1, 5])
}
