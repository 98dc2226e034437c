//! Target-domain re-ID evaluation: Euclidean ranking, CMC and mAP, plus the
//! pose-consistency diagnostic.

mod pose;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use autograd::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::{DomainData, PersonImage};
use crate::error::{ensure, Result};
use crate::networks::Model;

pub use pose::{pose_consistency, pose_consistency_with, sample_probes, Probe, ProbeSpec, POSE_TOLERANCE};

/// Gallery order for one query, nearest first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub indices: Vec<usize>,
    /// Euclidean distance of each entry of `indices`.
    pub distances: Vec<f64>,
}

/// Content features of `images`, one row each.
pub fn extract_features(model: &Model, images: &[&PersonImage]) -> Result<Tensor<f32>> {
    model.encode_content(images)
}

fn check_features<T: Scalar>(name: &str, t: &Tensor<T>) -> Result<()> {
    ensure!(t.shape().len() == 2, "{name} features must be [N, d], got {:?}", t.shape());
    ensure!(t.all_finite(), "{name} features contain non-finite values");
    Ok(())
}

/// Sorts the gallery by Euclidean distance to each query. Ties go to the
/// lower gallery index.
pub fn rank_gallery<T: Scalar>(queries: &Tensor<T>, gallery: &Tensor<T>) -> Result<Vec<RankedList>> {
    check_features("query", queries)?;
    check_features("gallery", gallery)?;
    ensure!(gallery.shape()[0] > 0, "empty gallery");
    let d = gallery.shape()[1];
    ensure!(queries.shape()[1] == d, "query features have {} dims but gallery features {d}", queries.shape()[1]);
    let g: Vec<Vec<f64>> = gallery.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
    Ok(queries
        .data()
        .chunks(d.max(1))
        .take(queries.shape()[0])
        .map(|q| {
            let q: Vec<f64> = q.iter().map(|v| v.as_f64()).collect();
            let sq: Vec<f64> = g.iter().map(|r| r.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
            let mut indices: Vec<usize> = (0..g.len()).collect();
            indices.sort_by(|&a, &b| sq[a].total_cmp(&sq[b]).then(a.cmp(&b)));
            let distances = indices.iter().map(|&i| sq[i].sqrt()).collect();
            RankedList { indices, distances }
        })
        .collect())
}

fn check_labels(ranked: &[RankedList], query_labels: &[u32], gallery_labels: &[u32]) -> Result<()> {
    ensure!(!ranked.is_empty(), "no queries");
    ensure!(ranked.len() == query_labels.len(), "{} ranked lists but {} query labels", ranked.len(), query_labels.len());
    for r in ranked {
        ensure!(r.indices.len() == gallery_labels.len(), "ranked list does not cover the {} gallery labels", gallery_labels.len());
    }
    Ok(())
}

/// Fraction of queries with a same-identity gallery item in the top `k`.
pub fn cmc(ranked: &[RankedList], query_labels: &[u32], gallery_labels: &[u32], k: usize) -> Result<f64> {
    check_labels(ranked, query_labels, gallery_labels)?;
    ensure!(k >= 1 && k <= gallery_labels.len(), "k = {k} outside 1..={}", gallery_labels.len());
    let hits = ranked
        .iter()
        .zip(query_labels)
        .filter(|(r, &q)| r.indices[..k].iter().any(|&i| gallery_labels[i] == q))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

/// Per-query average precision: the mean over relevant items of
/// `(relevant items so far) / rank`.
pub fn average_precisions(ranked: &[RankedList], query_labels: &[u32], gallery_labels: &[u32]) -> Result<Vec<f64>> {
    check_labels(ranked, query_labels, gallery_labels)?;
    ranked
        .iter()
        .zip(query_labels)
        .enumerate()
        .map(|(qi, (r, &q))| {
            let mut found = 0usize;
            let mut sum = 0.0;
            for (pos, &i) in r.indices.iter().enumerate() {
                if gallery_labels[i] == q {
                    found += 1;
                    sum += found as f64 / (pos + 1) as f64;
                }
            }
            ensure!(found > 0, "query {qi} (identity {q}) has no match in the gallery");
            Ok(sum / found as f64)
        })
        .collect()
}

pub fn mean_average_precision(ranked: &[RankedList], query_labels: &[u32], gallery_labels: &[u32]) -> Result<f64> {
    let ap = average_precisions(ranked, query_labels, gallery_labels)?;
    Ok(ap.iter().sum::<f64>() / ap.len() as f64)
}

/// Rank-k accuracies, mAP and optional diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    pub queries: usize,
    pub gallery: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, f64>,
}

pub const REPORT_KS: [usize; 3] = [1, 5, 10];

impl EvalReport {
    /// Ranks are clamped to the gallery size.
    pub fn from_features<T: Scalar>(
        queries: &Tensor<T>,
        gallery: &Tensor<T>,
        query_labels: &[u32],
        gallery_labels: &[u32],
    ) -> Result<Self> {
        ensure!(queries.shape().first() == Some(&query_labels.len()), "query features and labels differ in count");
        ensure!(gallery.shape().first() == Some(&gallery_labels.len()), "gallery features and labels differ in count");
        let ranked = rank_gallery(queries, gallery)?;
        let n = gallery_labels.len();
        let [rank1, rank5, rank10] = REPORT_KS.map(|k| cmc(&ranked, query_labels, gallery_labels, k.min(n)));
        let per_query_ap = average_precisions(&ranked, query_labels, gallery_labels)?;
        Ok(Self {
            rank1: rank1?,
            rank5: rank5?,
            rank10: rank10?,
            map: per_query_ap.iter().sum::<f64>() / per_query_ap.len() as f64,
            per_query_ap,
            queries: query_labels.len(),
            gallery: n,
            diagnostics: BTreeMap::new(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One row per `(label, report)` with Rank-1/5/10 and mAP in percent.
    pub fn table(rows: &[(&str, &EvalReport)]) -> String {
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>7}  {:>6}\n", "method", "Rank-1", "Rank-5", "Rank-10", "mAP");
        for (label, r) in rows {
            let pct = |v: f64| format!("{:.1}", 100.0 * v);
            let _ = writeln!(
                out,
                "{label:<width$}  {:>6}  {:>6}  {:>7}  {:>6}",
                pct(r.rank1),
                pct(r.rank5),
                pct(r.rank10),
                pct(r.map)
            );
        }
        out
    }
}

/// Query and gallery indices into one domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// The first `per_identity` images of every identity become queries and the
/// rest the gallery.
pub fn split_domain(data: &DomainData, per_identity: usize) -> Result<Split> {
    ensure!(per_identity >= 1, "need at least one query per identity");
    let mut split = Split { queries: Vec::new(), gallery: Vec::new() };
    for (id, idx) in data.groups() {
        ensure!(
            idx.len() > per_identity,
            "identity {id} has {} images; {per_identity} queries leave no gallery match",
            idx.len()
        );
        split.queries.extend(&idx[..per_identity]);
        split.gallery.extend(&idx[per_identity..]);
    }
    split.queries.sort_unstable();
    split.gallery.sort_unstable();
    Ok(split)
}

pub const QUERIES_PER_IDENTITY: usize = 2;

fn labels(data: &DomainData, idx: &[usize]) -> Vec<u32> {
    idx.iter().map(|&i| data.identity(i)).collect()
}

fn rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let parts: Vec<Tensor<T>> = idx.iter().map(|&i| t.rows(i, 1)).collect();
    Tensor::cat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Evaluates per-image features of a whole domain under `split`.
pub fn evaluate_features<T: Scalar>(features: &Tensor<T>, data: &DomainData, split: &Split) -> Result<EvalReport> {
    ensure!(
        features.shape().first() == Some(&data.len()),
        "{} feature rows for {} images",
        features.shape().first().copied().unwrap_or(0),
        data.len()
    );
    ensure!(!split.gallery.is_empty(), "empty gallery");
    ensure!(!split.queries.is_empty(), "no queries");
    EvalReport::from_features(
        &rows(features, &split.queries),
        &rows(features, &split.gallery),
        &labels(data, &split.queries),
        &labels(data, &split.gallery),
    )
}

/// Encodes every image of `data` with `E_C` and evaluates the standard split.
pub fn evaluate_model(model: &Model, data: &DomainData) -> Result<EvalReport> {
    let split = split_domain(data, QUERIES_PER_IDENTITY)?;
    let images: Vec<&PersonImage> = data.images().iter().collect();
    let features = extract_features(model, &images)?;
    evaluate_features(&features, data, &split)
}

/// One-hot identity features: the ceiling every metric reaches.
pub fn oracle_features(data: &DomainData) -> Tensor<f64> {
    let ids = data.identity_list();
    let mut out = vec![0.0; data.len() * ids.len()];
    for i in 0..data.len() {
        let col = ids.binary_search(&data.identity(i)).expect("listed identity");
        out[i * ids.len() + col] = 1.0;
    }
    Tensor::from_vec(vec![data.len(), ids.len()], out).expect("shape")
}

/// Independent standard-normal features, one row per image.
pub fn gaussian_features(rows: usize, dim: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(vec![rows, dim], data).expect("shape")
}
