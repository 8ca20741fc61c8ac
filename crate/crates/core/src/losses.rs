//! Metric-learning objectives: mean-Euclidean sequence triplet loss, additive
//! angular margin classification loss with label smoothing, and their
//! weighted sum.
//!
//! Each loss has a direct evaluation on plain matrices and a tape version used
//! for training. The tape versions carry closed-form backward rules.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis};

use crate::error::{ensure, Result};
use crate::graph::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub triplet_margin: f64,
    pub arc_scale: f64,
    pub arc_margin: f64,
    /// weight of the classification term
    pub weight_cls: f64,
    /// weight of the triplet term
    pub weight_tri: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            triplet_margin: 0.2,
            arc_scale: 32.0,
            arc_margin: 0.3,
            weight_cls: 0.1,
            weight_tri: 1.0,
            label_smoothing: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.arc_scale > 0.0, "arc scale must be positive");
        ensure!(
            (0.0..PI / 2.0).contains(&self.arc_margin),
            "arc margin must lie in [0, π/2)"
        );
        ensure!(self.triplet_margin.is_finite(), "triplet margin must be finite");
        ensure!(
            (0.0..1.0).contains(&self.label_smoothing),
            "label smoothing must lie in [0, 1)"
        );
        ensure!(
            self.weight_cls.is_finite() && self.weight_tri.is_finite(),
            "loss weights must be finite"
        );
        Ok(())
    }
}

/// Per-sample part embeddings `[B × P × C_m]` and identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub embeddings: Array3<f64>,
    pub labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(embeddings: Array3<f64>, labels: Vec<usize>) -> Result<Self> {
        ensure!(
            embeddings.dim().0 == labels.len(),
            "{} embeddings but {} labels",
            embeddings.dim().0,
            labels.len()
        );
        Ok(EmbeddingSet { embeddings, labels })
    }

    pub fn sample(&self, i: usize) -> Array2<f64> {
        self.embeddings.index_axis(Axis(0), i).to_owned()
    }
}

/// Mean over rows of the Euclidean distance between corresponding rows.
pub fn sequence_dist(x: &Tensor, y: &Tensor) -> Result<f64> {
    ensure!(
        x.dim() == y.dim(),
        "sequence shapes differ: {:?} vs {:?}",
        x.dim(),
        y.dim()
    );
    ensure!(x.nrows() >= 1, "sequences must have at least one row");
    let total: f64 = x
        .rows()
        .into_iter()
        .zip(y.rows())
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum();
    Ok(total / x.nrows() as f64)
}

pub fn triplet_loss(anchor: &Tensor, positive: &Tensor, negative: &Tensor, margin: f64) -> Result<f64> {
    let ap = sequence_dist(anchor, positive)?;
    let an = sequence_dist(anchor, negative)?;
    Ok((ap - an + margin).max(0.0))
}

/// Result of batch-all triplet mining.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletOutcome {
    pub loss: f64,
    /// number of valid `(anchor, positive, negative)` triples
    pub triples: usize,
    /// set when the batch has fewer than two classes or no positive pairs
    pub vacuous: bool,
}

fn valid_triples(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for ng in 0..n {
                if labels[ng] != labels[a] {
                    out.push((a, p, ng));
                }
            }
        }
    }
    out
}

/// Batch-all triplet loss: the mean hinge over every valid triple, zero-loss
/// triples included.
pub fn batch_triplet(set: &EmbeddingSet, margin: f64) -> Result<TripletOutcome> {
    let n = set.labels.len();
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sequence_dist(&set.sample(i), &set.sample(j))?;
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let triples = valid_triples(&set.labels);
    if triples.is_empty() {
        return Ok(TripletOutcome {
            loss: 0.0,
            triples: 0,
            vacuous: true,
        });
    }
    let total: f64 = triples
        .iter()
        .map(|&(a, p, ng)| (dist[[a, p]] - dist[[a, ng]] + margin).max(0.0))
        .sum();
    Ok(TripletOutcome {
        loss: total / triples.len() as f64,
        triples: triples.len(),
        vacuous: false,
    })
}

fn check_rows_nonzero(m: &Tensor, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        ensure!(row.dot(&row) > 0.0, "{what} row {i} has zero norm");
    }
    Ok(())
}

/// Target logit with the additive angular margin, before scaling.
///
/// Past `θ = π - m` the margin term stops being monotone; there the linear
/// fallback `cos θ - m·sin m` is used.
pub fn margin_cosine(cos: f64, margin: f64) -> f64 {
    if cos > (PI - margin).cos() {
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        cos * margin.cos() - sin * margin.sin()
    } else {
        cos - margin * margin.sin()
    }
}

fn margin_cosine_grad(cos: f64, margin: f64) -> f64 {
    if cos > (PI - margin).cos() {
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        if sin == 0.0 {
            // cos = 1: the one-sided derivative diverges unless the margin is zero
            return if margin == 0.0 { 1.0 } else { f64::INFINITY };
        }
        margin.cos() + cos * margin.sin() / sin
    } else {
        1.0
    }
}

fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Array2<f64> {
    let mut q = Array2::from_elem((labels.len(), classes), eps / classes as f64);
    for (i, &y) in labels.iter().enumerate() {
        q[[i, y]] += 1.0 - eps;
    }
    q
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    ensure!(labels.len() == batch, "{} labels for {} samples", labels.len(), batch);
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(crate::error::TpaError::domain(format!(
            "label {bad} is out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Additive angular margin loss with label smoothing, averaged over the batch.
pub fn arcface_loss(
    features: &Tensor,
    class_weights: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<f64> {
    ensure!(
        features.ncols() == class_weights.ncols(),
        "feature width {} differs from class weight width {}",
        features.ncols(),
        class_weights.ncols()
    );
    ensure!(features.nrows() >= 1, "empty batch");
    check_labels(labels, features.nrows(), class_weights.nrows())?;
    check_rows_nonzero(features, "feature")?;
    check_rows_nonzero(class_weights, "class weight")?;

    let n = class_weights.nrows();
    let q = smoothed_targets(labels, n, cfg.label_smoothing);
    let mut total = 0.0;
    for (i, f) in features.rows().into_iter().enumerate() {
        let fnorm = f.dot(&f).sqrt();
        let logits: Vec<f64> = class_weights
            .rows()
            .into_iter()
            .enumerate()
            .map(|(j, w)| {
                let cos = f.dot(&w) / (fnorm * w.dot(&w).sqrt());
                let c = if j == labels[i] { margin_cosine(cos, cfg.arc_margin) } else { cos };
                cfg.arc_scale * c
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += logits.iter().enumerate().map(|(j, z)| q[[i, j]] * (lse - z)).sum::<f64>();
    }
    Ok(total / features.nrows() as f64)
}

pub fn combined_loss(cls: f64, tri: f64, cfg: &LossConfig) -> f64 {
    cfg.weight_cls * cls + cfg.weight_tri * tri
}

// ---------------------------------------------------------------------------
// tape versions

pub fn sequence_dist_graph(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    ensure!(
        g.value(x).dim() == g.value(y).dim(),
        "sequence shapes differ: {:?} vs {:?}",
        g.value(x).dim(),
        g.value(y).dim()
    );
    let d = g.sub(x, y);
    let n = g.row_norms(d);
    Ok(g.mean_all(n))
}

pub fn triplet_loss_graph(g: &mut Graph, a: Var, p: Var, n: Var, margin: f64) -> Result<Var> {
    let ap = sequence_dist_graph(g, a, p)?;
    let an = sequence_dist_graph(g, a, n)?;
    let diff = g.sub(ap, an);
    let m = g.constant(Tensor::from_elem((1, 1), margin));
    let z = g.add(diff, m);
    Ok(g.relu(z))
}

/// Batch-all triplet loss over per-sample `[P × C_m]` embeddings.
///
/// Returns the scalar loss variable (zero constant when vacuous) and the outcome.
pub fn batch_triplet_graph(
    g: &mut Graph,
    embeddings: &[Var],
    labels: &[usize],
    margin: f64,
) -> Result<(Var, TripletOutcome)> {
    let n = embeddings.len();
    ensure!(n == labels.len(), "{} embeddings but {} labels", n, labels.len());
    let triples = valid_triples(labels);
    if triples.is_empty() {
        let zero = g.constant(Tensor::zeros((1, 1)));
        return Ok((
            zero,
            TripletOutcome {
                loss: 0.0,
                triples: 0,
                vacuous: true,
            },
        ));
    }
    // pairwise distances laid out as one row, pair (i<j) at slot pair_index
    let mut pair_slot = Array2::<usize>::zeros((n, n));
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pair_slot[[i, j]] = dists.len();
            pair_slot[[j, i]] = dists.len();
            dists.push(sequence_dist_graph(g, embeddings[i], embeddings[j])?);
        }
    }
    let row = g.concat_cols(&dists);
    let idx: Vec<(usize, usize)> = triples
        .iter()
        .map(|&(a, p, ng)| (pair_slot[[a, p]], pair_slot[[a, ng]]))
        .collect();
    let d = g.value(row);
    let count = idx.len() as f64;
    let active: Vec<bool> = idx.iter().map(|&(ap, an)| d[[0, ap]] - d[[0, an]] + margin > 0.0).collect();
    let loss: f64 = idx
        .iter()
        .map(|&(ap, an)| (d[[0, ap]] - d[[0, an]] + margin).max(0.0))
        .sum::<f64>()
        / count;
    let width = dists.len();
    let out = g.custom(
        &[row],
        Tensor::from_elem((1, 1), loss),
        Box::new(move |gout, _, _| {
            let mut gr = Tensor::zeros((1, width));
            let k = gout[[0, 0]] / count;
            for (&(ap, an), &on) in idx.iter().zip(active.iter()) {
                if on {
                    gr[[0, ap]] += k;
                    gr[[0, an]] -= k;
                }
            }
            vec![gr]
        }),
    );
    Ok((
        out,
        TripletOutcome {
            loss,
            triples: triples.len(),
            vacuous: false,
        },
    ))
}

/// Tape version of [`arcface_loss`]; `features: [B × C_m]`, `class_weights: [n × C_m]`.
pub fn arcface_loss_graph(
    g: &mut Graph,
    features: Var,
    class_weights: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let (b, cm) = g.value(features).dim();
    let (n, cw) = g.value(class_weights).dim();
    ensure!(cm == cw, "feature width {cm} differs from class weight width {cw}");
    ensure!(b >= 1, "empty batch");
    check_labels(labels, b, n)?;
    check_rows_nonzero(g.value(features), "feature")?;
    check_rows_nonzero(g.value(class_weights), "class weight")?;

    let fnorm = g.normalize_rows(features);
    let wnorm = g.normalize_rows(class_weights);
    let cos = g.matmul_bt(fnorm, wnorm);

    // margin on the target entries, then scale
    let m = cfg.arc_margin;
    let s = cfg.arc_scale;
    let lab = labels.to_vec();
    let cos_val = g.value(cos).clone();
    let mut logits = cos_val.clone();
    for (i, &y) in lab.iter().enumerate() {
        logits[[i, y]] = margin_cosine(cos_val[[i, y]], m);
    }
    logits *= s;
    let lab_b = lab.clone();
    let logits = g.custom(
        &[cos],
        logits,
        Box::new(move |gout, inputs, _| {
            let mut gr = gout * s;
            for (i, &y) in lab_b.iter().enumerate() {
                gr[[i, y]] *= margin_cosine_grad(inputs[0][[i, y]], m);
            }
            vec![gr]
        }),
    );

    // smoothed cross-entropy, mean over rows
    let q = smoothed_targets(&lab, n, cfg.label_smoothing);
    let z = g.value(logits);
    let mut probs = z.clone();
    let mut total = 0.0;
    for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += row.iter().enumerate().map(|(j, v)| q[[i, j]] * (lse - v)).sum::<f64>();
        row.mapv_inplace(|v| (v - lse).exp());
    }
    let batch = b as f64;
    Ok(g.custom(
        &[logits],
        Tensor::from_elem((1, 1), total / batch),
        Box::new(move |gout, _, _| vec![(&probs - &q) * (gout[[0, 0]] / batch)]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{normal_matrix, seeded_rng};
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn distance_examples() {
        let x = array![[0.0, 0.0]];
        let y = array![[3.0, 4.0]];
        assert_eq!(sequence_dist(&x, &y).unwrap(), 5.0);
        assert_eq!(sequence_dist(&x, &x).unwrap(), 0.0);
        let a = array![[1.0, 1.0], [2.0, 2.0]];
        let b = array![[2.0, 1.0], [2.0, 4.0]];
        assert_eq!(sequence_dist(&a, &b).unwrap(), 1.5);
        assert!(sequence_dist(&a, &x).is_err());
    }

    #[test]
    fn triplet_examples() {
        // 1-D single-row sequences place the distances exactly
        let a = array![[0.0]];
        assert_eq!(triplet_loss(&a, &array![[0.1]], &array![[0.5]], 0.2).unwrap(), 0.0);
        let v = triplet_loss(&a, &array![[0.4]], &array![[0.3]], 0.2).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        assert_eq!(triplet_loss(&a, &a, &a, 0.2).unwrap(), 0.2);
    }

    #[test]
    fn combined_examples() {
        let cfg = LossConfig::default();
        assert!((combined_loss(1.0, 1.0, &cfg) - 1.1).abs() < 1e-15);
        assert_eq!(combined_loss(0.0, 0.0, &cfg), 0.0);
        let half = LossConfig { weight_cls: 0.5, weight_tri: 0.5, ..cfg };
        assert_eq!(combined_loss(2.0, 3.0, &half), 2.5);
    }

    #[test]
    fn vacuous_batches() {
        let set = EmbeddingSet::new(Array3::zeros((2, 1, 2)), vec![0, 1]).unwrap();
        let out = batch_triplet(&set, 0.2).unwrap();
        assert!(out.vacuous);
        assert_eq!(out.loss, 0.0);
        let single = EmbeddingSet::new(Array3::zeros((3, 1, 2)), vec![4, 4, 4]).unwrap();
        assert!(batch_triplet(&single, 0.2).unwrap().vacuous);
    }

    #[test]
    fn well_separated_batch_is_zero() {
        let e = Array3::from_shape_vec((4, 1, 1), vec![0.0, 0.1, 5.0, 5.1]).unwrap();
        let set = EmbeddingSet::new(e, vec![0, 0, 1, 1]).unwrap();
        let out = batch_triplet(&set, 0.2).unwrap();
        assert_eq!(out.triples, 8);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn arcface_reduces_to_softmax_ce() {
        let mut rng = seeded_rng(1, 0);
        let f = normal_matrix(&mut rng, 5, 4, 1.0);
        let w = normal_matrix(&mut rng, 3, 4, 1.0);
        let labels = [0, 2, 1, 1, 0];
        let cfg = LossConfig { arc_scale: 1.0, arc_margin: 0.0, label_smoothing: 0.0, ..Default::default() };
        let got = arcface_loss(&f, &w, &labels, &cfg).unwrap();
        let mut expect = 0.0;
        for i in 0..5 {
            let fi = f.row(i);
            let logits: Vec<f64> = (0..3)
                .map(|j| fi.dot(&w.row(j)) / (fi.dot(&fi).sqrt() * w.row(j).dot(&w.row(j)).sqrt()))
                .collect();
            let denom: f64 = logits.iter().map(|z| z.exp()).sum();
            expect -= (logits[labels[i]].exp() / denom).ln();
        }
        expect /= 5.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn arcface_aligned_two_class_closed_form() {
        let f = array![[1.0, 0.0]];
        let w = array![[2.0, 0.0], [0.0, 3.0]];
        let cfg = LossConfig { label_smoothing: 0.0, ..Default::default() };
        let got = arcface_loss(&f, &w, &[0], &cfg).unwrap();
        let t = (32.0 * 0.3f64.cos()).exp();
        let expect = -(t / (t + 1.0)).ln();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn arcface_small_scale_tends_to_log_classes() {
        let mut rng = seeded_rng(2, 0);
        let f = normal_matrix(&mut rng, 4, 6, 1.0);
        let w = normal_matrix(&mut rng, 7, 6, 1.0);
        let cfg = LossConfig { arc_scale: 1e-9, ..Default::default() };
        let got = arcface_loss(&f, &w, &[0, 1, 2, 6], &cfg).unwrap();
        assert!((got - 7f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn arcface_rejects_zero_rows_and_bad_labels() {
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let cfg = LossConfig::default();
        assert!(arcface_loss(&array![[0.0, 0.0]], &w, &[0], &cfg).is_err());
        assert!(arcface_loss(&array![[1.0, 0.0]], &array![[0.0, 0.0], [1.0, 0.0]], &[0], &cfg).is_err());
        assert!(arcface_loss(&array![[1.0, 0.0]], &w, &[2], &cfg).is_err());
    }

    #[test]
    fn margin_fallback_is_continuous_and_monotone() {
        let m = 0.3;
        let edge = (PI - m).cos();
        let left = margin_cosine(edge - 1e-12, m);
        let right = margin_cosine(edge + 1e-12, m);
        // the two branches meet at θ = π - m: cos(π) = -1 vs cos(π-m) - m sin m
        assert!(left < right);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let c = -1.0 + 2.0 * i as f64 / 1000.0;
            let v = margin_cosine(c, m);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn graph_versions_match_direct() {
        let mut rng = seeded_rng(3, 0);
        let cfg = LossConfig::default();
        let f = normal_matrix(&mut rng, 6, 5, 1.0);
        let w = normal_matrix(&mut rng, 4, 5, 1.0);
        let labels = [0, 1, 2, 3, 1, 0];
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let wv = g.constant(w.clone());
        let l = arcface_loss_graph(&mut g, fv, wv, &labels, &cfg).unwrap();
        assert!((g.scalar(l) - arcface_loss(&f, &w, &labels, &cfg).unwrap()).abs() < 1e-12);

        let e = normal_matrix(&mut rng, 6, 3 * 2, 1.0).into_shape_with_order((6, 3, 2)).unwrap();
        let set = EmbeddingSet::new(e.clone(), vec![0, 0, 1, 1, 2, 2]).unwrap();
        let vars: Vec<Var> = (0..6).map(|i| g.constant(set.sample(i))).collect();
        let (tv, out) = batch_triplet_graph(&mut g, &vars, &set.labels, 0.7).unwrap();
        let direct = batch_triplet(&set, 0.7).unwrap();
        assert!((g.scalar(tv) - direct.loss).abs() < 1e-12);
        assert_eq!(out.triples, direct.triples);
    }

    fn rotation(theta: f64) -> Tensor {
        array![[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]]
    }

    proptest! {
        #[test]
        fn distance_triangle_inequality(
            a in prop::collection::vec(-3.0f64..3.0, 6),
            b in prop::collection::vec(-3.0f64..3.0, 6),
            c in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let m = |v: &Vec<f64>| Array2::from_shape_vec((3, 2), v.clone()).unwrap();
            let (x, y, z) = (m(&a), m(&b), m(&c));
            let xy = sequence_dist(&x, &y).unwrap();
            let yz = sequence_dist(&y, &z).unwrap();
            let xz = sequence_dist(&x, &z).unwrap();
            prop_assert!(xz <= xy + yz + 1e-12);
            prop_assert!((xy - sequence_dist(&y, &x).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn triplet_rigid_invariance(
            a in prop::collection::vec(-3.0f64..3.0, 6),
            p in prop::collection::vec(-3.0f64..3.0, 6),
            n in prop::collection::vec(-3.0f64..3.0, 6),
            theta in 0.0f64..6.28,
            tx in -5.0f64..5.0,
            ty in -5.0f64..5.0,
        ) {
            let m = |v: &Vec<f64>| Array2::from_shape_vec((3, 2), v.clone()).unwrap();
            let r = rotation(theta);
            let shift = array![[tx, ty]];
            let tr = |x: &Tensor| x.dot(&r.t()) + &shift;
            let base = triplet_loss(&m(&a), &m(&p), &m(&n), 0.5).unwrap();
            let moved = triplet_loss(&tr(&m(&a)), &tr(&m(&p)), &tr(&m(&n)), 0.5).unwrap();
            prop_assert!((base - moved).abs() < 1e-10);
        }

        #[test]
        fn arcface_scale_invariance(
            fs in prop::collection::vec(0.1f64..10.0, 3),
            ws in prop::collection::vec(0.1f64..10.0, 4),
            seed in 0u64..1000,
        ) {
            let mut rng = seeded_rng(seed, 0);
            let f = normal_matrix(&mut rng, 3, 5, 1.0);
            let w = normal_matrix(&mut rng, 4, 5, 1.0);
            let cfg = LossConfig::default();
            let labels = [0, 3, 1];
            let mut f2 = f.clone();
            for (i, mut row) in f2.rows_mut().into_iter().enumerate() { row *= fs[i]; }
            let mut w2 = w.clone();
            for (i, mut row) in w2.rows_mut().into_iter().enumerate() { row *= ws[i]; }
            let a = arcface_loss(&f, &w, &labels, &cfg).unwrap();
            let b = arcface_loss(&f2, &w2, &labels, &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn arcface_monotone_in_target_cosine(c1 in -0.99f64..0.99, dc in 0.001f64..0.5) {
            // one sample, two classes; the other class logit is held at cos = 0
            let c2 = (c1 + dc).min(0.999);
            let cfg = LossConfig { arc_margin: 0.0, label_smoothing: 0.0, ..Default::default() };
            let w = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
            let feat = |c: f64| array![[c, (1.0 - c * c).sqrt(), 0.0]];
            let a = arcface_loss(&feat(c1), &w, &[0], &cfg).unwrap();
            let b = arcface_loss(&feat(c2), &w, &[0], &cfg).unwrap();
            prop_assert!(b <= a);
        }
    }
}
