//! Mini-batch training with the combined metric objective.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{ensure, Result};
use crate::features::ModelInput;
use crate::graph::{Graph, Tensor, Var};
use crate::losses::{arcface_loss_graph, batch_triplet_graph, LossConfig};
use crate::nn::{seeded_rng, Parameters, SeedRng};
use crate::optim::{AdamW, Schedule};
use crate::pipeline::eval::{evaluate, GalleryProbeResult};
use crate::pipeline::model::{BatchGraph, ModelParams};
use crate::pipeline::sampling::{tsn_sample, SampleMode};
use crate::run::MetricRow;
use crate::synth::Corpus;

const BATCH_STREAM: u64 = 20;

pub struct TrainOutcome {
    pub model: ModelParams,
    pub log: Vec<MetricRow>,
    /// held-out evaluation after the last step, when a gallery exists
    pub final_eval: Option<GalleryProbeResult>,
}

/// Loss terms of one batch.
pub struct BatchLoss {
    pub total: Var,
    pub cls: f64,
    pub tri: f64,
    pub graph: BatchGraph,
}

/// Records the combined loss of a labelled batch (batch statistics in the heads).
pub fn batch_loss(
    g: &mut Graph,
    model: &ModelParams,
    inputs: &[&ModelInput],
    labels: &[usize],
    indexes: &[Vec<usize>],
    loss: &LossConfig,
) -> Result<BatchLoss> {
    let graph = model.batch_graph(g, inputs, indexes, true)?;
    let mut cls_terms = Vec::with_capacity(model.heads.len());
    for (head, &metric) in model.heads.iter().zip(&graph.part_metric) {
        let w = g.param(&head.classifier);
        cls_terms.push(arcface_loss_graph(g, metric, w, labels, loss)?);
    }
    let cls_sum = if cls_terms.len() == 1 { cls_terms[0] } else { g.concat_cols(&cls_terms) };
    let cls = g.mean_all(cls_sum);
    let (tri, _) = batch_triplet_graph(g, &graph.sample_metric, labels, loss.triplet_margin)?;
    let a = g.scale(cls, loss.weight_cls);
    let b = g.scale(tri, loss.weight_tri);
    let total = g.add(a, b);
    Ok(BatchLoss {
        total,
        cls: g.scalar(cls),
        tri: g.scalar(tri),
        graph,
    })
}

/// A labelled batch: input positions in the corpus, labels, and sampled frames.
pub struct Batch {
    pub members: Vec<usize>,
    pub labels: Vec<usize>,
    pub indexes: Vec<Vec<usize>>,
}

struct BatchSampler {
    by_label: Vec<Vec<usize>>,
    ids_per_batch: usize,
    seqs_per_id: usize,
    seq_frames: usize,
}

impl BatchSampler {
    fn new(corpus: &Corpus, cfg: &RunConfig) -> Result<(Self, Vec<usize>)> {
        ensure!(!corpus.train.is_empty(), "the training set is empty");
        let label_of: BTreeMap<usize, usize> = corpus
            .train_identities
            .iter()
            .enumerate()
            .map(|(label, ident)| (ident.id, label))
            .collect();
        let mut by_label = vec![Vec::new(); corpus.classes()];
        let mut labels = Vec::with_capacity(corpus.train.len());
        for (i, s) in corpus.train.iter().enumerate() {
            let label = *label_of
                .get(&s.identity())
                .ok_or_else(|| crate::error::TpaError::domain(format!("identity {} has no label", s.identity())))?;
            by_label[label].push(i);
            labels.push(label);
        }
        Ok((
            BatchSampler {
                by_label,
                ids_per_batch: cfg.ids_per_batch,
                seqs_per_id: cfg.seqs_per_id,
                seq_frames: cfg.seq_frames,
            },
            labels,
        ))
    }

    fn draw(&self, rng: &mut SeedRng, corpus: &Corpus) -> Result<Batch> {
        let present: Vec<usize> = (0..self.by_label.len()).filter(|&l| !self.by_label[l].is_empty()).collect();
        let k = self.ids_per_batch.min(present.len());
        let mut members = Vec::new();
        let mut labels = Vec::new();
        for pick in sample(rng, present.len(), k).into_vec() {
            let label = present[pick];
            let pool = &self.by_label[label];
            let chosen: Vec<usize> = if pool.len() >= self.seqs_per_id {
                sample(rng, pool.len(), self.seqs_per_id).into_vec()
            } else {
                (0..self.seqs_per_id).map(|_| rng.random_range(0..pool.len())).collect()
            };
            for c in chosen {
                members.push(pool[c]);
                labels.push(label);
            }
        }
        let indexes = members
            .iter()
            .map(|&m| tsn_sample(corpus.train[m].len(), self.seq_frames, SampleMode::Train, rng.random()))
            .collect::<Result<_>>()?;
        Ok(Batch {
            members,
            labels,
            indexes,
        })
    }
}

/// The batch the training loop would draw first for `cfg.seed`.
pub fn first_batch(corpus: &Corpus, cfg: &RunConfig) -> Result<Batch> {
    let (sampler, _) = BatchSampler::new(corpus, cfg)?;
    sampler.draw(&mut seeded_rng(cfg.seed, BATCH_STREAM), corpus)
}

/// Combined loss value of `batch` under `model`.
pub fn batch_loss_value(model: &ModelParams, corpus: &Corpus, batch: &Batch, loss: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let inputs: Vec<&ModelInput> = batch.members.iter().map(|&m| &corpus.train[m]).collect();
    let l = batch_loss(&mut g, model, &inputs, &batch.labels, &batch.indexes, loss)?;
    Ok(g.scalar(l.total))
}

/// Trains a freshly initialized model on `corpus.train`.
pub fn train_toy(corpus: &Corpus, cfg: &RunConfig) -> Result<TrainOutcome> {
    let model = ModelParams::init(cfg, corpus.classes())?;
    train_model(model, corpus, cfg)
}

/// Continues training `model`. Deterministic for a fixed configuration.
pub fn train_model(mut model: ModelParams, corpus: &Corpus, cfg: &RunConfig) -> Result<TrainOutcome> {
    let (sampler, _) = BatchSampler::new(corpus, cfg)?;
    let loss_cfg = cfg.loss();
    loss_cfg.validate()?;
    let schedule = Schedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
    };
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut rng = seeded_rng(cfg.seed, BATCH_STREAM);
    let has_eval = !corpus.gallery.is_empty() && !corpus.probe.is_empty();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = sampler.draw(&mut rng, corpus)?;
        let inputs: Vec<&ModelInput> = batch.members.iter().map(|&m| &corpus.train[m]).collect();
        let mut g = Graph::new();
        let l = batch_loss(&mut g, &model, &inputs, &batch.labels, &batch.indexes, &loss_cfg)?;
        let total = g.scalar(l.total);
        ensure!(total.is_finite(), "loss diverged at step {step}");
        let grads = g.backward(l.total);
        let mut flat = Vec::new();
        model.visit("", &mut |_, t| flat.push(grads.of(t)));
        let tokens: Vec<Tensor> = l.graph.part_tokens.iter().map(|v| g.value(*v).clone()).collect();
        drop(g);
        opt.update(&mut model, &flat, schedule.lr(step));
        model.update_running_stats(&tokens, cfg.bn_momentum);

        let rank1 = if has_eval && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps {
            Some(evaluate(&model, &corpus.gallery, &corpus.probe)?.rank1())
        } else {
            None
        };
        log.push(MetricRow {
            step: step + 1,
            loss_cls: l.cls,
            loss_tri: l.tri,
            loss_total: total,
            rank1,
        });
    }
    let final_eval = if has_eval {
        Some(evaluate(&model, &corpus.gallery, &corpus.probe)?)
    } else {
        None
    };
    if let (Some(e), Some(last)) = (&final_eval, log.last_mut()) {
        last.rank1 = Some(e.rank1());
    }
    Ok(TrainOutcome { model, log, final_eval })
}
