//! Analytic gradients against central finite differences.
//!
//! Each check seeds a small random instance of one parameterized operation,
//! reduces its output to a scalar through a fixed random projection, and
//! compares the tape gradient with `(f(θ+h) − f(θ−h)) / 2h` entry by entry.

use std::time::{Duration, Instant};

use ndarray::Array3;
use rand::Rng;
use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};

use crate::afpe::{build_base_sequences, encode_positions_graph, PositionEncoderParams};
use crate::config::RunConfig;
use crate::error::Result;
use crate::features::{FeatureSequence, ModelInput};
use crate::graph::{Graph, Tensor, Var};
use crate::losses::{arcface_loss_graph, batch_triplet_graph, margin_cosine, sequence_dist, LossConfig};
use crate::nn::{normal_matrix, seeded_rng, Linear, Parameters, SeedRng};
use crate::pipeline::model::{ModelParams, PartHead, RunningNorm};
use crate::pipeline::sampling::{tsn_sample, SampleMode};
use crate::pipeline::train::batch_loss;
use crate::tam::{mhca_graph, tam_block_graph, CrossAttentionParams, FeedForwardParams, TamBlockParams};

pub const FD_STEP: f64 = 1e-4;
pub const MODULE_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_INSTANCES: usize = 20;
/// Entries per model component probed by the end-to-end check.
pub const END_TO_END_ENTRIES: usize = 16;

const GRADCHECK_STREAM: u64 = 40;
/// Below this gradient norm the relative error degenerates into noise, so the
/// absolute difference is reported instead.
const NORM_FLOOR: f64 = 1e-10;

// small instance sizes
const WIDTH: usize = 8;
const HEADS: usize = 2;
const INNER: usize = 12;
const FRAMES: usize = 7;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or `‖a − n‖` when both norms are negligible.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let d = norm(&diff);
    let scale = norm(analytic).max(norm(numeric));
    if scale <= NORM_FLOOR {
        d
    } else {
        d / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleReport {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl ModuleReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub modules: Vec<ModuleReport>,
    pub end_to_end: ModuleReport,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.modules.iter().all(ModuleReport::passed) && self.end_to_end.passed()
    }
}

/// Position of one scalar inside a parameter container: tensor in visiting
/// order, then row-major offset.
type Entry = (usize, usize);

fn all_entries<P: Parameters>(params: &P) -> Vec<Entry> {
    let mut out = Vec::new();
    let mut i = 0;
    params.visit("", &mut |_, t| {
        out.extend((0..t.len()).map(|k| (i, k)));
        i += 1;
    });
    out
}

fn nudge<P: Parameters + Clone>(params: &P, (tensor, offset): Entry, delta: f64) -> P {
    let mut p = params.clone();
    let mut i = 0;
    p.visit_mut("", &mut |_, t| {
        if i == tensor {
            *t.iter_mut().nth(offset).expect("entry in range") += delta;
        }
        i += 1;
    });
    p
}

/// Relative error over `entries` of the gradient of the scalar built by `f`.
pub fn check_entries<P, F>(params: &P, entries: &[Entry], f: F) -> Result<f64>
where
    P: Parameters + Clone,
    F: Fn(&mut Graph, &P) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, params)?;
    let grads = g.backward(root);
    let mut per_tensor = Vec::new();
    params.visit("", &mut |_, t| per_tensor.push(grads.of(t)));

    let eval = |p: &P| -> Result<f64> {
        let mut g = Graph::new();
        let root = f(&mut g, p)?;
        Ok(g.scalar(root))
    };
    let mut analytic = Vec::with_capacity(entries.len());
    let mut numeric = Vec::with_capacity(entries.len());
    for &e in entries {
        analytic.push(*per_tensor[e.0].iter().nth(e.1).expect("entry in range"));
        let up = eval(&nudge(params, e, FD_STEP))?;
        let down = eval(&nudge(params, e, -FD_STEP))?;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Checks every entry of `params`.
pub fn check_all<P, F>(params: &P, f: F) -> Result<f64>
where
    P: Parameters + Clone,
    F: Fn(&mut Graph, &P) -> Result<Var>,
{
    check_entries(params, &all_entries(params), f)
}

fn jitter<P: Parameters>(params: &mut P, rng: &mut SeedRng, std: f64) {
    let dist = Normal::new(0.0, std).expect("finite std");
    params.visit_mut("", &mut |_, t| t.mapv_inplace(|v| v + dist.sample(rng)));
}

/// `sum(out ⊙ r)` for a fixed random `r`.
fn project(g: &mut Graph, out: Var, r: &Tensor) -> Var {
    let r = g.constant(r.clone());
    let m = g.mul(out, r);
    g.sum_all(m)
}

fn random(rng: &mut SeedRng, rows: usize, cols: usize) -> Tensor {
    normal_matrix(rng, rows, cols, 1.0)
}

fn psi_instance(rng: &mut SeedRng) -> Result<f64> {
    let seq_len = rng.random_range(4..=16);
    let td = rng.random_range(1..=3.min(seq_len));
    let bases = build_base_sequences(seq_len, td)?;
    let mut p = PositionEncoderParams::init_with_hidden(rng, td, 6, WIDTH);
    jitter(&mut p, rng, 0.1);
    let r = random(rng, seq_len, WIDTH);
    check_all(&p, |g, p| {
        let table = encode_positions_graph(g, &bases, p)?;
        Ok(project(g, table, &r))
    })
}

fn mhca_instance(rng: &mut SeedRng) -> Result<f64> {
    let p = CrossAttentionParams::init(rng, WIDTH, HEADS);
    let query = random(rng, 1, WIDTH);
    let memory = random(rng, FRAMES, WIDTH);
    let r = random(rng, 1, WIDTH);
    check_all(&p, |g, p| {
        let q = g.constant(query.clone());
        let m = g.constant(memory.clone());
        let out = mhca_graph(g, q, m, p)?;
        Ok(project(g, out, &r))
    })
}

fn ffn_instance(rng: &mut SeedRng) -> Result<f64> {
    let mut p = FeedForwardParams::init(rng, WIDTH, INNER);
    jitter(&mut p, rng, 0.1);
    let x = random(rng, 3, WIDTH);
    let r = random(rng, 3, WIDTH);
    check_all(&p, |g, p| {
        let x = g.constant(x.clone());
        let out = p.forward(g, x);
        Ok(project(g, out, &r))
    })
}

/// The lateral layer as used in a block: applied to `mean(trend) + token`.
fn lateral_instance(rng: &mut SeedRng) -> Result<f64> {
    let mut p = Linear::init(rng, WIDTH, WIDTH);
    jitter(&mut p, rng, 0.1);
    let trend = random(rng, FRAMES, WIDTH);
    let token = random(rng, 1, WIDTH);
    let r = random(rng, 1, WIDTH);
    check_all(&p, |g, p| {
        let t = g.constant(trend.clone());
        let mean = g.mean_rows(t);
        let s = g.constant(token.clone());
        let x = g.add(mean, s);
        let out = p.forward(g, x);
        Ok(project(g, out, &r))
    })
}

fn block_instance(rng: &mut SeedRng) -> Result<f64> {
    let mut p = TamBlockParams::init(rng, WIDTH, HEADS, INNER);
    jitter(&mut p, rng, 0.1);
    let x_pe = random(rng, FRAMES, WIDTH);
    let trend = random(rng, FRAMES, WIDTH);
    let seasonal = &x_pe - &trend;
    let tokens = random(rng, 2, WIDTH);
    let r = random(rng, 2, WIDTH);
    check_all(&p, |g, p| {
        let tf = g.constant(tokens.slice(ndarray::s![0..1, ..]).to_owned());
        let ts = g.constant(tokens.slice(ndarray::s![1..2, ..]).to_owned());
        let x = g.constant(x_pe.clone());
        let s = g.constant(seasonal.clone());
        let t = g.constant(trend.clone());
        let (f, s_new) = tam_block_graph(g, tf, ts, x, s, t, p)?;
        let both = g.concat_rows(&[f, s_new]);
        Ok(project(g, both, &r))
    })
}

/// True when some target cosine sits within `gap` of the margin's branch point.
fn near_margin_switch(features: &Tensor, weights: &Tensor, labels: &[usize], margin: f64, gap: f64) -> bool {
    let switch = (std::f64::consts::PI - margin).cos();
    labels.iter().enumerate().any(|(i, &y)| {
        let f = features.row(i);
        let w = weights.row(y);
        let cos = f.dot(&w) / (f.dot(&f).sqrt() * w.dot(&w).sqrt());
        (cos - switch).abs() < gap || (margin_cosine(cos, margin) - margin_cosine(switch, margin)).abs() < gap
    })
}

fn head_instance(rng: &mut SeedRng) -> Result<f64> {
    let (batch, metric, classes) = (5, 6, 3);
    let loss = LossConfig::default();
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    loop {
        let mut head = PartHead {
            norm: RunningNorm::new(WIDTH),
            metric: Linear::init(rng, WIDTH, metric),
            classifier: random(rng, classes, metric),
        };
        jitter(&mut head, rng, 0.1);
        let x = random(rng, batch, WIDTH);
        let feats = {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let n = head.norm.forward_batch(&mut g, xv);
            let m = head.metric.forward(&mut g, n);
            g.value(m).clone()
        };
        if near_margin_switch(&feats, &head.classifier, &labels, loss.arc_margin, 1e-3) {
            continue;
        }
        return check_all(&head, |g, h| {
            let xv = g.constant(x.clone());
            let n = h.norm.forward_batch(g, xv);
            let m = h.metric.forward(g, n);
            let w = g.param(&h.classifier);
            arcface_loss_graph(g, m, w, &labels, &loss)
        });
    }
}

fn arcface_instance(rng: &mut SeedRng) -> Result<f64> {
    let (batch, width, classes) = (6, 5, 4);
    let loss = LossConfig::default();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    loop {
        let params = vec![random(rng, batch, width), random(rng, classes, width)];
        if near_margin_switch(&params[0], &params[1], &labels, loss.arc_margin, 1e-3) {
            continue;
        }
        return check_all(&params, |g, p| {
            let f = g.param(&p[0]);
            let w = g.param(&p[1]);
            arcface_loss_graph(g, f, w, &labels, &loss)
        });
    }
}

/// True when some triple's hinge argument is within `gap` of the kink.
fn near_hinge(embeddings: &[Tensor], labels: &[usize], margin: f64, gap: f64) -> Result<bool> {
    let n = labels.len();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let dp = sequence_dist(&embeddings[a], &embeddings[p])?;
            for ng in 0..n {
                if labels[ng] != labels[a] && (dp - sequence_dist(&embeddings[a], &embeddings[ng])? + margin).abs() < gap {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

fn triplet_instance(rng: &mut SeedRng) -> Result<f64> {
    let labels = [0, 0, 1, 1, 2, 2];
    let margin = LossConfig::default().triplet_margin;
    loop {
        // small spread so that some triples are active and some are not
        let params: Vec<Tensor> = labels.iter().map(|_| normal_matrix(rng, 3, 4, 0.3)).collect();
        if near_hinge(&params, &labels, margin, 1e-3)? {
            continue;
        }
        return check_all(&params, |g, p| {
            let vars: Vec<Var> = p.iter().map(|t| g.param(t)).collect();
            Ok(batch_triplet_graph(g, &vars, &labels, margin)?.0)
        });
    }
}

type Instance = fn(&mut SeedRng) -> Result<f64>;

const MODULES: [(&str, Instance); 8] = [
    ("position encoder", psi_instance),
    ("cross-attention", mhca_instance),
    ("feed-forward", ffn_instance),
    ("lateral", lateral_instance),
    ("aggregation block", block_instance),
    ("head", head_instance),
    ("angular margin loss", arcface_instance),
    ("triplet loss", triplet_instance),
];

pub fn module_names() -> Vec<&'static str> {
    MODULES.iter().map(|(n, _)| *n).collect()
}

fn run_module(name: &str, f: Instance, seed: u64, instances: usize) -> Result<ModuleReport> {
    let mut max_error: f64 = 0.0;
    for i in 0..instances {
        let mut rng = seeded_rng(seed.wrapping_add(i as u64), GRADCHECK_STREAM);
        max_error = max_error.max(f(&mut rng)?);
    }
    Ok(ModuleReport {
        name: name.to_string(),
        instances,
        max_error,
        tolerance: MODULE_TOLERANCE,
    })
}

/// Small feature-mode model used by the end-to-end check.
pub fn end_to_end_config() -> RunConfig {
    RunConfig {
        parts: 2,
        channels: WIDTH,
        metric_channels: 6,
        heads: HEADS,
        ffn_inner: INNER,
        tam_layers: 2,
        seq_frames: 6,
        window: 3,
        input_channels: 4,
        ..RunConfig::default()
    }
}

fn component_of(name: &str) -> &str {
    let first = name.split('.').next().unwrap_or(name);
    if first.starts_with("head") {
        "heads"
    } else {
        first
    }
}

fn end_to_end_instance(rng: &mut SeedRng) -> Result<f64> {
    let cfg = end_to_end_config();
    let labels = [0, 0, 1, 1];
    let inputs: Vec<ModelInput> = labels
        .iter()
        .map(|&id| {
            let values = Array3::from_shape_simple_fn((cfg.parts, cfg.input_channels, 10), || {
                Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
            });
            ModelInput::Features(FeatureSequence {
                values,
                identity: id,
                view: 0,
                ground_truth_period: None,
            })
        })
        .collect();
    let indexes: Vec<Vec<usize>> = inputs
        .iter()
        .map(|inp| tsn_sample(inp.len(), cfg.seq_frames, SampleMode::Train, rng.random()))
        .collect::<Result<_>>()?;
    let loss = cfg.loss();
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    loop {
        let mut model = ModelParams::init(&cfg, 2)?;
        jitter(&mut model, rng, 0.05);

        // pick entries per component
        let mut by_component: Vec<(String, Vec<Entry>)> = Vec::new();
        let mut i = 0;
        model.visit("", &mut |name, t| {
            let comp = component_of(&name).to_string();
            let slot = match by_component.iter().position(|(c, _)| *c == comp) {
                Some(s) => s,
                None => {
                    by_component.push((comp, Vec::new()));
                    by_component.len() - 1
                }
            };
            by_component[slot].1.extend((0..t.len()).map(|k| (i, k)));
            i += 1;
        });
        let mut entries = Vec::new();
        for (_, pool) in &by_component {
            let k = END_TO_END_ENTRIES.min(pool.len());
            entries.extend(sample(rng, pool.len(), k).into_iter().map(|j| pool[j]));
        }

        // keep away from hinge kinks of the triplet term
        let sample_metric: Vec<Tensor> = {
            let mut g = Graph::new();
            let bg = model.batch_graph(&mut g, &refs, &indexes, true)?;
            bg.sample_metric.iter().map(|&v| g.value(v).clone()).collect()
        };
        if near_hinge(&sample_metric, &labels, loss.triplet_margin, 1e-3)? {
            continue;
        }
        return check_entries(&model, &entries, |g, m| {
            Ok(batch_loss(g, m, &refs, &labels, &indexes, &loss)?.total)
        });
    }
}

/// Runs every module check with `instances` seeded instances plus the
/// end-to-end check.
pub fn run_gradcheck(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let start = Instant::now();
    let modules = MODULES
        .iter()
        .map(|&(name, f)| run_module(name, f, seed, instances))
        .collect::<Result<Vec<_>>>()?;
    let mut end_to_end = run_module("end to end", end_to_end_instance, seed, instances)?;
    end_to_end.tolerance = END_TO_END_TOLERANCE;
    Ok(GradcheckReport {
        modules,
        end_to_end,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[1e-12]), 1e-12);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // custom op whose backward is off by a factor of two
        let p = vec![Tensor::from_elem((1, 1), 1.5)];
        let err = check_all(&p, |g, p| {
            let x = g.param(&p[0]);
            let v = g.value(x).mapv(|a| a * a);
            Ok(g.custom(&[x], v, Box::new(|gout, inputs, _| vec![gout * inputs[0] * 4.0])))
        })
        .unwrap();
        assert!(err > 0.4, "{err}");
    }

    #[test]
    fn each_module_passes_on_a_few_instances() {
        for (name, f) in MODULES {
            let r = run_module(name, f, 7, 2).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
