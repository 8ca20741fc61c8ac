//! Model parameters and forward passes.
//!
//! Per sequence: sampled frames are encoded into per-part `[T_s × C]`
//! matrices, the learned Fourier position table (built for the full sequence
//! length) is gathered at the sampled indexes and added, and the temporal
//! aggregator collapses each part to one `[1 × C]` token. Tokens then go
//! through per-part heads: running-statistics normalization, a metric
//! projection, and angular class weights.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use crate::afpe::{build_base_sequences, encode_positions_graph, gather_add_graph, PositionEncoderParams};
use crate::config::{Aggregator, InputMode, RunConfig};
use crate::container::TensorMap;
use crate::decompose::trend_seasonal_graph;
use crate::error::{ensure, Result, TpaError};
use crate::features::ModelInput;
use crate::graph::{Graph, Tensor, Var};
use crate::nn::{join, normal_matrix, seeded_rng, Activation, Linear, Parameters};
use crate::pipeline::sampling::{tsn_sample, SampleMode};
use crate::pipeline::spatial::{horizontal_pool_graph, spatial_encoder_graph, SpatialEncoderParams};
use crate::tam::TamParams;

pub const NORM_EPS: f64 = 1e-5;

const INIT_STREAM: u64 = 10;

/// Per-channel normalization with learned affine parameters and running
/// statistics (batch statistics during training, running ones otherwise).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl RunningNorm {
    pub fn new(width: usize) -> Self {
        RunningNorm {
            gamma: Tensor::ones((1, width)),
            beta: Tensor::zeros((1, width)),
            running_mean: Tensor::zeros((1, width)),
            running_var: Tensor::ones((1, width)),
        }
    }

    /// Normalizes `x: [B × C]` with the statistics of the batch itself.
    pub fn forward_batch(&self, g: &mut Graph, x: Var) -> Var {
        let t = g.transpose(x);
        let n = g.layer_norm(t, NORM_EPS);
        let n = g.transpose(n);
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }

    /// Normalizes `x: [B × C]` with the running statistics.
    pub fn forward_running(&self, g: &mut Graph, x: Var) -> Var {
        let shift = g.constant(-&self.running_mean);
        let inv = g.constant(self.running_var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt()));
        let centred = g.add_row(x, shift);
        let n = g.mul_row(centred, inv);
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }

    /// Exponential moving average update from a batch `[B × C]`.
    pub fn update_running(&mut self, batch: &Tensor, momentum: f64) {
        let b = batch.nrows() as f64;
        let mean = batch.mean_axis(Axis(0)).expect("nonempty batch").insert_axis(Axis(0));
        let centred = batch - &mean;
        let denom = if b > 1.0 { b - 1.0 } else { 1.0 };
        let var = (&centred * &centred).sum_axis(Axis(0)).insert_axis(Axis(0)) / denom;
        self.running_mean = &self.running_mean * (1.0 - momentum) + &mean * momentum;
        self.running_var = &self.running_var * (1.0 - momentum) + &var * momentum;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartHead {
    pub norm: RunningNorm,
    /// `C → C_m`
    pub metric: Linear,
    /// angular class weights `[n × C_m]`
    pub classifier: Tensor,
}

impl Parameters for PartHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "norm.gamma"), &self.norm.gamma);
        f(join(prefix, "norm.beta"), &self.norm.beta);
        self.metric.visit(&join(prefix, "metric"), f);
        f(join(prefix, "classifier"), &self.classifier);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "norm.gamma"), &mut self.norm.gamma);
        f(join(prefix, "norm.beta"), &mut self.norm.beta);
        self.metric.visit_mut(&join(prefix, "metric"), f);
        f(join(prefix, "classifier"), &mut self.classifier);
    }
}

/// Per-frame input stage.
#[derive(Clone, Debug, PartialEq)]
pub enum InputEncoder {
    /// shared `C_in → C` projection followed by the activation
    Frames(Linear),
    /// toy strided encoder plus horizontal pooling
    Spatial(SpatialEncoderParams),
}

/// Settings that shape the forward pass but are not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub seq_frames: usize,
    pub parts: usize,
    pub td: usize,
    pub window: usize,
    pub channels: usize,
    pub metric_channels: usize,
    pub classes: usize,
    pub aggregator: Aggregator,
    pub activation: Activation,
    pub arc_scale: f64,
    pub frame_height: usize,
    pub frame_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub settings: ModelSettings,
    pub encoder: InputEncoder,
    /// absent when position encoding is disabled
    pub position: Option<PositionEncoderParams>,
    /// present only with the attention aggregator
    pub tam: Option<TamParams>,
    pub heads: Vec<PartHead>,
}

impl Parameters for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match &self.encoder {
            InputEncoder::Frames(l) => l.visit(&join(prefix, "encoder.frames"), f),
            InputEncoder::Spatial(s) => s.visit(&join(prefix, "encoder.spatial"), f),
        }
        if let Some(p) = &self.position {
            p.visit(&join(prefix, "position"), f);
        }
        if let Some(t) = &self.tam {
            t.visit(&join(prefix, "tam"), f);
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("head{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match &mut self.encoder {
            InputEncoder::Frames(l) => l.visit_mut(&join(prefix, "encoder.frames"), f),
            InputEncoder::Spatial(s) => s.visit_mut(&join(prefix, "encoder.spatial"), f),
        }
        if let Some(p) = &mut self.position {
            p.visit_mut(&join(prefix, "position"), f);
        }
        if let Some(t) = &mut self.tam {
            t.visit_mut(&join(prefix, "tam"), f);
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("head{i}")), f);
        }
    }
}

/// Inference output for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[P × C_m]`
    pub metric: Array2<f64>,
    /// `[P × n]` scaled cosine logits; absent in test mode
    pub logits: Option<Array2<f64>>,
}

/// Which per-frame representation [`ModelParams::frame_features`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameStage {
    /// output of the input encoder
    Pre,
    /// response of the temporal aggregator to each frame on its own
    Post,
}

/// Tape variables for a batch.
pub struct BatchGraph {
    /// per part `[B × C_m]`
    pub part_metric: Vec<Var>,
    /// per sample `[P × C_m]`
    pub sample_metric: Vec<Var>,
    /// per part pre-normalization tokens `[B × C]`, for running-stat updates
    pub part_tokens: Vec<Var>,
}

impl ModelParams {
    /// Fresh parameters for `classes` training identities.
    pub fn init(cfg: &RunConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        ensure!(classes >= 1, "the classifier needs at least one class");
        let mut rng = seeded_rng(cfg.seed, INIT_STREAM);
        let activation = cfg.activation()?;
        let c = cfg.channels;
        let encoder = match cfg.input_mode {
            InputMode::Features => InputEncoder::Frames(Linear::init(&mut rng, cfg.input_channels, c)),
            InputMode::Silhouette => {
                InputEncoder::Spatial(SpatialEncoderParams::init(&mut rng, 1, cfg.hidden_channels, c))
            }
        };
        let position = cfg.use_afpe.then(|| {
            let mut p = PositionEncoderParams::init(&mut rng, cfg.td, c);
            p.activation = activation;
            p
        });
        let tam = (cfg.aggregator == Aggregator::Tam).then(|| {
            let mut t = TamParams::init(&mut rng, c, cfg.heads, cfg.ffn_inner, cfg.tam_layers);
            for b in &mut t.blocks {
                b.full.ffn.activation = activation;
                b.seasonal.ffn.activation = activation;
            }
            t
        });
        let heads = (0..cfg.parts)
            .map(|_| PartHead {
                norm: RunningNorm::new(c),
                metric: Linear::init(&mut rng, c, cfg.metric_channels),
                classifier: normal_matrix(&mut rng, classes, cfg.metric_channels, 1.0),
            })
            .collect();
        Ok(ModelParams {
            settings: ModelSettings {
                seq_frames: cfg.seq_frames,
                parts: cfg.parts,
                td: cfg.td,
                window: cfg.window,
                channels: c,
                metric_channels: cfg.metric_channels,
                classes,
                aggregator: cfg.aggregator,
                activation,
                arc_scale: cfg.arc_s,
                frame_height: cfg.frame_height,
                frame_width: cfg.frame_width,
            },
            encoder,
            position,
            tam,
            heads,
        })
    }

    /// Per-part `[T_s × C]` frame encodings for the frames at `indexes`.
    fn encode_frames(&self, g: &mut Graph, input: &ModelInput, indexes: &[usize]) -> Result<Vec<Var>> {
        let s = &self.settings;
        if let Some(&bad) = indexes.iter().find(|&&i| i >= input.len()) {
            return Err(TpaError::domain(format!(
                "frame index {bad} is outside the sequence (length {})",
                input.len()
            )));
        }
        match (&self.encoder, input) {
            (InputEncoder::Frames(proj), ModelInput::Features(f)) => {
                ensure!(
                    f.values.dim().0 == s.parts,
                    "sequence has {} parts, model expects {}",
                    f.values.dim().0,
                    s.parts
                );
                ensure!(
                    f.values.dim().1 == proj.input_dim(),
                    "sequence has {} channels, model expects {}",
                    f.values.dim().1,
                    proj.input_dim()
                );
                let mut out = Vec::with_capacity(s.parts);
                for p in 0..s.parts {
                    let frames = f.part_frames(p).select(Axis(0), indexes);
                    let x = g.constant(frames);
                    let y = proj.forward(g, x);
                    out.push(s.activation.forward(g, y));
                }
                Ok(out)
            }
            (InputEncoder::Spatial(enc), ModelInput::Silhouette(sil)) => {
                let frames = sil.frames.select(Axis(1), indexes);
                let (_, t, h, w) = frames.dim();
                let stack = spatial_encoder_graph(g, &frames, enc)?;
                horizontal_pool_graph(g, stack, t, h / 4, w / 4, s.parts)
            }
            _ => Err(TpaError::domain("input representation does not match the model encoder")),
        }
    }

    /// Adds the position table (built for the full sequence length) to every part.
    fn add_positions(&self, g: &mut Graph, frames: Vec<Var>, seq_len: usize, indexes: &[usize]) -> Result<Vec<Var>> {
        let Some(pos) = &self.position else {
            return Ok(frames);
        };
        let bases = build_base_sequences(seq_len, self.settings.td)?;
        let table = encode_positions_graph(g, &bases, pos)?;
        frames
            .into_iter()
            .map(|f| gather_add_graph(g, f, table, indexes))
            .collect()
    }

    fn aggregate(&self, g: &mut Graph, x_pe: Var) -> Result<Var> {
        match (&self.tam, self.settings.aggregator) {
            (Some(tam), Aggregator::Tam) => {
                let (trend, seasonal) = trend_seasonal_graph(g, x_pe, self.settings.window)?;
                tam.forward(g, x_pe, seasonal, trend)
            }
            (_, Aggregator::MaxPool) => Ok(g.max_rows(x_pe)),
            (None, Aggregator::Tam) => Err(TpaError::domain("attention aggregator has no parameters")),
        }
    }

    /// Per-part `[1 × C]` tokens of one sequence sampled at `indexes`.
    pub fn sequence_tokens(&self, g: &mut Graph, input: &ModelInput, indexes: &[usize]) -> Result<Vec<Var>> {
        ensure!(!indexes.is_empty(), "no frames sampled");
        let frames = self.encode_frames(g, input, indexes)?;
        let x_pe = self.add_positions(g, frames, input.len(), indexes)?;
        x_pe.into_iter().map(|x| self.aggregate(g, x)).collect()
    }

    /// Records a batch on the tape. With `batch_stats` the heads normalize by
    /// batch statistics (training); otherwise by the running statistics.
    pub fn batch_graph(
        &self,
        g: &mut Graph,
        inputs: &[&ModelInput],
        indexes: &[Vec<usize>],
        batch_stats: bool,
    ) -> Result<BatchGraph> {
        ensure!(!inputs.is_empty(), "empty batch");
        ensure!(inputs.len() == indexes.len(), "one index list per input");
        let tokens: Vec<Vec<Var>> = inputs
            .iter()
            .zip(indexes)
            .map(|(inp, idx)| self.sequence_tokens(g, inp, idx))
            .collect::<Result<_>>()?;
        let mut part_metric = Vec::with_capacity(self.settings.parts);
        let mut part_tokens = Vec::with_capacity(self.settings.parts);
        for (p, head) in self.heads.iter().enumerate() {
            let rows: Vec<Var> = tokens.iter().map(|t| t[p]).collect();
            let x = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
            let n = if batch_stats {
                head.norm.forward_batch(g, x)
            } else {
                head.norm.forward_running(g, x)
            };
            part_tokens.push(x);
            part_metric.push(head.metric.forward(g, n));
        }
        let sample_metric = (0..inputs.len())
            .map(|b| {
                let rows: Vec<Var> = part_metric.iter().map(|&m| g.gather_rows(m, &[b])).collect();
                if rows.len() == 1 {
                    rows[0]
                } else {
                    g.concat_rows(&rows)
                }
            })
            .collect();
        Ok(BatchGraph {
            part_metric,
            sample_metric,
            part_tokens,
        })
    }

    /// Scaled cosine logits `[P × n]` for a metric tensor `[P × C_m]`.
    pub fn logits(&self, metric: &Array2<f64>) -> Array2<f64> {
        let n = self.settings.classes;
        let mut out = Array2::zeros((self.settings.parts, n));
        for (p, head) in self.heads.iter().enumerate() {
            let f = metric.row(p);
            let fnorm = f.dot(&f).sqrt().max(f64::MIN_POSITIVE);
            for j in 0..n {
                let w = head.classifier.row(j);
                let wnorm = w.dot(&w).sqrt().max(f64::MIN_POSITIVE);
                out[[p, j]] = self.settings.arc_scale * f.dot(&w) / (fnorm * wnorm);
            }
        }
        out
    }

    /// One sequence through the model with running statistics. Test mode
    /// samples segment centres and returns only the metric tensor.
    pub fn forward(&self, input: &ModelInput, mode: SampleMode, seed: u64) -> Result<ForwardOutput> {
        let indexes = tsn_sample(input.len(), self.settings.seq_frames, mode, seed)?;
        let mut g = Graph::new();
        let b = self.batch_graph(&mut g, &[input], &[indexes], false)?;
        let metric = g.value(b.sample_metric[0]).clone();
        let logits = (mode == SampleMode::Train).then(|| self.logits(&metric));
        Ok(ForwardOutput { metric, logits })
    }

    /// Test-mode metric embedding `[P × C_m]`.
    pub fn embed(&self, input: &ModelInput) -> Result<Array2<f64>> {
        Ok(self.forward(input, SampleMode::Test, 0)?.metric)
    }

    /// Per-part `[T × C]` features for every frame of `input`.
    ///
    /// `Post` runs the aggregator with its memory restricted to one frame at a
    /// time; the trend/seasonal split is still computed over the whole
    /// sequence. For max pooling this is the position-encoded frame itself.
    pub fn frame_features(&self, input: &ModelInput, stage: FrameStage) -> Result<Vec<Array2<f64>>> {
        let all: Vec<usize> = (0..input.len()).collect();
        let mut g = Graph::new();
        let frames = self.encode_frames(&mut g, input, &all)?;
        if stage == FrameStage::Pre {
            return Ok(frames.iter().map(|v| g.value(*v).clone()).collect());
        }
        let x_pe = self.add_positions(&mut g, frames, input.len(), &all)?;
        let mut out = Vec::with_capacity(x_pe.len());
        for x in x_pe {
            let value = g.value(x).clone();
            let rows = match &self.tam {
                Some(tam) if self.settings.aggregator == Aggregator::Tam => {
                    let (trend, seasonal) = trend_seasonal_graph(&mut g, x, self.settings.window)?;
                    let (trend, seasonal) = (g.value(trend).clone(), g.value(seasonal).clone());
                    let mut rows = Array2::zeros(value.dim());
                    for t in 0..value.nrows() {
                        let mut h = Graph::new();
                        let pick = |m: &Tensor| m.select(Axis(0), &[t]);
                        let xv = h.constant(pick(&value));
                        let sv = h.constant(pick(&seasonal));
                        let tv = h.constant(pick(&trend));
                        let y = tam.forward(&mut h, xv, sv, tv)?;
                        rows.row_mut(t).assign(&h.value(y).row(0));
                    }
                    rows
                }
                _ => value,
            };
            out.push(rows);
        }
        Ok(out)
    }

    /// Updates every head's running statistics from recorded batch tokens.
    pub fn update_running_stats(&mut self, tokens: &[Tensor], momentum: f64) {
        for (head, t) in self.heads.iter_mut().zip(tokens) {
            head.norm.update_running(t, momentum);
        }
    }

    /// Learnable tensors and running statistics, keyed by name.
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut map = TensorMap::new();
        self.visit("", &mut |name, t| {
            map.insert(name, t.clone().into_dyn());
        });
        for (i, h) in self.heads.iter().enumerate() {
            map.insert(format!("head{i}.norm.running_mean"), h.norm.running_mean.clone().into_dyn());
            map.insert(format!("head{i}.norm.running_var"), h.norm.running_var.clone().into_dyn());
        }
        map
    }

    /// Rebuilds a model from a tensor map written by [`Self::to_tensor_map`];
    /// `cfg` supplies the architecture.
    pub fn from_tensor_map(cfg: &RunConfig, map: &TensorMap) -> Result<Self> {
        let classes = map
            .get("head0.classifier")
            .map(|t| t.shape()[0])
            .ok_or_else(|| TpaError::domain("checkpoint has no head0.classifier"))?;
        let mut model = ModelParams::init(cfg, classes)?;
        let mut missing = Vec::new();
        let mut wrong = Vec::new();
        let fetch = |name: &str, t: &mut Tensor, missing: &mut Vec<String>, wrong: &mut Vec<String>| {
            match map.get(name) {
                None => missing.push(name.to_string()),
                Some(v) if v.shape() != t.shape() => wrong.push(name.to_string()),
                Some(v) => {
                    *t = v.clone().into_dimensionality().expect("rank checked by shape");
                }
            }
        };
        model.visit_mut("", &mut |name, t| fetch(&name, t, &mut missing, &mut wrong));
        for (i, h) in model.heads.iter_mut().enumerate() {
            fetch(&format!("head{i}.norm.running_mean"), &mut h.norm.running_mean, &mut missing, &mut wrong);
            fetch(&format!("head{i}.norm.running_var"), &mut h.norm.running_var, &mut missing, &mut wrong);
        }
        ensure!(missing.is_empty(), "checkpoint is missing tensors: {}", missing.join(", "));
        ensure!(wrong.is_empty(), "checkpoint tensors have the wrong shape: {}", wrong.join(", "));
        let expected = model.to_tensor_map().len();
        ensure!(
            map.len() == expected,
            "checkpoint has {} tensors, the configured model has {expected}",
            map.len()
        );
        Ok(model)
    }

    /// Learnable tensors by name (no running statistics).
    pub fn learnable(&self) -> BTreeMap<String, Tensor> {
        self.named_tensors().into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::synth::build_corpus;

    fn small(cfg: RunConfig) -> RunConfig {
        RunConfig {
            train_ids: 3,
            test_ids: 1,
            views: 2,
            seqs_per_view: 1,
            ..cfg
        }
    }

    #[test]
    fn shapes_for_full_sized_heads() {
        let cfg = RunConfig {
            parts: 16,
            channels: 16,
            metric_channels: 64,
            tam_layers: 1,
            train_ids: 2,
            test_ids: 0,
            views: 1,
            seqs_per_view: 1,
            ..RunConfig::default()
        };
        let corpus = build_corpus(&cfg).unwrap();
        let model = ModelParams::init(&cfg, 50).unwrap();
        let out = model.forward(&corpus.train[0], SampleMode::Train, 3).unwrap();
        assert_eq!(out.metric.dim(), (16, 64));
        assert_eq!(out.logits.unwrap().dim(), (16, 50));
        assert!(model.forward(&corpus.train[0], SampleMode::Test, 3).unwrap().logits.is_none());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small(RunConfig::desk());
        let corpus = build_corpus(&cfg).unwrap();
        let model = ModelParams::init(&cfg, 3).unwrap();
        let a = model.forward(&corpus.train[1], SampleMode::Train, 9).unwrap();
        let b = model.forward(&corpus.train[1], SampleMode::Train, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small(RunConfig::desk());
        let mut model = ModelParams::init(&cfg, 3).unwrap();
        model.heads[1].norm.running_mean.fill(0.25);
        let back = ModelParams::from_tensor_map(&cfg, &model.to_tensor_map()).unwrap();
        assert_eq!(back, model);
        let mut map = model.to_tensor_map();
        map.remove("head0.metric.w");
        assert!(ModelParams::from_tensor_map(&cfg, &map).is_err());
    }

    #[test]
    fn silhouette_mode_runs() {
        let cfg = small(RunConfig {
            input_mode: InputMode::Silhouette,
            frame_height: 16,
            frame_width: 12,
            seq_len: 40,
            seq_frames: 8,
            window: 5,
            ..RunConfig::desk()
        });
        let corpus = build_corpus(&cfg).unwrap();
        let model = ModelParams::init(&cfg, 3).unwrap();
        let out = model.embed(&corpus.train[0]).unwrap();
        assert_eq!(out.dim(), (cfg.parts, cfg.metric_channels));
        let feats = model.frame_features(&corpus.train[0], FrameStage::Post).unwrap();
        assert_eq!(feats[0].dim(), (40, cfg.channels));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cfg = small(RunConfig::desk());
        let corpus = build_corpus(&cfg).unwrap();
        let sil_cfg = RunConfig {
            input_mode: InputMode::Silhouette,
            frame_height: 16,
            frame_width: 12,
            ..cfg.clone()
        };
        let model = ModelParams::init(&sil_cfg, 3).unwrap();
        assert!(model.embed(&corpus.train[0]).is_err());
    }
}
