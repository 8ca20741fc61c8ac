//! Run configuration: model, loss, optimizer, and synthetic-data settings.
//!
//! The on-disk format is flat `key=value` text, one entry per line, with `#`
//! comments and blank lines ignored. Unknown keys are rejected so typos do not
//! silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result, TpaError};
use crate::losses::LossConfig;
use crate::nn::Activation;

/// How per-frame features are collapsed over time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregator {
    /// decomposed token cross-attention
    Tam,
    /// elementwise maximum over frames
    MaxPool,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Tam => "tam",
            Aggregator::MaxPool => "maxpool",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "tam" => Some(Aggregator::Tam),
            "maxpool" => Some(Aggregator::MaxPool),
            _ => None,
        }
    }
}

/// Input representation fed to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    /// precomputed part features `[P × C_in × T]`
    Features,
    /// rendered silhouettes `[1 × T × H × W]` through the toy spatial encoder
    Silhouette,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::Features => "features",
            InputMode::Silhouette => "silhouette",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "features" => Some(InputMode::Features),
            "silhouette" => Some(InputMode::Silhouette),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // model
    pub seq_frames: usize,
    pub parts: usize,
    pub td: usize,
    pub tam_layers: usize,
    pub window: usize,
    pub channels: usize,
    pub metric_channels: usize,
    pub heads: usize,
    pub ffn_inner: usize,
    pub activation: String,
    pub aggregator: Aggregator,
    pub use_afpe: bool,
    pub input_mode: InputMode,
    pub input_channels: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub hidden_channels: usize,
    pub bn_momentum: f64,
    // losses
    pub arc_s: f64,
    pub arc_m: f64,
    pub tri_margin: f64,
    pub p: f64,
    pub q: f64,
    pub label_smoothing: f64,
    // optimizer
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ids_per_batch: usize,
    pub seqs_per_id: usize,
    pub eval_every: usize,
    // synthetic data
    pub train_ids: usize,
    pub test_ids: usize,
    pub views: usize,
    pub seqs_per_view: usize,
    pub seq_len: usize,
    pub period_min: usize,
    pub period_max: usize,
    pub noise: f64,
    pub view_strength: f64,
    pub offset_scale: f64,
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seq_frames: 30,
            parts: 16,
            td: 1,
            tam_layers: 6,
            window: 30,
            channels: 32,
            metric_channels: 32,
            heads: 4,
            ffn_inner: 64,
            activation: "gelu".into(),
            aggregator: Aggregator::Tam,
            use_afpe: true,
            input_mode: InputMode::Features,
            input_channels: 8,
            frame_height: 64,
            frame_width: 44,
            hidden_channels: 8,
            bn_momentum: 0.1,
            arc_s: 32.0,
            arc_m: 0.3,
            tri_margin: 0.2,
            p: 0.1,
            q: 1.0,
            label_smoothing: 0.1,
            seed: 0,
            steps: 1000,
            lr: 1e-3,
            min_lr: 1e-6,
            warmup_steps: 50,
            weight_decay: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ids_per_batch: 4,
            seqs_per_id: 4,
            eval_every: 0,
            train_ids: 50,
            test_ids: 20,
            views: 4,
            seqs_per_view: 2,
            seq_len: 90,
            period_min: 24,
            period_max: 36,
            noise: 0.1,
            view_strength: 0.5,
            offset_scale: 0.5,
            data_seed: 0,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| TpaError::Config {
        line,
        msg: format!("invalid value {value:?} for {key}: {e}"),
    })
}

macro_rules! config_fields {
    ($($field:ident),* $(,)?) => {
        impl RunConfig {
            fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => self.$field = parse_value(line, key, value)?,)*
                    "aggregator" => {
                        self.aggregator = Aggregator::parse(value).ok_or_else(|| TpaError::Config {
                            line,
                            msg: format!("aggregator must be tam or maxpool, got {value:?}"),
                        })?
                    }
                    "input_mode" => {
                        self.input_mode = InputMode::parse(value).ok_or_else(|| TpaError::Config {
                            line,
                            msg: format!("input_mode must be features or silhouette, got {value:?}"),
                        })?
                    }
                    _ => {
                        return Err(TpaError::Config {
                            line,
                            msg: format!("unknown key {key:?}"),
                        })
                    }
                }
                Ok(())
            }

            /// Every key with its current value, in file order.
            pub fn entries(&self) -> Vec<(String, String)> {
                let mut out = vec![$((stringify!($field).to_string(), format!("{}", self.$field)),)*];
                out.push(("aggregator".into(), self.aggregator.name().into()));
                out.push(("input_mode".into(), self.input_mode.name().into()));
                out
            }
        }
    };
}

config_fields!(
    seq_frames, parts, td, tam_layers, window, channels, metric_channels, heads, ffn_inner,
    activation, use_afpe, input_channels, frame_height, frame_width, hidden_channels,
    bn_momentum, arc_s, arc_m, tri_margin, p, q, label_smoothing, seed, steps, lr, min_lr,
    warmup_steps, weight_decay, beta1, beta2, adam_eps, ids_per_batch, seqs_per_id,
    eval_every, train_ids, test_ids, views, seqs_per_view, seq_len, period_min, period_max,
    noise, view_strength, offset_scale, data_seed,
);

impl RunConfig {
    /// Applies `key=value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| TpaError::Config {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            self.set(i + 1, key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TpaError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().collect()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            triplet_margin: self.tri_margin,
            arc_scale: self.arc_s,
            arc_margin: self.arc_m,
            weight_cls: self.p,
            weight_tri: self.q,
            label_smoothing: self.label_smoothing,
        }
    }

    pub fn activation(&self) -> Result<Activation> {
        Activation::parse(&self.activation)
            .ok_or_else(|| TpaError::domain(format!("unknown activation {:?}", self.activation)))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.seq_frames >= 1, "seq_frames must be at least 1");
        ensure!(self.parts >= 1, "parts must be at least 1");
        ensure!(self.td >= 1, "td must be at least 1");
        ensure!(self.tam_layers >= 1, "tam_layers must be at least 1");
        ensure!(self.window >= 1, "window must be at least 1");
        ensure!(self.channels >= 1 && self.metric_channels >= 1, "channel widths must be positive");
        ensure!(
            self.heads >= 1 && self.channels % self.heads == 0,
            "channels ({}) must be divisible by heads ({})",
            self.channels,
            self.heads
        );
        ensure!(self.ffn_inner >= 1, "ffn_inner must be positive");
        self.activation()?;
        ensure!(self.input_channels >= 1, "input_channels must be positive");
        ensure!((0.0..=1.0).contains(&self.bn_momentum), "bn_momentum must lie in [0, 1]");
        self.loss().validate()?;
        ensure!(self.lr >= 0.0 && self.min_lr >= 0.0, "learning rates must be nonnegative");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be nonnegative");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.adam_eps > 0.0, "adam_eps must be positive");
        ensure!(self.ids_per_batch >= 1 && self.seqs_per_id >= 1, "batch composition must be positive");
        ensure!(
            self.period_min >= 4 && self.period_min <= self.period_max,
            "period range must satisfy 4 ≤ period_min ≤ period_max"
        );
        ensure!(
            self.seq_len >= self.period_max,
            "seq_len ({}) must cover the longest period ({})",
            self.seq_len,
            self.period_max
        );
        ensure!(self.views >= 1 && self.seqs_per_view >= 1, "views and seqs_per_view must be positive");
        ensure!(self.noise >= 0.0, "noise must be nonnegative");
        if self.input_mode == InputMode::Silhouette {
            ensure!(
                self.frame_height % 4 == 0 && self.frame_width % 4 == 0,
                "frame size {}×{} must be divisible by 4",
                self.frame_height,
                self.frame_width
            );
            ensure!(
                (self.frame_height / 4) % self.parts == 0,
                "encoded height {} is not divisible into {} parts",
                self.frame_height / 4,
                self.parts
            );
        }
        Ok(())
    }

    /// The small configuration used for the synthetic benchmark runs.
    pub fn desk() -> Self {
        RunConfig {
            parts: 4,
            tam_layers: 2,
            channels: 16,
            metric_channels: 16,
            ffn_inner: 32,
            steps: 600,
            ..RunConfig::default()
        }
    }
}
