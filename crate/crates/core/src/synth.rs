//! Synthetic periodic sequences with known identity, period, phase, and view.
//!
//! An identity is a bank of per-part, per-channel harmonic waveforms sharing
//! one period. A sequence evaluates that bank at shifted frame positions,
//! rotates the channels of every part by a fixed view-specific orthogonal
//! matrix, and adds Gaussian noise. Everything is a pure function of the seeds.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::error::{ensure, Result};
use crate::features::{FeatureSequence, ModelInput, SilhouetteSequence};
use crate::nn::{seeded_rng, uniform};

const IDENTITY_STREAM: u64 = 1;
const SEQUENCE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub parts: usize,
    pub channels: usize,
    pub period_min: usize,
    pub period_max: usize,
    /// highest harmonic index per channel
    pub max_harmonic: usize,
    pub offset_scale: f64,
    /// rotation angle scale of the view mixing; 0 makes every view identical
    pub view_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            parts: 4,
            channels: 8,
            period_min: 24,
            period_max: 36,
            max_harmonic: 3,
            offset_scale: 0.5,
            view_strength: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        SynthConfig {
            parts: cfg.parts,
            channels: cfg.input_channels,
            period_min: cfg.period_min,
            period_max: cfg.period_max,
            offset_scale: cfg.offset_scale,
            view_strength: cfg.view_strength,
            ..SynthConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Harmonic {
    pub amplitude: f64,
    /// cycles per period
    pub index: usize,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticIdentity {
    pub id: usize,
    pub period: usize,
    /// `harmonics[part][channel]`
    pub harmonics: Vec<Vec<Vec<Harmonic>>>,
    /// `[P × C]`
    pub base_offset: Array2<f64>,
}

impl SyntheticIdentity {
    pub fn parts(&self) -> usize {
        self.base_offset.nrows()
    }

    pub fn channels(&self) -> usize {
        self.base_offset.ncols()
    }

    /// Noise-free, unmixed signal of part `p`, channel `c` at integer position `t`.
    pub fn value(&self, p: usize, c: usize, t: usize) -> f64 {
        let pos = (t % self.period) as f64 / self.period as f64;
        self.base_offset[[p, c]]
            + self.harmonics[p][c]
                .iter()
                .map(|h| h.amplitude * (2.0 * PI * h.index as f64 * pos + h.phase).cos())
                .sum::<f64>()
    }
}

pub fn gen_identity(seed: u64, id: usize, cfg: &SynthConfig) -> Result<SyntheticIdentity> {
    ensure!(
        cfg.period_min >= 4 && cfg.period_min <= cfg.period_max,
        "period range must satisfy 4 ≤ min ≤ max"
    );
    ensure!(cfg.parts >= 1 && cfg.channels >= 1, "parts and channels must be positive");
    ensure!(cfg.max_harmonic >= 1, "max_harmonic must be at least 1");
    let mut rng = seeded_rng(seed, IDENTITY_STREAM);
    let period = rng.random_range(cfg.period_min..=cfg.period_max);
    let offset = Normal::new(0.0, cfg.offset_scale.max(0.0)).expect("finite scale");
    let mut harmonics = Vec::with_capacity(cfg.parts);
    let mut base_offset = Array2::zeros((cfg.parts, cfg.channels));
    for p in 0..cfg.parts {
        let mut per_channel = Vec::with_capacity(cfg.channels);
        for c in 0..cfg.channels {
            let list: Vec<Harmonic> = (1..=cfg.max_harmonic)
                .map(|index| Harmonic {
                    // the fundamental dominates so the period is unambiguous
                    amplitude: if index == 1 {
                        uniform(&mut rng, 0.6, 1.0)
                    } else {
                        uniform(&mut rng, 0.0, 0.4)
                    },
                    index,
                    phase: uniform(&mut rng, 0.0, 2.0 * PI),
                })
                .collect();
            per_channel.push(list);
            base_offset[[p, c]] = offset.sample(&mut rng);
        }
        harmonics.push(per_channel);
    }
    Ok(SyntheticIdentity {
        id,
        period,
        harmonics,
        base_offset,
    })
}

/// Orthogonal channel mix for `view`: a product of Givens rotations on
/// neighbouring channel pairs. View 0 is the identity.
pub fn view_mixing(view: usize, channels: usize, strength: f64) -> Array2<f64> {
    let mut m = Array2::eye(channels);
    for c in 0..channels.saturating_sub(1) {
        let angle = strength * view as f64 * (1.0 + c as f64) / channels as f64;
        let (s, co) = angle.sin_cos();
        // left-multiply by the rotation acting on rows c and c+1
        for j in 0..channels {
            let a = m[[c, j]];
            let b = m[[c + 1, j]];
            m[[c, j]] = co * a - s * b;
            m[[c + 1, j]] = s * a + co * b;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSpec {
    pub view: usize,
    /// frames by which the cycle is advanced
    pub phase: usize,
    pub noise_sigma: f64,
    pub length: usize,
    pub seed: u64,
}

pub fn gen_sequence(
    identity: &SyntheticIdentity,
    spec: &SequenceSpec,
    cfg: &SynthConfig,
) -> Result<FeatureSequence> {
    ensure!(
        spec.length >= identity.period,
        "sequence length {} is shorter than the period {}",
        spec.length,
        identity.period
    );
    ensure!(spec.noise_sigma >= 0.0, "noise sigma must be nonnegative");
    let (parts, channels) = (identity.parts(), identity.channels());
    let mix = view_mixing(spec.view, channels, cfg.view_strength);
    let mut values = Array3::zeros((parts, channels, spec.length));
    let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
    let mut rng = seeded_rng(spec.seed, SEQUENCE_STREAM);
    let mut raw = vec![0.0; channels];
    for p in 0..parts {
        for t in 0..spec.length {
            for (c, r) in raw.iter_mut().enumerate() {
                *r = identity.value(p, c, t + spec.phase);
            }
            for c in 0..channels {
                let mixed: f64 = (0..channels).map(|j| mix[[c, j]] * raw[j]).sum();
                values[[p, c, t]] = mixed;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        values.mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    Ok(FeatureSequence {
        values,
        identity: identity.id,
        view: spec.view,
        ground_truth_period: Some(identity.period),
    })
}

fn squash(v: f64) -> f64 {
    0.5 * (1.0 + v.tanh())
}

/// Rasterizes a feature sequence as one horizontal bar per part strip.
///
/// Channel 0 drives the bar's horizontal centre and channel 1 its width, so
/// the silhouettes swing with the same period as the features.
pub fn render_silhouettes(seq: &FeatureSequence, height: usize, width: usize) -> Result<SilhouetteSequence> {
    let (parts, channels, frames) = seq.values.dim();
    ensure!(
        height >= parts && height % parts == 0,
        "height {height} does not split into {parts} strips"
    );
    ensure!(width >= 4, "width must be at least 4");
    let strip = height / parts;
    let mut out = Array4::zeros((1, frames, height, width));
    for t in 0..frames {
        for p in 0..parts {
            let centre_signal = seq.values[[p, 0, t]];
            let width_signal = if channels > 1 { seq.values[[p, 1, t]] } else { 0.0 };
            let centre = width as f64 * (0.25 + 0.5 * squash(centre_signal));
            let half = 1.0 + 0.25 * width as f64 * squash(width_signal);
            for r in p * strip..(p + 1) * strip {
                for x in 0..width {
                    let d = (x as f64 + 0.5 - centre).abs();
                    // one pixel of soft edge
                    out[[0, t, r, x]] = (half - d + 0.5).clamp(0.0, 1.0);
                }
            }
        }
    }
    SilhouetteSequence::new(out, seq.identity, seq.view, seq.ground_truth_period)
}

/// Train identities plus a gallery/probe split of held-out identities.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<ModelInput>,
    pub gallery: Vec<ModelInput>,
    pub probe: Vec<ModelInput>,
    pub train_identities: Vec<SyntheticIdentity>,
    pub test_identities: Vec<SyntheticIdentity>,
}

impl Corpus {
    /// Number of classes seen in training (labels are `0..n`).
    pub fn classes(&self) -> usize {
        self.train_identities.len()
    }
}

fn sequence_seed(data_seed: u64, id: usize, view: usize, rep: usize) -> u64 {
    data_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((id as u64) << 24) | ((view as u64) << 12) | rep as u64)
}

fn identity_seed(data_seed: u64, id: usize) -> u64 {
    data_seed.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(id as u64)
}

/// Builds the benchmark corpus described by `cfg`.
///
/// Training identities get labels `0..train_ids`; held-out identities are
/// numbered after them. For each held-out identity and view the first
/// sequence goes to the gallery and the rest to the probe set.
pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus> {
    ensure!(cfg.train_ids >= 1, "the training split needs at least one identity");
    let scfg = SynthConfig::from_run(cfg);
    let make = |id: usize, view: usize, rep: usize, identity: &SyntheticIdentity| -> Result<ModelInput> {
        let seed = sequence_seed(cfg.data_seed, id, view, rep);
        let mut rng = seeded_rng(seed, 0);
        let spec = SequenceSpec {
            view,
            phase: rng.random_range(0..identity.period),
            noise_sigma: cfg.noise,
            length: cfg.seq_len,
            seed,
        };
        let f = gen_sequence(identity, &spec, &scfg)?;
        Ok(match cfg.input_mode {
            crate::config::InputMode::Features => ModelInput::Features(f),
            crate::config::InputMode::Silhouette => {
                ModelInput::Silhouette(render_silhouettes(&f, cfg.frame_height, cfg.frame_width)?)
            }
        })
    };

    let mut corpus = Corpus {
        train: Vec::new(),
        gallery: Vec::new(),
        probe: Vec::new(),
        train_identities: Vec::new(),
        test_identities: Vec::new(),
    };
    for id in 0..cfg.train_ids + cfg.test_ids {
        let identity = gen_identity(identity_seed(cfg.data_seed, id), id, &scfg)?;
        for view in 0..cfg.views {
            for rep in 0..cfg.seqs_per_view {
                let seq = make(id, view, rep, &identity)?;
                if id < cfg.train_ids {
                    corpus.train.push(seq);
                } else if rep == 0 {
                    corpus.gallery.push(seq);
                } else {
                    corpus.probe.push(seq);
                }
            }
        }
        if id < cfg.train_ids {
            corpus.train_identities.push(identity);
        } else {
            corpus.test_identities.push(identity);
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(view: usize, phase: usize, noise: f64, length: usize) -> SequenceSpec {
        SequenceSpec {
            view,
            phase,
            noise_sigma: noise,
            length,
            seed: 11,
        }
    }

    #[test]
    fn identities_are_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(gen_identity(5, 0, &cfg).unwrap(), gen_identity(5, 0, &cfg).unwrap());
    }

    #[test]
    fn degenerate_period_range() {
        let cfg = SynthConfig {
            period_min: 30,
            period_max: 30,
            ..SynthConfig::default()
        };
        for s in 0..20 {
            assert_eq!(gen_identity(s, 0, &cfg).unwrap().period, 30);
        }
    }

    #[test]
    fn full_period_phase_is_identity() {
        let cfg = SynthConfig::default();
        let id = gen_identity(3, 0, &cfg).unwrap();
        let a = gen_sequence(&id, &spec(1, 0, 0.0, 60), &cfg).unwrap();
        let b = gen_sequence(&id, &spec(1, id.period, 0.0, 60), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phase_shifts_in_time() {
        let cfg = SynthConfig::default();
        let id = gen_identity(4, 0, &cfg).unwrap();
        let k = 7;
        let a = gen_sequence(&id, &spec(2, 0, 0.0, 80), &cfg).unwrap();
        let b = gen_sequence(&id, &spec(2, k, 0.0, 80), &cfg).unwrap();
        for t in 0..80 - k {
            for p in 0..4 {
                for c in 0..8 {
                    assert!((b.values[[p, c, t]] - a.values[[p, c, t + k]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn views_preserve_frame_norms() {
        let cfg = SynthConfig::default();
        let id = gen_identity(6, 0, &cfg).unwrap();
        let a = gen_sequence(&id, &spec(0, 3, 0.0, 40), &cfg).unwrap();
        let b = gen_sequence(&id, &spec(3, 3, 0.0, 40), &cfg).unwrap();
        assert_ne!(a.values, b.values);
        for p in 0..4 {
            for t in 0..40 {
                let na: f64 = (0..8).map(|c| a.values[[p, c, t]].powi(2)).sum();
                let nb: f64 = (0..8).map(|c| b.values[[p, c, t]].powi(2)).sum();
                assert!((na - nb).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mixing_is_orthogonal() {
        for v in 0..5 {
            let m = view_mixing(v, 6, 0.7);
            let i = m.dot(&m.t());
            for r in 0..6 {
                for c in 0..6 {
                    let e = if r == c { 1.0 } else { 0.0 };
                    assert!((i[[r, c]] - e).abs() < 1e-12);
                }
            }
        }
        assert_eq!(view_mixing(0, 4, 0.9), Array2::<f64>::eye(4));
    }

    #[test]
    fn short_sequences_are_rejected() {
        let cfg = SynthConfig::default();
        let id = gen_identity(0, 0, &cfg).unwrap();
        assert!(gen_sequence(&id, &spec(0, 0, 0.0, id.period - 1), &cfg).is_err());
    }

    #[test]
    fn silhouettes_are_bounded_and_periodic() {
        let cfg = SynthConfig::default();
        let id = gen_identity(1, 0, &cfg).unwrap();
        let f = gen_sequence(&id, &spec(1, 0, 0.0, id.period * 2), &cfg).unwrap();
        let s = render_silhouettes(&f, 16, 12).unwrap();
        assert_eq!(s.frames.dim(), (1, id.period * 2, 16, 12));
        assert!(s.frames.iter().all(|v| (0.0..=1.0).contains(v)));
        for t in 0..id.period {
            let a = s.frames.slice(ndarray::s![.., t, .., ..]);
            let b = s.frames.slice(ndarray::s![.., t + id.period, .., ..]);
            assert_eq!(a, b);
        }
        assert!(s.frames.iter().any(|v| *v > 0.5));
    }

    #[test]
    fn corpus_layout() {
        let cfg = RunConfig {
            train_ids: 3,
            test_ids: 2,
            views: 4,
            seqs_per_view: 2,
            parts: 2,
            ..RunConfig::desk()
        };
        let c = build_corpus(&cfg).unwrap();
        assert_eq!(c.train.len(), 3 * 4 * 2);
        assert_eq!(c.gallery.len(), 2 * 4);
        assert_eq!(c.probe.len(), 2 * 4);
        assert!(c.gallery.iter().all(|s| s.identity() >= 3));
        assert_eq!(c.classes(), 3);
    }
}
