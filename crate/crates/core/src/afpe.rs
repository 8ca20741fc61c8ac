//! Adaptive Fourier-transform position encoding.
//!
//! A handful of sampled cosine/sine basis sequences over the full sequence
//! length is mapped through a small perceptron into one encoding row per
//! absolute frame index. Sampled frames then pick up their rows by index.
//!
//! Harmonic selection takes `T_d` evenly spaced indices `k_j = j·⌊T/T_d⌋`.
//! An index that is a multiple of `T` would produce the constant basis, so it
//! is replaced by the fundamental `k = 1`; collisions are resolved by moving to
//! the next free index that is not itself a multiple of `T`. A one-frame
//! sequence has no non-constant basis and keeps `k = 1`.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use ndarray::Array2;

use crate::error::{ensure, Result};
use crate::features::PartFeatureSequence;
use crate::graph::{Graph, Tensor, Var};
use crate::nn::{join, Activation, Linear, Parameters, SeedRng};

/// Sampled basis rows: for each selected `k`, a cosine row followed by a sine row.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseSequenceSet {
    pub seq_len: usize,
    pub td: usize,
    pub k_indices: Vec<usize>,
    /// `[2·td × seq_len]`
    pub values: Array2<f64>,
}

/// Selected harmonic indices for a sequence of `seq_len` frames.
pub fn harmonic_indices(seq_len: usize, td: usize) -> Result<Vec<usize>> {
    ensure!(td >= 1, "td must be at least 1");
    ensure!(
        td <= seq_len,
        "td ({td}) cannot exceed the sequence length ({seq_len})"
    );
    let d = seq_len / td;
    let mut used = BTreeSet::new();
    let mut out = Vec::with_capacity(td);
    for j in 1..=td {
        let mut k = (j * d) % seq_len;
        if k == 0 {
            k = 1;
        }
        while used.contains(&k) || (seq_len > 1 && k % seq_len == 0) {
            k += 1;
        }
        used.insert(k);
        out.push(k);
    }
    Ok(out)
}

pub fn build_base_sequences(seq_len: usize, td: usize) -> Result<BaseSequenceSet> {
    let k_indices = harmonic_indices(seq_len, td)?;
    let mut values = Array2::zeros((2 * td, seq_len));
    for (j, &k) in k_indices.iter().enumerate() {
        for t in 0..seq_len {
            // reduce k·t first so the phase stays in [0, 2π) and exact at t = 0
            let phase = 2.0 * PI * ((k * t) % seq_len) as f64 / seq_len as f64;
            values[[2 * j, t]] = phase.cos();
            values[[2 * j + 1, t]] = phase.sin();
        }
    }
    Ok(BaseSequenceSet {
        seq_len,
        td,
        k_indices,
        values,
    })
}

/// Two-layer perceptron mapping a `2·T_d` basis column to a `C`-channel encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEncoderParams {
    /// hidden layer, `w: [H × 2·T_d]`
    pub hidden: Linear,
    /// output layer, `w: [C × H]`
    pub output: Linear,
    pub activation: Activation,
}

impl PositionEncoderParams {
    /// Hidden width defaults to the output channel count.
    pub fn init(rng: &mut SeedRng, td: usize, channels: usize) -> Self {
        Self::init_with_hidden(rng, td, channels, channels)
    }

    pub fn init_with_hidden(rng: &mut SeedRng, td: usize, hidden: usize, channels: usize) -> Self {
        PositionEncoderParams {
            hidden: Linear::init(rng, 2 * td, hidden),
            output: Linear::init(rng, hidden, channels),
            activation: Activation::Gelu,
        }
    }

    pub fn zeros(td: usize, hidden: usize, channels: usize) -> Self {
        PositionEncoderParams {
            hidden: Linear::zeros(2 * td, hidden),
            output: Linear::zeros(hidden, channels),
            activation: Activation::Gelu,
        }
    }

    pub fn input_width(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn channels(&self) -> usize {
        self.output.output_dim()
    }

    fn check(&self, bases: &BaseSequenceSet) -> Result<()> {
        self.hidden.check()?;
        self.output.check()?;
        ensure!(
            self.input_width() == 2 * bases.td,
            "position encoder expects {} inputs but the basis has {} rows",
            self.input_width(),
            2 * bases.td
        );
        ensure!(
            self.output.input_dim() == self.hidden.output_dim(),
            "position encoder hidden width mismatch ({} vs {})",
            self.output.input_dim(),
            self.hidden.output_dim()
        );
        Ok(())
    }
}

impl Parameters for PositionEncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// One encoding row per absolute frame index, `[T × C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionTable {
    pub values: Array2<f64>,
}

impl PositionTable {
    pub fn seq_len(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// Records the encoder on the tape and returns the `[T × C]` table.
pub fn encode_positions_graph(
    g: &mut Graph,
    bases: &BaseSequenceSet,
    params: &PositionEncoderParams,
) -> Result<Var> {
    params.check(bases)?;
    let columns = g.constant(bases.values.t().to_owned());
    let h = params.hidden.forward(g, columns);
    let h = params.activation.forward(g, h);
    Ok(params.output.forward(g, h))
}

pub fn encode_positions(
    bases: &BaseSequenceSet,
    params: &PositionEncoderParams,
) -> Result<PositionTable> {
    let mut g = Graph::new();
    let table = encode_positions_graph(&mut g, bases, params)?;
    Ok(PositionTable {
        values: g.value(table).clone(),
    })
}

fn check_indexes(indexes: &[usize], seq_len: usize) -> Result<()> {
    if let Some(bad) = indexes.iter().find(|&&i| i >= seq_len) {
        return Err(crate::error::TpaError::domain(format!(
            "frame index {bad} is outside the position table (length {seq_len})"
        )));
    }
    Ok(())
}

/// `x[p, :, s] + table[indexes[s]]` for every part and sampled column.
pub fn gather_add(
    features: &PartFeatureSequence,
    table: &PositionTable,
    indexes: &[usize],
) -> Result<PartFeatureSequence> {
    check_indexes(indexes, table.seq_len())?;
    ensure!(
        indexes.len() == features.frames(),
        "{} indexes for {} sampled frames",
        indexes.len(),
        features.frames()
    );
    ensure!(
        features.channels() == table.channels(),
        "feature channels ({}) differ from encoding channels ({})",
        features.channels(),
        table.channels()
    );
    let mut out = features.values.clone();
    for p in 0..features.parts() {
        for (s, &idx) in indexes.iter().enumerate() {
            for c in 0..features.channels() {
                out[[p, c, s]] += table.values[[idx, c]];
            }
        }
    }
    Ok(PartFeatureSequence {
        values: out,
        source_indexes: features.source_indexes.clone(),
    })
}

/// Tape version for one part: `frames` is `[T_s × C]`, `table` is `[T × C]`.
pub fn gather_add_graph(g: &mut Graph, frames: Var, table: Var, indexes: &[usize]) -> Result<Var> {
    check_indexes(indexes, g.value(table).nrows())?;
    ensure!(
        g.value(frames).dim() == (indexes.len(), g.value(table).ncols()),
        "frame matrix {:?} does not match {} indexes × {} channels",
        g.value(frames).dim(),
        indexes.len(),
        g.value(table).ncols()
    );
    let rows = g.gather_rows(table, indexes);
    Ok(g.add(frames, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use ndarray::{array, Array3};

    #[test]
    fn single_frame_keeps_fundamental() {
        let b = build_base_sequences(1, 1).unwrap();
        assert_eq!(b.k_indices, vec![1]);
        assert_eq!(b.values, array![[1.0], [0.0]]);
    }

    #[test]
    fn four_frames_two_components() {
        let b = build_base_sequences(4, 2).unwrap();
        assert_eq!(b.k_indices, vec![2, 1]);
        let expect = array![
            [1.0, -1.0, 1.0, -1.0],
            [0.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, -1.0, 0.0],
            [0.0, 1.0, 0.0, -1.0]
        ];
        for (a, e) in b.values.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn single_component_is_the_fundamental() {
        let b = build_base_sequences(30, 1).unwrap();
        assert_eq!(b.k_indices, vec![1]);
        // one full period: the cosine row returns to 1 only at t = 0 inside the window
        let cos = b.values.row(0);
        assert_eq!(cos.iter().filter(|v| (*v - 1.0).abs() < 1e-12).count(), 1);
        assert!((cos[15] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_column_is_cos_one_sin_zero() {
        for (t, td) in [(7, 3), (30, 5), (64, 64), (9, 1)] {
            let b = build_base_sequences(t, td).unwrap();
            for j in 0..td {
                assert_eq!(b.values[[2 * j, 0]], 1.0);
                assert_eq!(b.values[[2 * j + 1, 0]], 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_component_counts() {
        assert!(build_base_sequences(10, 0).is_err());
        assert!(build_base_sequences(10, 11).is_err());
    }

    #[test]
    fn zero_params_give_zero_table() {
        let b = build_base_sequences(12, 3).unwrap();
        let p = PositionEncoderParams::zeros(3, 8, 5);
        let t = encode_positions(&b, &p).unwrap();
        assert_eq!(t.values.dim(), (12, 5));
        assert!(t.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_bias_only_gives_constant_rows() {
        let b = build_base_sequences(10, 2).unwrap();
        let mut rng = seeded_rng(3, 0);
        let mut p = PositionEncoderParams::init(&mut rng, 2, 4);
        p.output.w.fill(0.0);
        p.output.b = array![[0.5, -1.0, 2.0, 3.5]];
        let t = encode_positions(&b, &p).unwrap();
        for row in t.values.rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0, 2.0, 3.5]);
        }
    }

    #[test]
    fn table_repeats_with_basis_period() {
        let mut rng = seeded_rng(5, 0);
        // a basis whose only harmonic has period 6 inside a 12-frame window
        let b = BaseSequenceSet {
            seq_len: 12,
            td: 1,
            k_indices: vec![2],
            values: Array2::from_shape_fn((2, 12), |(r, t)| {
                let ph = 2.0 * PI * 2.0 * t as f64 / 12.0;
                if r == 0 { ph.cos() } else { ph.sin() }
            }),
        };
        let p = PositionEncoderParams::init(&mut rng, 1, 6);
        let t = encode_positions(&b, &p).unwrap();
        for i in 0..6 {
            for c in 0..6 {
                assert!((t.values[[i, c]] - t.values[[i + 6, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gather_add_matches_elementwise() {
        let x = Array3::from_shape_fn((2, 3, 4), |(p, c, s)| (p * 100 + c * 10 + s) as f64);
        let table = PositionTable {
            values: Array2::from_shape_fn((10, 3), |(r, c)| r as f64 + 0.1 * c as f64),
        };
        let idx = [1, 3, 5, 7];
        let f = PartFeatureSequence::new(x.clone(), idx.to_vec()).unwrap();
        let out = gather_add(&f, &table, &idx).unwrap();
        for p in 0..2 {
            for c in 0..3 {
                for s in 0..4 {
                    assert_eq!(out.values[[p, c, s]], x[[p, c, s]] + table.values[[idx[s], c]]);
                }
            }
        }
    }

    #[test]
    fn gather_add_identity_and_repeats() {
        let x = Array3::from_shape_fn((2, 3, 3), |(p, c, s)| (p + c * s) as f64);
        let f = PartFeatureSequence::new(x.clone(), vec![0, 1, 2]).unwrap();
        let zero = PositionTable { values: Array2::zeros((5, 3)) };
        assert_eq!(gather_add(&f, &zero, &[0, 1, 2]).unwrap().values, x);

        let table = PositionTable {
            values: Array2::from_shape_fn((5, 3), |(r, c)| (r * 3 + c) as f64 + 1.0),
        };
        let z = PartFeatureSequence::new(Array3::zeros((2, 3, 3)), vec![0, 0, 0]).unwrap();
        let out = gather_add(&z, &table, &[0, 0, 0]).unwrap();
        for p in 0..2 {
            for s in 0..3 {
                for c in 0..3 {
                    assert_eq!(out.values[[p, c, s]], table.values[[0, c]]);
                }
            }
        }
    }

    #[test]
    fn gather_add_rejects_out_of_range() {
        let f = PartFeatureSequence::new(Array3::zeros((1, 2, 2)), vec![0, 1]).unwrap();
        let table = PositionTable { values: Array2::zeros((4, 2)) };
        assert!(gather_add(&f, &table, &[0, 4]).is_err());
        let bad_width = PositionTable { values: Array2::zeros((4, 3)) };
        assert!(gather_add(&f, &bad_width, &[0, 1]).is_err());
    }

    #[test]
    fn encoder_dimension_mismatch_is_rejected() {
        let b = build_base_sequences(10, 3).unwrap();
        let p = PositionEncoderParams::zeros(2, 4, 4);
        assert!(encode_positions(&b, &p).is_err());
    }
}
