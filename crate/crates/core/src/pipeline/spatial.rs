//! Toy spatial encoder and horizontal pooling for silhouette inputs.
//!
//! The encoder is two learnable 2×2 stride-2 linear filter stages applied to
//! every frame independently. On the tape a frame stack is laid out as a
//! `[T·H·W × C]` matrix whose rows run over `(t, y, x)` in row-major order.

use ndarray::{Array3, Array4};

use crate::error::{ensure, Result};
use crate::features::PartFeatureSequence;
use crate::graph::{Graph, Var};
use crate::nn::{join, Linear, Parameters, SeedRng};

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialEncoderParams {
    /// `4·C_i → C_hidden`
    pub stage1: Linear,
    /// `4·C_hidden → C_o`
    pub stage2: Linear,
}

impl SpatialEncoderParams {
    pub fn init(rng: &mut SeedRng, input_channels: usize, hidden: usize, output: usize) -> Self {
        SpatialEncoderParams {
            stage1: Linear::init(rng, 4 * input_channels, hidden),
            stage2: Linear::init(rng, 4 * hidden, output),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.stage1.input_dim() / 4
    }

    pub fn output_channels(&self) -> usize {
        self.stage2.output_dim()
    }
}

impl Parameters for SpatialEncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a crate::graph::Tensor)) {
        self.stage1.visit(&join(prefix, "stage1"), f);
        self.stage2.visit(&join(prefix, "stage2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut crate::graph::Tensor)) {
        self.stage1.visit_mut(&join(prefix, "stage1"), f);
        self.stage2.visit_mut(&join(prefix, "stage2"), f);
    }
}

/// `[T·H·W × C]` → `[T·(H/2)·(W/2) × 4C]` with 2×2 patches as rows.
fn patches(g: &mut Graph, x: Var, frames: usize, h: usize, w: usize) -> Var {
    let c = g.value(x).ncols();
    let (ho, wo) = (h / 2, w / 2);
    let mut src = Vec::with_capacity(frames * ho * wo * 4 * c);
    for t in 0..frames {
        for y in 0..ho {
            for xo in 0..wo {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let row = (t * h + 2 * y + dy) * w + 2 * xo + dx;
                        src.extend((0..c).map(|ch| row * c + ch));
                    }
                }
            }
        }
    }
    g.rearrange(x, frames * ho * wo, 4 * c, src)
}

fn check_frames(frames: &Array4<f64>, params: &SpatialEncoderParams) -> Result<()> {
    let (c, t, h, w) = frames.dim();
    ensure!(t >= 1, "no frames to encode");
    ensure!(
        h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0,
        "frame size {h}×{w} must be divisible by 4 for two stride-2 reductions"
    );
    ensure!(
        c == params.input_channels(),
        "encoder expects {} input channels, got {c}",
        params.input_channels()
    );
    Ok(())
}

/// Records the encoder on the tape. `frames: [C_i × T × H × W]`; returns the
/// encoded stack `[T·(H/4)·(W/4) × C_o]`.
pub fn spatial_encoder_graph(g: &mut Graph, frames: &Array4<f64>, params: &SpatialEncoderParams) -> Result<Var> {
    check_frames(frames, params)?;
    let (c, t, h, w) = frames.dim();
    let rows = frames.view().permuted_axes([1, 2, 3, 0]).as_standard_layout().into_owned();
    let x = g.constant(rows.into_shape_with_order((t * h * w, c)).expect("contiguous"));
    let p1 = patches(g, x, t, h, w);
    let y1 = params.stage1.forward(g, p1);
    let p2 = patches(g, y1, t, h / 2, w / 2);
    Ok(params.stage2.forward(g, p2))
}

/// Direct encoder: `[C_i × T × H × W]` → `[C_o × T × H/4 × W/4]`.
pub fn toy_spatial_encoder(frames: &Array4<f64>, params: &SpatialEncoderParams) -> Result<Array4<f64>> {
    let mut g = Graph::new();
    let y = spatial_encoder_graph(&mut g, frames, params)?;
    let (_, t, h, w) = frames.dim();
    let co = params.output_channels();
    let stack = g.value(y).clone();
    let map = stack
        .into_shape_with_order((t, h / 4, w / 4, co))
        .expect("encoded stack size");
    Ok(map.permuted_axes([3, 0, 1, 2]).as_standard_layout().into_owned())
}

/// Horizontal pooling on the tape: `[T·H·W × C]` stack → per part `[T × C]`,
/// each value the strip maximum plus the strip mean.
pub fn horizontal_pool_graph(
    g: &mut Graph,
    stack: Var,
    frames: usize,
    h: usize,
    w: usize,
    parts: usize,
) -> Result<Vec<Var>> {
    ensure!(parts >= 1 && h % parts == 0, "height {h} is not divisible into {parts} parts");
    let c = g.value(stack).ncols();
    ensure!(
        g.value(stack).nrows() == frames * h * w,
        "stack has {} rows, expected {}",
        g.value(stack).nrows(),
        frames * h * w
    );
    let strip = h / parts;
    let mut out = Vec::with_capacity(parts);
    for p in 0..parts {
        // rows: strip pixels, columns: (t, channel)
        let mut src = Vec::with_capacity(strip * w * frames * c);
        for y in p * strip..(p + 1) * strip {
            for x in 0..w {
                for t in 0..frames {
                    let row = (t * h + y) * w + x;
                    src.extend((0..c).map(|ch| row * c + ch));
                }
            }
        }
        let m = g.rearrange(stack, strip * w, frames * c, src);
        let mx = g.max_rows(m);
        let mean = g.mean_rows(m);
        let pooled = g.add(mx, mean);
        let identity: Vec<usize> = (0..frames * c).collect();
        out.push(g.rearrange(pooled, frames, c, identity));
    }
    Ok(out)
}

/// Direct horizontal pooling: `[C × T × H × W]` → `[P × C × T]`.
pub fn horizontal_pool(featmap: &Array4<f64>, parts: usize, source_indexes: Vec<usize>) -> Result<PartFeatureSequence> {
    let (c, t, h, w) = featmap.dim();
    ensure!(parts >= 1 && h % parts == 0, "height {h} is not divisible into {parts} parts");
    ensure!(h > 0 && w > 0, "empty feature map");
    let strip = h / parts;
    let mut values = Array3::zeros((parts, c, t));
    for p in 0..parts {
        for ch in 0..c {
            for f in 0..t {
                let mut mx = f64::NEG_INFINITY;
                let mut sum = 0.0;
                for y in p * strip..(p + 1) * strip {
                    for x in 0..w {
                        let v = featmap[[ch, f, y, x]];
                        mx = mx.max(v);
                        sum += v;
                    }
                }
                values[[p, ch, f]] = mx + sum / (strip * w) as f64;
            }
        }
    }
    PartFeatureSequence::new(values, source_indexes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use ndarray::{array, Array4};

    #[test]
    fn full_size_input_reduces_to_16_by_11() {
        let mut rng = seeded_rng(0, 0);
        let params = SpatialEncoderParams::init(&mut rng, 1, 2, 3);
        let frames = Array4::from_elem((1, 2, 64, 44), 0.5);
        let out = toy_spatial_encoder(&frames, &params).unwrap();
        assert_eq!(out.dim(), (3, 2, 16, 11));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = seeded_rng(1, 0);
        let params = SpatialEncoderParams::init(&mut rng, 1, 2, 3);
        let out = toy_spatial_encoder(&Array4::zeros((1, 5, 8, 8)), &params).unwrap();
        assert_eq!(out.dim().1, 5);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_indivisible_frames() {
        let mut rng = seeded_rng(2, 0);
        let params = SpatialEncoderParams::init(&mut rng, 1, 2, 3);
        assert!(toy_spatial_encoder(&Array4::zeros((1, 1, 6, 8)), &params).is_err());
        assert!(toy_spatial_encoder(&Array4::zeros((2, 1, 8, 8)), &params).is_err());
    }

    #[test]
    fn stage_one_matches_hand_convolution() {
        // identity-like filter summing a 2×2 patch
        let params = SpatialEncoderParams {
            stage1: Linear {
                w: array![[1.0, 1.0, 1.0, 1.0]],
                b: array![[0.5]],
            },
            stage2: Linear {
                w: array![[1.0, 0.0, 0.0, 0.0]],
                b: array![[0.0]],
            },
        };
        let mut frames = Array4::zeros((1, 1, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                frames[[0, 0, y, x]] = (y * 4 + x) as f64;
            }
        }
        // stage 2 keeps the top-left stage-1 output: 0+1+4+5 + 0.5
        let out = toy_spatial_encoder(&frames, &params).unwrap();
        assert_eq!(out[[0, 0, 0, 0]], 10.5);
    }

    #[test]
    fn pooling_examples() {
        let map = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pooled = horizontal_pool(&map, 2, vec![0]).unwrap();
        assert_eq!(pooled.values[[0, 0, 0]], 3.5);
        assert_eq!(pooled.values[[1, 0, 0]], 7.5);

        let c = Array4::from_elem((2, 3, 4, 5), 1.25);
        let pooled = horizontal_pool(&c, 4, vec![0, 1, 2]).unwrap();
        assert!(pooled.values.iter().all(|v| *v == 2.5));

        let one = horizontal_pool(&map, 1, vec![0]).unwrap();
        assert_eq!(one.values[[0, 0, 0]], 4.0 + 2.5);
        assert!(horizontal_pool(&map, 3, vec![0]).is_err());
    }

    #[test]
    fn graph_pooling_matches_direct() {
        let mut rng = seeded_rng(3, 0);
        let map = crate::nn::normal_matrix(&mut rng, 2, 3 * 8 * 4, 1.0)
            .into_shape_with_order((2, 3, 8, 4))
            .unwrap();
        let direct = horizontal_pool(&map, 2, vec![0, 1, 2]).unwrap();
        let mut g = Graph::new();
        let rows = map.view().permuted_axes([1, 2, 3, 0]).as_standard_layout().into_owned();
        let x = g.constant(rows.into_shape_with_order((3 * 8 * 4, 2)).unwrap());
        let parts = horizontal_pool_graph(&mut g, x, 3, 8, 4, 2).unwrap();
        for (p, v) in parts.iter().enumerate() {
            let expect = direct.part_frames(p);
            for (a, b) in g.value(*v).iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
