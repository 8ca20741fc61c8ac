//! Trend/seasonal split of a feature sequence along its time axis.
//!
//! The trend at frame `t` is the mean of the frames
//! `[t - ⌊W/2⌋, t + ⌈W/2⌉ - 1]`, with out-of-range positions replaced by the
//! nearest edge frame. The seasonal part is the residual, so the two always sum
//! back to the input.

use ndarray::{Array2, ArrayD, Axis};

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};

/// Default averaging window in frames (one gait cycle).
pub const DEFAULT_WINDOW: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub trend: ArrayD<f64>,
    pub seasonal: ArrayD<f64>,
    pub window: usize,
}

fn window_bounds(t: usize, window: usize) -> (isize, isize) {
    let lo = t as isize - (window / 2) as isize;
    let hi = t as isize + window.div_ceil(2) as isize - 1;
    (lo, hi)
}

fn clamp(j: isize, len: usize) -> usize {
    j.clamp(0, len as isize - 1) as usize
}

/// Averaging weights `A` such that `trend = A · x` for `x: [T × C]`.
pub fn moving_average_matrix(len: usize, window: usize) -> Result<Array2<f64>> {
    ensure!(window >= 1, "decomposition window must be at least 1");
    ensure!(len >= 1, "cannot decompose an empty sequence");
    let mut a = Array2::zeros((len, len));
    let w = 1.0 / window as f64;
    for t in 0..len {
        let (lo, hi) = window_bounds(t, window);
        for j in lo..=hi {
            a[[t, clamp(j, len)]] += w;
        }
    }
    Ok(a)
}

/// Splits `x` along its last axis.
pub fn trend_seasonal(x: &ArrayD<f64>, window: usize) -> Result<Decomposition> {
    ensure!(window >= 1, "decomposition window must be at least 1");
    ensure!(x.ndim() >= 1, "decomposition needs at least one axis");
    let time_axis = Axis(x.ndim() - 1);
    let len = x.len_of(time_axis);
    ensure!(len >= 1, "cannot decompose an empty sequence");

    let mut trend = ArrayD::zeros(x.raw_dim());
    for (lane, mut out) in x.lanes(time_axis).into_iter().zip(trend.lanes_mut(time_axis)) {
        for t in 0..len {
            let (lo, hi) = window_bounds(t, window);
            let sum: f64 = (lo..=hi).map(|j| lane[clamp(j, len)]).sum();
            out[t] = sum / window as f64;
        }
    }
    let seasonal = x - &trend;
    Ok(Decomposition {
        trend,
        seasonal,
        window,
    })
}

/// Tape version for a `[T × C]` matrix with frames as rows; returns `(trend, seasonal)`.
pub fn trend_seasonal_graph(g: &mut Graph, x: Var, window: usize) -> Result<(Var, Var)> {
    let a = moving_average_matrix(g.value(x).nrows(), window)?;
    let a = g.constant(a);
    let trend = g.matmul(a, x);
    let seasonal = g.sub(x, trend);
    Ok((trend, seasonal))
}
