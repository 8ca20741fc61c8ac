//! Sequence containers: model inputs and part-level feature sequences.

use ndarray::{arr0, Array2, Array3, Array4, ArrayD, Axis, Ix3};

use crate::container::TensorMap;
use crate::error::{ensure, Result, TpaError};

/// Part features `[P parts × C channels × T_s sampled frames]` together with
/// the absolute frame index each sampled column came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PartFeatureSequence {
    pub values: Array3<f64>,
    pub source_indexes: Vec<usize>,
}

impl PartFeatureSequence {
    pub fn new(values: Array3<f64>, source_indexes: Vec<usize>) -> Result<Self> {
        let (parts, _, frames) = values.dim();
        ensure!(parts >= 1, "part feature sequence needs at least one part");
        ensure!(
            frames == source_indexes.len(),
            "{} sampled frames but {} source indexes",
            frames,
            source_indexes.len()
        );
        Ok(PartFeatureSequence {
            values,
            source_indexes,
        })
    }

    pub fn parts(&self) -> usize {
        self.values.dim().0
    }

    pub fn channels(&self) -> usize {
        self.values.dim().1
    }

    pub fn frames(&self) -> usize {
        self.values.dim().2
    }

    /// One part as a `[T_s × C]` matrix (frames as rows).
    pub fn part_frames(&self, part: usize) -> Array2<f64> {
        self.values.index_axis(Axis(0), part).t().to_owned()
    }
}

/// Rendered frames `[C_i × T_i × H_i × W_i]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteSequence {
    pub frames: Array4<f64>,
    pub identity: usize,
    pub view: usize,
    pub ground_truth_period: Option<usize>,
}

impl SilhouetteSequence {
    pub fn new(
        frames: Array4<f64>,
        identity: usize,
        view: usize,
        ground_truth_period: Option<usize>,
    ) -> Result<Self> {
        let (c, t, h, w) = frames.dim();
        ensure!(t >= 1, "silhouette sequence has no frames");
        ensure!(c >= 1 && h >= 1 && w >= 1, "silhouette dimensions must be positive");
        Ok(SilhouetteSequence {
            frames,
            identity,
            view,
            ground_truth_period,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Precomputed per-part features `[P × C_in × T]` for every original frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub values: Array3<f64>,
    pub identity: usize,
    pub view: usize,
    pub ground_truth_period: Option<usize>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.values.dim().2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One part as a `[T × C_in]` matrix.
    pub fn part_frames(&self, part: usize) -> Array2<f64> {
        self.values.index_axis(Axis(0), part).t().to_owned()
    }

    /// Container entries `values`, `identity`, `view` and, when known, `period`.
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut map = TensorMap::new();
        map.insert("values".into(), self.values.clone().into_dyn());
        map.insert("identity".into(), arr0(self.identity as f64).into_dyn());
        map.insert("view".into(), arr0(self.view as f64).into_dyn());
        if let Some(p) = self.ground_truth_period {
            map.insert("period".into(), arr0(p as f64).into_dyn());
        }
        map
    }

    /// Inverse of [`Self::to_tensor_map`]; `identity` and `view` default to 0.
    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let values = map
            .get("values")
            .ok_or_else(|| TpaError::domain("sequence container has no `values` entry"))?
            .clone()
            .into_dimensionality::<Ix3>()
            .map_err(|_| TpaError::domain("`values` must be a [parts × channels × frames] tensor"))?;
        let count = |name: &str| -> Result<Option<usize>> {
            let Some(t) = map.get(name) else { return Ok(None) };
            let v = scalar(t).ok_or_else(|| TpaError::domain(format!("`{name}` must hold one value")))?;
            ensure!(v >= 0.0 && v.fract() == 0.0, "`{name}` must be a nonnegative integer, got {v}");
            Ok(Some(v as usize))
        };
        Ok(FeatureSequence {
            values,
            identity: count("identity")?.unwrap_or(0),
            view: count("view")?.unwrap_or(0),
            ground_truth_period: count("period")?,
        })
    }
}

fn scalar(t: &ArrayD<f64>) -> Option<f64> {
    (t.len() == 1).then(|| t.iter().next().copied()).flatten()
}

/// Either input representation accepted by the model.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput {
    Features(FeatureSequence),
    Silhouette(SilhouetteSequence),
}

impl ModelInput {
    pub fn len(&self) -> usize {
        match self {
            ModelInput::Features(f) => f.len(),
            ModelInput::Silhouette(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn identity(&self) -> usize {
        match self {
            ModelInput::Features(f) => f.identity,
            ModelInput::Silhouette(s) => s.identity,
        }
    }

    pub fn view(&self) -> usize {
        match self {
            ModelInput::Features(f) => f.view,
            ModelInput::Silhouette(s) => s.view,
        }
    }

    pub fn ground_truth_period(&self) -> Option<usize> {
        match self {
            ModelInput::Features(f) => f.ground_truth_period,
            ModelInput::Silhouette(s) => s.ground_truth_period,
        }
    }
}
