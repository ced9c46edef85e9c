//! Domain types shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Camera platform of a tracklet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewId {
    Aerial,
    Ground,
    Wearable,
}

impl ViewId {
    pub const ALL: [ViewId; 3] = [ViewId::Aerial, ViewId::Ground, ViewId::Wearable];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            ViewId::Aerial => 0,
            ViewId::Ground => 1,
            ViewId::Wearable => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::Index(format!("view index {i} out of range 0..3")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewId::Aerial => "aerial",
            ViewId::Ground => "ground",
            ViewId::Wearable => "wearable",
        }
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aerial" => Ok(ViewId::Aerial),
            "ground" => Ok(ViewId::Ground),
            "wearable" => Ok(ViewId::Wearable),
            other => Err(Error::Validation(format!("unknown view '{other}' (valid views: aerial, ground, wearable)"))),
        }
    }
}

/// Token tensor of one clip, `[T, Np+1, d]` stored frame-major as `[T*(Np+1), d]`.
///
/// Row `t*(Np+1)` is the class token of frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTokens {
    data: Tensor,
    frames: usize,
    tokens: usize,
}

impl ClipTokens {
    pub fn new(data: Tensor, frames: usize) -> Result<Self> {
        if frames == 0 || data.nrows() == 0 || !data.nrows().is_multiple_of(frames) {
            return Err(Error::Shape(format!("{} token rows cannot be split into {frames} frames", data.nrows())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("clip tokens contain non-finite values".into()));
        }
        let tokens = data.nrows() / frames;
        Ok(Self { data, frames, tokens })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Tokens per frame, `Np + 1`.
    pub fn tokens_per_frame(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.tokens, self.dim())
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![t * self.tokens..(t + 1) * self.tokens, ..])
    }

    pub fn get(&self, t: usize, i: usize, c: usize) -> f64 {
        self.data[[t * self.tokens + i, c]]
    }

    pub fn to_var(&self, g: &mut Graph) -> ClipVar {
        ClipVar { var: g.constant(self.data.clone()), frames: self.frames, tokens: self.tokens }
    }
}

/// [`ClipTokens`] living on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipVar {
    pub var: Var,
    pub frames: usize,
    pub tokens: usize,
}

impl ClipVar {
    pub fn with_var(self, var: Var) -> Self {
        Self { var, ..self }
    }

    pub fn rows(&self) -> usize {
        self.frames * self.tokens
    }

    pub fn to_tokens(&self, g: &Graph) -> Result<ClipTokens> {
        ClipTokens::new(g.value(self.var).clone(), self.frames)
    }
}

/// Pooled clip vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipDescriptor {
    pub vector: Array1<f64>,
    pub normalized: bool,
}

impl ClipDescriptor {
    pub fn new(vector: Array1<f64>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("descriptor contains non-finite values".into()));
        }
        Ok(Self { vector, normalized: false })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.dot(&self.vector).sqrt()
    }
}

/// Mean over all `T*(Np+1)` token vectors, class tokens included.
pub fn clip_pool(tokens: &ClipTokens) -> ClipDescriptor {
    let n = tokens.data.nrows() as f64;
    let sum = tokens.data.sum_axis(ndarray::Axis(0));
    ClipDescriptor { vector: sum / n, normalized: false }
}

/// Graph version of [`clip_pool`]: `[T*(Np+1), d] -> [1, d]`.
pub fn clip_pool_var(g: &mut Graph, clip: ClipVar) -> Var {
    g.mean_rows(clip.var)
}

pub fn normalize_descriptor(f: &ClipDescriptor) -> Result<ClipDescriptor> {
    let norm = f.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!("cannot normalize descriptor with norm {norm}")));
    }
    Ok(ClipDescriptor { vector: &f.vector / norm, normalized: true })
}

/// One tracklet as listed in a manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackletRecord {
    pub tracklet_id: String,
    pub person_id: String,
    pub view: ViewId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub altitude_m: Option<u32>,
    pub frames: Vec<String>,
}

pub const ALTITUDES_M: [u32; 4] = [15, 30, 80, 120];

impl TrackletRecord {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Validation(format!("tracklet {} has no frames", self.tracklet_id)));
        }
        match (self.view, self.altitude_m) {
            (ViewId::Aerial, None) => {
                Err(Error::Validation(format!("aerial tracklet {} has no altitude", self.tracklet_id)))
            }
            (ViewId::Aerial, Some(a)) if !ALTITUDES_M.contains(&a) => {
                Err(Error::Validation(format!("tracklet {}: altitude {a} m not in {ALTITUDES_M:?}", self.tracklet_id)))
            }
            (ViewId::Ground | ViewId::Wearable, Some(_)) => {
                Err(Error::Validation(format!("non-aerial tracklet {} carries an altitude", self.tracklet_id)))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn view_parsing_and_order() {
        assert_eq!("Aerial".parse::<ViewId>().unwrap(), ViewId::Aerial);
        assert!("drone".parse::<ViewId>().is_err());
        assert!(ViewId::Aerial < ViewId::Ground && ViewId::Ground < ViewId::Wearable);
        for v in ViewId::ALL {
            assert_eq!(ViewId::from_index(v.index()).unwrap(), v);
        }
    }

    #[test]
    fn pool_constant_tokens() {
        let data = Tensor::from_shape_fn((6, 3), |(_, c)| c as f64 + 0.5);
        let clip = ClipTokens::new(data, 2).unwrap();
        assert_eq!(clip_pool(&clip).vector, array![0.5, 1.5, 2.5]);
    }

    #[test]
    fn pool_two_tokens() {
        let clip = ClipTokens::new(array![[1.0, 0.0], [0.0, 1.0]], 1).unwrap();
        assert_eq!(clip_pool(&clip).vector, array![0.5, 0.5]);
    }

    #[test]
    fn pool_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cube = Array3::<f64>::from_shape_fn((2, 3, 4), |_| StandardNormal.sample(&mut rng));
        let flat = cube.clone().into_shape_with_order((6, 4)).unwrap();
        let pooled = clip_pool(&ClipTokens::new(flat, 2).unwrap());
        for c in 0..4 {
            let mut acc = 0.0;
            for t in 0..2 {
                for i in 0..3 {
                    acc += cube[[t, i, c]];
                }
            }
            assert!((pooled.vector[c] - acc / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_examples() {
        let f = ClipDescriptor::new(array![3.0, 4.0]).unwrap();
        let n = normalize_descriptor(&f).unwrap();
        assert!((n.vector[0] - 0.6).abs() < 1e-15 && (n.vector[1] - 0.8).abs() < 1e-15);
        assert!(n.normalized);
        let again = normalize_descriptor(&n).unwrap();
        assert!((&again.vector - &n.vector).iter().all(|d| d.abs() < 1e-15));
        let zero = ClipDescriptor::new(array![0.0, 0.0]).unwrap();
        assert!(matches!(normalize_descriptor(&zero), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalize_random_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = Array1::from_shape_fn(64, |_| StandardNormal.sample(&mut rng));
        let n = normalize_descriptor(&ClipDescriptor::new(v).unwrap()).unwrap();
        assert!((n.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clip_tokens_rejects_bad_input() {
        assert!(matches!(ClipTokens::new(Tensor::zeros((5, 2)), 2), Err(Error::Shape(_))));
        let mut t = Tensor::zeros((4, 2));
        t[[1, 1]] = f64::NAN;
        assert!(matches!(ClipTokens::new(t, 2), Err(Error::Validation(_))));
    }

    #[test]
    fn record_altitude_rule() {
        let mut r = TrackletRecord {
            tracklet_id: "t".into(),
            person_id: "p".into(),
            view: ViewId::Aerial,
            altitude_m: Some(80),
            frames: vec!["f".into()],
        };
        r.validate().unwrap();
        r.altitude_m = None;
        assert!(r.validate().is_err());
        r.view = ViewId::Ground;
        r.validate().unwrap();
        r.frames.clear();
        assert!(r.validate().is_err());
    }

    proptest! {
        #[test]
        fn pool_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_shape_fn((6, 5), |_| StandardNormal.sample(&mut rng));
            let y = Tensor::from_shape_fn((6, 5), |_| StandardNormal.sample(&mut rng));
            let comb = ClipTokens::new(&x * a + &y * b, 3).unwrap();
            let px = clip_pool(&ClipTokens::new(x, 3).unwrap()).vector;
            let py = clip_pool(&ClipTokens::new(y, 3).unwrap()).vector;
            let lhs = clip_pool(&comb).vector;
            let rhs = &px * a + &py * b;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }
    }
}
