//! Invertible three-layer LeakyReLU MLPs producing the observed views.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, from_dmatrix, to_dmatrix};

pub const MIXING_SLOPE: f64 = 0.2;
pub const MIXING_LAYERS: usize = 3;
/// Roughly the lower quartile of the condition number of a `dim × dim`
/// Gaussian matrix; a quarter of draws pass, so rejection stays cheap.
pub fn cond_max(dim: usize) -> f64 {
    (2.0 * dim as f64).max(2.0)
}
pub const MAX_DRAW_ATTEMPTS: usize = 1000;

/// `x = W3 · σ(W2 · σ(W1 · z))` with σ = LeakyReLU(0.2); every `W` square and well conditioned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixingDoc", into = "MixingDoc")]
pub struct MixingFunction {
    dim: usize,
    layers: Vec<Array2<f64>>,
    slope: f64,
    pub view_index: usize,
}

/// Serialized form: row-major weights plus slope and dimension.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixingDoc {
    pub dim: usize,
    pub slope: f64,
    pub view_index: usize,
    pub weights: Vec<Vec<f64>>,
}

impl TryFrom<MixingDoc> for MixingFunction {
    type Error = Error;
    fn try_from(doc: MixingDoc) -> Result<Self> {
        let layers = doc
            .weights
            .into_iter()
            .map(|w| {
                let len = w.len();
                Array2::from_shape_vec((doc.dim, doc.dim), w).map_err(|_| Error::DimensionMismatch {
                    context: "mixing weights",
                    expected: doc.dim * doc.dim,
                    actual: len,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut f = MixingFunction::from_weights(layers, doc.slope)?;
        f.view_index = doc.view_index;
        Ok(f)
    }
}

impl From<MixingFunction> for MixingDoc {
    fn from(f: MixingFunction) -> Self {
        MixingDoc {
            dim: f.dim,
            slope: f.slope,
            view_index: f.view_index,
            weights: f.layers.iter().map(|w| w.iter().copied().collect()).collect(),
        }
    }
}

impl MixingFunction {
    pub fn from_weights(layers: Vec<Array2<f64>>, slope: f64) -> Result<Self> {
        let dim = layers.first().map(|w| w.nrows()).unwrap_or(0);
        if dim == 0 || layers.iter().any(|w| w.dim() != (dim, dim)) {
            return Err(Error::InvalidLatentSpec(
                "mixing layers must be nonempty square matrices of equal size".into(),
            ));
        }
        if slope <= 0.0 {
            return Err(Error::InvalidLatentSpec("LeakyReLU slope must be positive".into()));
        }
        Ok(MixingFunction {
            dim,
            layers,
            slope,
            view_index: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Array2<f64>] {
        &self.layers
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn apply(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_width(z.ncols())?;
        let last = self.layers.len() - 1;
        let mut h = z.to_owned();
        for (l, w) in self.layers.iter().enumerate() {
            h = h.dot(&w.t());
            if l < last {
                let s = self.slope;
                h.mapv_inplace(|v| if v >= 0.0 { v } else { s * v });
            }
        }
        Ok(h)
    }

    /// Layerwise inverse: LU solve per layer, exact LeakyReLU inversion in between.
    pub fn invert(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_width(x.ncols())?;
        let mut h = to_dmatrix(x).transpose();
        for (l, w) in self.layers.iter().enumerate().rev() {
            let lu = to_dmatrix(w.view()).lu();
            h = lu.solve(&h).ok_or(Error::Singular("mixing layer"))?;
            if l > 0 {
                let s = self.slope;
                h.apply(|v| {
                    if *v < 0.0 {
                        *v /= s
                    }
                });
            }
        }
        Ok(from_dmatrix(&h.transpose()))
    }

    fn check_width(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::DimensionMismatch {
                context: "mixing input width",
                expected: self.dim,
                actual: got,
            });
        }
        Ok(())
    }
}

/// Draws three `dim × dim` layers with `N(0, 1/dim)` entries, rejecting any layer
/// whose condition number exceeds [`cond_max`].
pub fn build_mixing(dim: usize, seed: u64) -> Result<MixingFunction> {
    if dim == 0 {
        return Err(Error::InvalidLatentSpec("mixing dim must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("finite std");
    let bound = cond_max(dim);
    let mut layers = Vec::with_capacity(MIXING_LAYERS);
    for _ in 0..MIXING_LAYERS {
        let mut accepted = None;
        for _ in 0..MAX_DRAW_ATTEMPTS {
            let w = Array2::from_shape_simple_fn((dim, dim), || normal.sample(&mut rng));
            if condition_number(w.view()) <= bound {
                accepted = Some(w);
                break;
            }
        }
        layers.push(accepted.ok_or(Error::IllConditionedMixing {
            dim,
            cond_max: bound,
            attempts: MAX_DRAW_ATTEMPTS,
        })?);
    }
    MixingFunction::from_weights(layers, MIXING_SLOPE)
}
