//! Ground truth of one experiment: latent distribution, view index sets and
//! the per-view mixing functions.

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_model::{sample_with_rng, select_columns, LatentSpec, LatentSpecDoc, ViewIndexSets};
use crate::mixing::{build_mixing, MixingFunction};

/// SplitMix64 finalizer folded over `tags`; used to give every encoder, view
/// and data stream its own seed from one run seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    tags.iter()
        .fold(mix(base), |acc, &t| mix(acc.wrapping_mul(0xff51_afd7_ed55_8ccd) ^ mix(t)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSystem {
    pub spec: LatentSpec,
    pub views: ViewIndexSets,
    pub mixings: Vec<MixingFunction>,
}

/// Serialized ground truth: latent spec, view sets, and mixing weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDoc {
    #[serde(flatten)]
    pub latent: LatentSpecDoc,
    pub mixings: Vec<MixingFunction>,
}

impl ViewSystem {
    /// Mixing for view `k` is drawn from `derive_seed(mixing_seed, [k])`.
    pub fn build(spec: LatentSpec, views: ViewIndexSets, mixing_seed: u64) -> Result<Self> {
        if views.n_latents() != spec.n_latents() {
            return Err(Error::DimensionMismatch {
                context: "view sets vs latent dimension",
                expected: spec.n_latents(),
                actual: views.n_latents(),
            });
        }
        let mixings = views
            .sets()
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let mut f = build_mixing(s.len(), derive_seed(mixing_seed, &[k as u64 + 1]))?;
                f.view_index = k + 1;
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ViewSystem { spec, views, mixings })
    }

    pub fn n_views(&self) -> usize {
        self.views.n_views()
    }

    /// `x_k = f_k(z_{S_k})` for a 1-based view index.
    pub fn observe_view(&self, z: ArrayView2<'_, f64>, view: usize) -> Result<Array2<f64>> {
        self.mixings[view - 1].apply(select_columns(z, self.views.set(view)).view())
    }

    pub fn observe(&self, z: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
        (1..=self.n_views()).map(|k| self.observe_view(z, k)).collect()
    }

    /// A batch of latents and all views of it, drawn from `rng`.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        let z = sample_with_rng(&self.spec, n, rng);
        let xs = self.observe(z.view())?;
        Ok((z, xs))
    }

    pub fn to_doc(&self) -> GroundTruthDoc {
        GroundTruthDoc {
            latent: LatentSpecDoc::from_parts(&self.spec, &self.views),
            mixings: self.mixings.clone(),
        }
    }

    pub fn from_doc(doc: GroundTruthDoc) -> Result<Self> {
        let (spec, views) = doc.latent.into_parts()?;
        if doc.mixings.len() != views.n_views()
            || doc
                .mixings
                .iter()
                .zip(views.sets())
                .any(|(f, s)| f.dim() != s.len())
        {
            return Err(Error::InvalidLatentSpec(
                "mixing functions do not match the view sets".into(),
            ));
        }
        Ok(ViewSystem {
            spec,
            views,
            mixings: doc.mixings,
        })
    }
}
