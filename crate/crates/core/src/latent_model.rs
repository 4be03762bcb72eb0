//! Ground-truth generative process: Gaussian latents, view index sets, and
//! the content/style bookkeeping derived from them.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_set::IndexSet;
use crate::linalg::cholesky_lower;

/// Diagonal jitter added when a Wishart draw fails Cholesky.
pub const COVARIANCE_JITTER: f64 = 1e-9;

/// Absolute threshold under which a cross-covariance entry counts as zero.
pub const INDEPENDENCE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    Independent,
    Dependent,
}

/// `z ~ N(0, Σ)` over `n_latents` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSpec {
    n_latents: usize,
    covariance: Array2<f64>,
    cholesky: Array2<f64>,
    mode: LatentMode,
}

impl LatentSpec {
    pub fn new(covariance: Array2<f64>, mode: LatentMode) -> Result<Self> {
        let (r, c) = covariance.dim();
        if r == 0 || r != c {
            return Err(Error::InvalidLatentSpec(format!(
                "covariance must be square and nonempty, got {r}x{c}"
            )));
        }
        for i in 0..r {
            for j in 0..i {
                if covariance[[i, j]] != covariance[[j, i]] {
                    return Err(Error::InvalidLatentSpec(format!(
                        "covariance not symmetric at ({}, {})",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        let cholesky = cholesky_lower(covariance.view()).ok_or_else(|| {
            Error::InvalidLatentSpec("covariance is not positive definite".into())
        })?;
        let is_identity = covariance
            .indexed_iter()
            .all(|((i, j), &v)| v == if i == j { 1.0 } else { 0.0 });
        match (mode, is_identity) {
            (LatentMode::Independent, false) => {
                return Err(Error::InvalidLatentSpec(
                    "independent mode requires the identity covariance".into(),
                ))
            }
            (LatentMode::Dependent, true) => {
                return Err(Error::InvalidLatentSpec(
                    "identity covariance must use independent mode".into(),
                ))
            }
            _ => {}
        }
        Ok(LatentSpec {
            n_latents: r,
            covariance,
            cholesky,
            mode,
        })
    }

    pub fn independent(n_latents: usize) -> Result<Self> {
        Self::generate(n_latents, LatentMode::Independent, 0)
    }

    pub fn generate(n_latents: usize, mode: LatentMode, seed: u64) -> Result<Self> {
        LatentSpec::new(make_covariance(n_latents, mode, seed)?, mode)
    }

    pub fn n_latents(&self) -> usize {
        self.n_latents
    }

    pub fn covariance(&self) -> &Array2<f64> {
        &self.covariance
    }

    pub fn cholesky(&self) -> &Array2<f64> {
        &self.cholesky
    }

    pub fn mode(&self) -> LatentMode {
        self.mode
    }

    /// Covariance restricted to `rows × cols` (1-based index sets).
    pub fn sub_covariance(&self, rows: &IndexSet, cols: &IndexSet) -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| {
            self.covariance[[rows.as_slice()[a] - 1, cols.as_slice()[b] - 1]]
        })
    }
}

/// Identity for the independent case; a symmetrized `Wishart(I_N, df = N)` draw otherwise.
pub fn make_covariance(n_latents: usize, mode: LatentMode, seed: u64) -> Result<Array2<f64>> {
    if n_latents == 0 {
        return Err(Error::InvalidLatentSpec("n_latents must be >= 1".into()));
    }
    if mode == LatentMode::Independent {
        return Ok(Array2::eye(n_latents));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Array2::from_shape_simple_fn((n_latents, n_latents), || {
        StandardNormal.sample(&mut rng)
    });
    let w = g.dot(&g.t());
    let mut sigma = (&w + &w.t()) * 0.5;
    if cholesky_lower(sigma.view()).is_none() {
        sigma += &(Array2::<f64>::eye(n_latents) * COVARIANCE_JITTER);
        if cholesky_lower(sigma.view()).is_none() {
            return Err(Error::DegenerateCovariance { seed });
        }
    }
    Ok(sigma)
}

/// A batch of i.i.d. latent draws, rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub data: Array2<f64>,
    pub seed: u64,
}

impl LatentSample {
    /// Columns for the 1-based latent indices in `set`.
    pub fn columns(&self, set: &IndexSet) -> Array2<f64> {
        select_columns(self.data.view(), set)
    }
}

pub fn select_columns(data: ArrayView2<'_, f64>, set: &IndexSet) -> Array2<f64> {
    let cols = set.zero_based();
    Array2::from_shape_fn((data.nrows(), cols.len()), |(i, j)| data[[i, cols[j]]])
}

/// Draws `n` rows `L·u` with `u` standard normal and `L` the Cholesky factor of Σ.
pub fn sample_latents(spec: &LatentSpec, n: usize, seed: u64) -> Result<LatentSample> {
    if n == 0 {
        return Err(Error::BatchTooSmall { min: 1, actual: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(LatentSample {
        data: sample_with_rng(spec, n, &mut rng),
        seed,
    })
}

pub(crate) fn sample_with_rng(spec: &LatentSpec, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let u = Array2::from_shape_simple_fn((n, spec.n_latents), || StandardNormal.sample(rng));
    u.dot(&spec.cholesky.t())
}

/// The index sets `S_1..S_K` selecting which latents feed each view.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ViewSetsRaw", into = "ViewSetsRaw")]
pub struct ViewIndexSets {
    n_latents: usize,
    sets: Vec<IndexSet>,
}

#[derive(Serialize, Deserialize)]
struct ViewSetsRaw {
    n_latents: usize,
    sets: Vec<IndexSet>,
}

impl TryFrom<ViewSetsRaw> for ViewIndexSets {
    type Error = Error;
    fn try_from(r: ViewSetsRaw) -> Result<Self> {
        ViewIndexSets::new(r.n_latents, r.sets)
    }
}

impl From<ViewIndexSets> for ViewSetsRaw {
    fn from(v: ViewIndexSets) -> Self {
        ViewSetsRaw {
            n_latents: v.n_latents,
            sets: v.sets,
        }
    }
}

impl ViewIndexSets {
    pub fn new(n_latents: usize, sets: Vec<IndexSet>) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::InvalidIndexSet("at least one view is required".into()));
        }
        for (k, s) in sets.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::InvalidIndexSet(format!("view {} has an empty set", k + 1)));
            }
            if s.max().unwrap_or(0) > n_latents {
                return Err(Error::InvalidIndexSet(format!(
                    "view {} references latent {} > N = {n_latents}",
                    k + 1,
                    s.max().unwrap_or(0)
                )));
            }
        }
        Ok(ViewIndexSets { n_latents, sets })
    }

    pub fn from_lists(n_latents: usize, lists: &[&[usize]]) -> Result<Self> {
        let sets = lists
            .iter()
            .map(|l| IndexSet::new(l.iter().copied()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(n_latents, sets)
    }

    /// The four-view, six-latent running example:
    /// `x1 = f1(z1..z5)`, `x2 = f2(z1,z2,z3,z5,z6)`, `x3 = f3(z1,z2,z3,z4,z6)`, `x4 = f4(z1,z2,z4,z5,z6)`.
    pub fn example_four_views() -> Self {
        Self::from_lists(
            6,
            &[
                &[1, 2, 3, 4, 5],
                &[1, 2, 3, 5, 6],
                &[1, 2, 3, 4, 6],
                &[1, 2, 4, 5, 6],
            ],
        )
        .expect("static example is valid")
    }

    pub fn n_views(&self) -> usize {
        self.sets.len()
    }

    pub fn n_latents(&self) -> usize {
        self.n_latents
    }

    pub fn sets(&self) -> &[IndexSet] {
        &self.sets
    }

    /// `S_k` for a 1-based view index.
    pub fn set(&self, view: usize) -> &IndexSet {
        &self.sets[view - 1]
    }

    /// Every subset of views of size two or more, ordered by size then lexicographically.
    pub fn all_subsets(&self) -> Vec<IndexSet> {
        let k = self.n_views();
        let mut out: Vec<IndexSet> = (1u64..(1 << k))
            .filter(|m| m.count_ones() >= 2)
            .map(IndexSet::from_mask)
            .collect();
        out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        out
    }

    fn check_subset(&self, subset: &IndexSet) -> Result<()> {
        if subset.len() < 2 {
            return Err(Error::SubsetTooSmall(subset.len()));
        }
        if subset.max().unwrap_or(0) > self.n_views() {
            return Err(Error::InvalidIndexSet(format!(
                "subset {subset} references a view beyond K = {}",
                self.n_views()
            )));
        }
        Ok(())
    }
}

/// Latents shared by every view of a subset: `C = ∩_{k ∈ V} S_k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentBlock {
    pub subset: IndexSet,
    pub indices: IndexSet,
}

pub fn content_of(subset: &IndexSet, views: &ViewIndexSets) -> Result<ContentBlock> {
    views.check_subset(subset)?;
    let mut it = subset.iter();
    let first = views.set(it.next().expect("nonempty")).clone();
    let indices = it.fold(first, |acc, k| acc.intersection(views.set(k)));
    Ok(ContentBlock {
        subset: subset.clone(),
        indices,
    })
}

/// `S_k ∖ C`, the latents of view `k` outside the given content block.
pub fn style_of(view: usize, content: &ContentBlock, views: &ViewIndexSets) -> Result<IndexSet> {
    if !content.subset.contains(view) {
        return Err(Error::ViewNotInSubset {
            view,
            subset: content.subset.as_slice().to_vec(),
        });
    }
    Ok(views.set(view).difference(&content.indices))
}

/// For Gaussian latents: independent iff the cross-covariance block is zero.
pub fn independence_oracle(spec: &LatentSpec, a: &IndexSet, b: &IndexSet) -> Result<bool> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidIndexSet(
            "independence query needs nonempty sets".into(),
        ));
    }
    let overlap = a.intersection(b);
    if !overlap.is_empty() {
        return Err(Error::OverlappingSets(overlap.as_slice().to_vec()));
    }
    if a.max().unwrap_or(0) > spec.n_latents() || b.max().unwrap_or(0) > spec.n_latents() {
        return Err(Error::InvalidIndexSet("index beyond N".into()));
    }
    Ok(spec
        .sub_covariance(a, b)
        .iter()
        .all(|v| v.abs() <= INDEPENDENCE_TOL))
}

/// JSON interchange form: `{"n_latents", "mode", "covariance", "view_sets"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSpecDoc {
    pub n_latents: usize,
    pub mode: LatentMode,
    /// Row-major `N × N`.
    pub covariance: Vec<f64>,
    pub view_sets: Vec<Vec<usize>>,
}

impl LatentSpecDoc {
    pub fn from_parts(spec: &LatentSpec, views: &ViewIndexSets) -> Self {
        LatentSpecDoc {
            n_latents: spec.n_latents(),
            mode: spec.mode(),
            covariance: spec.covariance().iter().copied().collect(),
            view_sets: views.sets().iter().map(|s| s.as_slice().to_vec()).collect(),
        }
    }

    pub fn into_parts(self) -> Result<(LatentSpec, ViewIndexSets)> {
        let n = self.n_latents;
        if self.covariance.len() != n * n {
            return Err(Error::DimensionMismatch {
                context: "covariance entries",
                expected: n * n,
                actual: self.covariance.len(),
            });
        }
        let cov = Array2::from_shape_vec((n, n), self.covariance)
            .map_err(|e| Error::InvalidLatentSpec(e.to_string()))?;
        let spec = LatentSpec::new(cov, self.mode)?;
        let sets = self
            .view_sets
            .into_iter()
            .map(IndexSet::new)
            .collect::<Result<Vec<_>>>()?;
        Ok((spec, ViewIndexSets::new(n, sets)?))
    }
}
