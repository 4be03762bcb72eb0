//! Contrastive training objectives.
//!
//! Alignment of positive pairs is read off the InfoNCE numerator and the
//! entropy term off its log-partition (the in-batch negatives). Every loss
//! returns exact gradients with respect to the encodings it consumed.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_set::IndexSet;
use crate::selectors::{SelectorMask, SelectorState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// `sim(a, b) = −‖a − b‖₂`
    #[default]
    Euclidean,
    /// `sim(a, b) = a·b / (‖a‖ ‖b‖)`
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoNceConfig {
    pub temperature: f64,
    pub similarity: Similarity,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        InfoNceConfig {
            temperature: 1.0,
            similarity: Similarity::Euclidean,
        }
    }
}

impl InfoNceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig(vec![format!(
                "temperature must be positive, got {}",
                self.temperature
            )]));
        }
        Ok(())
    }
}

/// `total = alignment − entropy_estimate + reg_weight · reg`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub alignment: f64,
    pub entropy_estimate: f64,
    pub reg: f64,
    pub reg_weight: f64,
    /// Set when some subset had empty selections and contributed no alignment.
    pub degenerate: bool,
}

impl LossBreakdown {
    fn from_parts(alignment: f64, entropy_estimate: f64) -> Self {
        LossBreakdown {
            total: alignment - entropy_estimate,
            alignment,
            entropy_estimate,
            ..Default::default()
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.alignment += other.alignment;
        self.entropy_estimate += other.entropy_estimate;
        self.reg += other.reg;
        self.degenerate |= other.degenerate;
        self.recompute_total();
    }

    fn recompute_total(&mut self) {
        self.total = self.alignment - self.entropy_estimate + self.reg_weight * self.reg;
    }

    /// Adds the `α · Reg(Φ)` term.
    pub fn with_reg(mut self, alpha: f64, reg: f64) -> Self {
        self.reg = reg;
        self.reg_weight = alpha;
        self.recompute_total();
        self
    }
}

/// Similarity matrix `S_ij = sim(a_i, b_j) / τ` plus what backprop needs.
struct SimCache {
    s: Array2<f64>,
    /// Euclidean: pairwise distances. Cosine: unused.
    dist: Array2<f64>,
    /// Cosine only: unit rows and norms.
    a_unit: Array2<f64>,
    b_unit: Array2<f64>,
    a_norm: Array1<f64>,
    b_norm: Array1<f64>,
}

const NORM_FLOOR: f64 = 1e-12;

fn similarity(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, cfg: &InfoNceConfig) -> SimCache {
    let (n, m) = (a.nrows(), b.nrows());
    let tau = cfg.temperature;
    match cfg.similarity {
        Similarity::Euclidean => {
            let mut dist = Array2::zeros((n, m));
            for i in 0..n {
                let ai = a.row(i);
                for j in 0..m {
                    let bj = b.row(j);
                    let d2: f64 = ai.iter().zip(bj.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                    dist[[i, j]] = d2.sqrt();
                }
            }
            let s = dist.mapv(|d| -d / tau);
            SimCache {
                s,
                dist,
                a_unit: Array2::zeros((0, 0)),
                b_unit: Array2::zeros((0, 0)),
                a_norm: Array1::zeros(0),
                b_norm: Array1::zeros(0),
            }
        }
        Similarity::Cosine => {
            let norms = |x: ArrayView2<'_, f64>| {
                x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_FLOOR))
            };
            let a_norm = norms(a);
            let b_norm = norms(b);
            let a_unit = &a / &a_norm.view().insert_axis(Axis(1));
            let b_unit = &b / &b_norm.view().insert_axis(Axis(1));
            let s = a_unit.dot(&b_unit.t()) / tau;
            SimCache {
                s,
                dist: Array2::zeros((0, 0)),
                a_unit,
                b_unit,
                a_norm,
                b_norm,
            }
        }
    }
}

/// Pulls `dL/dS` back to `(dL/da, dL/db)`.
fn backprop_similarity(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    cache: &SimCache,
    ds: &Array2<f64>,
    cfg: &InfoNceConfig,
) -> (Array2<f64>, Array2<f64>) {
    let tau = cfg.temperature;
    match cfg.similarity {
        Similarity::Euclidean => {
            // S_ij = −D_ij/τ,  ∂D_ij/∂a_i = (a_i − b_j)/D_ij
            let w = ndarray::Zip::from(ds)
                .and(&cache.dist)
                .map_collect(|&g, &d| if d > 0.0 { g / d } else { 0.0 });
            let row = w.sum_axis(Axis(1)).insert_axis(Axis(1));
            let col = w.sum_axis(Axis(0)).insert_axis(Axis(1));
            let ga = (&a * &row - w.dot(&b)) * (-1.0 / tau);
            let gb = (w.t().dot(&a) - &b * &col) * (1.0 / tau);
            (ga, gb)
        }
        Similarity::Cosine => {
            // S_ij = â_i·b̂_j/τ,  ∂S_ij/∂a_i = (b̂_j − τ S_ij â_i) / (τ ‖a_i‖)
            let dcs = ds * &cache.s * tau;
            let ra = dcs.sum_axis(Axis(1)).insert_axis(Axis(1));
            let rb = dcs.sum_axis(Axis(0)).insert_axis(Axis(1));
            let an = cache.a_norm.view().insert_axis(Axis(1));
            let bn = cache.b_norm.view().insert_axis(Axis(1));
            let ga = (ds.dot(&cache.b_unit) - &cache.a_unit * &ra) / (&an * tau);
            let gb = (ds.t().dot(&cache.a_unit) - &cache.b_unit * &rb) / (&bn * tau);
            (ga, gb)
        }
    }
}

/// Row-wise log-sum-exp and the corresponding softmax.
fn row_softmax(s: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let mut p = s.clone();
    let mut lse = Array1::zeros(s.nrows());
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z: f64 = row.sum();
        row /= z;
        lse[i] = max + z.ln();
    }
    (lse, p)
}

fn alignment_offset(cfg: &InfoNceConfig) -> f64 {
    match cfg.similarity {
        Similarity::Euclidean => 0.0,
        Similarity::Cosine => 1.0 / cfg.temperature,
    }
}

fn check_pair(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "paired encodings",
            expected: a.nrows() * a.ncols(),
            actual: b.nrows() * b.ncols(),
        });
    }
    if a.nrows() < 2 {
        return Err(Error::BatchTooSmall {
            min: 2,
            actual: a.nrows(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PairLoss {
    pub breakdown: LossBreakdown,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

/// Symmetric InfoNCE between two encodings whose rows `i` are positives.
///
/// Loss is the mean over anchors of `−log softmax_j(S_ij)[i]`, averaged over
/// both directions. The alignment component is `−mean_i S_ii` (shifted by
/// `1/τ` for cosine so it is nonnegative) and the entropy estimate is the
/// negated mean log-partition.
pub fn infonce_pair_loss(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    cfg: &InfoNceConfig,
) -> Result<PairLoss> {
    cfg.validate()?;
    check_pair(&a, &b)?;
    if cfg.similarity == Similarity::Euclidean {
        if let Some(pl) = euclidean_pair_fused(a, b, cfg.temperature) {
            return Ok(pl);
        }
    }
    Ok(infonce_pair_general(a, b, cfg))
}

fn infonce_pair_general(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, cfg: &InfoNceConfig) -> PairLoss {
    let n = a.nrows();
    let nf = n as f64;
    let cache = similarity(a, b, cfg);
    let (lse_row, p) = row_softmax(&cache.s);
    let st = cache.s.t().to_owned();
    let (lse_col, q) = row_softmax(&st);

    let mean_diag = cache.s.diag().sum() / nf;
    let off = alignment_offset(cfg);
    let alignment = off - mean_diag;
    let entropy_estimate = off - 0.5 * (lse_row.sum() + lse_col.sum()) / nf;

    let mut ds = (&p + &q.t()) * (0.5 / nf);
    for i in 0..n {
        ds[[i, i]] -= 1.0 / nf;
    }
    let (grad_a, grad_b) = backprop_similarity(a, b, &cache, &ds, cfg);
    PairLoss {
        breakdown: LossBreakdown::from_parts(alignment, entropy_estimate),
        grad_a,
        grad_b,
    }
}

/// Single-pass Euclidean InfoNCE: one exponential per entry, shared by both
/// directions through a global shift. Returns `None` when some row or column
/// would underflow under that shift; the caller then takes the general path.
fn euclidean_pair_fused(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, tau: f64) -> Option<PairLoss> {
    let (n, d) = a.dim();
    let nf = n as f64;
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (asl, bsl) = (a.as_slice()?, b.as_slice()?);

    let mut dist = vec![0.0; n * n];
    let mut smax = f64::NEG_INFINITY;
    for i in 0..n {
        let ai = &asl[i * d..(i + 1) * d];
        let row = &mut dist[i * n..(i + 1) * n];
        for (j, out) in row.iter_mut().enumerate() {
            let bj = &bsl[j * d..(j + 1) * d];
            let mut d2 = 0.0;
            for t in 0..d {
                let e = ai[t] - bj[t];
                d2 += e * e;
            }
            *out = d2.sqrt();
        }
        let dmin = row.iter().cloned().fold(f64::INFINITY, f64::min);
        smax = smax.max(-dmin / tau);
    }

    // exp(S_ij − smax); entries are at most 1.
    let mut e = vec![0.0; n * n];
    let mut row_sum = vec![0.0; n];
    let mut col_sum = vec![0.0; n];
    for i in 0..n {
        let mut rs = 0.0;
        for j in 0..n {
            let v = (-dist[i * n + j] / tau - smax).exp();
            e[i * n + j] = v;
            rs += v;
            col_sum[j] += v;
        }
        row_sum[i] = rs;
    }
    const SUM_FLOOR: f64 = 1e-200;
    if row_sum.iter().chain(col_sum.iter()).any(|&z| !(z > SUM_FLOOR)) {
        return None;
    }

    let mut diag = 0.0;
    for i in 0..n {
        diag += dist[i * n + i];
    }
    let alignment = diag / (tau * nf);
    let lse: f64 = row_sum.iter().chain(col_sum.iter()).map(|z| smax + z.ln()).sum();
    let entropy_estimate = -0.5 * lse / nf;

    // dL/dS_ij = (P_ij + Q_ij)/(2n) − δ_ij/n, and w_ij = (dL/dS_ij)/D_ij.
    let inv_row: Vec<f64> = row_sum.iter().map(|z| 0.5 / (nf * z)).collect();
    let inv_col: Vec<f64> = col_sum.iter().map(|z| 0.5 / (nf * z)).collect();
    let mut grad_a = Array2::<f64>::zeros((n, d));
    let mut grad_b = Array2::<f64>::zeros((n, d));
    {
        let ga = grad_a.as_slice_mut().expect("fresh array");
        let gb = grad_b.as_slice_mut().expect("fresh array");
        let mut acc = vec![0.0; d];
        for i in 0..n {
            let ai = &asl[i * d..(i + 1) * d];
            acc.iter_mut().for_each(|v| *v = 0.0);
            let mut wsum = 0.0;
            for j in 0..n {
                let dij = dist[i * n + j];
                if dij <= 0.0 {
                    continue;
                }
                let mut g = e[i * n + j] * (inv_row[i] + inv_col[j]);
                if i == j {
                    g -= 1.0 / nf;
                }
                let w = g / dij;
                wsum += w;
                let bj = &bsl[j * d..(j + 1) * d];
                let gbj = &mut gb[j * d..(j + 1) * d];
                for t in 0..d {
                    acc[t] += w * bj[t];
                    gbj[t] += w * (ai[t] - bj[t]);
                }
            }
            let gai = &mut ga[i * d..(i + 1) * d];
            for t in 0..d {
                gai[t] = -(wsum * ai[t] - acc[t]) / tau;
            }
        }
        gb.iter_mut().for_each(|v| *v /= tau);
    }
    Some(PairLoss {
        breakdown: LossBreakdown::from_parts(alignment, entropy_estimate),
        grad_a,
        grad_b,
    })
}

/// Positive-pair term only: `−mean_i S_ii (+ 1/τ for cosine)`.
pub fn alignment_only_loss(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    cfg: &InfoNceConfig,
) -> Result<PairLoss> {
    cfg.validate()?;
    check_pair(&a, &b)?;
    let n = a.nrows();
    let nf = n as f64;
    if cfg.similarity == Similarity::Euclidean {
        // Only the diagonal matters: ∂‖a_i − b_i‖/∂a_i = (a_i − b_i)/‖a_i − b_i‖.
        let diff = &a - &b;
        let dist = diff.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        let scale = dist.mapv(|d| if d > 0.0 { 1.0 / (d * nf * cfg.temperature) } else { 0.0 });
        let grad_a = &diff * &scale.insert_axis(Axis(1));
        let grad_b = -&grad_a;
        return Ok(PairLoss {
            breakdown: LossBreakdown::from_parts(dist.sum() / (nf * cfg.temperature), 0.0),
            grad_a,
            grad_b,
        });
    }
    let cache = similarity(a, b, cfg);
    let alignment = alignment_offset(cfg) - cache.s.diag().sum() / nf;
    let mut ds = Array2::zeros((n, n));
    for i in 0..n {
        ds[[i, i]] = -1.0 / nf;
    }
    let (grad_a, grad_b) = backprop_similarity(a, b, &cache, &ds, cfg);
    Ok(PairLoss {
        breakdown: LossBreakdown::from_parts(alignment, 0.0),
        grad_a,
        grad_b,
    })
}

/// In-batch entropy estimate of a single encoding, `−mean_i log Σ_j exp(S_ij)`
/// over all `j` (self included, so the estimate is bounded above).
///
/// Returns the estimate and the gradient of its negation (the loss contribution).
pub fn entropy_estimate(r: ArrayView2<'_, f64>, cfg: &InfoNceConfig) -> Result<(f64, Array2<f64>)> {
    cfg.validate()?;
    if r.nrows() < 2 {
        return Err(Error::BatchTooSmall {
            min: 2,
            actual: r.nrows(),
        });
    }
    let nf = r.nrows() as f64;
    let cache = similarity(r, r, cfg);
    let (lse, p) = row_softmax(&cache.s);
    let h = alignment_offset(cfg) - lse.sum() / nf;
    let ds = p / nf;
    let (ga, gb) = backprop_similarity(r, r, &cache, &ds, cfg);
    Ok((h, ga + gb))
}

#[derive(Clone, Debug)]
pub struct SetLoss {
    pub breakdown: LossBreakdown,
    /// Per unordered pair `(p, q)` of positions in the input list.
    pub pairs: Vec<((usize, usize), LossBreakdown)>,
    pub grads: Vec<Array2<f64>>,
}

/// Sum of [`infonce_pair_loss`] over all unordered pairs of encodings.
pub fn set_loss(encodings: &[ArrayView2<'_, f64>], cfg: &InfoNceConfig) -> Result<SetLoss> {
    pairwise(encodings, cfg, infonce_pair_loss)
}

fn pairwise(
    encodings: &[ArrayView2<'_, f64>],
    cfg: &InfoNceConfig,
    pair_fn: fn(ArrayView2<'_, f64>, ArrayView2<'_, f64>, &InfoNceConfig) -> Result<PairLoss>,
) -> Result<SetLoss> {
    if encodings.len() < 2 {
        return Err(Error::SubsetTooSmall(encodings.len()));
    }
    let shape = encodings[0].dim();
    if let Some(bad) = encodings.iter().find(|e| e.dim() != shape) {
        return Err(Error::DimensionMismatch {
            context: "set_loss encodings",
            expected: shape.1,
            actual: bad.ncols(),
        });
    }
    let mut grads: Vec<Array2<f64>> = encodings.iter().map(|e| Array2::zeros(e.raw_dim())).collect();
    let mut breakdown = LossBreakdown::default();
    let mut pairs = Vec::new();
    for p in 0..encodings.len() {
        for q in p + 1..encodings.len() {
            let pl = pair_fn(encodings[p], encodings[q], cfg)?;
            grads[p] += &pl.grad_a;
            grads[q] += &pl.grad_b;
            breakdown.accumulate(&pl.breakdown);
            pairs.push(((p, q), pl.breakdown));
        }
    }
    Ok(SetLoss {
        breakdown,
        pairs,
        grads,
    })
}

/// How the entropy term is split when a view appears in several subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Full InfoNCE per subset occurrence; a view whose selections never cover
    /// its whole encoding also gets one explicit full-encoding entropy term.
    #[default]
    PerSubsetOccurrence,
    /// Alignment-only pair terms per subset, plus exactly one full-encoding
    /// entropy term per participating view.
    OncePerView,
}

/// Hard selections for one subset of views.
#[derive(Clone, Debug)]
pub struct SubsetSelection {
    /// 1-based view indices.
    pub subset: IndexSet,
    /// One mask per view of `subset`, in ascending view order; length `|S_k|`.
    pub masks: Vec<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct MultiblockLoss {
    pub breakdown: LossBreakdown,
    pub per_subset: Vec<LossBreakdown>,
    /// Indexed by `view − 1`; zero for views outside every subset.
    pub view_grads: Vec<Array2<f64>>,
    /// `[subset][position in subset][coordinate]`: `∂L/∂gate` under the
    /// straight-through estimator, nonzero only on selected coordinates.
    pub gate_grads: Vec<Vec<Vec<f64>>>,
}

/// Alignment of selected coordinates over every subset plus per-view entropy.
///
/// `view_encodings[k − 1]` is `r_k(x_k)`; each selection picks columns of it.
pub fn multiblock_loss(
    view_encodings: &[Array2<f64>],
    selections: &[SubsetSelection],
    cfg: &InfoNceConfig,
    mode: EntropyMode,
) -> Result<MultiblockLoss> {
    cfg.validate()?;
    let mut view_grads: Vec<Array2<f64>> = view_encodings
        .iter()
        .map(|e| Array2::zeros(e.raw_dim()))
        .collect();
    let mut per_subset = Vec::with_capacity(selections.len());
    let mut gate_grads = Vec::with_capacity(selections.len());
    let mut breakdown = LossBreakdown::default();
    let k_total = view_encodings.len();
    let mut participates = vec![false; k_total];
    let mut fully_selected = vec![false; k_total];

    for sel in selections {
        if sel.subset.len() < 2 {
            return Err(Error::SubsetTooSmall(sel.subset.len()));
        }
        if sel.masks.len() != sel.subset.len() {
            return Err(Error::DimensionMismatch {
                context: "masks per subset",
                expected: sel.subset.len(),
                actual: sel.masks.len(),
            });
        }
        let mut selected = Vec::with_capacity(sel.subset.len());
        let mut cols_per_view = Vec::with_capacity(sel.subset.len());
        for (pos, view) in sel.subset.iter().enumerate() {
            if view == 0 || view > k_total {
                return Err(Error::InvalidIndexSet(format!("view {view} out of range")));
            }
            let enc = &view_encodings[view - 1];
            let mask = &sel.masks[pos];
            if mask.len() != enc.ncols() {
                return Err(Error::DimensionMismatch {
                    context: "selector width",
                    expected: enc.ncols(),
                    actual: mask.len(),
                });
            }
            participates[view - 1] = true;
            if mask.iter().all(|&b| b) {
                fully_selected[view - 1] = true;
            }
            let cols: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
            selected.push(enc.select(Axis(1), &cols));
            cols_per_view.push(cols);
        }
        let counts: Vec<usize> = cols_per_view.iter().map(Vec::len).collect();
        if counts.iter().any(|&c| c != counts[0]) {
            return Err(Error::SelectorCountMismatch {
                subset: sel.subset.as_slice().to_vec(),
                counts,
            });
        }
        let mut gates: Vec<Vec<f64>> = sel.masks.iter().map(|m| vec![0.0; m.len()]).collect();
        if counts[0] == 0 {
            let b = LossBreakdown {
                degenerate: true,
                ..Default::default()
            };
            breakdown.accumulate(&b);
            per_subset.push(b);
            gate_grads.push(gates);
            continue;
        }
        let views: Vec<ArrayView2<'_, f64>> = selected.iter().map(|s| s.view()).collect();
        let sl = match mode {
            EntropyMode::PerSubsetOccurrence => pairwise(&views, cfg, infonce_pair_loss)?,
            EntropyMode::OncePerView => pairwise(&views, cfg, alignment_only_loss)?,
        };
        for (pos, view) in sel.subset.iter().enumerate() {
            let g = &sl.grads[pos];
            let enc = &view_encodings[view - 1];
            for (c, &col) in cols_per_view[pos].iter().enumerate() {
                let gcol = g.column(c);
                view_grads[view - 1].column_mut(col).scaled_add(1.0, &gcol);
                gates[pos][col] = gcol.dot(&enc.column(col));
            }
        }
        breakdown.accumulate(&sl.breakdown);
        per_subset.push(sl.breakdown);
        gate_grads.push(gates);
    }

    for k in 0..k_total {
        let needs_entropy = match mode {
            EntropyMode::PerSubsetOccurrence => participates[k] && !fully_selected[k],
            EntropyMode::OncePerView => participates[k],
        };
        if needs_entropy {
            let (h, g) = entropy_estimate(view_encodings[k].view(), cfg)?;
            view_grads[k] += &g;
            breakdown.accumulate(&LossBreakdown::from_parts(0.0, h));
        }
    }

    Ok(MultiblockLoss {
        breakdown,
        per_subset,
        view_grads,
        gate_grads,
    })
}

/// `Reg(Φ) = −Σ_i Σ_{k ∈ V_i} ‖φ^(i,k)‖₀`; relaxed masks contribute their gate probabilities.
pub fn info_sharing_reg(masks: &[SelectorMask]) -> f64 {
    -masks
        .iter()
        .map(|m| match &m.state {
            SelectorState::Binary { bits } => bits.iter().filter(|&&b| b).count() as f64,
            SelectorState::Relaxed { logits, .. } => logits.iter().map(|&l| sigmoid(l)).sum(),
        })
        .sum::<f64>()
}

/// `∂Reg/∂logit` for a relaxed mask: `−σ(l)(1 − σ(l))`.
pub fn info_sharing_reg_logit_grad(logits: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .map(|&l| {
            let s = sigmoid(l);
            -s * (1.0 - s)
        })
        .collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_model::{content_of, ViewIndexSets};
    use crate::nn::{finite_difference_gradient, max_relative_error};
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
    }

    fn cosine() -> InfoNceConfig {
        InfoNceConfig {
            temperature: 0.7,
            similarity: Similarity::Cosine,
        }
    }

    /// Direct evaluation of the two-direction InfoNCE formula, for oracle checks.
    fn infonce_reference(a: &Array2<f64>, b: &Array2<f64>, cfg: &InfoNceConfig) -> f64 {
        let n = a.nrows();
        let sim = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| match cfg.similarity {
            Similarity::Euclidean => -(&x - &y).mapv(|v| v * v).sum().sqrt(),
            Similarity::Cosine => x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt()),
        } / cfg.temperature;
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        for i in 0..n {
            let den: f64 = (0..n).map(|j| sim(a.row(i), b.row(j)).exp()).sum();
            fwd += -(sim(a.row(i), b.row(i)).exp() / den).ln();
            let den: f64 = (0..n).map(|j| sim(a.row(j), b.row(i)).exp()).sum();
            bwd += -(sim(a.row(i), b.row(i)).exp() / den).ln();
        }
        0.5 * (fwd + bwd) / n as f64
    }

    #[test]
    fn constant_rows_give_log_n() {
        let a = Array2::from_elem((8, 3), 0.4);
        let l = infonce_pair_loss(a.view(), a.view(), &InfoNceConfig::default()).unwrap();
        assert!((l.breakdown.total - (8f64).ln()).abs() < 1e-12);
        assert_eq!(l.breakdown.alignment, 0.0);
    }

    #[test]
    fn two_row_closed_form() {
        let a = array![[0.0], [10.0]];
        let l = infonce_pair_loss(a.view(), a.view(), &InfoNceConfig::default()).unwrap();
        let softplus = (1.0 + (-10f64).exp()).ln();
        assert!((l.breakdown.total - softplus).abs() < 1e-15);
        assert!((l.breakdown.total - 4.5398899e-5).abs() < 1e-12);
    }

    #[test]
    fn small_temperature_aligned_separated_rows_vanish() {
        let a = array![[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [3.0, 3.0]];
        let cfg = InfoNceConfig {
            temperature: 0.01,
            similarity: Similarity::Euclidean,
        };
        let l = infonce_pair_loss(a.view(), a.view(), &cfg).unwrap();
        let direct = infonce_reference(&a, &a, &cfg);
        assert!((l.breakdown.total - direct).abs() < 1e-15);
        assert!(l.breakdown.total < 1e-100);
    }

    #[test]
    fn matches_direct_evaluation() {
        let a = gaussian(7, 3, 1);
        let b = gaussian(7, 3, 2);
        for cfg in [InfoNceConfig::default(), cosine()] {
            let l = infonce_pair_loss(a.view(), b.view(), &cfg).unwrap();
            assert!((l.breakdown.total - infonce_reference(&a, &b, &cfg)).abs() < 1e-12);
            let bd = l.breakdown;
            assert!((bd.total - (bd.alignment - bd.entropy_estimate)).abs() < 1e-12);
            assert!(bd.alignment >= 0.0);
            assert!(bd.total >= 0.0);
        }
    }

    #[test]
    fn fused_euclidean_matches_general_path() {
        let cfg = InfoNceConfig {
            temperature: 0.7,
            ..Default::default()
        };
        for (d, scale) in [(3, 1.0), (1, 1.0), (1, 1e-3), (2, 50.0)] {
            let a = gaussian(40, d, 1) * scale;
            let mut b = gaussian(40, d, 2) * scale;
            b.row_mut(5).assign(&a.row(5));
            let fast = euclidean_pair_fused(a.view(), b.view(), cfg.temperature).unwrap();
            let slow = infonce_pair_general(a.view(), b.view(), &cfg);
            let tol = 1e-12 * (1.0 + slow.breakdown.total.abs());
            assert!((fast.breakdown.total - slow.breakdown.total).abs() < tol);
            assert!((fast.breakdown.entropy_estimate - slow.breakdown.entropy_estimate).abs() < tol);
            let gtol = 1e-9 * (1.0 + slow.grad_a.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            assert!(crate::linalg::max_abs_diff(fast.grad_a.view(), slow.grad_a.view()) < gtol, "d={d}");
            assert!(crate::linalg::max_abs_diff(fast.grad_b.view(), slow.grad_b.view()) < gtol, "d={d}");
        }
    }

    #[test]
    fn fused_path_declines_when_rows_underflow() {
        let mut a = gaussian(6, 2, 3);
        a.row_mut(0).fill(1e4);
        let b = gaussian(6, 2, 4);
        assert!(euclidean_pair_fused(a.view(), b.view(), 1.0).is_none());
        let pl = infonce_pair_loss(a.view(), b.view(), &InfoNceConfig::default()).unwrap();
        assert!(pl.breakdown.total.is_finite());
    }

    #[test]
    fn rejects_single_row_and_shape_mismatch() {
        let cfg = InfoNceConfig::default();
        let a = gaussian(1, 2, 0);
        assert!(matches!(
            infonce_pair_loss(a.view(), a.view(), &cfg),
            Err(Error::BatchTooSmall { .. })
        ));
        let b = gaussian(3, 2, 0);
        let c = gaussian(3, 3, 0);
        assert!(infonce_pair_loss(b.view(), c.view(), &cfg).is_err());
        let bad = InfoNceConfig {
            temperature: 0.0,
            ..cfg
        };
        assert!(infonce_pair_loss(b.view(), b.view(), &bad).is_err());
    }

    fn check_pair_grads(
        f: fn(ArrayView2<'_, f64>, ArrayView2<'_, f64>, &InfoNceConfig) -> Result<PairLoss>,
        cfg: InfoNceConfig,
        seed: u64,
    ) {
        let (n, d) = (6, 3);
        let a = gaussian(n, d, seed);
        let b = gaussian(n, d, seed + 100);
        let l = f(a.view(), b.view(), &cfg).unwrap();
        let mut joint: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
        let numeric = finite_difference_gradient(
            |v| {
                let aa = ArrayView2::from_shape((n, d), &v[..n * d]).unwrap();
                let bb = ArrayView2::from_shape((n, d), &v[n * d..]).unwrap();
                f(aa, bb, &cfg).unwrap().breakdown.total
            },
            &joint,
        );
        joint.clear();
        joint.extend(l.grad_a.iter().chain(l.grad_b.iter()));
        let (err, _) = max_relative_error(&joint, &numeric);
        assert!(err < 1e-4, "seed {seed}: rel err {err}");
    }

    #[test]
    fn pair_gradients_match_finite_differences() {
        for seed in 0..10 {
            check_pair_grads(infonce_pair_loss, InfoNceConfig::default(), seed);
            check_pair_grads(infonce_pair_loss, cosine(), seed);
            check_pair_grads(alignment_only_loss, InfoNceConfig::default(), seed);
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        for seed in 0..10 {
            for cfg in [InfoNceConfig::default(), cosine()] {
                let r = gaussian(5, 2, seed);
                let (_, g) = entropy_estimate(r.view(), &cfg).unwrap();
                let numeric = finite_difference_gradient(
                    |v| {
                        let rr = ArrayView2::from_shape((5, 2), v).unwrap();
                        -entropy_estimate(rr, &cfg).unwrap().0
                    },
                    r.as_slice().unwrap(),
                );
                let (err, _) = max_relative_error(g.as_slice().unwrap(), &numeric);
                assert!(err < 1e-4, "{err}");
            }
        }
    }

    #[test]
    fn entropy_estimate_bounded_and_grows_with_spread() {
        let cfg = InfoNceConfig::default();
        let r = gaussian(64, 2, 3);
        let (h1, _) = entropy_estimate(r.view(), &cfg).unwrap();
        let (h2, _) = entropy_estimate((&r * 10.0).view(), &cfg).unwrap();
        assert!(h2 > h1);
        assert!(h2 <= 0.0);
    }

    #[test]
    fn set_loss_single_pair_equals_pair_loss() {
        let cfg = InfoNceConfig::default();
        let a = gaussian(9, 2, 0);
        let b = gaussian(9, 2, 1);
        let s = set_loss(&[a.view(), b.view()], &cfg).unwrap();
        let p = infonce_pair_loss(a.view(), b.view(), &cfg).unwrap();
        assert_eq!(s.breakdown.total, p.breakdown.total);
        assert_eq!(s.grads[0], p.grad_a);
        assert_eq!(s.grads[1], p.grad_b);
    }

    #[test]
    fn set_loss_is_additive_over_six_pairs() {
        let cfg = InfoNceConfig::default();
        let encs: Vec<Array2<f64>> = (0..4).map(|s| gaussian(10, 2, s)).collect();
        let views: Vec<_> = encs.iter().map(|e| e.view()).collect();
        let s = set_loss(&views, &cfg).unwrap();
        assert_eq!(s.pairs.len(), 6);
        let mut sum = 0.0;
        for p in 0..4 {
            for q in p + 1..4 {
                sum += infonce_pair_loss(views[p], views[q], &cfg).unwrap().breakdown.total;
            }
        }
        assert!((s.breakdown.total - sum).abs() < 1e-12);
        let short = gaussian(10, 3, 9);
        assert!(set_loss(&[views[0], short.view()], &cfg).is_err());
    }

    #[test]
    fn set_loss_gradients_match_finite_differences() {
        let cfg = InfoNceConfig::default();
        for seed in 0..10 {
            let encs: Vec<Array2<f64>> = (0..3).map(|s| gaussian(5, 2, seed * 10 + s)).collect();
            let views: Vec<_> = encs.iter().map(|e| e.view()).collect();
            let s = set_loss(&views, &cfg).unwrap();
            let flat: Vec<f64> = encs.iter().flat_map(|e| e.iter().copied()).collect();
            let numeric = finite_difference_gradient(
                |v| {
                    let vs: Vec<ArrayView2<f64>> = (0..3)
                        .map(|k| ArrayView2::from_shape((5, 2), &v[k * 10..(k + 1) * 10]).unwrap())
                        .collect();
                    set_loss(&vs, &cfg).unwrap().breakdown.total
                },
                &flat,
            );
            let analytic: Vec<f64> = s.grads.iter().flat_map(|g| g.iter().copied()).collect();
            let (err, _) = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn multiblock_all_ones_single_pair_equals_set_loss() {
        let cfg = InfoNceConfig::default();
        let r1 = gaussian(12, 3, 0);
        let r2 = gaussian(12, 3, 1);
        let sel = SubsetSelection {
            subset: IndexSet::new([1, 2]).unwrap(),
            masks: vec![vec![true; 3], vec![true; 3]],
        };
        let m = multiblock_loss(&[r1.clone(), r2.clone()], &[sel], &cfg, EntropyMode::default())
            .unwrap();
        let s = set_loss(&[r1.view(), r2.view()], &cfg).unwrap();
        assert!((m.breakdown.total - s.breakdown.total).abs() < 1e-12);
        assert_eq!(m.view_grads[0], s.grads[0]);
    }

    #[test]
    fn multiblock_rejects_count_mismatch() {
        let cfg = InfoNceConfig::default();
        let r = gaussian(4, 3, 0);
        let sel = SubsetSelection {
            subset: IndexSet::new([1, 2]).unwrap(),
            masks: vec![vec![true, true, false], vec![true, false, false]],
        };
        assert!(matches!(
            multiblock_loss(&[r.clone(), r], &[sel], &cfg, EntropyMode::default()),
            Err(Error::SelectorCountMismatch { .. })
        ));
    }

    #[test]
    fn multiblock_all_zero_selection_is_degenerate() {
        let cfg = InfoNceConfig::default();
        let r1 = gaussian(6, 2, 0);
        let r2 = gaussian(6, 2, 1);
        let sel = SubsetSelection {
            subset: IndexSet::new([1, 2]).unwrap(),
            masks: vec![vec![false; 2], vec![false; 2]],
        };
        let m = multiblock_loss(&[r1.clone(), r2.clone()], &[sel], &cfg, EntropyMode::default())
            .unwrap();
        assert!(m.breakdown.degenerate);
        assert_eq!(m.per_subset[0].alignment, 0.0);
        let h = entropy_estimate(r1.view(), &cfg).unwrap().0 + entropy_estimate(r2.view(), &cfg).unwrap().0;
        assert!((m.breakdown.entropy_estimate - h).abs() < 1e-12);
    }

    fn multiblock_fixture(seed: u64) -> (Vec<Array2<f64>>, Vec<SubsetSelection>) {
        let encs = vec![gaussian(5, 3, seed), gaussian(5, 3, seed + 1), gaussian(5, 2, seed + 2)];
        let sels = vec![
            SubsetSelection {
                subset: IndexSet::new([1, 2]).unwrap(),
                masks: vec![vec![true, false, true], vec![false, true, true]],
            },
            SubsetSelection {
                subset: IndexSet::new([1, 2, 3]).unwrap(),
                masks: vec![vec![true, false, false], vec![false, false, true], vec![false, true]],
            },
        ];
        (encs, sels)
    }

    #[test]
    fn multiblock_gradients_match_finite_differences() {
        let cfg = InfoNceConfig::default();
        for mode in [EntropyMode::PerSubsetOccurrence, EntropyMode::OncePerView] {
            for seed in 0..10 {
                let (encs, sels) = multiblock_fixture(seed * 7);
                let m = multiblock_loss(&encs, &sels, &cfg, mode).unwrap();
                let shapes: Vec<(usize, usize)> = encs.iter().map(|e| e.dim()).collect();
                let flat: Vec<f64> = encs.iter().flat_map(|e| e.iter().copied()).collect();
                let numeric = finite_difference_gradient(
                    |v| {
                        let mut off = 0;
                        let es: Vec<Array2<f64>> = shapes
                            .iter()
                            .map(|&(r, c)| {
                                let a = Array2::from_shape_vec((r, c), v[off..off + r * c].to_vec())
                                    .unwrap();
                                off += r * c;
                                a
                            })
                            .collect();
                        multiblock_loss(&es, &sels, &cfg, mode).unwrap().breakdown.total
                    },
                    &flat,
                );
                let analytic: Vec<f64> =
                    m.view_grads.iter().flat_map(|g| g.iter().copied()).collect();
                let (err, _) = max_relative_error(&analytic, &numeric);
                assert!(err < 1e-4, "{mode:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn gate_gradients_follow_straight_through_rule() {
        // Scaling a selected column by g and differentiating at g = 1 must equal the gate gradient.
        let cfg = InfoNceConfig::default();
        let (encs, sels) = multiblock_fixture(3);
        let m = multiblock_loss(&encs, &sels, &cfg, EntropyMode::OncePerView).unwrap();
        let (view, col) = (1usize, 2usize);
        let h = 1e-6;
        let eval = |g: f64| {
            let mut es = encs.clone();
            es[view - 1].column_mut(col).mapv_inplace(|v| v * g);
            // OncePerView: the entropy term sees the full encoding, so isolate the alignment part.
            multiblock_loss(&es, &sels, &cfg, EntropyMode::OncePerView)
                .unwrap()
                .per_subset[0]
                .alignment
        };
        let numeric = (eval(1.0 + h) - eval(1.0 - h)) / (2.0 * h);
        let analytic = m.gate_grads[0][0][col];
        assert!((numeric - analytic).abs() < 1e-6 * analytic.abs().max(1.0));
        // Unselected coordinates get nothing.
        assert_eq!(m.gate_grads[0][0][1], 0.0);
    }

    #[test]
    fn reg_counts_selected_coordinates() {
        use crate::selectors::SelectorMask;
        let bin = |bits: &[u8]| {
            SelectorMask::binary(IndexSet::new([1, 2]).unwrap(), 1, bits.iter().map(|&b| b == 1).collect())
        };
        assert_eq!(info_sharing_reg(&[bin(&[0, 0, 0])]), 0.0);
        assert_eq!(info_sharing_reg(&[bin(&[1, 0, 1])]), -2.0);

        let views = ViewIndexSets::example_four_views();
        let mut masks = Vec::new();
        let mut expected = 0.0;
        for subset in views.all_subsets() {
            let c = content_of(&subset, &views).unwrap();
            expected -= (c.indices.len() * subset.len()) as f64;
            for k in subset.iter() {
                let bits = views.set(k).iter().map(|i| c.indices.contains(i)).collect();
                masks.push(SelectorMask::binary(subset.clone(), k, bits));
            }
        }
        assert_eq!(masks.len(), 6 * 2 + 4 * 3 + 4);
        // every pair shares 4 latents, every triple 3, all four views 2: 6·4·2 + 4·3·3 + 2·4
        assert_eq!(expected, -92.0);
        assert_eq!(info_sharing_reg(&masks), expected);
    }

    #[test]
    fn relaxed_reg_gradient() {
        let logits = [0.3, -1.2, 2.0];
        let g = info_sharing_reg_logit_grad(&logits);
        let numeric = finite_difference_gradient(
            |l| -l.iter().map(|&x| sigmoid(x)).sum::<f64>(),
            &logits,
        );
        let (err, _) = max_relative_error(&g, &numeric);
        assert!(err < 1e-6);
    }

    #[test]
    fn with_reg_keeps_identity() {
        let b = LossBreakdown::from_parts(1.5, 0.25).with_reg(0.01, -7.0);
        assert!((b.total - (1.5 - 0.25 + 0.01 * -7.0)).abs() < 1e-12);
    }
}
