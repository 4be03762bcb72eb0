//! Training loops for both regimes: one content encoder per view and subset,
//! or one view-specific encoder per view with learned content selectors.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_set::IndexSet;
use crate::latent_model::content_of;
use crate::nn::{encoder_hidden_width, AdamConfig, AdamState, Mlp};
use crate::objectives::{
    info_sharing_reg, info_sharing_reg_logit_grad, multiblock_loss, set_loss, EntropyMode,
    InfoNceConfig, LossBreakdown, SubsetSelection,
};
use crate::selectors::{enforce_equal_counts, gumbel_sample_with, top_k, AnnealSchedule, SelectorMask};
use crate::system::{derive_seed, ViewSystem};

const DATA_TAG: u64 = 0xda7a;
const ENCODER_TAG: u64 = 0xe7c0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub adam: AdamConfig,
    pub infonce: InfoNceConfig,
    /// Record the training-batch loss every this many steps.
    pub log_every: usize,
    /// Encoder hidden width; `None` uses [`encoder_hidden_width`].
    pub hidden_width: Option<usize>,
    pub lr_schedule: LrSchedule,
}

/// Encoder learning rate over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `final_fraction · lr` at the last step.
    Cosine { final_fraction: f64 },
}

impl TrainConfig {
    pub fn width_for(&self, d_in: usize) -> usize {
        self.hidden_width.unwrap_or_else(|| encoder_hidden_width(d_in))
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.adam.lr,
            LrSchedule::Cosine { final_fraction } => {
                let t = step as f64 / (self.iterations.max(2) - 1) as f64;
                let c = 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos());
                self.adam.lr * (final_fraction + (1.0 - final_fraction) * c)
            }
        }
    }
}

impl Default for TrainConfig {
    /// Full-scale hyperparameters: batch 4096, 100 000 Adam steps at lr 1e-4.
    fn default() -> Self {
        TrainConfig {
            batch_size: 4096,
            iterations: 100_000,
            adam: AdamConfig::default(),
            infonce: InfoNceConfig::default(),
            log_every: 50,
            hidden_width: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    /// Reduced budget that still separates content from style on the
    /// four-view example on a single CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 128,
            iterations: 16_000,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            lr_schedule: LrSchedule::Cosine { final_fraction: 0.01 },
            ..TrainConfig::default()
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size < 2 {
            errs.push(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.iterations == 0 {
            errs.push("iterations must be >= 1".into());
        }
        if !(self.adam.lr > 0.0) {
            errs.push(format!("lr must be positive, got {}", self.adam.lr));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            errs.push("adam betas must lie in [0, 1)".into());
        }
        if !(self.infonce.temperature > 0.0) {
            errs.push(format!("temperature must be positive, got {}", self.infonce.temperature));
        }
        if self.log_every == 0 {
            errs.push("log_every must be >= 1".into());
        }
        if self.hidden_width == Some(0) {
            errs.push("hidden_width must be >= 1".into());
        }
        if let LrSchedule::Cosine { final_fraction } = self.lr_schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                errs.push(format!("lr final_fraction must lie in [0, 1], got {final_fraction}"));
            }
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub alignment: f64,
    pub entropy_estimate: f64,
    pub reg: f64,
    pub subset_total: Vec<f64>,
    pub subset_alignment: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub subsets: Vec<IndexSet>,
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    fn window_means(&self, series: impl Fn(&TraceRow) -> f64) -> Option<(f64, f64)> {
        let n = self.rows.len();
        if n < 2 {
            return None;
        }
        let w = (n / 10).max(1);
        let mean = |rows: &[TraceRow]| rows.iter().map(&series).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.rows[..w]), mean(&self.rows[n - w..])))
    }

    /// Final 10%-window mean of the total loss is below the initial one.
    pub fn decreased(&self) -> bool {
        self.window_means(|r| r.total).is_some_and(|(a, b)| b < a)
    }

    /// Same check per subset column.
    pub fn decreased_per_subset(&self) -> Vec<bool> {
        (0..self.subsets.len())
            .map(|i| self.window_means(|r| r.subset_total[i]).is_some_and(|(a, b)| b < a))
            .collect()
    }
}

/// Long table of several runs' traces: `seed, step, total, alignment,
/// entropy_estimate, reg`, then one alignment column per subset.
pub fn write_traces_csv(traces: &[(u64, LossTrace)], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["seed", "step", "total", "alignment", "entropy_estimate", "reg"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if let Some((_, first)) = traces.first() {
        for s in &first.subsets {
            header.push(format!("alignment {}", crate::eval::subset_label(s)));
        }
    }
    w.write_record(&header)?;
    for (seed, trace) in traces {
        for r in &trace.rows {
            let mut rec = vec![
                seed.to_string(),
                r.step.to_string(),
                format!("{:.9}", r.total),
                format!("{:.9}", r.alignment),
                format!("{:.9}", r.entropy_estimate),
                format!("{:.9}", r.reg),
            ];
            rec.extend(r.subset_alignment.iter().map(|v| format!("{v:.9}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs `f` on every element, in parallel when a rayon pool with more than one thread is active.
fn for_each_mut<T: Send, R: Send>(items: &mut [T], f: impl Fn(usize, &mut T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if rayon::current_num_threads() > 1 {
        items.par_iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
    } else {
        items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Maps `f` over `items`, in parallel under a multi-threaded rayon pool.
/// Output order always follows input order.
pub fn map_maybe_par<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if rayon::current_num_threads() > 1 {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

/// Content encoders for one subset: `g_k : x_k ↦ R^{|C|}` for every view `k` in it.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentModel {
    pub subset: IndexSet,
    pub content: IndexSet,
    pub encoders: Vec<Mlp>,
}

impl ContentModel {
    pub fn views(&self) -> impl Iterator<Item = usize> + '_ {
        self.subset.iter()
    }

    /// Encoding of view `view` (1-based, must be in the subset).
    pub fn encode(&self, view: usize, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let pos = self
            .subset
            .iter()
            .position(|k| k == view)
            .ok_or_else(|| Error::ViewNotInSubset {
                view,
                subset: self.subset.as_slice().to_vec(),
            })?;
        self.encoders[pos].predict(x)
    }
}

struct ContentState {
    model: ContentModel,
    adams: Vec<AdamState>,
}

/// Freshly initialized content encoders; seeds depend on `(seed, subset, view)` only.
pub fn init_content_models(
    system: &ViewSystem,
    subsets: &[IndexSet],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<ContentModel>> {
    subsets
        .iter()
        .map(|subset| {
            let content = content_of(subset, &system.views)?.indices;
            if content.is_empty() {
                return Err(Error::InvalidConfig(vec![format!(
                    "subset {subset} has empty content"
                )]));
            }
            let encoders = subset
                .iter()
                .map(|k| {
                    let s = derive_seed(seed, &[ENCODER_TAG, subset.to_mask(), k as u64]);
                    let d_in = system.views.set(k).len();
                    Mlp::encoder_with_width(d_in, content.len(), cfg.width_for(d_in), s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ContentModel {
                subset: subset.clone(),
                content,
                encoders,
            })
        })
        .collect()
}

fn row_from(step: usize, parts: &[LossBreakdown]) -> TraceRow {
    let mut total = LossBreakdown::default();
    for p in parts {
        total.accumulate(p);
    }
    TraceRow {
        step,
        total: total.total,
        alignment: total.alignment,
        entropy_estimate: total.entropy_estimate,
        reg: total.reg,
        subset_total: parts.iter().map(|p| p.total).collect(),
        subset_alignment: parts.iter().map(|p| p.alignment).collect(),
    }
}

/// Trains every subset's content encoders with `set_loss`. All subsets see the
/// same batch at each step; the batch stream depends only on `seed`.
pub fn train_content(
    system: &ViewSystem,
    subsets: &[IndexSet],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<ContentModel>, LossTrace)> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let mut states: Vec<ContentState> = init_content_models(system, subsets, cfg, seed)?
        .into_iter()
        .map(|model| {
            let adams = model
                .encoders
                .iter()
                .map(|e| AdamState::new(e.n_params(), cfg.adam))
                .collect();
            ContentState { model, adams }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[DATA_TAG]));
    let mut trace = LossTrace {
        subsets: subsets.to_vec(),
        rows: Vec::new(),
    };
    for step in 0..cfg.iterations {
        let (_, xs) = system.sample(cfg.batch_size, &mut rng)?;
        let lr = cfg.lr_at(step);
        let parts = for_each_mut(&mut states, |_, st| content_step(st, &xs, &cfg.infonce, lr))?;
        if step % cfg.log_every == 0 || step + 1 == cfg.iterations {
            trace.rows.push(row_from(step, &parts));
        }
    }
    Ok((states.into_iter().map(|s| s.model).collect(), trace))
}

fn content_step(
    st: &mut ContentState,
    xs: &[Array2<f64>],
    infonce: &InfoNceConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut outs = Vec::with_capacity(st.model.encoders.len());
    let mut tapes = Vec::with_capacity(st.model.encoders.len());
    for (enc, k) in st.model.encoders.iter().zip(st.model.subset.iter()) {
        let (o, t) = enc.forward(xs[k - 1].view())?;
        outs.push(o);
        tapes.push(t);
    }
    let views: Vec<ArrayView2<'_, f64>> = outs.iter().map(|o| o.view()).collect();
    let loss = set_loss(&views, infonce)?;
    for (i, enc) in st.model.encoders.iter_mut().enumerate() {
        let g = enc.backward(&tapes[i], loss.grads[i].view())?;
        st.adams[i].config.lr = lr;
        st.adams[i].step(enc.params_mut(), &g.params)?;
    }
    Ok(loss.breakdown)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectorMode {
    /// Masks fixed to the true content positions; only encoders train.
    Fixed,
    /// `‖φ^(i,k)‖₀ = |C_i|` is known; which coordinates is learned.
    GroundTruthSize,
    /// Sizes are learned through `α·Reg(Φ)`.
    SizeFree { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub mode: SelectorMode,
    pub lr: f64,
    pub init_logit: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub entropy_mode: EntropyMode,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            mode: SelectorMode::GroundTruthSize,
            lr: 1e-2,
            init_logit: 0.0,
            temperature_start: 1.0,
            // Annealing shrinks s(1 - s)/T towards zero and freezes the
            // logits long before the ranking settles.
            temperature_end: 1.0,
            entropy_mode: EntropyMode::PerSubsetOccurrence,
        }
    }
}

/// View-specific encoders `r_k : x_k ↦ R^{|S_k|}` plus one selector per (subset, view).
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSpecificModel {
    /// Indexed by `view − 1`; `None` for views outside every subset.
    pub encoders: Vec<Option<Mlp>>,
    pub subsets: Vec<IndexSet>,
    /// `masks[i][pos]` for subset `i` and its `pos`-th view.
    pub masks: Vec<Vec<SelectorMask>>,
}

impl ViewSpecificModel {
    pub fn encode(&self, view: usize, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.encoders
            .get(view.wrapping_sub(1))
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InvalidIndexSet(format!("view {view} has no encoder")))?
            .predict(x)
    }

    /// Binary masks after training: top-|C_i| for known sizes, otherwise
    /// thresholded and trimmed to the smallest count in the subset.
    pub fn hard_masks(&self, mode: SelectorMode, contents: &[IndexSet]) -> Vec<Vec<SelectorMask>> {
        self.masks
            .iter()
            .zip(contents)
            .map(|(ms, c)| {
                let count = match mode {
                    SelectorMode::Fixed => None,
                    SelectorMode::GroundTruthSize => Some(c.len()),
                    SelectorMode::SizeFree { .. } => ms.iter().map(SelectorMask::count).min(),
                };
                ms.iter().map(|m| m.harden(count)).collect()
            })
            .collect()
    }
}

/// Whether hardened masks satisfy the equal-count constraint in every subset.
pub fn equal_counts_hold(masks: &[Vec<SelectorMask>]) -> bool {
    masks.iter().all(|ms| {
        let refs: Vec<&SelectorMask> = ms.iter().collect();
        enforce_equal_counts(&refs).passed
    })
}

/// Positions of `content` within view `k`'s index set, as a mask.
pub fn true_mask(system: &ViewSystem, content: &IndexSet, view: usize) -> Vec<bool> {
    let s = system.views.set(view);
    s.iter().map(|j| content.contains(j)).collect()
}

/// Selector of one subset read back in latent coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRecovery {
    pub subset: IndexSet,
    pub expected: IndexSet,
    pub selected: IndexSet,
}

impl SubsetRecovery {
    pub fn matches(&self) -> bool {
        self.expected == self.selected
    }
}

/// How the hard selectors of one view line up with the true content blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorRecovery {
    pub view: usize,
    /// Latent matched to each encoder coordinate by MCC.
    pub coordinate_latents: Vec<usize>,
    pub mcc: f64,
    pub subsets: Vec<SubsetRecovery>,
}

impl SelectorRecovery {
    pub fn all_match(&self) -> bool {
        self.subsets.iter().all(SubsetRecovery::matches)
    }
}

/// Labels each coordinate of `r_view(x_view)` with the latent of `S_view` it
/// correlates with under the MCC matching, then maps every hardened selector
/// of a subset containing `view` to the latents it picks.
pub fn selector_recovery(
    model: &ViewSpecificModel,
    system: &ViewSystem,
    mode: SelectorMode,
    view: usize,
    z: ArrayView2<'_, f64>,
    x_view: ArrayView2<'_, f64>,
) -> Result<SelectorRecovery> {
    let latents = system.views.set(view).clone();
    let enc = model.encode(view, x_view)?;
    let zs = crate::latent_model::select_columns(z, &latents);
    let report = crate::eval::mcc(enc.view(), zs.view())?;
    let mut coordinate_latents = vec![0; enc.ncols()];
    for &(learned, gt, _) in &report.matching {
        coordinate_latents[learned] = latents.as_slice()[gt];
    }
    let contents: Vec<IndexSet> = model
        .subsets
        .iter()
        .map(|s| content_of(s, &system.views).map(|c| c.indices))
        .collect::<Result<_>>()?;
    let hard = model.hard_masks(mode, &contents);
    let mut subsets = Vec::new();
    for (i, subset) in model.subsets.iter().enumerate() {
        let Some(pos) = subset.iter().position(|k| k == view) else {
            continue;
        };
        let bits = hard[i][pos].hard_bits();
        let selected = IndexSet::new(
            bits.iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(j, _)| coordinate_latents[j]),
        )?;
        subsets.push(SubsetRecovery {
            subset: subset.clone(),
            expected: contents[i].clone(),
            selected,
        });
    }
    Ok(SelectorRecovery {
        view,
        coordinate_latents,
        mcc: report.mcc,
        subsets,
    })
}

pub fn train_view_specific(
    system: &ViewSystem,
    subsets: &[IndexSet],
    cfg: &TrainConfig,
    sel: &SelectorConfig,
    seed: u64,
) -> Result<(ViewSpecificModel, LossTrace)> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let k_total = system.n_views();
    let contents: Vec<IndexSet> = subsets
        .iter()
        .map(|s| content_of(s, &system.views).map(|c| c.indices))
        .collect::<Result<_>>()?;
    let mut used = vec![false; k_total];
    for s in subsets {
        for k in s.iter() {
            used[k - 1] = true;
        }
    }
    let mut encoders: Vec<Option<Mlp>> = (1..=k_total)
        .map(|k| {
            used[k - 1]
                .then(|| {
                    let d = system.views.set(k).len();
                    let s = derive_seed(seed, &[ENCODER_TAG, 0, k as u64]);
                    Mlp::encoder_with_width(d, d, cfg.width_for(d), s)
                })
                .transpose()
        })
        .collect::<Result<_>>()?;
    let mut adams: Vec<Option<AdamState>> = encoders
        .iter()
        .map(|e| e.as_ref().map(|e| AdamState::new(e.n_params(), cfg.adam)))
        .collect();
    let mut masks: Vec<Vec<SelectorMask>> = subsets
        .iter()
        .zip(&contents)
        .map(|(s, c)| {
            s.iter()
                .map(|k| match sel.mode {
                    SelectorMode::Fixed => SelectorMask::binary(s.clone(), k, true_mask(system, c, k)),
                    _ => SelectorMask::relaxed(
                        s.clone(),
                        k,
                        vec![sel.init_logit; system.views.set(k).len()],
                        sel.temperature_start,
                    ),
                })
                .collect()
        })
        .collect();
    let sel_adam = AdamConfig {
        lr: sel.lr,
        ..cfg.adam
    };
    let mut mask_adams: Vec<Vec<AdamState>> = masks
        .iter()
        .map(|ms| ms.iter().map(|m| AdamState::new(m.width(), sel_adam)).collect())
        .collect();
    let schedule = AnnealSchedule {
        start: sel.temperature_start,
        end: sel.temperature_end,
        total_steps: cfg.iterations.saturating_sub(1) as u64,
    };
    let alpha = match sel.mode {
        SelectorMode::SizeFree { alpha } => alpha,
        _ => 0.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[DATA_TAG]));
    let mut trace = LossTrace {
        subsets: subsets.to_vec(),
        rows: Vec::new(),
    };
    for step in 0..cfg.iterations {
        let (_, xs) = system.sample(cfg.batch_size, &mut rng)?;
        let mut outs: Vec<Array2<f64>> = Vec::with_capacity(k_total);
        let mut tapes = Vec::with_capacity(k_total);
        for k in 0..k_total {
            match &encoders[k] {
                Some(e) => {
                    let (o, t) = e.forward(xs[k].view())?;
                    outs.push(o);
                    tapes.push(Some(t));
                }
                None => {
                    outs.push(Array2::zeros((cfg.batch_size, system.views.set(k + 1).len())));
                    tapes.push(None);
                }
            }
        }

        let mut samples = Vec::with_capacity(subsets.len());
        let mut selections = Vec::with_capacity(subsets.len());
        for (i, ms) in masks.iter_mut().enumerate() {
            if matches!(sel.mode, SelectorMode::Fixed) {
                selections.push(SubsetSelection {
                    subset: subsets[i].clone(),
                    masks: ms.iter().map(SelectorMask::hard_bits).collect(),
                });
                samples.push(Vec::new());
                continue;
            }
            for m in ms.iter_mut() {
                crate::selectors::anneal(m, &schedule, step as u64)?;
            }
            let draws = ms
                .iter()
                .map(|m| gumbel_sample_with(m, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let count = match sel.mode {
                SelectorMode::GroundTruthSize => contents[i].len(),
                _ => draws
                    .iter()
                    .map(|d| d.soft.iter().filter(|&&s| s > 0.5).count())
                    .min()
                    .unwrap_or(0),
            };
            selections.push(SubsetSelection {
                subset: subsets[i].clone(),
                masks: draws.iter().map(|d| top_k(&d.soft, count)).collect(),
            });
            samples.push(draws);
        }

        let loss = multiblock_loss(&outs, &selections, &cfg.infonce, sel.entropy_mode)?;
        for k in 0..k_total {
            if let (Some(e), Some(t), Some(a)) = (&mut encoders[k], &tapes[k], &mut adams[k]) {
                let g = e.backward(t, loss.view_grads[k].view())?;
                a.config.lr = cfg.lr_at(step);
                a.step(e.params_mut(), &g.params)?;
            }
        }
        if !matches!(sel.mode, SelectorMode::Fixed) {
            for (i, ms) in masks.iter_mut().enumerate() {
                for (pos, m) in ms.iter_mut().enumerate() {
                    let mut g = samples[i][pos].logit_grad(&loss.gate_grads[i][pos]);
                    let logits = m.logits_mut()?;
                    if alpha != 0.0 {
                        for (gj, rj) in g.iter_mut().zip(info_sharing_reg_logit_grad(logits)) {
                            *gj += alpha * rj;
                        }
                    }
                    mask_adams[i][pos].step(logits, &g)?;
                    if matches!(sel.mode, SelectorMode::GroundTruthSize) {
                        // Top-k only sees the ranking; recentering keeps the
                        // gates away from saturation without changing it.
                        let mean = logits.iter().sum::<f64>() / logits.len() as f64;
                        logits.iter_mut().for_each(|l| *l -= mean);
                    }
                }
            }
        }

        if step % cfg.log_every == 0 || step + 1 == cfg.iterations {
            let flat: Vec<SelectorMask> = masks.iter().flatten().cloned().collect();
            let reg = if alpha != 0.0 { info_sharing_reg(&flat) } else { 0.0 };
            let mut row = row_from(step, &loss.per_subset);
            let b = loss.breakdown.with_reg(alpha, reg);
            row.total = b.total;
            row.alignment = b.alignment;
            row.entropy_estimate = b.entropy_estimate;
            row.reg = b.reg;
            trace.rows.push(row);
        }
    }
    Ok((
        ViewSpecificModel {
            encoders,
            subsets: subsets.to_vec(),
            masks,
        },
        trace,
    ))
}
