//! Experiment orchestration: configuration, the generate → train → evaluate
//! pipeline, and the files a run leaves behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::algebra::closure;
use crate::error::{Error, Result};
use crate::eval::{
    assemble_heatmap, krr_r2, mcc, mean_std, subset_label, write_mcc_csv, KrrConfig, MccRow, R2Entry, R2Report,
    MIN_KRR_ROWS,
};
use crate::index_set::IndexSet;
use crate::latent_model::{content_of, select_columns, LatentMode, LatentSpec, ViewIndexSets};
use crate::nn::{load_checkpoint, save_checkpoint, Mlp};
use crate::objectives::set_loss;
use crate::oracle::{optimal_content_encoder, uniformity_test, UniformityReport};
use crate::selectors::{select_bits, SelectorMask};
use crate::system::{derive_seed, GroundTruthDoc, ViewSystem};
use crate::training::{
    selector_recovery, train_content, train_view_specific, write_traces_csv, ContentModel, LossTrace,
    SelectorConfig, SelectorMode, SelectorRecovery, TrainConfig, ViewSpecificModel,
};

/// Environment variable naming the directory under which runs are created.
pub const OUT_ENV: &str = "MVCRL_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

const EVAL_TAG: u64 = 0xe7a1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One set of content encoders per subset, aligned with `set_loss`.
    ContentEncoders,
    /// One encoder per view plus a learned selector per (subset, view).
    ViewSpecificWithSelectors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fresh draws used for R² and MCC; shared by every seed.
    pub n_test: usize,
    pub data_seed: u64,
    pub krr: KrrConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_test: 10_000,
            data_seed: 0,
            krr: KrrConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub n_latents: usize,
    pub latent_mode: LatentMode,
    /// Seed of the covariance draw; ignored for independent latents.
    pub latent_seed: u64,
    pub mixing_seed: u64,
    /// 1-based latent indices observed by each view.
    pub view_sets: Vec<Vec<usize>>,
    pub regime: Regime,
    /// Subsets of views to align; `None` means every subset of size two or more.
    pub subsets: Option<Vec<Vec<usize>>>,
    pub selector: SelectorConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
    /// Rayon pool size; `1` gives bitwise reproducible runs.
    pub threads: usize,
}

impl Default for RunConfig {
    /// The six-latent, four-view example with independent latents at full scale
    /// (batch 4096, 100 000 iterations, three seeds).
    fn default() -> Self {
        RunConfig {
            name: "example22".into(),
            n_latents: 6,
            latent_mode: LatentMode::Independent,
            latent_seed: 0,
            mixing_seed: 1234,
            view_sets: ViewIndexSets::example_four_views()
                .sets()
                .iter()
                .map(|s| s.as_slice().to_vec())
                .collect(),
            regime: Regime::ContentEncoders,
            subsets: None,
            selector: SelectorConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            eval: EvalConfig::default(),
            threads: 1,
        }
    }
}

/// Recursively overlays `patch` on `base`; tables merge, everything else replaces.
pub fn merge_values(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_values(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Same experiment with the reduced training budget.
    pub fn desk() -> Self {
        RunConfig {
            train: TrainConfig::desk(),
            ..RunConfig::default()
        }
    }

    /// Parses TOML or JSON (by extension, then by trial) and overlays it on
    /// the full-scale or desk profile.
    pub fn from_str_with_base(text: &str, json: Option<bool>, desk: bool) -> Result<Self> {
        let patch: Value = match json {
            Some(true) => serde_json::from_str(text)?,
            Some(false) => serde_json::to_value(toml::from_str::<toml::Value>(text)?)?,
            None => match serde_json::from_str(text) {
                Ok(v) => v,
                Err(_) => serde_json::to_value(toml::from_str::<toml::Value>(text)?)?,
            },
        };
        if !patch.is_object() {
            return Err(Error::InvalidConfig(vec!["config root must be a table".into()]));
        }
        let mut base = serde_json::to_value(if desk { Self::desk() } else { Self::default() })?;
        // `None` subsets serialize as null; an explicit list replaces it whole.
        merge_values(&mut base, patch);
        serde_json::from_value(base).map_err(|e| Error::InvalidConfig(vec![e.to_string()]))
    }

    pub fn load(path: &Path, desk: bool) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let json = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Some(true),
            Some("toml") => Some(false),
            _ => None,
        };
        Self::from_str_with_base(&text, json, desk)
    }

    /// Every problem with the config, one message per offending field.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            errs.push("name: must be a non-empty file name".into());
        }
        if self.n_latents == 0 {
            errs.push("n_latents: must be at least 1".into());
        }
        let views = match self.views() {
            Ok(v) => Some(v),
            Err(e) => {
                errs.push(format!("view_sets: {e}"));
                None
            }
        };
        match &self.subsets {
            Some(list) if list.is_empty() => errs.push("subsets: must not be empty".into()),
            Some(list) => {
                for s in list {
                    match IndexSet::new(s.iter().copied()) {
                        Ok(set) if set.len() < 2 => {
                            errs.push(format!("subsets: {set} has fewer than two views"));
                        }
                        Ok(set) => {
                            if let Some(v) = &views {
                                if IndexSet::max(&set).is_some_and(|m| m > v.n_views()) {
                                    errs.push(format!("subsets: {set} names a view beyond {}", v.n_views()));
                                } else if content_of(&set, v).map_or(true, |c| c.indices.is_empty()) {
                                    errs.push(format!("subsets: {set} has empty content"));
                                }
                            }
                        }
                        Err(e) => errs.push(format!("subsets: {e}")),
                    }
                }
            }
            None => {
                if views.as_ref().is_some_and(|v| v.n_views() < 2) {
                    errs.push("view_sets: need at least two views".into());
                }
            }
        }
        if self.seeds.is_empty() {
            errs.push("seeds: must not be empty".into());
        }
        errs.extend(self.train.validate().into_iter().map(|e| format!("train.{e}")));
        let sel = &self.selector;
        if !(sel.lr > 0.0) {
            errs.push("selector.lr: must be positive".into());
        }
        if !(sel.temperature_start > 0.0) || !(sel.temperature_end > 0.0) {
            errs.push("selector.temperature_start/temperature_end: must be positive".into());
        }
        if let SelectorMode::SizeFree { alpha } = sel.mode {
            if !(alpha >= 0.0) {
                errs.push("selector.mode.alpha: must be non-negative".into());
            }
        }
        if self.eval.n_test < MIN_KRR_ROWS {
            errs.push(format!("eval.n_test: need at least {MIN_KRR_ROWS}"));
        }
        let tf = self.eval.krr.train_fraction;
        if !(tf > 0.0 && tf < 1.0) {
            errs.push("eval.krr.train_fraction: must lie in (0, 1)".into());
        }
        if self.eval.krr.ridge_grid.is_empty() || self.eval.krr.ridge_grid.iter().any(|&l| !(l > 0.0)) {
            errs.push("eval.krr.ridge_grid: needs positive entries".into());
        }
        if self.eval.krr.folds < 2 {
            errs.push("eval.krr.folds: must be at least 2".into());
        }
        if self.threads == 0 {
            errs.push("threads: must be at least 1".into());
        }
        errs
    }

    pub fn views(&self) -> Result<ViewIndexSets> {
        let sets = self
            .view_sets
            .iter()
            .map(|s| IndexSet::new(s.iter().copied()))
            .collect::<Result<Vec<_>>>()?;
        ViewIndexSets::new(self.n_latents, sets)
    }

    /// The subsets to align, in configuration order.
    pub fn subset_list(&self) -> Result<Vec<IndexSet>> {
        match &self.subsets {
            Some(list) => list.iter().map(|s| IndexSet::new(s.iter().copied())).collect(),
            None => Ok(self.views()?.all_subsets()),
        }
    }

    /// Ground-truth latent distribution, view sets and mixings.
    pub fn system(&self) -> Result<ViewSystem> {
        let spec = match self.latent_mode {
            LatentMode::Independent => LatentSpec::independent(self.n_latents)?,
            LatentMode::Dependent => LatentSpec::generate(self.n_latents, LatentMode::Dependent, self.latent_seed)?,
        };
        ViewSystem::build(spec, self.views()?, self.mixing_seed)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `dir` if given, else `$MVCRL_OUT/<name>` or `runs/<name>`.
pub fn resolve_out_dir(dir: Option<&Path>, name: &str) -> PathBuf {
    match dir {
        Some(d) => d.to_path_buf(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
            .join(name),
    }
}

/// Runs `f` inside a rayon pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(vec![format!("threads: {e}")]))?;
    Ok(pool.install(f))
}

/// Where one trained network of a seed lives, relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    /// Set for content encoders; `None` for view-specific encoders.
    pub subset: Option<IndexSet>,
    pub view: usize,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub checkpoints: Vec<CheckpointRef>,
    /// Selector state after training (view-specific regime only).
    pub selectors: Option<String>,
    pub loss_decreased: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    pub source_revision: String,
    pub ground_truth: GroundTruthDoc,
    pub seeds: Vec<SeedArtifacts>,
    pub files: Vec<String>,
    pub threads: usize,
    pub wall_clock_seconds: f64,
}

pub fn source_revision() -> String {
    match option_env!("MVCRL_SOURCE_REV") {
        Some(rev) => format!("{} {rev}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// MCC of one representation against its content latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MccEntry {
    pub subset: IndexSet,
    pub view: usize,
    pub seed: u64,
    pub mcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSelectors {
    pub seed: u64,
    pub hard_masks: Vec<Vec<SelectorMask>>,
    pub recovery: Vec<SelectorRecovery>,
}

/// Everything `evaluate` measures; `metrics.json` holds this verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_latents: usize,
    pub subsets: Vec<IndexSet>,
    pub r2: Vec<R2Entry>,
    pub mcc: Vec<MccEntry>,
    pub selectors: Vec<SeedSelectors>,
}

impl Metrics {
    pub fn heatmap(&self) -> R2Report {
        assemble_heatmap(&self.r2, &self.subsets, self.n_latents)
    }

    /// One row per subset: mean and std over seeds of the view-averaged MCC.
    pub fn mcc_rows(&self) -> Vec<MccRow> {
        self.subsets
            .iter()
            .filter_map(|s| {
                let mut seeds: Vec<u64> = self.mcc.iter().filter(|e| &e.subset == s).map(|e| e.seed).collect();
                seeds.sort_unstable();
                seeds.dedup();
                let per_seed: Vec<f64> = seeds
                    .iter()
                    .map(|&seed| {
                        let v: Vec<f64> = self
                            .mcc
                            .iter()
                            .filter(|e| &e.subset == s && e.seed == seed)
                            .map(|e| e.mcc)
                            .collect();
                        mean_std(&v).0
                    })
                    .collect();
                (!per_seed.is_empty()).then(|| {
                    let (value, std) = mean_std(&per_seed);
                    MccRow {
                        configuration: subset_label(s),
                        value,
                        std,
                    }
                })
            })
            .collect()
    }

    pub fn mcc_for(&self, subset: &IndexSet) -> Option<MccRow> {
        let label = subset_label(subset);
        self.mcc_rows().into_iter().find(|r| r.configuration == label)
    }

    /// Writes `heatmap.csv`, `heatmap_per_view.csv`, `mcc.csv` and `metrics.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        let heat = self.heatmap();
        heat.write_csv(&dir.join("heatmap.csv"))?;
        heat.write_per_view_csv(&dir.join("heatmap_per_view.csv"))?;
        write_mcc_csv(&self.mcc_rows(), &dir.join("mcc.csv"))?;
        fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(["heatmap.csv", "heatmap_per_view.csv", "mcc.csv", "metrics.json"]
            .map(String::from)
            .to_vec())
    }

    /// Union of several runs' metrics, e.g. one run per seed.
    pub fn merge(parts: &[Metrics]) -> Result<Metrics> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidConfig(vec!["report: no runs given".into()]))?;
        let mut out = Metrics {
            n_latents: first.n_latents,
            subsets: Vec::new(),
            r2: Vec::new(),
            mcc: Vec::new(),
            selectors: Vec::new(),
        };
        for m in parts {
            if m.n_latents != first.n_latents {
                return Err(Error::DimensionMismatch {
                    context: "latent count across runs",
                    expected: first.n_latents,
                    actual: m.n_latents,
                });
            }
            for s in &m.subsets {
                if !out.subsets.contains(s) {
                    out.subsets.push(s.clone());
                }
            }
            out.r2.extend(m.r2.iter().cloned());
            out.mcc.extend(m.mcc.iter().cloned());
            out.selectors.extend(m.selectors.iter().cloned());
        }
        Ok(out)
    }
}

/// Trained networks of one seed.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModels {
    Content(Vec<ContentModel>),
    ViewSpecific(ViewSpecificModel),
}

/// Held-out draws every seed is evaluated on.
pub fn eval_data(cfg: &RunConfig, system: &ViewSystem) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.eval.data_seed, &[EVAL_TAG]));
    system.sample(cfg.eval.n_test, &mut rng)
}

fn contents_of(subsets: &[IndexSet], views: &ViewIndexSets) -> Result<Vec<IndexSet>> {
    subsets.iter().map(|s| content_of(s, views).map(|c| c.indices)).collect()
}

/// R² and MCC for every (subset, view) representation of one seed.
pub fn evaluate_seed(
    cfg: &RunConfig,
    system: &ViewSystem,
    seed: u64,
    models: &TrainedModels,
    z: ArrayView2<'_, f64>,
    xs: &[Array2<f64>],
) -> Result<(Vec<R2Entry>, Vec<MccEntry>, Option<SeedSelectors>)> {
    let subsets = cfg.subset_list()?;
    let contents = contents_of(&subsets, &system.views)?;
    let mut reps: Vec<(IndexSet, IndexSet, usize, Array2<f64>)> = Vec::new();
    let mut selectors = None;
    match models {
        TrainedModels::Content(ms) => {
            for m in ms {
                for k in m.views() {
                    reps.push((m.subset.clone(), m.content.clone(), k, m.encode(k, xs[k - 1].view())?));
                }
            }
        }
        TrainedModels::ViewSpecific(vs) => {
            let hard = vs.hard_masks(cfg.selector.mode, &contents);
            let mut encoded: Vec<Option<Array2<f64>>> = vec![None; system.n_views()];
            for (i, subset) in vs.subsets.iter().enumerate() {
                for (pos, k) in subset.iter().enumerate() {
                    if encoded[k - 1].is_none() {
                        encoded[k - 1] = Some(vs.encode(k, xs[k - 1].view())?);
                    }
                    let r = encoded[k - 1].as_ref().expect("just encoded");
                    let picked = select_bits(&hard[i][pos].hard_bits(), r.view())?;
                    reps.push((subset.clone(), contents[i].clone(), k, picked));
                }
            }
            let recovery = (1..=system.n_views())
                .filter(|&k| vs.encoders[k - 1].is_some())
                .map(|k| selector_recovery(vs, system, cfg.selector.mode, k, z, xs[k - 1].view()))
                .collect::<Result<Vec<_>>>()?;
            selectors = Some(SeedSelectors {
                seed,
                hard_masks: hard,
                recovery,
            });
        }
    }
    let scored = crate::training::map_maybe_par(&reps, |(subset, content, k, rep)| {
        let r2 = if rep.ncols() == 0 {
            vec![None; cfg.n_latents]
        } else {
            krr_r2(rep.view(), z, &cfg.eval.krr)?.r2
        };
        let mcc_value = if rep.ncols() == 0 {
            0.0
        } else {
            mcc(rep.view(), select_columns(z, content).view())?.mcc
        };
        Ok((
            R2Entry {
                subset: subset.clone(),
                view: *k,
                seed,
                r2,
            },
            MccEntry {
                subset: subset.clone(),
                view: *k,
                seed,
                mcc: mcc_value,
            },
        ))
    })?;
    let (r2, mccs) = scored.into_iter().unzip();
    Ok((r2, mccs, selectors))
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(name))
}

fn train_seed(cfg: &RunConfig, system: &ViewSystem, subsets: &[IndexSet], seed: u64) -> Result<(TrainedModels, LossTrace)> {
    match cfg.regime {
        Regime::ContentEncoders => {
            let (m, t) = train_content(system, subsets, &cfg.train, seed)?;
            Ok((TrainedModels::Content(m), t))
        }
        Regime::ViewSpecificWithSelectors => {
            let (m, t) = train_view_specific(system, subsets, &cfg.train, &cfg.selector, seed)?;
            Ok((TrainedModels::ViewSpecific(m), t))
        }
    }
}

fn rel(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn save_models(dir: &Path, seed: u64, models: &TrainedModels) -> Result<(Vec<CheckpointRef>, Option<String>)> {
    let ck_dir = dir.join("checkpoints").join(format!("seed{seed}"));
    let mut refs = Vec::new();
    match models {
        TrainedModels::Content(ms) => {
            for m in ms {
                for (enc, k) in m.encoders.iter().zip(m.views()) {
                    let stem = format!("subset{}_view{k}", m.subset.to_mask());
                    let p = save_checkpoint(enc, &ck_dir, &stem)?;
                    refs.push(CheckpointRef {
                        subset: Some(m.subset.clone()),
                        view: k,
                        path: rel(dir, &p),
                    });
                }
            }
            Ok((refs, None))
        }
        TrainedModels::ViewSpecific(vs) => {
            for (i, enc) in vs.encoders.iter().enumerate() {
                if let Some(enc) = enc {
                    let p = save_checkpoint(enc, &ck_dir, &format!("view{}", i + 1))?;
                    refs.push(CheckpointRef {
                        subset: None,
                        view: i + 1,
                        path: rel(dir, &p),
                    });
                }
            }
            let p = ck_dir.join("selectors.json");
            fs::write(&p, serde_json::to_vec_pretty(&vs.masks)?)?;
            Ok((refs, Some(rel(dir, &p))))
        }
    }
}

fn load_models(
    dir: &Path,
    cfg: &RunConfig,
    system: &ViewSystem,
    art: &SeedArtifacts,
) -> Result<TrainedModels> {
    let subsets = cfg.subset_list()?;
    match cfg.regime {
        Regime::ContentEncoders => {
            let contents = contents_of(&subsets, &system.views)?;
            subsets
                .iter()
                .zip(contents)
                .map(|(subset, content)| {
                    let encoders = subset
                        .iter()
                        .map(|k| {
                            let r = art
                                .checkpoints
                                .iter()
                                .find(|c| c.subset.as_ref() == Some(subset) && c.view == k)
                                .ok_or_else(|| {
                                    Error::Checkpoint(format!("seed {}: no encoder for {subset} view {k}", art.seed))
                                })?;
                            load_checkpoint(&dir.join(&r.path))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(ContentModel {
                        subset: subset.clone(),
                        content,
                        encoders,
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(TrainedModels::Content)
        }
        Regime::ViewSpecificWithSelectors => {
            let mut encoders: Vec<Option<Mlp>> = vec![None; system.n_views()];
            for r in &art.checkpoints {
                if r.view == 0 || r.view > encoders.len() {
                    return Err(Error::Checkpoint(format!("view {} out of range", r.view)));
                }
                encoders[r.view - 1] = Some(load_checkpoint(&dir.join(&r.path))?);
            }
            let sel_path = art
                .selectors
                .as_ref()
                .ok_or_else(|| Error::Checkpoint(format!("seed {}: selector file missing", art.seed)))?;
            let masks: Vec<Vec<SelectorMask>> = serde_json::from_slice(&fs::read(dir.join(sel_path))?)?;
            Ok(TrainedModels::ViewSpecific(ViewSpecificModel {
                encoders,
                subsets,
                masks,
            }))
        }
    }
}

/// Trains and evaluates every seed of `cfg`, writing all artifacts to `dir`.
/// Files written before a failing stage are left in place.
pub fn run(cfg: &RunConfig, dir: &Path) -> Result<RunManifest> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    with_threads(cfg.threads, || run_inner(cfg, dir))?
}

fn run_inner(cfg: &RunConfig, dir: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    fs::create_dir_all(dir)?;
    let mut files = vec!["config.json".to_string()];
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;

    let (system, subsets) = stage("generate", (|| {
        let system = cfg.system()?;
        fs::write(dir.join("ground_truth.json"), serde_json::to_vec_pretty(&system.to_doc())?)?;
        let blocks = closure(&system.views, &system.spec)?;
        fs::write(dir.join("algebra.txt"), blocks.render())?;
        Ok((system, cfg.subset_list()?))
    })())?;
    files.extend(["ground_truth.json", "algebra.txt"].map(String::from));

    let mut seeds = Vec::new();
    let mut traces = Vec::new();
    let mut trained = Vec::new();
    let trained_ok = stage("train", (|| {
        for &seed in &cfg.seeds {
            let (models, trace) = train_seed(cfg, &system, &subsets, seed)?;
            let (checkpoints, selectors) = save_models(dir, seed, &models)?;
            seeds.push(SeedArtifacts {
                seed,
                checkpoints,
                selectors,
                loss_decreased: trace.decreased(),
            });
            traces.push((seed, trace));
            trained.push((seed, models));
        }
        Ok(())
    })());
    if !traces.is_empty() {
        write_traces_csv(&traces, &dir.join("loss_trace.csv")).map_err(|e| e.at_stage("train"))?;
        files.push("loss_trace.csv".into());
    }
    trained_ok?;
    let flat: Vec<u64> = seeds.iter().filter(|s| !s.loss_decreased).map(|s| s.seed).collect();
    if !flat.is_empty() {
        return Err(Error::LossNotDecreasing(flat).at_stage("train"));
    }

    let metrics = stage("evaluate", (|| {
        let (z, xs) = eval_data(cfg, &system)?;
        evaluate_all(cfg, &system, &trained, z.view(), &xs)
    })())?;
    files.extend(stage("evaluate", metrics.write(dir))?);

    let manifest = RunManifest {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        source_revision: source_revision(),
        ground_truth: system.to_doc(),
        seeds,
        files,
        threads: cfg.threads,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    stage("write", (|| {
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    })())?;
    Ok(manifest)
}

fn evaluate_all(
    cfg: &RunConfig,
    system: &ViewSystem,
    trained: &[(u64, TrainedModels)],
    z: ArrayView2<'_, f64>,
    xs: &[Array2<f64>],
) -> Result<Metrics> {
    let mut metrics = Metrics {
        n_latents: cfg.n_latents,
        subsets: cfg.subset_list()?,
        r2: Vec::new(),
        mcc: Vec::new(),
        selectors: Vec::new(),
    };
    for (seed, models) in trained {
        let (r2, mccs, sel) = evaluate_seed(cfg, system, *seed, models, z, xs)?;
        metrics.r2.extend(r2);
        metrics.mcc.extend(mccs);
        metrics.selectors.extend(sel);
    }
    Ok(metrics)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Result of re-evaluating a finished run from its checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Reevaluation {
    pub metrics: Metrics,
    pub stored: Metrics,
}

impl Reevaluation {
    pub fn reproduced(&self) -> bool {
        self.metrics == self.stored
    }
}

/// Reloads config, ground truth and checkpoints of the run in `dir` and
/// recomputes its metrics; optionally writes the fresh tables to `out`.
pub fn evaluate_run(dir: &Path, out: Option<&Path>) -> Result<Reevaluation> {
    let cfg: RunConfig = read_json(&dir.join("config.json"))?;
    let manifest: RunManifest = read_json(&dir.join("manifest.json"))?;
    let system = ViewSystem::from_doc(read_json(&dir.join("ground_truth.json"))?)?;
    let stored: Metrics = read_json(&dir.join("metrics.json"))?;
    let metrics = with_threads(cfg.threads, || -> Result<Metrics> {
        let trained = manifest
            .seeds
            .iter()
            .map(|art| Ok((art.seed, load_models(dir, &cfg, &system, art)?)))
            .collect::<Result<Vec<_>>>()?;
        let (z, xs) = eval_data(&cfg, &system)?;
        evaluate_all(&cfg, &system, &trained, z.view(), &xs)
    })??;
    if let Some(out) = out {
        metrics.write(out)?;
    }
    Ok(Reevaluation { metrics, stored })
}

/// Merges the metrics of several run directories and writes the combined
/// tables (mean ± std over all seeds found) to `out`.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<Metrics> {
    let parts = dirs
        .iter()
        .map(|d| read_json::<Metrics>(&d.join("metrics.json")))
        .collect::<Result<Vec<_>>>()?;
    let merged = Metrics::merge(&parts)?;
    merged.write(out)?;
    Ok(merged)
}

/// Closed-form optimal encoders checked on fresh draws.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCheck {
    pub subset: IndexSet,
    pub content: IndexSet,
    pub n_samples: usize,
    /// Largest coordinate gap between any two views' encodings.
    pub alignment_residual: f64,
    /// KS uniformity of every coordinate, one report per view.
    pub uniformity: Vec<UniformityReport>,
    /// Alignment term of `set_loss` on the oracle encodings.
    pub set_loss_alignment: f64,
}

impl OracleCheck {
    pub fn min_p_value(&self) -> f64 {
        self.uniformity
            .iter()
            .flat_map(|u| u.p_values.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Darmois-oracle encoders of `subset` (all views when `None`) on `n` draws.
pub fn oracle_check(system: &ViewSystem, subset: Option<&IndexSet>, n: usize, seed: u64) -> Result<OracleCheck> {
    let subset = match subset {
        Some(s) => s.clone(),
        None => IndexSet::new(1..=system.n_views())?,
    };
    let content = content_of(&subset, &system.views)?.indices;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, xs) = system.sample(n, &mut rng)?;
    let encs = subset
        .iter()
        .map(|k| {
            optimal_content_encoder(system.views.set(k), &content, &system.mixings[k - 1], system.spec.covariance())?
                .encode(xs[k - 1].view())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut residual: f64 = 0.0;
    for a in 0..encs.len() {
        for b in a + 1..encs.len() {
            for (x, y) in encs[a].iter().zip(encs[b].iter()) {
                residual = residual.max((x - y).abs());
            }
        }
    }
    let views: Vec<ArrayView2<'_, f64>> = encs.iter().map(|e| e.view()).collect();
    let loss = set_loss(&views, &Default::default())?;
    Ok(OracleCheck {
        subset,
        content,
        n_samples: n,
        alignment_residual: residual,
        uniformity: encs.iter().map(|e| uniformity_test(e.view())).collect::<Result<_>>()?,
        set_loss_alignment: loss.breakdown.alignment,
    })
}
