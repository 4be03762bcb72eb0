//! Evaluation: kernel-ridge R² of ground-truth latents from learned
//! representations, mean correlation coefficient, and heatmap assembly.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_set::IndexSet;
use crate::linalg::to_dmatrix;

pub const MIN_KRR_ROWS: usize = 200;
pub const MIN_MCC_ROWS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KrrConfig {
    pub train_fraction: f64,
    pub ridge_grid: Vec<f64>,
    pub folds: usize,
    /// Train rows actually used for fitting; a deterministic subsample beyond this.
    pub max_train: usize,
    pub split_seed: u64,
}

impl Default for KrrConfig {
    fn default() -> Self {
        KrrConfig {
            train_fraction: 0.7,
            ridge_grid: vec![1e-3, 1e-2, 1e-1],
            folds: 3,
            max_train: 1500,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrrResult {
    /// Test R² per target; `None` when the target has zero variance.
    pub r2: Vec<Option<f64>>,
    pub bandwidth: f64,
    pub ridge: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub split_seed: u64,
}

fn column_stats(x: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let sd = x
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, sd)
}

fn sq_dists(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let na = a.map_axis(Axis(1), |r| r.dot(&r));
    let nb = b.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = a.dot(&b.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
    }
    d
}

/// Median pairwise distance over (at most the first 1000) rows.
pub fn median_heuristic(x: ArrayView2<'_, f64>) -> f64 {
    let m = x.nrows().min(1000);
    let head = x.slice(ndarray::s![..m, ..]);
    let d = sq_dists(head, head);
    let mut v: Vec<f64> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .map(|(i, j)| d[[i, j]].sqrt())
        .collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let med = v[v.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn rbf(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bandwidth: f64) -> Array2<f64> {
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    sq_dists(a, b).mapv(|d| (-g * d).exp())
}

/// Solves `(K + λI) α = Y` by Cholesky.
fn ridge_solve(k: &Array2<f64>, y: ArrayView2<'_, f64>, lambda: f64) -> Result<Array2<f64>> {
    let n = k.nrows();
    let mut m = to_dmatrix(k.view());
    for i in 0..n {
        m[(i, i)] += lambda;
    }
    let chol = m.cholesky().ok_or(Error::Singular("kernel ridge system"))?;
    let rhs = to_dmatrix(y);
    let sol: DMatrix<f64> = chol.solve(&rhs);
    Ok(Array2::from_shape_fn((n, y.ncols()), |(i, j)| sol[(i, j)]))
}

fn r2_score(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Vec<Option<f64>> {
    truth
        .columns()
        .into_iter()
        .zip(pred.columns())
        .map(|(t, p)| {
            let mean = t.mean().unwrap_or(0.0);
            let sst: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
            if sst <= 1e-12 * t.len() as f64 {
                return None;
            }
            let sse: f64 = t.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
            Some(1.0 - sse / sst)
        })
        .collect()
}

/// Kernel ridge regression of `targets` on `features` with an RBF kernel.
/// Features are standardized on the train split, the bandwidth is the median
/// pairwise train distance, and the ridge strength per target is picked by
/// K-fold CV on the train split. Returns held-out R² per target.
pub fn krr_r2(features: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, cfg: &KrrConfig) -> Result<KrrResult> {
    let n = features.nrows();
    if n < MIN_KRR_ROWS {
        return Err(Error::BatchTooSmall {
            min: MIN_KRR_ROWS,
            actual: n,
        });
    }
    if targets.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "krr targets rows",
            expected: n,
            actual: targets.nrows(),
        });
    }
    if cfg.ridge_grid.is_empty() || cfg.folds < 2 {
        return Err(Error::InvalidConfig(vec![
            "krr needs a nonempty ridge grid and at least two folds".into(),
        ]));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
    let n_train_all = ((n as f64) * cfg.train_fraction).round() as usize;
    let (train_idx, test_idx) = order.split_at(n_train_all);
    let train_idx = &train_idx[..train_idx.len().min(cfg.max_train)];

    let xtr_raw = features.select(Axis(0), train_idx);
    let (mu, sd) = column_stats(xtr_raw.view());
    let standardize = |x: Array2<f64>| (x - &mu) / &sd;
    let xtr = standardize(xtr_raw);
    let xte = standardize(features.select(Axis(0), test_idx));
    let ytr_raw = targets.select(Axis(0), train_idx);
    let ymean = ytr_raw.mean_axis(Axis(0)).expect("nonempty");
    let ytr = &ytr_raw - &ymean;
    let yte = targets.select(Axis(0), test_idx);

    let bandwidth = median_heuristic(xtr.view());
    let k = rbf(xtr.view(), xtr.view(), bandwidth);
    let ntr = train_idx.len();
    let m = targets.ncols();

    // CV error per (lambda, target).
    let mut cv = Array2::<f64>::zeros((cfg.ridge_grid.len(), m));
    for f in 0..cfg.folds {
        let val: Vec<usize> = (0..ntr).filter(|i| i % cfg.folds == f).collect();
        let fit: Vec<usize> = (0..ntr).filter(|i| i % cfg.folds != f).collect();
        let kff = k.select(Axis(0), &fit).select(Axis(1), &fit);
        let kvf = k.select(Axis(0), &val).select(Axis(1), &fit);
        let yf = ytr.select(Axis(0), &fit);
        let yv = ytr.select(Axis(0), &val);
        for (li, &lambda) in cfg.ridge_grid.iter().enumerate() {
            let alpha = ridge_solve(&kff, yf.view(), lambda)?;
            let err = &kvf.dot(&alpha) - &yv;
            for t in 0..m {
                cv[[li, t]] += err.column(t).mapv(|e| e * e).sum();
            }
        }
    }
    let ridge: Vec<f64> = (0..m)
        .map(|t| {
            let best = (0..cfg.ridge_grid.len())
                .min_by(|&a, &b| cv[[a, t]].total_cmp(&cv[[b, t]]))
                .expect("nonempty grid");
            cfg.ridge_grid[best]
        })
        .collect();

    let kte = rbf(xte.view(), xtr.view(), bandwidth);
    let mut pred = Array2::<f64>::zeros((test_idx.len(), m));
    for &lambda in &cfg.ridge_grid {
        let cols: Vec<usize> = (0..m).filter(|&t| ridge[t] == lambda).collect();
        if cols.is_empty() {
            continue;
        }
        let alpha = ridge_solve(&k, ytr.select(Axis(1), &cols).view(), lambda)?;
        let p = kte.dot(&alpha);
        for (c, &t) in cols.iter().enumerate() {
            pred.column_mut(t).assign(&(&p.column(c) + ymean[t]));
        }
    }
    Ok(KrrResult {
        r2: r2_score(pred.view(), yte.view()),
        bandwidth,
        ridge,
        n_train: ntr,
        n_test: test_idx.len(),
        split_seed: cfg.split_seed,
    })
}

/// `|ρ|` between every learned column (rows) and every ground-truth column
/// (cols); zero-variance columns correlate 0 with everything.
pub fn abs_correlation(learned: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Array2<f64> {
    let center = |x: ArrayView2<'_, f64>| {
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let c = &x - &mean;
        let norms = c.map_axis(Axis(0), |col| col.dot(&col).sqrt());
        (c, norms)
    };
    let (a, na) = center(learned);
    let (b, nb) = center(gt);
    let mut rho = a.t().dot(&b);
    for ((i, j), v) in rho.indexed_iter_mut() {
        let denom = na[i] * nb[j];
        *v = if denom > 1e-12 { (*v / denom).abs().min(1.0) } else { 0.0 };
    }
    rho
}

/// Maximum-weight one-to-one assignment between rows and columns of `w`
/// (Hungarian method on the padded square cost matrix). Returns `(row, col)`
/// pairs for `min(rows, cols)` matches, sorted by row.
pub fn max_weight_matching(w: ArrayView2<'_, f64>) -> Vec<(usize, usize)> {
    let (r, c) = w.dim();
    let n = r.max(c);
    if n == 0 {
        return Vec::new();
    }
    let top = w.iter().cloned().fold(0.0, f64::max);
    let cost = |i: usize, j: usize| if i < r && j < c { top - w[[i, j]] } else { top };

    // Potentials-based O(n³) assignment, 1-based with a sentinel column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| p[j] >= 1 && p[j] - 1 < r && j - 1 < c)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    out.sort_unstable();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MccReport {
    pub mcc: f64,
    /// `(learned coordinate, ground-truth coordinate, |ρ|)`.
    pub matching: Vec<(usize, usize, f64)>,
}

pub fn mcc(learned: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<MccReport> {
    let n = learned.nrows();
    if n < MIN_MCC_ROWS {
        return Err(Error::BatchTooSmall {
            min: MIN_MCC_ROWS,
            actual: n,
        });
    }
    if gt.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "mcc ground-truth rows",
            expected: n,
            actual: gt.nrows(),
        });
    }
    let rho = abs_correlation(learned, gt);
    let matching: Vec<(usize, usize, f64)> = max_weight_matching(rho.view())
        .into_iter()
        .map(|(i, j)| (i, j, rho[[i, j]]))
        .collect();
    let mcc = if matching.is_empty() {
        0.0
    } else {
        matching.iter().map(|m| m.2).sum::<f64>() / matching.len() as f64
    };
    Ok(MccReport { mcc, matching })
}

/// One R² evaluation: representation of `view` trained for `subset`, under `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2Entry {
    pub subset: IndexSet,
    pub view: usize,
    pub seed: u64,
    pub r2: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2Report {
    pub n_latents: usize,
    pub subsets: Vec<IndexSet>,
    /// `mean[latent][column]`, averaged over views within the subset and over seeds.
    pub mean: Vec<Vec<Option<f64>>>,
    /// Std over seeds of the per-seed view averages.
    pub std: Vec<Vec<Option<f64>>>,
    /// Subsets with no entries.
    pub missing: Vec<IndexSet>,
    pub entries: Vec<R2Entry>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Column label in set notation over views, e.g. `{x1,x2}`.
pub fn subset_label(subset: &IndexSet) -> String {
    let parts: Vec<String> = subset.iter().map(|k| format!("x{k}")).collect();
    format!("{{{}}}", parts.join(","))
}

pub fn assemble_heatmap(entries: &[R2Entry], subsets: &[IndexSet], n_latents: usize) -> R2Report {
    let mut mean = vec![vec![None; subsets.len()]; n_latents];
    let mut std = vec![vec![None; subsets.len()]; n_latents];
    let mut missing = Vec::new();
    for (c, subset) in subsets.iter().enumerate() {
        let here: Vec<&R2Entry> = entries.iter().filter(|e| &e.subset == subset).collect();
        if here.is_empty() {
            missing.push(subset.clone());
            continue;
        }
        let mut seeds: Vec<u64> = here.iter().map(|e| e.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        for latent in 0..n_latents {
            let per_seed: Vec<f64> = seeds
                .iter()
                .filter_map(|&s| {
                    let vals: Vec<f64> = here
                        .iter()
                        .filter(|e| e.seed == s)
                        .filter_map(|e| e.r2.get(latent).copied().flatten())
                        .collect();
                    (!vals.is_empty()).then(|| mean_std(&vals).0)
                })
                .collect();
            if !per_seed.is_empty() {
                let (m, s) = mean_std(&per_seed);
                mean[latent][c] = Some(m);
                std[latent][c] = Some(s);
            }
        }
    }
    R2Report {
        n_latents,
        subsets: subsets.to_vec(),
        mean,
        std,
        missing,
        entries: entries.to_vec(),
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

impl R2Report {
    pub fn is_partial(&self) -> bool {
        !self.missing.is_empty()
    }

    pub fn cell(&self, latent: usize, subset: &IndexSet) -> Option<f64> {
        let c = self.subsets.iter().position(|s| s == subset)?;
        self.mean[latent - 1][c]
    }

    /// Rows `z1..zN`, one column per subset.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["latent".to_string()];
        header.extend(self.subsets.iter().map(subset_label));
        w.write_record(&header)?;
        for (l, row) in self.mean.iter().enumerate() {
            let mut rec = vec![format!("z{}", l + 1)];
            rec.extend(row.iter().map(|&v| fmt_cell(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long format: subset, view, seed, latent, r2.
    pub fn write_per_view_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["subset", "view", "seed", "latent", "r2"])?;
        for e in &self.entries {
            for (l, v) in e.r2.iter().enumerate() {
                w.write_record([
                    subset_label(&e.subset),
                    format!("x{}", e.view),
                    e.seed.to_string(),
                    format!("z{}", l + 1),
                    fmt_cell(*v),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MccRow {
    pub configuration: String,
    pub value: f64,
    pub std: f64,
}

pub fn write_mcc_csv(rows: &[MccRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["configuration", "value", "std"])?;
    for r in rows {
        w.write_record([r.configuration.clone(), format!("{:.6}", r.value), format!("{:.6}", r.std)])?;
    }
    w.flush()?;
    Ok(())
}
