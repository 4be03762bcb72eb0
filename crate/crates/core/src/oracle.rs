//! Closed-form reference encoders for Gaussian latents: the Darmois map,
//! optimal content encoders built from the true mixing inverse, and a
//! Kolmogorov–Smirnov uniformity test.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::index_set::IndexSet;
use crate::latent_model::select_columns;
use crate::mixing::MixingFunction;

pub const KS_ALPHA: f64 = 0.01;
pub const MIN_KS_SAMPLES: usize = 100;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse standard normal CDF: Acklam's rational approximation, then one Newton step.
pub fn normal_inv_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;

    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Newton on Φ(x) − p; the upper tail is refined through the complement to keep precision.
    let pdf = normal_pdf(x);
    if pdf == 0.0 {
        return x;
    }
    if p > 0.5 {
        let upper = 0.5 * libm::erfc(x / std::f64::consts::SQRT_2);
        x + (upper - (1.0 - p)) / pdf
    } else {
        x - (normal_cdf(x) - p) / pdf
    }
}

/// Gaussian Darmois construction over `coords`: coordinate `j` maps to
/// `Φ((z_j − μ_j(z_{<j})) / σ_j)` with `μ_j`, `σ_j` from Schur complements of `Σ`.
#[derive(Clone, Debug, Serialize)]
pub struct DarmoisMap {
    coords: IndexSet,
    /// `coefs[j]`: regression of `z_j` on `z_{<j}` (length `j`).
    coefs: Vec<Vec<f64>>,
    sds: Vec<f64>,
}

pub fn build_darmois(covariance: &Array2<f64>, coords: &IndexSet) -> Result<DarmoisMap> {
    if coords.is_empty() {
        return Err(Error::InvalidIndexSet("Darmois map needs at least one coordinate".into()));
    }
    let n = covariance.nrows();
    if coords.max().unwrap_or(0) > n {
        return Err(Error::InvalidIndexSet(format!("coords {coords} exceed N = {n}")));
    }
    let idx = coords.zero_based();
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |r, c| covariance[[idx[r], idx[c]]]);
    let mut coefs = Vec::with_capacity(idx.len());
    let mut sds = Vec::with_capacity(idx.len());
    for j in 0..idx.len() {
        let var_j = sub[(j, j)];
        if j == 0 {
            coefs.push(Vec::new());
            if var_j <= 0.0 {
                return Err(Error::Singular("Darmois conditional variance"));
            }
            sds.push(var_j.sqrt());
            continue;
        }
        let prev = sub.view((0, 0), (j, j)).into_owned();
        let cross = sub.view((0, j), (j, 1)).into_owned();
        let beta = prev
            .cholesky()
            .ok_or(Error::Singular("Darmois conditioning block"))?
            .solve(&cross);
        let cond_var = var_j - cross.dot(&beta);
        if cond_var <= 0.0 {
            return Err(Error::Singular("Darmois conditional variance"));
        }
        coefs.push(beta.iter().copied().collect());
        sds.push(cond_var.sqrt());
    }
    Ok(DarmoisMap {
        coords: coords.clone(),
        coefs,
        sds,
    })
}

impl DarmoisMap {
    pub fn coords(&self) -> &IndexSet {
        &self.coords
    }

    pub fn conditional_sds(&self) -> &[f64] {
        &self.sds
    }

    pub fn regression_coefficients(&self, j: usize) -> &[f64] {
        &self.coefs[j]
    }

    /// Standardized residuals `(z_j − μ_j) / σ_j`; columns of `z` follow `coords`.
    pub fn whiten(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_width(z.ncols())?;
        let mut w = Array2::zeros(z.dim());
        for (r, row) in z.rows().into_iter().enumerate() {
            for j in 0..self.sds.len() {
                let mu: f64 = self.coefs[j].iter().enumerate().map(|(i, b)| b * row[i]).sum();
                w[[r, j]] = (row[j] - mu) / self.sds[j];
            }
        }
        Ok(w)
    }

    /// `d(z)`, mapping into the open unit cube.
    pub fn apply(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let hi = 1.0 - f64::EPSILON / 2.0;
        Ok(self
            .whiten(z)?
            .mapv(|w| normal_cdf(w).clamp(f64::MIN_POSITIVE, hi)))
    }

    /// Sequential inversion: `z_j = μ_j(z_{<j}) + σ_j Φ⁻¹(u_j)`.
    pub fn invert(&self, u: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_width(u.ncols())?;
        let mut z = Array2::zeros(u.dim());
        for r in 0..u.nrows() {
            for j in 0..self.sds.len() {
                let mu: f64 = self.coefs[j].iter().enumerate().map(|(i, b)| b * z[[r, i]]).sum();
                z[[r, j]] = mu + self.sds[j] * normal_inv_cdf(u[[r, j]]);
            }
        }
        Ok(z)
    }

    fn check_width(&self, got: usize) -> Result<()> {
        if got != self.sds.len() {
            return Err(Error::DimensionMismatch {
                context: "Darmois input width",
                expected: self.sds.len(),
                actual: got,
            });
        }
        Ok(())
    }
}

/// `g*_k = d ∘ (f_k⁻¹ restricted to the content coordinates)`.
#[derive(Clone, Debug)]
pub struct OptimalEncoder {
    view_set: IndexSet,
    content: IndexSet,
    mixing: MixingFunction,
    darmois: DarmoisMap,
}

pub fn optimal_content_encoder(
    view_set: &IndexSet,
    content: &IndexSet,
    mixing: &MixingFunction,
    covariance: &Array2<f64>,
) -> Result<OptimalEncoder> {
    if !content.is_subset(view_set) {
        return Err(Error::InvalidIndexSet(format!(
            "content {content} is not contained in view set {view_set}"
        )));
    }
    if mixing.dim() != view_set.len() {
        return Err(Error::DimensionMismatch {
            context: "mixing width vs view set",
            expected: view_set.len(),
            actual: mixing.dim(),
        });
    }
    Ok(OptimalEncoder {
        view_set: view_set.clone(),
        content: content.clone(),
        mixing: mixing.clone(),
        darmois: build_darmois(covariance, content)?,
    })
}

impl OptimalEncoder {
    pub fn content(&self) -> &IndexSet {
        &self.content
    }

    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let z_view = self.mixing.invert(x)?;
        let local = self
            .content
            .positions_in(&self.view_set)
            .expect("content checked against view set");
        let local = IndexSet::new(local.into_iter().map(|p| p + 1))?;
        self.darmois.apply(select_columns(z_view.view(), &local).view())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniformityReport {
    pub statistics: Vec<f64>,
    pub p_values: Vec<f64>,
    pub alpha: f64,
    pub passed: bool,
}

/// Exact one-sample KS statistic against Uniform(0, 1).
pub fn ks_statistic(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &u)| ((i as f64 + 1.0) / n - u).max(u - i as f64 / n))
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov tail probability with Stephens' small-sample correction.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Per-column KS test; passes iff every p-value exceeds `alpha`.
pub fn uniformity_test_at(samples: ArrayView2<'_, f64>, alpha: f64) -> Result<UniformityReport> {
    let n = samples.nrows();
    if n < MIN_KS_SAMPLES {
        return Err(Error::BatchTooSmall {
            min: MIN_KS_SAMPLES,
            actual: n,
        });
    }
    if samples.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::OutOfUnitInterval);
    }
    let mut statistics = Vec::with_capacity(samples.ncols());
    let mut p_values = Vec::with_capacity(samples.ncols());
    for col in samples.columns() {
        let mut v = col.to_vec();
        v.sort_by(f64::total_cmp);
        let d = ks_statistic(&v);
        statistics.push(d);
        p_values.push(ks_p_value(d, n));
    }
    let passed = p_values.iter().all(|&p| p > alpha);
    Ok(UniformityReport {
        statistics,
        p_values,
        alpha,
        passed,
    })
}

pub fn uniformity_test(samples: ArrayView2<'_, f64>) -> Result<UniformityReport> {
    uniformity_test_at(samples, KS_ALPHA)
}
