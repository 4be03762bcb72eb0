//! Dense LeakyReLU MLPs with hand-written reverse mode, Adam, and
//! finite-difference gradient checking.
//!
//! Parameters live in one flat `Vec<f64>` laid out layer by layer as
//! `[W_0 (d_in × d_out, row-major), b_0, W_1, b_1, ...]`, so optimizers and
//! checkpoints operate on plain slices. Rows of every batch matrix are samples.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENCODER_SLOPE: f64 = 0.01;
/// Number of affine layers in every encoder.
pub const ENCODER_LAYERS: usize = 7;

/// Hidden width rule for encoders: `max(64, 4·d_in)`.
pub fn encoder_hidden_width(d_in: usize) -> usize {
    (4 * d_in).max(64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
    slope: f64,
}

/// Per-layer caches from one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    /// Input to each affine layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// Same layout as [`Mlp::params`].
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

impl Mlp {
    /// Builds an MLP with He-initialized weights `N(0, 2/((1 + slope²)·d_in))`
    /// and zero biases, so activations keep their scale through deep stacks.
    pub fn new(dims: &[usize], slope: f64, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(vec![format!(
                "layer dims must have at least two positive entries, got {dims:?}"
            )]));
        }
        let mut mlp = Mlp::zeros(dims, slope);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..mlp.n_layers() {
            let (din, dout) = (dims[l], dims[l + 1]);
            let var = 2.0 / ((1.0 + slope * slope) * din as f64);
            let normal = Normal::new(0.0, var.sqrt()).expect("finite");
            let off = mlp.weight_offset(l);
            for p in &mut mlp.params[off..off + din * dout] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(mlp)
    }

    /// Seven-layer encoder `d_in → hidden × 6 → d_out` with the default width.
    pub fn encoder(d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        Mlp::encoder_with_width(d_in, d_out, encoder_hidden_width(d_in), seed)
    }

    pub fn encoder_with_width(d_in: usize, d_out: usize, h: usize, seed: u64) -> Result<Self> {
        let mut dims = vec![d_in];
        dims.extend(std::iter::repeat(h).take(ENCODER_LAYERS - 1));
        dims.push(d_out);
        Mlp::new(&dims, ENCODER_SLOPE, seed)
    }

    pub fn zeros(dims: &[usize], slope: f64) -> Self {
        let n = param_count(dims);
        Mlp {
            dims: dims.to_vec(),
            params: vec![0.0; n],
            slope,
        }
    }

    pub fn from_params(dims: &[usize], slope: f64, params: Vec<f64>) -> Result<Self> {
        let expected = param_count(dims);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "mlp parameter count",
                expected,
                actual: params.len(),
            });
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            params,
            slope,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn d_in(&self) -> usize {
        self.dims[0]
    }

    pub fn d_out(&self) -> usize {
        *self.dims.last().expect("nonempty")
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn weight_offset(&self, l: usize) -> usize {
        param_count(&self.dims[..=l])
    }

    fn bias_offset(&self, l: usize) -> usize {
        self.weight_offset(l) + self.dims[l] * self.dims[l + 1]
    }

    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (din, dout) = (self.dims[l], self.dims[l + 1]);
        let off = self.weight_offset(l);
        ArrayView2::from_shape((din, dout), &self.params[off..off + din * dout]).expect("layout")
    }

    pub fn weight_mut(&mut self, l: usize) -> ArrayViewMut2<'_, f64> {
        let (din, dout) = (self.dims[l], self.dims[l + 1]);
        let off = self.weight_offset(l);
        ArrayViewMut2::from_shape((din, dout), &mut self.params[off..off + din * dout])
            .expect("layout")
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let off = self.bias_offset(l);
        ArrayView1::from(&self.params[off..off + self.dims[l + 1]])
    }

    pub fn bias_mut(&mut self, l: usize) -> ArrayViewMut1<'_, f64> {
        let off = self.bias_offset(l);
        let d = self.dims[l + 1];
        ArrayViewMut1::from(&mut self.params[off..off + d])
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.d_in() {
            return Err(Error::DimensionMismatch {
                context: "mlp input width",
                expected: self.d_in(),
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    fn affine(&self, l: usize, a: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = Array2::zeros((a.nrows(), self.dims[l + 1]));
        z += &self.bias(l);
        general_mat_mul(1.0, a, &self.weight(l), 1.0, &mut z);
        z
    }

    fn leaky(&self, z: &mut Array2<f64>) {
        let s = self.slope;
        z.mapv_inplace(|v| if v >= 0.0 { v } else { s * v });
    }

    /// Forward pass without caching, for evaluation.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.n_layers() - 1;
        let mut h = self.affine(0, &x);
        for l in 1..=last {
            self.leaky(&mut h);
            h = self.affine(l, &h.view());
        }
        Ok(h)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&x)?;
        let n_layers = self.n_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        inputs.push(x.to_owned());
        for l in 0..n_layers {
            let z = self.affine(l, &inputs[l].view());
            if l + 1 == n_layers {
                return Ok((z, Tape { inputs, pre }));
            }
            let mut a = z.clone();
            self.leaky(&mut a);
            pre.push(z);
            inputs.push(a);
        }
        unreachable!("loop returns on the final layer")
    }

    pub fn backward(&self, tape: &Tape, grad_out: ArrayView2<'_, f64>) -> Result<Gradients> {
        if grad_out.nrows() != tape.batch_size() {
            return Err(Error::StaleTape {
                tape: tape.batch_size(),
                grad: grad_out.nrows(),
            });
        }
        if grad_out.ncols() != self.d_out() || tape.inputs.len() != self.n_layers() {
            return Err(Error::DimensionMismatch {
                context: "mlp output gradient width",
                expected: self.d_out(),
                actual: grad_out.ncols(),
            });
        }
        let mut grads = vec![0.0; self.n_params()];
        let mut g = grad_out.to_owned();
        for l in (0..self.n_layers()).rev() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let w_off = self.weight_offset(l);
            {
                let mut dw =
                    ArrayViewMut2::from_shape((din, dout), &mut grads[w_off..w_off + din * dout])
                        .expect("layout");
                general_mat_mul(1.0, &tape.inputs[l].t(), &g, 0.0, &mut dw);
            }
            let b_off = w_off + din * dout;
            ArrayViewMut1::from(&mut grads[b_off..b_off + dout]).assign(&g.sum_axis(Axis(0)));
            let mut ga = g.dot(&self.weight(l).t());
            if l > 0 {
                let s = self.slope;
                ndarray::Zip::from(&mut ga)
                    .and(&tape.pre[l - 1])
                    .for_each(|d, &z| {
                        if z < 0.0 {
                            *d *= s
                        }
                    });
            }
            g = ga;
        }
        Ok(Gradients {
            params: grads,
            input: g,
        })
    }
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                context: "adam parameter count",
                expected: self.m.len(),
                actual: params.len().min(grads.len()),
            });
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Central-difference gradient of `f` at `x` with step `1e-5·(1 + |x_i|)`.
pub fn finite_difference_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-5 * (1.0 + x[i].abs());
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| {
            let denom = a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
            ((a - n).abs() / denom, i)
        })
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 || cur.0.is_nan() { cur } else { best })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Pre-activations closer than this to zero count as sitting on a LeakyReLU kink.
pub const KINK_MARGIN: f64 = 1e-3;

/// Compares backprop against central differences for `loss(mlp(input))`.
///
/// `loss` maps the network output to `(value, d value / d output)`. Input rows
/// whose hidden pre-activations sit within [`KINK_MARGIN`] of a kink are jittered
/// (deterministically from `seed`) before checking.
pub fn grad_check<F>(
    mlp: &Mlp,
    input: &Array2<f64>,
    loss: F,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(ArrayView2<'_, f64>) -> (f64, Array2<f64>),
{
    let x = move_off_kinks(mlp, input, seed)?;
    let (out, tape) = mlp.forward(x.view())?;
    let (_, g_out) = loss(out.view());
    let analytic = mlp.backward(&tape, g_out.view())?.params;

    let mut probe = mlp.clone();
    let numeric = finite_difference_gradient(
        |p| {
            probe.params.copy_from_slice(p);
            let out = probe.predict(x.view()).expect("shape checked above");
            loss(out.view()).0
        },
        mlp.params(),
    );
    let (max_rel_error, worst_param) = max_relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        max_rel_error,
        worst_param,
        checked: numeric.len(),
        tolerance,
        passed: max_rel_error <= tolerance,
    })
}

fn move_off_kinks(mlp: &Mlp, input: &Array2<f64>, seed: u64) -> Result<Array2<f64>> {
    let mut x = input.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let (_, tape) = mlp.forward(x.view())?;
        let bad: Vec<usize> = (0..x.nrows())
            .filter(|&r| {
                tape.pre
                    .iter()
                    .any(|z| z.row(r).iter().any(|v| v.abs() < KINK_MARGIN))
            })
            .collect();
        if bad.is_empty() {
            return Ok(x);
        }
        for r in bad {
            for v in x.row_mut(r) {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += 1e-2 * e;
            }
        }
    }
    Ok(x)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// JSON side of a checkpoint; the parameters sit in a little-endian `f64` blob.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub layer_dims: Vec<usize>,
    pub slope: f64,
    pub n_params: usize,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
}

pub const CHECKPOINT_FORMAT: &str = "mvcrl-mlp-v1";

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the JSON path.
pub fn save_checkpoint(mlp: &Mlp, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let blob_name = format!("{stem}.bin");
    let mut tensors = Vec::new();
    for l in 0..mlp.n_layers() {
        tensors.push(TensorEntry {
            name: format!("w{l}"),
            shape: vec![mlp.dims[l], mlp.dims[l + 1]],
            offset: mlp.weight_offset(l),
        });
        tensors.push(TensorEntry {
            name: format!("b{l}"),
            shape: vec![mlp.dims[l + 1]],
            offset: mlp.bias_offset(l),
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        layer_dims: mlp.dims.clone(),
        slope: mlp.slope,
        n_params: mlp.n_params(),
        tensors,
        blob: blob_name.clone(),
    };
    let bytes: Vec<u8> = mlp.params.iter().flat_map(|p| p.to_le_bytes()).collect();
    fs::write(dir.join(&blob_name), bytes)?;
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(json_path)
}

pub fn load_checkpoint(json_path: &Path) -> Result<Mlp> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(json_path)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unknown format {:?}",
            manifest.format
        )));
    }
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(&manifest.blob))?;
    if bytes.len() != manifest.n_params * 8 {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, expected {}",
            bytes.len(),
            manifest.n_params * 8
        )));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Mlp::from_params(&manifest.layer_dims, manifest.slope, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
    }

    fn sum_loss(out: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
        (out.sum(), Array2::ones(out.raw_dim()))
    }

    #[test]
    fn encoder_shape_and_param_count() {
        let m = Mlp::encoder(5, 4, 0).unwrap();
        assert_eq!(m.n_layers(), ENCODER_LAYERS);
        assert_eq!(m.dims(), &[5, 64, 64, 64, 64, 64, 64, 4]);
        assert_eq!(m.n_params(), 5 * 64 + 64 + 5 * (64 * 64 + 64) + 64 * 4 + 4);
        assert_eq!(encoder_hidden_width(20), 80);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = Mlp::zeros(&[3, 8, 2], ENCODER_SLOPE);
        let y = m.predict(gaussian(4, 3, 0).view()).unwrap();
        assert_eq!(y, Array2::<f64>::zeros((4, 2)));
    }

    #[test]
    fn identity_linear_layer() {
        let mut m = Mlp::zeros(&[3, 3], ENCODER_SLOPE);
        m.weight_mut(0).assign(&Array2::eye(3));
        let x = gaussian(5, 3, 1);
        assert_eq!(m.predict(x.view()).unwrap(), x);
    }

    #[test]
    fn output_shape_and_mismatch() {
        let m = Mlp::encoder(5, 3, 2).unwrap();
        let (y, tape) = m.forward(gaussian(4, 5, 0).view()).unwrap();
        assert_eq!(y.dim(), (4, 3));
        assert_eq!(tape.batch_size(), 4);
        assert!(m.forward(gaussian(4, 6, 0).view()).is_err());
        assert!(matches!(
            m.backward(&tape, Array2::zeros((5, 3)).view()),
            Err(Error::StaleTape { tape: 4, grad: 5 })
        ));
    }

    #[test]
    fn predict_matches_forward() {
        let m = Mlp::encoder(4, 2, 5).unwrap();
        let x = gaussian(16, 4, 1);
        assert_eq!(m.predict(x.view()).unwrap(), m.forward(x.view()).unwrap().0);
    }

    #[test]
    fn sum_loss_matches_finite_differences() {
        for seed in 0..3 {
            let m = Mlp::new(&[3, 16, 16, 2], ENCODER_SLOPE, seed).unwrap();
            let r = grad_check(&m, &gaussian(4, 3, seed + 10), sum_loss, 1e-4, seed).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = Mlp::new(&[3, 12, 2], ENCODER_SLOPE, 4).unwrap();
        let x = move_off_kinks(&m, &gaussian(3, 3, 2), 0).unwrap();
        let (_, tape) = m.forward(x.view()).unwrap();
        let g = m.backward(&tape, Array2::ones((3, 2)).view()).unwrap();
        let numeric = finite_difference_gradient(
            |v| {
                let xi = Array2::from_shape_vec((3, 3), v.to_vec()).unwrap();
                m.predict(xi.view()).unwrap().sum()
            },
            x.as_slice().unwrap(),
        );
        let (err, _) = max_relative_error(g.input.as_slice().unwrap(), &numeric);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let m = Mlp::encoder(3, 2, 1).unwrap();
        let (_, tape) = m.forward(gaussian(6, 3, 0).view()).unwrap();
        let g = m.backward(&tape, Array2::zeros((6, 2)).view()).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_least_squares_gradient_is_closed_form() {
        // L = ½‖XW + 1bᵀ − Y‖²  ⇒  ∂L/∂W = Xᵀ(XW + 1bᵀ − Y),  ∂L/∂b = Σ_rows (XW + 1bᵀ − Y).
        let m = Mlp::new(&[3, 2], ENCODER_SLOPE, 7).unwrap();
        let x = gaussian(10, 3, 1);
        let y = gaussian(10, 2, 2);
        let (out, tape) = m.forward(x.view()).unwrap();
        let resid = &out - &y;
        let g = m.backward(&tape, resid.view()).unwrap();
        let expected_w = x.t().dot(&(&x.dot(&m.weight(0)) + &m.bias(0) - &y));
        let expected_b = resid.sum_axis(Axis(0));
        let got_w = ArrayView2::from_shape((3, 2), &g.params[..6]).unwrap();
        for (a, b) in got_w.iter().zip(expected_w.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.params[6..].iter().zip(expected_b.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let yc = y.clone();
        let r = grad_check(
            &m,
            &x,
            move |o| {
                let d = &o - &yc;
                (0.5 * d.mapv(|v| v * v).sum(), d)
            },
            1e-7,
            0,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn infinite_tolerance_always_passes() {
        let m = Mlp::new(&[2, 4, 1], ENCODER_SLOPE, 0).unwrap();
        let r = grad_check(
            &m,
            &gaussian(3, 2, 0),
            |o| (o.sum(), Array2::zeros(o.raw_dim())),
            f64::INFINITY,
            0,
        )
        .unwrap();
        assert!(r.passed);
    }

    #[test]
    fn first_adam_step() {
        let mut state = AdamState::new(1, AdamConfig::default());
        let mut theta = [0.0];
        state.step(&mut theta, &[1.0]).unwrap();
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-18);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut state = AdamState::new(3, AdamConfig::default());
        let mut p = [1.0, -2.0, 3.0];
        state.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
        assert_eq!(state.step_count(), 1);
        assert!(state.step(&mut p, &[0.0; 2]).is_err());
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut m = Mlp::new(&[2, 8, 1], ENCODER_SLOPE, 3).unwrap();
            let mut opt = AdamState::new(m.n_params(), AdamConfig::default());
            let x = gaussian(8, 2, 1);
            let mut trace = Vec::new();
            for _ in 0..20 {
                let (out, tape) = m.forward(x.view()).unwrap();
                trace.push(out.mapv(|v| v * v).sum());
                let g = m.backward(&tape, (&out * 2.0).view()).unwrap();
                opt.step(m.params_mut(), &g.params).unwrap();
            }
            (m, trace)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(ta.last() < ta.first());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mlp::encoder(5, 4, 11).unwrap();
        let path = save_checkpoint(&m, dir.path(), "enc").unwrap();
        let blob = fs::read(dir.path().join("enc.bin")).unwrap();
        assert_eq!(blob.len(), m.n_params() * 8);
        assert_eq!(&blob[..8], &m.params()[0].to_le_bytes());
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }

    #[test]
    fn from_params_checks_length() {
        assert!(Mlp::from_params(&[2, 2], 0.01, vec![0.0; 5]).is_err());
        let m = Mlp::from_params(&[1, 1], 0.01, vec![2.0, 1.0]).unwrap();
        assert_eq!(m.predict(array![[3.0]].view()).unwrap()[[0, 0]], 7.0);
    }
}
