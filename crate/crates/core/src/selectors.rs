//! Content selectors: binary masks over a view-specific encoding, and their
//! binary-concrete relaxation trained with a straight-through estimator.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_set::IndexSet;
use crate::objectives::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectorState {
    Binary { bits: Vec<bool> },
    Relaxed { logits: Vec<f64>, temperature: f64 },
}

/// `φ^(i,k)`: which coordinates of `r_k(x_k)` carry the content of subset `V_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorMask {
    pub subset: IndexSet,
    pub view: usize,
    #[serde(flatten)]
    pub state: SelectorState,
}

impl SelectorMask {
    pub fn binary(subset: IndexSet, view: usize, bits: Vec<bool>) -> Self {
        SelectorMask {
            subset,
            view,
            state: SelectorState::Binary { bits },
        }
    }

    pub fn relaxed(subset: IndexSet, view: usize, logits: Vec<f64>, temperature: f64) -> Self {
        SelectorMask {
            subset,
            view,
            state: SelectorState::Relaxed {
                logits,
                temperature,
            },
        }
    }

    pub fn width(&self) -> usize {
        match &self.state {
            SelectorState::Binary { bits } => bits.len(),
            SelectorState::Relaxed { logits, .. } => logits.len(),
        }
    }

    pub fn is_relaxed(&self) -> bool {
        matches!(self.state, SelectorState::Relaxed { .. })
    }

    /// `σ(logits)` for relaxed masks, the bits as 0/1 for binary ones.
    pub fn gate_probabilities(&self) -> Vec<f64> {
        match &self.state {
            SelectorState::Binary { bits } => bits.iter().map(|&b| f64::from(u8::from(b))).collect(),
            SelectorState::Relaxed { logits, .. } => logits.iter().map(|&l| sigmoid(l)).collect(),
        }
    }

    /// Hard mask: the bits, or gate probabilities thresholded at 0.5.
    pub fn hard_bits(&self) -> Vec<bool> {
        match &self.state {
            SelectorState::Binary { bits } => bits.clone(),
            SelectorState::Relaxed { logits, .. } => logits.iter().map(|&l| l > 0.0).collect(),
        }
    }

    /// The `k` coordinates with the largest gate probability.
    pub fn top_k_bits(&self, k: usize) -> Vec<bool> {
        top_k(&self.gate_probabilities(), k)
    }

    pub fn count(&self) -> usize {
        self.hard_bits().iter().filter(|&&b| b).count()
    }

    pub fn temperature(&self) -> Option<f64> {
        match &self.state {
            SelectorState::Relaxed { temperature, .. } => Some(*temperature),
            SelectorState::Binary { .. } => None,
        }
    }

    pub fn logits_mut(&mut self) -> Result<&mut Vec<f64>> {
        match &mut self.state {
            SelectorState::Relaxed { logits, .. } => Ok(logits),
            SelectorState::Binary { .. } => Err(Error::NotRelaxed),
        }
    }

    /// Freezes a relaxed mask into a binary one.
    pub fn harden(&self, count: Option<usize>) -> SelectorMask {
        let bits = match count {
            Some(k) => self.top_k_bits(k),
            None => self.hard_bits(),
        };
        SelectorMask::binary(self.subset.clone(), self.view, bits)
    }
}

/// Marks the `k` largest scores; ties go to the lowest index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut bits = vec![false; scores.len()];
    for &j in order.iter().take(k) {
        bits[j] = true;
    }
    bits
}

/// `a ⊘ b`: the columns of `encoding` whose mask bit is set, in ascending order.
pub fn select(mask: &SelectorMask, encoding: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    select_bits(&mask.hard_bits(), encoding)
}

pub fn select_bits(bits: &[bool], encoding: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if bits.len() != encoding.ncols() {
        return Err(Error::DimensionMismatch {
            context: "selector width",
            expected: bits.len(),
            actual: encoding.ncols(),
        });
    }
    let cols: Vec<usize> = (0..bits.len()).filter(|&j| bits[j]).collect();
    Ok(encoding.select(Axis(1), &cols))
}

/// One binary-concrete draw: the logistic noise `G₁ − G₀` and the soft gates.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSample {
    pub noise: Vec<f64>,
    pub soft: Vec<f64>,
    pub temperature: f64,
}

fn standard_gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Per-coordinate gates `σ((l + G₁ − G₀) / T)` with `G` standard Gumbel.
pub fn gumbel_sample_with(mask: &SelectorMask, rng: &mut impl Rng) -> Result<GateSample> {
    let SelectorState::Relaxed {
        logits,
        temperature,
    } = &mask.state
    else {
        return Err(Error::NotRelaxed);
    };
    let noise: Vec<f64> = logits
        .iter()
        .map(|_| standard_gumbel(rng) - standard_gumbel(rng))
        .collect();
    Ok(soft_gates(logits, &noise, *temperature))
}

pub fn gumbel_sample(mask: &SelectorMask, seed: u64) -> Result<GateSample> {
    gumbel_sample_with(mask, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn soft_gates(logits: &[f64], noise: &[f64], temperature: f64) -> GateSample {
    let soft = logits
        .iter()
        .zip(noise)
        .map(|(&l, &g)| sigmoid((l + g) / temperature))
        .collect();
    GateSample {
        noise: noise.to_vec(),
        soft,
        temperature,
    }
}

impl GateSample {
    /// Straight-through hard mask: top-`k` gates if a count is fixed, else gates above 0.5.
    pub fn hard(&self, count: Option<usize>) -> Vec<bool> {
        match count {
            Some(k) => top_k(&self.soft, k),
            None => self.soft.iter().map(|&s| s > 0.5).collect(),
        }
    }

    /// Chains `∂L/∂gate` through the soft relaxation: `∂L/∂l_j = ∂L/∂gate_j · s_j(1 − s_j)/T`.
    pub fn logit_grad(&self, gate_grads: &[f64]) -> Vec<f64> {
        self.soft
            .iter()
            .zip(gate_grads)
            .map(|(&s, &g)| g * s * (1.0 - s) / self.temperature)
            .collect()
    }
}

/// Geometric temperature decay from `start` to `end` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            start: 1.0,
            end: 0.1,
            total_steps: 1,
        }
    }
}

impl AnnealSchedule {
    pub fn temperature(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.end;
        }
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        self.start * (self.end / self.start).powf(frac)
    }
}

/// Sets a relaxed mask's temperature for `step`; returns the new value.
pub fn anneal(mask: &mut SelectorMask, schedule: &AnnealSchedule, step: u64) -> Result<f64> {
    match &mut mask.state {
        SelectorState::Relaxed { temperature, .. } => {
            *temperature = schedule.temperature(step);
            Ok(*temperature)
        }
        SelectorState::Binary { .. } => Err(Error::NotRelaxed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EqualCountReport {
    pub passed: bool,
    pub counts: Vec<usize>,
}

/// Checks the equal-L0 constraint across the masks of one subset.
pub fn enforce_equal_counts(masks: &[&SelectorMask]) -> EqualCountReport {
    let counts: Vec<usize> = masks.iter().map(|m| m.count()).collect();
    let passed = counts.windows(2).all(|w| w[0] == w[1]);
    EqualCountReport { passed, counts }
}
