//! Gaussian-mixture PMF model and its seeded expectation-maximization fit.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Hard floor on component scales accepted by the model.
pub const SCALE_MIN: f64 = 1e-6;
/// Collapsing components are clamped here during fitting and flagged.
const SCALE_COLLAPSE_FLOOR: f64 = 1e-3;
const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Mixture of univariate Gaussians used as the symbol probability model.
/// Weights form a simplex, scales stay above [`SCALE_MIN`], and `floored`
/// records whether the fit had to clamp a collapsing component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelData")]
pub struct GmmPmfModel {
    weights: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
    #[serde(default)]
    floored: bool,
}

#[derive(Deserialize)]
struct ModelData {
    weights: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
    #[serde(default)]
    floored: bool,
}

impl TryFrom<ModelData> for GmmPmfModel {
    type Error = Error;

    fn try_from(data: ModelData) -> Result<Self> {
        let mut model = GmmPmfModel::new(data.weights, data.means, data.scales)?;
        model.floored = data.floored;
        Ok(model)
    }
}

impl GmmPmfModel {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if weights.len() != means.len() || weights.len() != scales.len() {
            return Err(Error::invalid("mixture parameter lengths disagree"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&weights) || !finite(&means) || !finite(&scales) {
            return Err(Error::invalid("mixture parameters must be finite"));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("mixture weights must be non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::invalid(format!(
                "mixture weights sum to {sum}, expected 1"
            )));
        }
        if scales.iter().any(|&s| s < SCALE_MIN) {
            return Err(Error::invalid(format!(
                "mixture scales must be at least {SCALE_MIN}"
            )));
        }
        Ok(GmmPmfModel {
            weights,
            means,
            scales,
            floored: false,
        })
    }

    pub fn component_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// True when the fit clamped a collapsing scale at its floor.
    pub fn floored(&self) -> bool {
        self.floored
    }

    pub fn max_scale(&self) -> f64 {
        self.scales.iter().cloned().fold(f64::MIN, f64::max)
    }

    /// Mixture density at `x`.
    pub fn density(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((&w, &mu), &sigma)| {
                let z = (x - mu) / sigma;
                w * (-0.5 * (LN_2PI + z * z)).exp() / sigma
            })
            .sum()
    }
}

/// Stopping rule for [`fit_gmm_pmf`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iterations: 200,
            tolerance: 1e-8,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn seeded(seed: u64) -> Self {
        EmConfig {
            seed,
            ..EmConfig::default()
        }
    }
}

/// Fits a `components`-part mixture to `samples` by expectation-maximization
/// with a seeded distance-weighted initialization. Components come back
/// sorted by mean. Requires at least ten samples per component.
pub fn fit_gmm_pmf(samples: &[f64], components: usize, config: &EmConfig) -> Result<GmmPmfModel> {
    Ok(em_fit(samples, components, config)?.0)
}

/// Like [`fit_gmm_pmf`] but also returns the per-iteration log-likelihood
/// trace, which EM guarantees to be non-decreasing.
pub(crate) fn em_fit(
    samples: &[f64],
    components: usize,
    config: &EmConfig,
) -> Result<(GmmPmfModel, Vec<f64>)> {
    if components == 0 {
        return Err(Error::invalid("mixture needs at least one component"));
    }
    if samples.len() < 10 * components {
        return Err(Error::invalid(format!(
            "need at least {} samples to fit {components} components, got {}",
            10 * components,
            samples.len()
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    if config.max_iterations == 0 || !config.tolerance.is_finite() || config.tolerance < 0.0 {
        return Err(Error::invalid("bad EM configuration"));
    }

    let n = samples.len();
    let m = components;
    let mut means = init_centers(samples, m, config.seed);
    let mean_all: f64 = samples.iter().sum::<f64>() / n as f64;
    let var_all: f64 = samples.iter().map(|x| (x - mean_all).powi(2)).sum::<f64>() / n as f64;
    let sigma0 = var_all.sqrt().max(SCALE_COLLAPSE_FLOOR);
    let mut scales = vec![sigma0; m];
    let mut weights = vec![1.0 / m as f64; m];
    let mut floored = false;

    let mut resp = vec![0.0f64; n * m];
    let mut trace = Vec::new();
    for _ in 0..config.max_iterations {
        // E-step in log space; each row's normalizer is the sample's
        // log-likelihood under the current mixture.
        let mut ll = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let row = &mut resp[i * m..(i + 1) * m];
            for j in 0..m {
                let z = (x - means[j]) / scales[j];
                row[j] = weights[j].ln() - scales[j].ln() - 0.5 * (LN_2PI + z * z);
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln();
            for r in row.iter_mut() {
                *r = (*r - lse).exp();
            }
            ll += lse;
        }
        let done = trace
            .last()
            .is_some_and(|&prev| ll - prev < config.tolerance);
        trace.push(ll);
        if done {
            break;
        }

        for j in 0..m {
            let mass: f64 = (0..n).map(|i| resp[i * m + j]).sum();
            weights[j] = mass / n as f64;
            if mass < 1e-12 {
                continue; // starved component keeps its parameters
            }
            let mu: f64 = (0..n).map(|i| resp[i * m + j] * samples[i]).sum::<f64>() / mass;
            let var: f64 = (0..n)
                .map(|i| resp[i * m + j] * (samples[i] - mu).powi(2))
                .sum::<f64>()
                / mass;
            means[j] = mu;
            scales[j] = var.sqrt();
            if scales[j] < SCALE_COLLAPSE_FLOOR {
                scales[j] = SCALE_COLLAPSE_FLOOR;
                floored = true;
            }
        }
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    let pick = |v: &[f64]| order.iter().map(|&j| v[j]).collect::<Vec<f64>>();
    let mut weights = pick(&weights);
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    let mut model = GmmPmfModel::new(weights, pick(&means), pick(&scales))?;
    model.floored = floored;
    Ok((model, trace))
}

/// Distance-weighted center seeding: each new center is drawn with
/// probability proportional to squared distance from the chosen set.
fn init_centers(samples: &[f64], m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();
    let mut centers = vec![samples[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = samples
        .iter()
        .map(|x| (x - centers[0]).powi(2))
        .collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            samples[idx]
        } else {
            samples[rng.random_range(0..n)]
        };
        centers.push(next);
        for (i, &x) in samples.iter().enumerate() {
            d2[i] = d2[i].min((x - next).powi(2));
        }
    }
    centers
}
