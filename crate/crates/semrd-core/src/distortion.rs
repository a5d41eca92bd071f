//! Distortion measures: reconstruction (pixel-level) cost, task-relevance
//! cost, and their weighted combination.
//!
//! The task cost of reconstructing x as x_hat is the KL divergence between
//! the label posteriors p(y|x) and p(y|x_hat) — how much the reconstruction
//! distorts what the symbol says about the task variable. Individual entries
//! may be +inf (a reconstruction that kills a label outright); every row must
//! keep at least one finite entry so each source symbol has an admissible
//! reconstruction.

use crate::error::{Error, Result};
use crate::prob::{
    compose_markov, kl_divergence, mutual_information, ConditionalDistribution, Distribution,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortionKind {
    Pixel,
    Task,
    Combined,
}

/// A per-pair cost matrix d(x, x_hat), non-negative with a finite minimum in
/// every row.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionMatrix {
    costs: Vec<Vec<f64>>,
    kind: DistortionKind,
}

impl DistortionMatrix {
    pub fn new(costs: Vec<Vec<f64>>, kind: DistortionKind) -> Result<Self> {
        if costs.is_empty() || costs[0].is_empty() {
            return Err(Error::invalid("distortion matrix with an empty axis"));
        }
        let width = costs[0].len();
        for (i, row) in costs.iter().enumerate() {
            if row.len() != width {
                return Err(Error::invalid("distortion matrix is not rectangular"));
            }
            let mut row_min = f64::INFINITY;
            for &c in row {
                if c.is_nan() || c < 0.0 {
                    return Err(Error::invalid(format!(
                        "distortion entry in row {i} is negative or NaN"
                    )));
                }
                row_min = row_min.min(c);
            }
            if !row_min.is_finite() {
                return Err(Error::infeasible(format!(
                    "source symbol {i} has no reconstruction of finite distortion"
                )));
            }
        }
        Ok(DistortionMatrix { costs, kind })
    }

    pub fn kind(&self) -> DistortionKind {
        self.kind
    }

    pub fn n_inputs(&self) -> usize {
        self.costs.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.costs[0].len()
    }

    pub fn cost(&self, x: usize, xhat: usize) -> f64 {
        self.costs[x][xhat]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.costs[x]
    }

    /// Largest finite entry; useful for scaling solver schedules.
    pub fn max_finite_cost(&self) -> f64 {
        self.costs
            .iter()
            .flatten()
            .copied()
            .filter(|c| c.is_finite())
            .fold(0.0, f64::max)
    }
}

/// A discrete semantic source: symbol prior, label posteriors, embeddings,
/// and optionally an alternative task and a separate reconstruction alphabet.
#[derive(Debug, Clone)]
pub struct SemanticSource {
    pub px: Distribution,
    pub py_given_x: ConditionalDistribution,
    pub embeddings: Vec<Vec<f64>>,
    /// A second labeling of the same symbols, for transfer evaluation.
    pub alt_py_given_x: Option<ConditionalDistribution>,
    /// Embeddings of a reconstruction alphabet distinct from the source's;
    /// when absent, reconstructions live on the source alphabet itself.
    pub xhat_embeddings: Option<Vec<Vec<f64>>>,
}

impl SemanticSource {
    pub fn new(
        px: Distribution,
        py_given_x: ConditionalDistribution,
        embeddings: Vec<Vec<f64>>,
        alt_py_given_x: Option<ConditionalDistribution>,
        xhat_embeddings: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let n = px.len();
        if py_given_x.n_inputs() != n {
            return Err(Error::invalid(format!(
                "label posteriors cover {} symbols, prior has {n}",
                py_given_x.n_inputs()
            )));
        }
        if embeddings.len() != n {
            return Err(Error::invalid(format!(
                "{} embeddings for {n} symbols",
                embeddings.len()
            )));
        }
        let dim = embeddings.first().map(|e| e.len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::invalid("embeddings must be non-empty vectors"));
        }
        if embeddings.iter().any(|e| e.len() != dim)
            || embeddings.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::invalid("embeddings must be finite and equal-dimensional"));
        }
        if let Some(alt) = &alt_py_given_x {
            if alt.n_inputs() != n {
                return Err(Error::invalid(format!(
                    "alternative task covers {} symbols, prior has {n}",
                    alt.n_inputs()
                )));
            }
        }
        if let Some(xe) = &xhat_embeddings {
            if xe.is_empty() {
                return Err(Error::invalid("reconstruction alphabet is empty"));
            }
            if xe.iter().any(|e| e.len() != dim) || xe.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    "reconstruction embeddings must be finite and match the source dimension",
                ));
            }
        }
        Ok(SemanticSource {
            px,
            py_given_x,
            embeddings,
            alt_py_given_x,
            xhat_embeddings,
        })
    }

    pub fn n_symbols(&self) -> usize {
        self.px.len()
    }

    pub fn n_labels(&self) -> usize {
        self.py_given_x.n_outputs()
    }

    pub fn n_reconstructions(&self) -> usize {
        self.xhat_embeddings
            .as_ref()
            .map(|e| e.len())
            .unwrap_or_else(|| self.n_symbols())
    }

    pub fn reconstruction_embeddings(&self) -> &[Vec<f64>] {
        self.xhat_embeddings.as_ref().unwrap_or(&self.embeddings)
    }

    /// Marginal label distribution p(y) = sum_x p(x) p(y|x).
    pub fn label_marginal(&self) -> Distribution {
        self.py_given_x
            .output_marginal(&self.px)
            .expect("source dimensions are validated at construction")
    }

    /// I(X;Y) of the source, in nats.
    pub fn task_information(&self) -> f64 {
        let joint = crate::prob::JointDistribution::from_marginal_conditional(
            &self.px,
            &self.py_given_x,
        )
        .expect("source dimensions are validated at construction");
        mutual_information(&joint)
    }
}

/// Squared Euclidean distance between source and reconstruction embeddings,
/// summed over dimensions.
pub fn mse_matrix(src: &SemanticSource) -> Result<DistortionMatrix> {
    let recon = src.reconstruction_embeddings();
    let costs = src
        .embeddings
        .iter()
        .map(|e| {
            recon
                .iter()
                .map(|r| e.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect()
        })
        .collect();
    DistortionMatrix::new(costs, DistortionKind::Pixel)
}

/// 0/1 cost on a shared alphabet of size n.
pub fn hamming_matrix(n: usize) -> DistortionMatrix {
    let costs = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
        .collect();
    DistortionMatrix::new(costs, DistortionKind::Pixel).expect("hamming rows have a zero diagonal")
}

/// Task-relevance cost d_T(x, x_hat) = KL(p(y|x) || p(y|x_hat)) in nats.
pub fn task_distortion_matrix(
    py_given_x: &ConditionalDistribution,
    py_given_xhat: &ConditionalDistribution,
) -> Result<DistortionMatrix> {
    if py_given_x.n_outputs() != py_given_xhat.n_outputs() {
        return Err(Error::invalid(format!(
            "label alphabets differ: {} vs {}",
            py_given_x.n_outputs(),
            py_given_xhat.n_outputs()
        )));
    }
    let costs = py_given_x
        .rows()
        .iter()
        .map(|px_row| {
            py_given_xhat
                .rows()
                .iter()
                .map(|q_row| kl_divergence(px_row, q_row))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    DistortionMatrix::new(costs, DistortionKind::Task)
}

/// Expected task distortion of a mapping under a given reconstruction
/// predictor: sum_x p(x) sum_xhat p(xhat|x) KL(p(y|x) || p(y|xhat)), nats.
pub fn expected_task_distortion(
    src: &SemanticSource,
    mapping: &ConditionalDistribution,
    py_given_xhat: &ConditionalDistribution,
) -> Result<f64> {
    if mapping.n_inputs() != src.n_symbols() {
        return Err(Error::invalid("mapping rows must match the source alphabet"));
    }
    if py_given_xhat.n_inputs() != mapping.n_outputs() {
        return Err(Error::invalid(
            "predictor rows must match the reconstruction alphabet",
        ));
    }
    let kl = task_distortion_matrix(&src.py_given_x, py_given_xhat)?;
    let mut total = 0.0;
    for x in 0..src.n_symbols() {
        for xhat in 0..mapping.n_outputs() {
            let w = src.px.get(x) * mapping.prob(x, xhat);
            if w > 0.0 {
                total += w * kl.cost(x, xhat);
            }
        }
    }
    Ok(total)
}

/// Task distortion in mutual-information form: I(X;Y) - I(X_hat;Y), nats.
///
/// Equals [`expected_task_distortion`] when the predictor is the Bayes
/// posterior induced by the mapping.
pub fn task_distortion_mi_form(
    src: &SemanticSource,
    mapping: &ConditionalDistribution,
) -> Result<f64> {
    let j3 = compose_markov(&src.px, &src.py_given_x, mapping)?;
    let i_xy = mutual_information(&j3.marginal_x_y());
    let i_xhat_y = mutual_information(&j3.marginal_xhat_y());
    Ok((i_xy - i_xhat_y).max(0.0))
}

/// d_S = pixel + beta * task, entrywise.
pub fn combined_distortion(
    pixel: &DistortionMatrix,
    task: &DistortionMatrix,
    beta: f64,
) -> Result<DistortionMatrix> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::invalid(format!("beta = {beta} must be finite and >= 0")));
    }
    if pixel.n_inputs() != task.n_inputs() || pixel.n_outputs() != task.n_outputs() {
        return Err(Error::invalid(format!(
            "distortion shapes differ: {}x{} vs {}x{}",
            pixel.n_inputs(),
            pixel.n_outputs(),
            task.n_inputs(),
            task.n_outputs()
        )));
    }
    let costs = (0..pixel.n_inputs())
        .map(|x| {
            (0..pixel.n_outputs())
                .map(|xhat| {
                    // beta = 0 must reduce to the pixel cost even against
                    // +inf task entries (0 * inf is NaN).
                    if beta == 0.0 {
                        pixel.cost(x, xhat)
                    } else {
                        pixel.cost(x, xhat) + beta * task.cost(x, xhat)
                    }
                })
                .collect()
        })
        .collect();
    DistortionMatrix::new(costs, DistortionKind::Combined)
}
