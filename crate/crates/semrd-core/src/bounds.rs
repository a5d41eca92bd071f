//! Executable numerical checks of the inequality structure behind the
//! solver: the variational upper bound on task distortion through an
//! arbitrary predictor, its cross-entropy term, and the directional
//! correspondence between coding rate and reconstruction distortion.

use crate::distortion::{mse_matrix, task_distortion_mi_form, SemanticSource};
use crate::error::{Error, Result};
use crate::prob::{
    compose_markov, entropy, mutual_information, ConditionalDistribution, JointDistribution,
};

/// A bound instance is accepted when its slack clears this floor.
pub const SLACK_TOLERANCE: f64 = 1e-9;

/// One evaluated inequality: `lhs <= rhs` with `slack = rhs - lhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub satisfied: bool,
}

impl BoundReport {
    fn new(lhs: f64, rhs: f64) -> Self {
        let slack = rhs - lhs;
        BoundReport {
            lhs,
            rhs,
            slack,
            satisfied: slack >= -SLACK_TOLERANCE,
        }
    }
}

fn check_shapes(
    src: &SemanticSource,
    mapping: &ConditionalDistribution,
    q: &ConditionalDistribution,
) -> Result<()> {
    if mapping.n_inputs() != src.n_symbols() {
        return Err(Error::invalid("mapping rows must match the source alphabet"));
    }
    if q.n_inputs() != mapping.n_outputs() || q.n_outputs() != src.n_labels() {
        return Err(Error::invalid(format!(
            "predictor shape {}x{} does not match {} reconstructions and {} labels",
            q.n_inputs(),
            q.n_outputs(),
            mapping.n_outputs(),
            src.n_labels()
        )));
    }
    Ok(())
}

/// The exact label posterior given the reconstruction, p(y|x_hat), under
/// the chain x -> (x_hat, y). Reconstructions with zero mass fall back to
/// the label marginal.
pub fn bayes_predictor(
    src: &SemanticSource,
    mapping: &ConditionalDistribution,
) -> Result<ConditionalDistribution> {
    if mapping.n_inputs() != src.n_symbols() {
        return Err(Error::invalid("mapping rows must match the source alphabet"));
    }
    let joint = compose_markov(&src.px, &src.py_given_x, mapping)?.marginal_xhat_y();
    let fallback = src.label_marginal();
    let rows = (0..joint.n_rows())
        .map(|xhat| {
            let mass: f64 = (0..joint.n_cols()).map(|y| joint.prob(xhat, y)).sum();
            if mass > 0.0 {
                (0..joint.n_cols())
                    .map(|y| joint.prob(xhat, y) / mass)
                    .collect()
            } else {
                fallback.as_slice().to_vec()
            }
        })
        .collect();
    ConditionalDistribution::from_rows(rows)
}

/// Expected negative log-score of predictor `q` on the (y, x_hat) joint,
/// in nats: -sum p(y, x_hat) ln q(y|x_hat). Infinite when `q` puts zero
/// mass where the joint does not.
pub fn cross_entropy_term(
    src: &SemanticSource,
    mapping: &ConditionalDistribution,
    q: &ConditionalDistribution,
) -> Result<f64> {
    check_shapes(src, mapping, q)?;
    let joint = compose_markov(&src.px, &src.py_given_x, mapping)?.marginal_xhat_y();
    let mut ce = 0.0;
    for xhat in 0..joint.n_rows() {
        for y in 0..joint.n_cols() {
            let w = joint.prob(xhat, y);
            if w > 0.0 {
                let qv = q.prob(xhat, y);
                if qv <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                ce -= w * qv.ln();
            }
        }
    }
    Ok(ce)
}

/// Variational upper bound on task distortion through predictor `q`:
/// D_T <= I(X;Y) - H(Y) - E[ln q(y|x_hat)], in nats. The gap is an
/// expected KL divergence, so slack is non-negative and vanishes when `q`
/// is the Bayes predictor. A `q` that zeroes needed mass yields an
/// infinite right-hand side: trivially satisfied, visible in the report.
pub fn variational_dt_bound(
    src: &SemanticSource,
    mapping: &ConditionalDistribution,
    q: &ConditionalDistribution,
) -> Result<BoundReport> {
    let lhs = task_distortion_mi_form(src, mapping)?;
    let ce = cross_entropy_term(src, mapping, q)?;
    let rhs = src.task_information() - entropy(&src.label_marginal()) + ce;
    Ok(BoundReport::new(lhs, rhs))
}

/// One (rate, reconstruction distortion) pair, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrespondencePoint {
    pub rate_nats: f64,
    pub distortion: f64,
}

/// Rate-distortion correspondence over a family of mappings: points sorted
/// by rate, their Spearman rank correlation, and whether distortion is
/// weakly non-increasing as rate grows.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceReport {
    pub points: Vec<CorrespondencePoint>,
    pub spearman: f64,
    pub monotone: bool,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Computes (I(X;X_hat), expected squared-error distortion) for each
/// mapping and reports how distortion moves against rate. The underlying
/// claim is directional, so the check is curve monotonicity along the
/// rate axis, not a pointwise identity. Needs at least three mappings.
pub fn mse_mi_correspondence(
    src: &SemanticSource,
    mappings: &[ConditionalDistribution],
) -> Result<CorrespondenceReport> {
    if mappings.len() < 3 {
        return Err(Error::invalid(format!(
            "correspondence needs at least 3 mappings, got {}",
            mappings.len()
        )));
    }
    let pixel = mse_matrix(src)?;
    let mut points = Vec::with_capacity(mappings.len());
    for mapping in mappings {
        if mapping.n_inputs() != src.n_symbols() || mapping.n_outputs() != pixel.n_outputs() {
            return Err(Error::invalid("mapping shape does not match the source"));
        }
        let joint = JointDistribution::from_marginal_conditional(&src.px, mapping)?;
        let rate_nats = mutual_information(&joint);
        let mut distortion = 0.0;
        for x in 0..src.n_symbols() {
            for xhat in 0..mapping.n_outputs() {
                let w = src.px.get(x) * mapping.prob(x, xhat);
                if w > 0.0 {
                    distortion += w * pixel.cost(x, xhat);
                }
            }
        }
        points.push(CorrespondencePoint {
            rate_nats,
            distortion,
        });
    }
    points.sort_by(|a, b| {
        a.rate_nats
            .total_cmp(&b.rate_nats)
            .then(b.distortion.total_cmp(&a.distortion))
    });
    let monotone = points
        .windows(2)
        .all(|w| w[1].distortion <= w[0].distortion + SLACK_TOLERANCE);
    let rates: Vec<f64> = points.iter().map(|p| p.rate_nats).collect();
    let dists: Vec<f64> = points.iter().map(|p| p.distortion).collect();
    let spearman = pearson(&average_ranks(&rates), &average_ranks(&dists));
    Ok(CorrespondenceReport {
        points,
        spearman,
        monotone,
    })
}
