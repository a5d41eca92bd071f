//! Exact probability routines on finite alphabets.
//!
//! Distributions are validated at construction (non-negative, normalized) so
//! downstream code can assume well-formedness. Information quantities use the
//! conventions: 0 * log 0 = 0, and KL(p || q) = +inf when p puts mass where q
//! has none. Everything here is in nats; convert with [`nats_to_bits`] at
//! reporting boundaries.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tolerance within which constructed mass functions must sum to one.
pub const PROB_TOL: f64 = 1e-12;

/// Mass below this threshold is clamped to zero by [`Distribution::clamped`],
/// keeping solver fixed points free of denormal-scale residue.
pub const MASS_CLAMP: f64 = 1e-15;

pub fn nats_to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

pub fn bits_to_nats(bits: f64) -> f64 {
    bits * std::f64::consts::LN_2
}

/// A probability mass function over a finite alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    mass: Vec<f64>,
}

impl Distribution {
    /// Builds a distribution from raw non-negative mass, normalizing its sum
    /// to exactly one.
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() {
            return Err(Error::invalid("distribution over an empty alphabet"));
        }
        for (i, &m) in mass.iter().enumerate() {
            if !m.is_finite() || m < 0.0 {
                return Err(Error::invalid(format!(
                    "mass[{i}] = {m} is not a finite non-negative probability"
                )));
            }
        }
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("distribution has zero total mass"));
        }
        let mass = mass.iter().map(|m| m / total).collect();
        Ok(Distribution { mass })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution needs a non-empty alphabet");
        Distribution {
            mass: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(n: usize, at: usize) -> Self {
        assert!(at < n, "point mass index out of range");
        let mut mass = vec![0.0; n];
        mass[at] = 1.0;
        Distribution { mass }
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, i: usize) -> f64 {
        self.mass[i]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.mass
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.mass.iter()
    }

    /// Zeroes entries below `threshold` and renormalizes the rest.
    pub fn clamped(&self, threshold: f64) -> Distribution {
        let mut mass: Vec<f64> = self
            .mass
            .iter()
            .map(|&m| if m < threshold { 0.0 } else { m })
            .collect();
        let total: f64 = mass.iter().sum();
        debug_assert!(total > 0.0, "clamping removed all mass");
        for m in &mut mass {
            *m /= total;
        }
        Distribution { mass }
    }
}

/// A row-stochastic matrix: one [`Distribution`] per input symbol, all over
/// the same output alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDistribution {
    rows: Vec<Distribution>,
}

impl ConditionalDistribution {
    pub fn new(rows: Vec<Distribution>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("conditional with no input symbols"));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("conditional rows have unequal widths"));
        }
        Ok(ConditionalDistribution { rows })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let rows = rows
            .into_iter()
            .map(Distribution::new)
            .collect::<Result<Vec<_>>>()?;
        ConditionalDistribution::new(rows)
    }

    pub fn n_inputs(&self) -> usize {
        self.rows.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, i: usize) -> &Distribution {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Distribution] {
        &self.rows
    }

    pub fn prob(&self, input: usize, output: usize) -> f64 {
        self.rows[input].get(output)
    }

    /// The identity channel on an alphabet of size `n`.
    pub fn identity(n: usize) -> Self {
        let rows = (0..n).map(|i| Distribution::point_mass(n, i)).collect();
        ConditionalDistribution { rows }
    }

    /// Output marginal under `input` distribution: sum_i p(i) * p(j|i).
    pub fn output_marginal(&self, input: &Distribution) -> Result<Distribution> {
        if input.len() != self.n_inputs() {
            return Err(Error::invalid(format!(
                "input marginal has {} symbols, conditional expects {}",
                input.len(),
                self.n_inputs()
            )));
        }
        let mut out = vec![0.0; self.n_outputs()];
        for (i, row) in self.rows.iter().enumerate() {
            let pi = input.get(i);
            for (j, &p) in row.iter().enumerate() {
                out[j] += pi * p;
            }
        }
        Distribution::new(out)
    }
}

/// A joint mass function over a pair of finite alphabets.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    mass: Vec<Vec<f64>>,
}

impl JointDistribution {
    pub fn new(mass: Vec<Vec<f64>>) -> Result<Self> {
        if mass.is_empty() || mass[0].is_empty() {
            return Err(Error::invalid("joint distribution with an empty axis"));
        }
        let width = mass[0].len();
        let mut total = 0.0;
        for row in &mass {
            if row.len() != width {
                return Err(Error::invalid("joint distribution is not rectangular"));
            }
            for &m in row {
                if !m.is_finite() || m < 0.0 {
                    return Err(Error::invalid("joint mass must be finite and non-negative"));
                }
                total += m;
            }
        }
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::invalid(format!(
                "joint mass sums to {total}, expected 1 within {PROB_TOL}"
            )));
        }
        Ok(JointDistribution { mass })
    }

    /// Exact product joint p(i, j) = p(i) * p(j|i).
    pub fn from_marginal_conditional(
        marginal: &Distribution,
        conditional: &ConditionalDistribution,
    ) -> Result<Self> {
        if marginal.len() != conditional.n_inputs() {
            return Err(Error::invalid(format!(
                "marginal has {} symbols, conditional expects {}",
                marginal.len(),
                conditional.n_inputs()
            )));
        }
        let mass = (0..marginal.len())
            .map(|i| {
                conditional
                    .row(i)
                    .iter()
                    .map(|&p| marginal.get(i) * p)
                    .collect()
            })
            .collect();
        Ok(JointDistribution { mass })
    }

    pub fn n_rows(&self) -> usize {
        self.mass.len()
    }

    pub fn n_cols(&self) -> usize {
        self.mass[0].len()
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.mass[i][j]
    }

    pub fn row_marginal(&self) -> Distribution {
        let mass: Vec<f64> = self.mass.iter().map(|row| row.iter().sum()).collect();
        Distribution::new(mass).expect("marginal of a valid joint is valid")
    }

    pub fn col_marginal(&self) -> Distribution {
        let mut mass = vec![0.0; self.n_cols()];
        for row in &self.mass {
            for (j, &m) in row.iter().enumerate() {
                mass[j] += m;
            }
        }
        Distribution::new(mass).expect("marginal of a valid joint is valid")
    }
}

/// A three-way joint p(x, x_hat, y) under the Markov factorization
/// p(x) p(x_hat|x) p(y|x): indexing is `mass[x][x_hat][y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint3 {
    mass: Vec<Vec<Vec<f64>>>,
}

impl Joint3 {
    pub fn n_x(&self) -> usize {
        self.mass.len()
    }

    pub fn n_xhat(&self) -> usize {
        self.mass[0].len()
    }

    pub fn n_y(&self) -> usize {
        self.mass[0][0].len()
    }

    pub fn prob(&self, x: usize, xhat: usize, y: usize) -> f64 {
        self.mass[x][xhat][y]
    }

    pub fn marginal_x_xhat(&self) -> JointDistribution {
        let mass = self
            .mass
            .iter()
            .map(|per_x| per_x.iter().map(|per_xhat| per_xhat.iter().sum()).collect())
            .collect();
        JointDistribution { mass }
    }

    pub fn marginal_x_y(&self) -> JointDistribution {
        let mass = self
            .mass
            .iter()
            .map(|per_x| {
                let mut row = vec![0.0; self.n_y()];
                for per_xhat in per_x {
                    for (y, &m) in per_xhat.iter().enumerate() {
                        row[y] += m;
                    }
                }
                row
            })
            .collect();
        JointDistribution { mass }
    }

    pub fn marginal_xhat_y(&self) -> JointDistribution {
        let mut mass = vec![vec![0.0; self.n_y()]; self.n_xhat()];
        for per_x in &self.mass {
            for (xhat, per_xhat) in per_x.iter().enumerate() {
                for (y, &m) in per_xhat.iter().enumerate() {
                    mass[xhat][y] += m;
                }
            }
        }
        JointDistribution { mass }
    }
}

/// Shannon entropy in nats, with 0 * log 0 = 0.
pub fn entropy(d: &Distribution) -> f64 {
    d.iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// Entropy of the flattened joint, in nats.
pub fn joint_entropy(j: &JointDistribution) -> f64 {
    let mut h = 0.0;
    for i in 0..j.n_rows() {
        for k in 0..j.n_cols() {
            let m = j.prob(i, k);
            if m > 0.0 {
                h -= m * m.ln();
            }
        }
    }
    h
}

/// KL divergence KL(p || q) in nats; +inf when p has mass where q has none.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "KL divergence over mismatched alphabets ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += pi * (pi / qi).ln();
        }
    }
    // Rounding can leave a tiny negative residue when p == q entrywise.
    Ok(kl.max(0.0))
}

/// Mutual information of a joint, in nats.
pub fn mutual_information(j: &JointDistribution) -> f64 {
    let rows = j.row_marginal();
    let cols = j.col_marginal();
    let mut mi = 0.0;
    for i in 0..j.n_rows() {
        for k in 0..j.n_cols() {
            let m = j.prob(i, k);
            if m > 0.0 {
                mi += m * (m / (rows.get(i) * cols.get(k))).ln();
            }
        }
    }
    mi.max(0.0)
}

/// The posterior rows of [`bayes_invert`], plus which outputs carried no mass
/// (their posteriors were set to uniform).
#[derive(Debug, Clone)]
pub struct BayesInverse {
    pub posterior: ConditionalDistribution,
    pub unreachable: Vec<usize>,
}

/// Inverts p(j|i) against a prior p(i): returns p(i|j) for every output j.
///
/// Outputs with zero marginal mass get a uniform posterior and are listed in
/// `unreachable`.
pub fn bayes_invert(prior: &Distribution, forward: &ConditionalDistribution) -> Result<BayesInverse> {
    if prior.len() != forward.n_inputs() {
        return Err(Error::invalid(format!(
            "prior has {} symbols, forward conditional expects {}",
            prior.len(),
            forward.n_inputs()
        )));
    }
    let n_in = forward.n_inputs();
    let n_out = forward.n_outputs();
    let mut marginal = vec![0.0; n_out];
    for i in 0..n_in {
        for j in 0..n_out {
            marginal[j] += prior.get(i) * forward.prob(i, j);
        }
    }
    let mut rows = Vec::with_capacity(n_out);
    let mut unreachable = Vec::new();
    for j in 0..n_out {
        if marginal[j] > 0.0 {
            let row: Vec<f64> = (0..n_in)
                .map(|i| prior.get(i) * forward.prob(i, j) / marginal[j])
                .collect();
            rows.push(Distribution::new(row)?);
        } else {
            unreachable.push(j);
            rows.push(Distribution::uniform(n_in));
        }
    }
    Ok(BayesInverse {
        posterior: ConditionalDistribution::new(rows)?,
        unreachable,
    })
}

/// Exact three-way joint p(x, x_hat, y) = p(x) p(x_hat|x) p(y|x).
pub fn compose_markov(
    px: &Distribution,
    py_given_x: &ConditionalDistribution,
    pxhat_given_x: &ConditionalDistribution,
) -> Result<Joint3> {
    if px.len() != py_given_x.n_inputs() || px.len() != pxhat_given_x.n_inputs() {
        return Err(Error::invalid(format!(
            "markov composition dimension mismatch: |X|={}, label rows={}, mapping rows={}",
            px.len(),
            py_given_x.n_inputs(),
            pxhat_given_x.n_inputs()
        )));
    }
    let mass = (0..px.len())
        .map(|x| {
            (0..pxhat_given_x.n_outputs())
                .map(|xhat| {
                    (0..py_given_x.n_outputs())
                        .map(|y| px.get(x) * pxhat_given_x.prob(x, xhat) * py_given_x.prob(x, y))
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(Joint3 { mass })
}

/// Chains two channels: (first ∘ second)(k|i) = sum_j first(j|i) second(k|j).
pub fn chain_conditionals(
    first: &ConditionalDistribution,
    second: &ConditionalDistribution,
) -> Result<ConditionalDistribution> {
    if first.n_outputs() != second.n_inputs() {
        return Err(Error::invalid(format!(
            "channel chain mismatch: {} outputs feeding {} inputs",
            first.n_outputs(),
            second.n_inputs()
        )));
    }
    let rows = (0..first.n_inputs())
        .map(|i| {
            (0..second.n_outputs())
                .map(|k| {
                    (0..first.n_outputs())
                        .map(|j| first.prob(i, j) * second.prob(j, k))
                        .sum()
                })
                .collect()
        })
        .collect();
    ConditionalDistribution::from_rows(rows)
}

/// Seeded random distribution: normalized unit-exponential draws, so the
/// result is uniform on the simplex.
pub fn random_distribution(seed: u64, n: usize) -> Distribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_distribution_with(&mut rng, n)
}

/// Seeded random row-stochastic matrix.
pub fn random_conditional(seed: u64, n_inputs: usize, n_outputs: usize) -> ConditionalDistribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n_inputs)
        .map(|_| random_distribution_with(&mut rng, n_outputs))
        .collect();
    ConditionalDistribution::new(rows).expect("generated rows share a width")
}

pub(crate) fn random_distribution_with<R: Rng>(rng: &mut R, n: usize) -> Distribution {
    assert!(n > 0);
    let mass: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            -(1.0 - u).ln()
        })
        .collect();
    Distribution::new(mass).expect("exponential draws are positive")
}
