//! Alternating-minimization solver for the semantic rate-distortion
//! Lagrangian
//!
//!   L = lambda * I(X; X_hat) + D_R + beta * D_T,
//!
//! where D_R is expected reconstruction distortion and D_T is expected task
//! distortion (KL between label posteriors, equivalently I(X;Y) - I(X_hat;Y)
//! at the Bayes-consistent predictor).
//!
//! One iteration rebuilds the semantic cost d_S = d_R + beta * d_T from the
//! current predictor, re-derives the Gibbs mapping
//! p(x_hat|x) ∝ p(x_hat) exp(-d_S / lambda), then refreshes the
//! reconstruction marginal and the Bayes predictor from the new mapping.
//! Each sub-step is an exact coordinate minimization of a shared functional,
//! so the recorded Lagrangian sequence never increases.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::distortion::{DistortionMatrix, SemanticSource};
use crate::error::{Error, Result};
use crate::par;
use crate::prob::{
    compose_markov, kl_divergence, mutual_information, nats_to_bits, random_distribution,
    ConditionalDistribution, Distribution, MASS_CLAMP,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Uniform reconstruction marginal.
    Uniform,
    /// Seeded random marginal, for exploring alternative basins.
    SeededRandom(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub lambda: f64,
    pub beta: f64,
    pub max_iters: usize,
    /// Convergence threshold on the per-iteration Lagrangian decrease.
    pub tol: f64,
    pub init: InitScheme,
}

impl SolverConfig {
    pub fn new(lambda: f64) -> Self {
        SolverConfig {
            lambda,
            beta: 0.0,
            max_iters: 10_000,
            tol: 1e-10,
            init: InitScheme::Uniform,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(Error::invalid(format!(
                "lambda = {} must be finite and > 0",
                self.lambda
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::invalid(format!(
                "beta = {} must be finite and >= 0",
                self.beta
            )));
        }
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(Error::invalid(format!("tol = {} must be finite and > 0", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// The three coordinates of the alternating minimization.
#[derive(Debug, Clone)]
pub struct BaState {
    pub mapping: ConditionalDistribution,
    pub pxhat: Distribution,
    pub py_given_xhat: ConditionalDistribution,
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub mapping: ConditionalDistribution,
    pub pxhat: Distribution,
    pub py_given_xhat: ConditionalDistribution,
    /// I(X; X_hat) of the final mapping, nats.
    pub rate_nats: f64,
    /// Expected reconstruction distortion of the final mapping.
    pub pixel_distortion: f64,
    /// Expected task distortion at the final (Bayes-consistent) predictor, nats.
    pub task_distortion_nats: f64,
    /// lambda * rate + pixel + beta * task at the final iterate.
    pub lagrangian: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Lagrangian after each completed iteration; non-increasing.
    pub lagrangian_trace: Vec<f64>,
}

/// One rate-distortion trade-off point at a fixed (lambda, beta).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub lambda: f64,
    pub beta: f64,
    pub rate_bits: f64,
    pub pixel_distortion: f64,
    pub task_distortion_bits: f64,
    /// I(X_hat; Y) of the converged mapping, bits.
    pub task_mi_bits: f64,
}

/// A swept curve; grid points whose solve failed are reported, not dropped
/// silently.
#[derive(Debug, Clone)]
pub struct RdCurve {
    /// Sorted by rate, ascending.
    pub points: Vec<RdPoint>,
    pub skipped: Vec<SkippedPoint>,
}

#[derive(Debug, Clone)]
pub struct SkippedPoint {
    pub lambda: f64,
    pub reason: String,
}

fn check_dimensions(src: &SemanticSource, pixel: &DistortionMatrix) -> Result<()> {
    if pixel.n_inputs() != src.n_symbols() {
        return Err(Error::invalid(format!(
            "distortion has {} rows, source has {} symbols",
            pixel.n_inputs(),
            src.n_symbols()
        )));
    }
    if pixel.n_outputs() != src.n_reconstructions() {
        return Err(Error::invalid(format!(
            "distortion has {} columns, source has {} reconstructions",
            pixel.n_outputs(),
            src.n_reconstructions()
        )));
    }
    Ok(())
}

/// Semantic cost d_S(x, x_hat) = d_R + beta * KL(p(y|x) || q(y|x_hat)).
/// Entries may be +inf; those receive zero mass in the mapping update.
fn semantic_cost(
    src: &SemanticSource,
    pixel: &DistortionMatrix,
    beta: f64,
    predictor: &ConditionalDistribution,
) -> Vec<Vec<f64>> {
    let n = pixel.n_inputs();
    let m = pixel.n_outputs();
    let mut d = vec![vec![0.0; m]; n];
    for (x, row) in d.iter_mut().enumerate() {
        for (xhat, entry) in row.iter_mut().enumerate() {
            let mut cost = pixel.cost(x, xhat);
            if beta > 0.0 {
                let kl = kl_divergence(src.py_given_x.row(x), predictor.row(xhat))
                    .expect("label alphabets match by construction");
                cost += beta * kl;
            }
            *entry = cost;
        }
    }
    d
}

/// One full iteration: mapping update, marginal update, predictor update.
pub fn ba_step(
    state: &BaState,
    src: &SemanticSource,
    pixel: &DistortionMatrix,
    cfg: &SolverConfig,
) -> Result<BaState> {
    let n = pixel.n_inputs();
    let m = pixel.n_outputs();
    let d_s = semantic_cost(src, pixel, cfg.beta, &state.py_given_xhat);

    // Gibbs mapping rows, in log space for stability against large costs.
    let mut rows = Vec::with_capacity(n);
    for x in 0..n {
        let logits: Vec<f64> = (0..m)
            .map(|xhat| {
                let r = state.pxhat.get(xhat);
                if r > 0.0 && d_s[x][xhat].is_finite() {
                    r.ln() - d_s[x][xhat] / cfg.lambda
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max_logit = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_logit == f64::NEG_INFINITY {
            return Err(Error::infeasible(format!(
                "source symbol {x} has no reconstruction with positive mass and finite cost"
            )));
        }
        let weights: Vec<f64> = logits.iter().map(|&l| (l - max_logit).exp()).collect();
        rows.push(Distribution::new(weights)?.clamped(MASS_CLAMP));
    }
    let mapping = ConditionalDistribution::new(rows)?;

    // Exact reconstruction marginal of the new mapping. Not clamped: an entry
    // is zero only when its whole column is zero, so the rate term stays finite.
    let mut marginal = vec![0.0; m];
    for x in 0..n {
        for xhat in 0..m {
            marginal[xhat] += src.px.get(x) * mapping.prob(x, xhat);
        }
    }

    // Bayes predictor of the new mapping; unreachable reconstructions fall
    // back to the label marginal.
    let label_marginal = src.label_marginal();
    let n_labels = src.n_labels();
    let mut q_rows = Vec::with_capacity(m);
    for xhat in 0..m {
        if marginal[xhat] > 0.0 {
            let mut row = vec![0.0; n_labels];
            for x in 0..n {
                let w = src.px.get(x) * mapping.prob(x, xhat);
                if w > 0.0 {
                    for (y, cell) in row.iter_mut().enumerate() {
                        *cell += w * src.py_given_x.prob(x, y);
                    }
                }
            }
            for cell in &mut row {
                *cell /= marginal[xhat];
            }
            q_rows.push(Distribution::new(row)?);
        } else {
            q_rows.push(label_marginal.clone());
        }
    }

    Ok(BaState {
        mapping,
        pxhat: Distribution::new(marginal)?,
        py_given_xhat: ConditionalDistribution::new(q_rows)?,
    })
}

/// (rate, pixel distortion, task distortion) of a state whose marginal and
/// predictor are Bayes-consistent with its mapping.
fn state_objectives(src: &SemanticSource, pixel: &DistortionMatrix, state: &BaState) -> (f64, f64, f64) {
    let n = pixel.n_inputs();
    let m = pixel.n_outputs();
    let mut rate = 0.0;
    let mut d_r = 0.0;
    let mut d_t = 0.0;
    for x in 0..n {
        let px = src.px.get(x);
        if px == 0.0 {
            continue;
        }
        for xhat in 0..m {
            let p = state.mapping.prob(x, xhat);
            if p == 0.0 {
                continue;
            }
            rate += px * p * (p / state.pxhat.get(xhat)).ln();
            d_r += px * p * pixel.cost(x, xhat);
            let kl = kl_divergence(src.py_given_x.row(x), state.py_given_xhat.row(xhat))
                .expect("label alphabets match by construction");
            d_t += px * p * kl;
        }
    }
    (rate.max(0.0), d_r, d_t.max(0.0))
}

/// Runs the alternating minimization to convergence of the Lagrangian.
pub fn solve(src: &SemanticSource, pixel: &DistortionMatrix, cfg: &SolverConfig) -> Result<SolverResult> {
    cfg.validate()?;
    check_dimensions(src, pixel)?;
    let m = pixel.n_outputs();

    let pxhat = match cfg.init {
        InitScheme::Uniform => Distribution::uniform(m),
        InitScheme::SeededRandom(seed) => random_distribution(seed, m),
    };
    let label_marginal = src.label_marginal();
    let mut state = BaState {
        mapping: ConditionalDistribution::new(vec![Distribution::uniform(m); src.n_symbols()])?,
        pxhat,
        py_given_xhat: ConditionalDistribution::new(vec![label_marginal; m])?,
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut objectives = (0.0, 0.0, 0.0);
    for _ in 0..cfg.max_iters {
        state = ba_step(&state, src, pixel, cfg)?;
        iterations += 1;
        objectives = state_objectives(src, pixel, &state);
        let (rate, d_r, d_t) = objectives;
        let l = cfg.lambda * rate + d_r + cfg.beta * d_t;
        let delta = trace.last().map(|prev: &f64| (prev - l).abs());
        trace.push(l);
        if let Some(delta) = delta {
            if delta < cfg.tol {
                converged = true;
                break;
            }
        }
    }

    let (rate, d_r, d_t) = objectives;
    Ok(SolverResult {
        mapping: state.mapping,
        pxhat: state.pxhat,
        py_given_xhat: state.py_given_xhat,
        rate_nats: rate,
        pixel_distortion: d_r,
        task_distortion_nats: d_t,
        lagrangian: *trace.last().expect("max_iters >= 1"),
        iterations,
        converged,
        lagrangian_trace: trace,
    })
}

/// Largest violation of the three self-consistency equations at a result:
/// the Gibbs form of the mapping, the marginal identity, and the Bayes
/// predictor identity. Near zero at a true fixed point.
pub fn verify_self_consistency(
    src: &SemanticSource,
    pixel: &DistortionMatrix,
    cfg: &SolverConfig,
    result: &SolverResult,
) -> f64 {
    let n = pixel.n_inputs();
    let m = pixel.n_outputs();
    let d_s = semantic_cost(src, pixel, cfg.beta, &result.py_given_xhat);
    let mut residual: f64 = 0.0;

    for x in 0..n {
        let logits: Vec<f64> = (0..m)
            .map(|xhat| {
                let r = result.pxhat.get(xhat);
                if r > 0.0 && d_s[x][xhat].is_finite() {
                    r.ln() - d_s[x][xhat] / cfg.lambda
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max_logit = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|&l| (l - max_logit).exp()).collect();
        let total: f64 = weights.iter().sum();
        for xhat in 0..m {
            residual = residual.max((result.mapping.prob(x, xhat) - weights[xhat] / total).abs());
        }
    }

    for xhat in 0..m {
        let recomputed: f64 = (0..n)
            .map(|x| src.px.get(x) * result.mapping.prob(x, xhat))
            .sum();
        residual = residual.max((result.pxhat.get(xhat) - recomputed).abs());

        if recomputed > 0.0 {
            for y in 0..src.n_labels() {
                let q: f64 = (0..n)
                    .map(|x| {
                        src.px.get(x) * result.mapping.prob(x, xhat) * src.py_given_x.prob(x, y)
                    })
                    .sum::<f64>()
                    / recomputed;
                residual = residual.max((result.py_given_xhat.prob(xhat, y) - q).abs());
            }
        }
    }
    residual
}

/// Sweeps `lambda_grid` at fixed beta. Infeasible grid points are reported in
/// `skipped`; the surviving points come back sorted by rate.
pub fn rd_curve(
    src: &SemanticSource,
    pixel: &DistortionMatrix,
    lambda_grid: &[f64],
    beta: f64,
    base: &SolverConfig,
) -> RdCurve {
    let outcomes = par::map_slice(lambda_grid, |&lambda| {
        let cfg = SolverConfig { lambda, beta, ..*base };
        solve(src, pixel, &cfg).map(|result| {
            let task_mi = mi_with_task(src, &result.mapping);
            RdPoint {
                lambda,
                beta,
                rate_bits: nats_to_bits(result.rate_nats),
                pixel_distortion: result.pixel_distortion,
                task_distortion_bits: nats_to_bits(result.task_distortion_nats),
                task_mi_bits: nats_to_bits(task_mi),
            }
        })
    });

    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (&lambda, outcome) in lambda_grid.iter().zip(outcomes) {
        match outcome {
            Ok(point) => points.push(point),
            Err(err) => skipped.push(SkippedPoint {
                lambda,
                reason: err.to_string(),
            }),
        }
    }
    points.sort_by(|a, b| {
        a.rate_bits
            .total_cmp(&b.rate_bits)
            .then(a.lambda.total_cmp(&b.lambda))
    });
    RdCurve { points, skipped }
}

/// I(X_hat; Y) of a mapping, nats.
pub fn mi_with_task(src: &SemanticSource, mapping: &ConditionalDistribution) -> f64 {
    let j3 = compose_markov(&src.px, &src.py_given_x, mapping)
        .expect("mapping dimensions are checked by the caller");
    mutual_information(&j3.marginal_xhat_y())
}

// ---------------------------------------------------------------------------
// Exhaustive grid oracle.
// ---------------------------------------------------------------------------

/// Hard caps keeping the oracle's search space enumerable.
pub const ORACLE_MAX_SYMBOLS: usize = 4;
pub const ORACLE_MAX_RECONSTRUCTIONS: usize = 3;

#[derive(Debug, Clone)]
pub struct BruteForceSolution {
    pub mapping: ConditionalDistribution,
    pub lagrangian: f64,
    /// Size of the enumerated candidate space (grid rows to the power of
    /// source symbols).
    pub candidate_space: u128,
}

/// Non-negative f64 minimum shared across search branches. Safe because the
/// bit patterns of non-negative IEEE doubles order the same way the values do.
struct Incumbent(AtomicU64);

impl Incumbent {
    fn new(v: f64) -> Self {
        Incumbent(AtomicU64::new(v.to_bits()))
    }

    fn get(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Relaxed))
    }

    fn offer(&self, v: f64) {
        self.0.fetch_min(v.to_bits(), Ordering::Relaxed);
    }
}

/// All compositions of `k` into `parts` non-negative integers, as rows c/k.
fn simplex_grid(k: usize, parts: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<f64>>, total: usize) {
        if parts == 1 {
            prefix.push(k);
            out.push(prefix.iter().map(|&c| c as f64 / total as f64).collect());
            prefix.pop();
            return;
        }
        for c in 0..=k {
            prefix.push(c);
            rec(k - c, parts - 1, prefix, out, total);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, parts, &mut Vec::new(), &mut out, k);
    out
}

/// Entropy of a mass vector that sums to one.
fn entropy_of(mass: &[f64]) -> f64 {
    mass.iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// Exact Lagrangian pieces that are global in the mapping: lambda * H(X_hat)
/// plus beta * (I(X;Y) - I(X_hat;Y)) evaluated from the (x_hat, y) joint.
fn global_terms(lambda: f64, beta: f64, i_xy: f64, r: &[f64], t: &[f64], n_y: usize) -> f64 {
    let mut value = lambda * entropy_of(r);
    if beta > 0.0 {
        let mut py = vec![0.0; n_y];
        for (xhat, &rx) in r.iter().enumerate() {
            if rx > 0.0 {
                for y in 0..n_y {
                    py[y] += t[xhat * n_y + y];
                }
            }
        }
        let mut i_ty = 0.0;
        for (xhat, &rx) in r.iter().enumerate() {
            if rx > 0.0 {
                for y in 0..n_y {
                    let m = t[xhat * n_y + y];
                    if m > 0.0 {
                        i_ty += m * (m / (rx * py[y])).ln();
                    }
                }
            }
        }
        value += beta * (i_xy - i_ty.max(0.0)).max(0.0);
    }
    value
}

/// Exponent clamp for the precomputed Gibbs weights. Clamping replaces a cost
/// by a smaller one, which only loosens the lower bound, never breaks it.
const GIBBS_EXP_CLAMP: f64 = 700.0;
/// Stack budget (in joint cells) for the deterministic-merge task ceiling.
const DET_MERGE_STACK: usize = 24;

struct OracleContext<'a> {
    lambda: f64,
    beta: f64,
    i_xy: f64,
    n_y: usize,
    /// Depth -> source symbol; symbols visited in decreasing prior mass.
    order: Vec<usize>,
    /// Prior mass per depth.
    px: Vec<f64>,
    /// Per depth: the symbol's cells p(x) p(y|x) of the refined joint.
    pxy: Vec<Vec<f64>>,
    /// Suffix sums over depths of p(x) KL(p(y|x) || p(y)); entry n is 0.
    kl_suffix: Vec<f64>,
    /// Label marginal p(y), invariant under any mapping.
    py: Vec<f64>,
    /// Grid rows shared by every symbol.
    rows: Vec<Vec<f64>>,
    /// Per (depth, candidate): px * (lambda * sum_j m_j ln m_j + <m, d_R>),
    /// the exact row-separable Lagrangian term.
    row_const: Vec<Vec<f64>>,
    /// Per depth: (row constant, candidate) sorted ascending, for scan breaks.
    rc_sorted: Vec<Vec<(f64, u32)>>,
    /// beta * min D_T over all mappings: I(X_hat;Y) is convex in the mapping,
    /// so its maximum sits at a deterministic vertex, enumerated up front.
    task_floor: f64,
    /// Per depth: shifted Gibbs weights exp(-(d_R - min d_R) / lambda).
    gibbs: Vec<Vec<f64>>,
    /// Per depth: reconstruction indices by descending Gibbs weight.
    g_order: Vec<Vec<u32>>,
    /// Per depth: px * min_j d_R, the shift removed from `gibbs`.
    gibbs_shift: Vec<f64>,
    /// Per depth: the raw reconstruction distortions d_R(x, .).
    drow: Vec<Vec<f64>>,
    incumbent: &'a Incumbent,
}

impl OracleContext<'_> {
    fn n(&self) -> usize {
        self.order.len()
    }

    /// Floor on the symbol-at-depth `d` Lagrangian share, any completion: the
    /// continuous Gibbs minimum px * (min d_R - lambda * ln <r_final, g>),
    /// with <r_final, g> capped by the greedy waterfill of r_j + mass_rem by
    /// descending g. Caps only shrink as symbols are assigned, so a floor
    /// taken at a node stays valid throughout its subtree.
    fn gibbs_floor(&self, d: usize, r: &[f64], mass_rem: f64) -> f64 {
        let z = Self::waterfill(&self.gibbs[d], &self.g_order[d], r, mass_rem);
        self.gibbs_shift[d] - self.px[d] * self.lambda * z.ln()
    }

    /// Greedy waterfill bound on max <rho, weights> over rho in the simplex
    /// with rho_j <= r_j + mass_rem, visiting bins by descending weight.
    fn waterfill(weights: &[f64], order: &[u32], r: &[f64], mass_rem: f64) -> f64 {
        let mut need = 1.0;
        let mut z = 0.0;
        for &j in order {
            let take = (r[j as usize] + mass_rem).min(need);
            z += take * weights[j as usize];
            need -= take;
            if need <= 0.0 {
                break;
            }
        }
        z
    }

    /// Coupled floor on the rate + reconstruction part: the assigned cross
    /// term and every unassigned Gibbs term share one final marginal rho in
    /// P = {rho in the simplex, r <= rho <= r + mass_rem}. Their weighted sum
    /// w(rho) = sum_j r_j ln rho_j + sum_d px_d ln <rho, g_d> is concave, so
    /// its tangent at any point caps max_P w; the tangent's linear part
    /// maximizes exactly by pooling the free mass on the largest gradient
    /// component. Unlike per-term relaxations this charges symbols for
    /// competing over the same reconstruction bins. `carrier` optionally
    /// swaps the first free symbol's weights and shift for task-augmented
    /// ones; the returned value excludes any additive task floor.
    fn coupled_floor(
        &self,
        depth: usize,
        acc: f64,
        r: &[f64],
        mass_rem: f64,
        carrier: Option<(&[f64], f64)>,
    ) -> f64 {
        let m = r.len();
        let n = self.n();
        let weights = |d: usize| -> &[f64] {
            if d == depth {
                if let Some((g, _)) = carrier {
                    return g;
                }
            }
            &self.gibbs[d]
        };
        // Heuristic interior point: r plus Gibbs-proportional completions,
        // then one fixed-point refinement toward argmax w. Any point of P
        // yields a valid certificate; refinement only tightens it.
        let mut rho = [0.0f64; ORACLE_MAX_RECONSTRUCTIONS];
        rho[..m].copy_from_slice(r);
        for d in depth..n {
            let g = weights(d);
            let gs: f64 = g.iter().sum();
            for j in 0..m {
                rho[j] += self.px[d] * g[j] / gs;
            }
        }
        let mut rho1 = [0.0f64; ORACLE_MAX_RECONSTRUCTIONS];
        rho1[..m].copy_from_slice(r);
        for d in depth..n {
            let g = weights(d);
            let dot: f64 = (0..m).map(|j| rho[j] * g[j]).sum();
            for j in 0..m {
                rho1[j] += self.px[d] * rho[j] * g[j] / dot;
            }
        }
        let mut w = 0.0;
        let mut shifts = 0.0;
        let mut grad = [0.0f64; ORACLE_MAX_RECONSTRUCTIONS];
        for j in 0..m {
            if r[j] > 0.0 {
                w += r[j] * rho1[j].ln();
                grad[j] = r[j] / rho1[j];
            }
        }
        for d in depth..n {
            let g = weights(d);
            let dot: f64 = (0..m).map(|j| rho1[j] * g[j]).sum();
            w += self.px[d] * dot.ln();
            for j in 0..m {
                grad[j] += self.px[d] * g[j] / dot;
            }
            shifts += match (d == depth, carrier) {
                (true, Some((_, s))) => s,
                _ => self.gibbs_shift[d],
            };
        }
        let jstar = (0..m).fold(0, |a, j| if grad[j] > grad[a] { j } else { a });
        let mut lin = grad[jstar] * mass_rem;
        for j in 0..m {
            lin += grad[j] * (r[j] - rho1[j]);
        }
        acc + shifts - self.lambda * (w + lin)
    }

    /// Floor on beta * D_T over completions of the assigned joint `t` with
    /// symbols `depth..` free. Mutual information is convex in the unassigned
    /// rows (jointly), so its maximum over the product of simplices sits at a
    /// vertex: a deterministic merge of each unassigned symbol into one
    /// reconstruction. Enumerating the m^rest merges gives a ceiling on
    /// I(X_hat;Y); larger alphabets fall back to the looser refinement that
    /// keeps unassigned symbols separate. Assigning a symbol only restricts
    /// the completion family, so a node's floor holds for its whole subtree.
    fn task_part(&self, depth: usize, t: &[f64]) -> f64 {
        if self.beta == 0.0 {
            return 0.0;
        }
        let m = self.rows[0].len();
        let cells = m * self.n_y;
        let rest = self.n() - depth;
        let ceiling = if cells <= DET_MERGE_STACK && rest <= ORACLE_MAX_SYMBOLS {
            let mut buf = [0.0f64; DET_MERGE_STACK];
            let mut f = [0usize; ORACLE_MAX_SYMBOLS];
            let mut best_i = f64::NEG_INFINITY;
            loop {
                buf[..cells].copy_from_slice(t);
                for (idx, d) in (depth..self.n()).enumerate() {
                    let base = f[idx] * self.n_y;
                    for y in 0..self.n_y {
                        buf[base + y] += self.pxy[d][y];
                    }
                }
                let mut i_det = 0.0;
                for row in buf[..cells].chunks_exact(self.n_y) {
                    let rsum: f64 = row.iter().sum();
                    if rsum > 0.0 {
                        for (y, &cell) in row.iter().enumerate() {
                            if cell > 0.0 {
                                i_det += cell * (cell / (rsum * self.py[y])).ln();
                            }
                        }
                    }
                }
                best_i = best_i.max(i_det);
                let mut pos = 0;
                while pos < rest {
                    f[pos] += 1;
                    if f[pos] < m {
                        break;
                    }
                    f[pos] = 0;
                    pos += 1;
                }
                if pos == rest {
                    break;
                }
            }
            best_i
        } else {
            let mut i_refined = self.kl_suffix[depth];
            for row in t.chunks_exact(self.n_y) {
                let rsum: f64 = row.iter().sum();
                if rsum > 0.0 {
                    for (y, &cell) in row.iter().enumerate() {
                        if cell > 0.0 {
                            i_refined += cell * (cell / (rsum * self.py[y])).ln();
                        }
                    }
                }
            }
            i_refined
        };
        (self.beta * (self.i_xy - ceiling)).max(self.task_floor)
    }

    /// Admissible lower bound over all completions of a partial assignment of
    /// the first `depth` symbols. `acc` holds the assigned symbols' exact row
    /// constants, `r` and `t` their contributions to the reconstruction
    /// marginal and the (x_hat, y) joint, `mass_rem` the unassigned prior.
    ///
    /// Rate + reconstruction: I(X;X_hat) = sum_x p(x) KL(row_x || r_final).
    /// The final marginal satisfies r <= r_final componentwise,
    /// r_final <= r + mass_rem, and sums to one. Minimizing the assigned
    /// rows' cross term -sum_j r_j ln r_final_j under those constraints has
    /// the closed form r_final = r / S with S = 1 - mass_rem, leaving
    /// lambda * S * H(r / S). Each unassigned row's best case is the
    /// continuous minimum -lambda * ln <r_final, g>, and <r_final, g> is at
    /// most the greedy waterfill of the caps r_j + mass_rem by descending g.
    ///
    /// Task: `task_part` bounds beta * D_T over completions of `t`.
    /// Every piece becomes exact as mass_rem reaches zero. `cutoff` lets the
    /// caller stop once the bound already exceeds the incumbent; the returned
    /// value is then only guaranteed to be > cutoff.
    fn lower_bound(
        &self,
        depth: usize,
        acc: f64,
        r: &[f64],
        t: &[f64],
        mass_rem: f64,
        cutoff: f64,
    ) -> f64 {
        let s = 1.0 - mass_rem;
        let mut ent = s * s.ln();
        for &rj in r {
            if rj > 0.0 {
                ent -= rj * rj.ln();
            }
        }
        let mut v = acc + self.lambda * ent + self.task_floor;
        for d in depth..self.n() {
            v += self.gibbs_floor(d, r, mass_rem);
        }
        if v > cutoff {
            return v;
        }
        if self.beta == 0.0 {
            return v.max(self.coupled_floor(depth, acc, r, mass_rem, None) + self.task_floor);
        }

        let m = r.len();
        let cells = m * self.n_y;
        let rest = self.n() - depth;
        if cells > DET_MERGE_STACK || rest > ORACLE_MAX_SYMBOLS {
            v = v.max(self.coupled_floor(depth, acc, r, mass_rem, None) + self.task_floor);
            if v > cutoff {
                return v;
            }
            return v + (self.task_part(depth, t) - self.task_floor).max(0.0);
        }

        // Task-aware carrier: I(X_hat;Y) is jointly convex in the free rows,
        // so by Jensen over the product polytope's multilinear coordinates,
        // beta * D_T >= <carrier row, tau> with
        // tau_j = beta * (I(X;Y) - ceil_j), ceil_j the largest information
        // any completion can keep once the carrier (the heaviest free
        // symbol) sits in bin j. That is linear in the carrier row, so it
        // folds into the carrier's distortion as d + tau / px, coupling the
        // task with rate and reconstruction instead of adding a floor.
        let mut ceil = [f64::NEG_INFINITY; ORACLE_MAX_RECONSTRUCTIONS];
        {
            let mut buf = [0.0f64; DET_MERGE_STACK];
            let mut f = [0usize; ORACLE_MAX_SYMBOLS];
            loop {
                buf[..cells].copy_from_slice(t);
                for (idx, d) in (depth..self.n()).enumerate() {
                    let base = f[idx] * self.n_y;
                    for y in 0..self.n_y {
                        buf[base + y] += self.pxy[d][y];
                    }
                }
                let mut i_det = 0.0;
                for row in buf[..cells].chunks_exact(self.n_y) {
                    let rsum: f64 = row.iter().sum();
                    if rsum > 0.0 {
                        for (y, &cell) in row.iter().enumerate() {
                            if cell > 0.0 {
                                i_det += cell * (cell / (rsum * self.py[y])).ln();
                            }
                        }
                    }
                }
                if i_det > ceil[f[0]] {
                    ceil[f[0]] = i_det;
                }
                let mut pos = 0;
                while pos < rest {
                    f[pos] += 1;
                    if f[pos] < m {
                        break;
                    }
                    f[pos] = 0;
                    pos += 1;
                }
                if pos == rest {
                    break;
                }
            }
        }
        let px0 = self.px[depth];
        let mut dprime = [0.0f64; ORACLE_MAX_RECONSTRUCTIONS];
        let mut dpmin = f64::INFINITY;
        for j in 0..m {
            dprime[j] = self.drow[depth][j] + self.beta * (self.i_xy - ceil[j]).max(0.0) / px0;
            dpmin = dpmin.min(dprime[j]);
        }
        let mut gp = [0.0f64; ORACLE_MAX_RECONSTRUCTIONS];
        for j in 0..m {
            gp[j] = (-((dprime[j] - dpmin) / self.lambda).min(GIBBS_EXP_CLAMP)).exp();
        }
        let shiftp = px0 * dpmin;
        let mut ord = [0u32; ORACLE_MAX_RECONSTRUCTIONS];
        for (j, o) in ord.iter_mut().enumerate().take(m) {
            *o = j as u32;
        }
        for i in 1..m {
            let mut k = i;
            while k > 0 && gp[ord[k] as usize] > gp[ord[k - 1] as usize] {
                ord.swap(k, k - 1);
                k -= 1;
            }
        }
        let z = Self::waterfill(&gp[..m], &ord[..m], r, mass_rem);
        let v1c = v - self.task_floor - self.gibbs_floor(depth, r, mass_rem) + shiftp
            - px0 * self.lambda * z.ln();
        let v2c = self.coupled_floor(depth, acc, r, mass_rem, Some((&gp[..m], shiftp)));
        v.max(v1c).max(v2c)
    }

    /// Applies candidate `cand` for the symbol at `depth` onto (r, t).
    fn apply(&self, depth: usize, cand: usize, r: &mut [f64], t: &mut [f64], sign: f64) {
        let px = self.px[depth];
        let row = &self.rows[cand];
        for (j, rj) in r.iter_mut().enumerate() {
            *rj += sign * px * row[j];
        }
        if self.beta > 0.0 {
            for (j, &mj) in row.iter().enumerate() {
                if mj > 0.0 {
                    for (y, cell) in t[j * self.n_y..(j + 1) * self.n_y].iter_mut().enumerate() {
                        *cell += sign * mj * self.pxy[depth][y];
                    }
                }
            }
        }
    }

    /// Depth-first search over grid rows for symbols `depth..`. Candidates at
    /// each node are scored by `lower_bound`, visited best-first, and cut off
    /// once the sorted bound passes the shared incumbent; bounds are
    /// admissible, so no candidate that could tie or beat the optimum is ever
    /// skipped.
    fn search(
        &self,
        depth: usize,
        acc: f64,
        r: &mut [f64],
        t: &mut [f64],
        mass_rem: f64,
        assignment: &mut Vec<u32>,
        best: &mut (f64, Vec<u32>),
    ) {
        let mass_next = (mass_rem - self.px[depth]).max(0.0);

        // Floors fixed for the whole subtree: the node's own task floor, and
        // the Gibbs floors of the symbols after the one being scanned. Both
        // only tighten as depth grows, so using the node-entry values in the
        // sorted-scan break below is admissible.
        let node_task = self.task_part(depth, t);
        let tail: f64 = (depth + 1..self.n())
            .map(|d| self.gibbs_floor(d, r, mass_rem))
            .sum();

        // Leaf level: candidates in ascending row-constant order; the exact
        // Lagrangian is at least acc + row constant + the task floor, so the
        // scan can stop at the first candidate past the incumbent.
        if depth + 1 == self.n() {
            for &(rc, cand) in &self.rc_sorted[depth] {
                let acc2 = acc + rc;
                if acc2 + node_task > self.incumbent.get() {
                    break;
                }
                self.apply(depth, cand as usize, r, t, 1.0);
                let l = acc2 + global_terms(self.lambda, self.beta, self.i_xy, r, t, self.n_y);
                self.apply(depth, cand as usize, r, t, -1.0);
                assignment.push(cand);
                if l < best.0 || (l == best.0 && *assignment < best.1) {
                    *best = (l, assignment.clone());
                }
                assignment.pop();
                self.incumbent.offer(l);
            }
            return;
        }

        // Interior level: cheap sorted-scan break first, then the full bound
        // for survivors, visited best-first.
        let mut scored: Vec<(f64, u32)> = Vec::new();
        for &(rc, cand) in &self.rc_sorted[depth] {
            let acc2 = acc + rc;
            let inc = self.incumbent.get();
            if acc2 + tail + node_task > inc {
                break;
            }
            self.apply(depth, cand as usize, r, t, 1.0);
            let lb = self.lower_bound(depth + 1, acc2, r, t, mass_next, inc);
            self.apply(depth, cand as usize, r, t, -1.0);
            if lb.is_finite() && lb <= inc {
                scored.push((lb, cand));
            }
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        for &(lb, cand) in &scored {
            if lb > self.incumbent.get() {
                break;
            }
            self.apply(depth, cand as usize, r, t, 1.0);
            assignment.push(cand);
            self.search(
                depth + 1,
                acc + self.row_const[depth][cand as usize],
                r,
                t,
                mass_next,
                assignment,
                best,
            );
            assignment.pop();
            self.apply(depth, cand as usize, r, t, -1.0);
        }
    }
}

/// Exact Lagrangian of a full grid mapping (rows indexed by source symbol).
fn grid_lagrangian(
    src: &SemanticSource,
    pixel: &DistortionMatrix,
    cfg: &SolverConfig,
    i_xy: f64,
    rows: &[&[f64]],
) -> f64 {
    let n = pixel.n_inputs();
    let m = pixel.n_outputs();
    let n_y = src.n_labels();
    let mut acc = 0.0;
    let mut r = vec![0.0; m];
    let mut t = vec![0.0; m * n_y];
    for x in 0..n {
        let px = src.px.get(x);
        for j in 0..m {
            let mj = rows[x][j];
            if mj > 0.0 {
                acc += px * (cfg.lambda * mj * mj.ln() + mj * pixel.cost(x, j));
                r[j] += px * mj;
                for y in 0..n_y {
                    t[j * n_y + y] += mj * px * src.py_given_x.prob(x, y);
                }
            }
        }
    }
    acc + global_terms(cfg.lambda, cfg.beta, i_xy, &r, &t, n_y)
}

/// Snaps each row of a stochastic mapping onto the c/k grid (largest-remainder
/// rounding), giving the search a strong initial incumbent.
fn snap_rows(mapping: &ConditionalDistribution, k: usize) -> Vec<Vec<f64>> {
    (0..mapping.n_inputs())
        .map(|x| {
            let row = mapping.row(x);
            let scaled: Vec<f64> = row.iter().map(|&p| p * k as f64).collect();
            let mut counts: Vec<usize> = scaled.iter().map(|&s| s.floor() as usize).collect();
            let mut need = k - counts.iter().sum::<usize>().min(k);
            let mut by_remainder: Vec<usize> = (0..row.len()).collect();
            by_remainder.sort_by(|&a, &b| {
                (scaled[b] - scaled[b].floor()).total_cmp(&(scaled[a] - scaled[a].floor()))
            });
            for &j in &by_remainder {
                if need == 0 {
                    break;
                }
                counts[j] += 1;
                need -= 1;
            }
            counts.iter().map(|&c| c as f64 / k as f64).collect()
        })
        .collect()
}

/// Exhaustive optimality oracle: searches every row-stochastic mapping on the
/// step-`grid_step` simplex grid and returns the exact grid minimizer of the
/// Lagrangian (marginal and predictor evaluated Bayes-consistently).
///
/// The search space is covered depth-first with admissible lower bounds, so
/// pruned branches are provably worse than the returned optimum. Tractable
/// only for small alphabets; sizes beyond the hard caps are refused.
pub fn brute_force_solve(
    src: &SemanticSource,
    pixel: &DistortionMatrix,
    cfg: &SolverConfig,
    grid_step: f64,
) -> Result<BruteForceSolution> {
    cfg.validate()?;
    check_dimensions(src, pixel)?;
    let n = pixel.n_inputs();
    let m = pixel.n_outputs();
    if n > ORACLE_MAX_SYMBOLS || m > ORACLE_MAX_RECONSTRUCTIONS {
        return Err(Error::invalid(format!(
            "oracle caps are {ORACLE_MAX_SYMBOLS} symbols x {ORACLE_MAX_RECONSTRUCTIONS} \
             reconstructions; got {n} x {m}"
        )));
    }
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return Err(Error::invalid(format!(
            "grid_step = {grid_step} must lie in (0, 0.5]"
        )));
    }
    let k = (1.0 / grid_step).round() as usize;
    let rows = simplex_grid(k, m);
    let candidate_space = (rows.len() as u128).pow(n as u32);
    let i_xy = src.task_information();

    let n_y = src.n_labels();
    let py = src.label_marginal();

    // Symbols are visited in decreasing prior mass: heavy rows pin down most
    // of the marginal early, which tightens the bounds fastest.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| src.px.get(b).total_cmp(&src.px.get(a)).then(a.cmp(&b)));
    let px_ord: Vec<f64> = order.iter().map(|&x| src.px.get(x)).collect();

    let row_const: Vec<Vec<f64>> = order
        .iter()
        .map(|&x| {
            let px = src.px.get(x);
            rows.iter()
                .map(|row| {
                    let mut term = 0.0;
                    for (j, &mj) in row.iter().enumerate() {
                        if mj > 0.0 {
                            term += cfg.lambda * mj * mj.ln() + mj * pixel.cost(x, j);
                        }
                    }
                    px * term
                })
                .collect()
        })
        .collect();

    let rc_sorted: Vec<Vec<(f64, u32)>> = row_const
        .iter()
        .map(|consts| {
            let mut sorted: Vec<(f64, u32)> = consts
                .iter()
                .enumerate()
                .map(|(c, &rc)| (rc, c as u32))
                .collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            sorted
        })
        .collect();

    let mut gibbs = Vec::with_capacity(n);
    let mut g_order = Vec::with_capacity(n);
    let mut gibbs_shift = Vec::with_capacity(n);
    let mut drow = Vec::with_capacity(n);
    for &x in &order {
        let d_min = (0..m)
            .map(|j| pixel.cost(x, j))
            .fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = (0..m)
            .map(|j| {
                let arg = ((pixel.cost(x, j) - d_min) / cfg.lambda).min(GIBBS_EXP_CLAMP);
                (-arg).exp()
            })
            .collect();
        let mut by_weight: Vec<u32> = (0..m as u32).collect();
        by_weight.sort_by(|&a, &b| weights[b as usize].total_cmp(&weights[a as usize]));
        gibbs.push(weights);
        g_order.push(by_weight);
        gibbs_shift.push(src.px.get(x) * d_min);
        drow.push((0..m).map(|j| pixel.cost(x, j)).collect::<Vec<f64>>());
    }

    let mut kl_suffix = vec![0.0; n + 1];
    for depth in (0..n).rev() {
        let x = order[depth];
        let kl = kl_divergence(src.py_given_x.row(x), &py).expect("same label alphabet");
        kl_suffix[depth] = kl_suffix[depth + 1] + src.px.get(x) * kl;
    }

    // Smallest possible task distortion over any mapping: I(X_hat;Y) is
    // convex in the mapping, so its maximum is deterministic; enumerate all
    // m^n hard assignments once.
    let task_floor = if cfg.beta > 0.0 {
        let mut best_i = 0.0f64;
        let mut assign = vec![0usize; n];
        loop {
            let mut joint = vec![0.0; m * n_y];
            for (x, &j) in assign.iter().enumerate() {
                for y in 0..n_y {
                    joint[j * n_y + y] += src.px.get(x) * src.py_given_x.prob(x, y);
                }
            }
            let mut i_det = 0.0;
            for row in joint.chunks_exact(n_y) {
                let rsum: f64 = row.iter().sum();
                if rsum > 0.0 {
                    for (y, &cell) in row.iter().enumerate() {
                        if cell > 0.0 {
                            i_det += cell * (cell / (rsum * py.get(y))).ln();
                        }
                    }
                }
            }
            best_i = best_i.max(i_det);
            let mut pos = 0;
            while pos < n {
                assign[pos] += 1;
                if assign[pos] < m {
                    break;
                }
                assign[pos] = 0;
                pos += 1;
            }
            if pos == n {
                break;
            }
        }
        cfg.beta * (i_xy - best_i).max(0.0)
    } else {
        0.0
    };

    // Seed the incumbent with the solver's solution snapped onto the grid,
    // keeping the snapped assignment itself as the starting best. Pruning is
    // then free to discard everything at the incumbent value: the search
    // still returns a mapping attaining it.
    let incumbent = Incumbent::new(f64::INFINITY);
    let mut seed_best: (f64, Vec<u32>) = (f64::INFINITY, Vec::new());
    if let Ok(result) = solve(src, pixel, cfg) {
        let snapped = snap_rows(&result.mapping, k);
        let refs: Vec<&[f64]> = snapped.iter().map(|r| r.as_slice()).collect();
        let value = grid_lagrangian(src, pixel, cfg, i_xy, &refs);
        let index_of = |row: &[f64]| -> Option<u32> {
            let counts: Vec<usize> = row.iter().map(|&p| (p * k as f64).round() as usize).collect();
            rows.iter().position(|grid_row| {
                grid_row
                    .iter()
                    .zip(&counts)
                    .all(|(&g, &c)| (g * k as f64).round() as usize == c)
            }).map(|i| i as u32)
        };
        let assignment: Option<Vec<u32>> = order
            .iter()
            .map(|&x| index_of(&snapped[x]))
            .collect();
        if let Some(assignment) = assignment {
            if value.is_finite() {
                incumbent.offer(value);
                seed_best = (value, assignment);
            }
        }
    }

    let t_len = if cfg.beta > 0.0 { m * n_y } else { 0 };
    let ctx = OracleContext {
        lambda: cfg.lambda,
        beta: cfg.beta,
        i_xy,
        n_y,
        order: order.clone(),
        px: px_ord,
        pxy: order
            .iter()
            .map(|&x| {
                (0..n_y)
                    .map(|y| src.px.get(x) * src.py_given_x.prob(x, y))
                    .collect()
            })
            .collect(),
        kl_suffix,
        py: py.as_slice().to_vec(),
        rows: rows.clone(),
        row_const,
        rc_sorted,
        task_floor,
        gibbs,
        g_order,
        gibbs_shift,
        drow,
        incumbent: &incumbent,
    };

    let branch_results = if n == 1 {
        let mut best = seed_best.clone();
        let mut r = vec![0.0; m];
        let mut t = vec![0.0; t_len];
        ctx.search(0, 0.0, &mut r, &mut t, 1.0, &mut Vec::new(), &mut best);
        vec![best]
    } else {
        // Score and order the first symbol's candidates once, then fan the
        // surviving subtrees out in parallel. The shared incumbent only
        // accelerates pruning; every optimal leaf survives regardless of
        // timing, so the result is identical with and without threads.
        let mass_next = 1.0 - ctx.px[0];
        let mut r = vec![0.0; m];
        let mut t = vec![0.0; t_len];
        let root_tail: f64 = (1..n).map(|d| ctx.gibbs_floor(d, &r, 1.0)).sum();
        let mut scored: Vec<(f64, u32)> = Vec::new();
        for &(rc, cand) in &ctx.rc_sorted[0] {
            let inc = incumbent.get();
            if rc + root_tail + ctx.task_floor > inc {
                break;
            }
            ctx.apply(0, cand as usize, &mut r, &mut t, 1.0);
            let lb = ctx.lower_bound(1, rc, &r, &t, mass_next, inc);
            ctx.apply(0, cand as usize, &mut r, &mut t, -1.0);
            if lb.is_finite() && lb <= inc {
                scored.push((lb, cand));
            }
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        par::map_slice(&scored, |&(lb, cand)| {
            let mut best = (f64::INFINITY, Vec::new());
            if lb > ctx.incumbent.get() {
                return best;
            }
            let mut r = vec![0.0; m];
            let mut t = vec![0.0; t_len];
            ctx.apply(0, cand as usize, &mut r, &mut t, 1.0);
            let mut assignment = vec![cand];
            ctx.search(
                1,
                ctx.row_const[0][cand as usize],
                &mut r,
                &mut t,
                mass_next,
                &mut assignment,
                &mut best,
            );
            best
        })
    };

    let mut best = seed_best;
    for branch in branch_results {
        if branch.0 < best.0 || (branch.0 == best.0 && !branch.1.is_empty() && branch.1 < best.1) {
            best = branch;
        }
    }
    if !best.0.is_finite() {
        return Err(Error::infeasible(
            "no grid mapping with finite Lagrangian exists",
        ));
    }

    // The search assigned rows in prior-sorted order; undo the permutation.
    let mut per_symbol = vec![0u32; n];
    for (depth, &x) in order.iter().enumerate() {
        per_symbol[x] = best.1[depth];
    }
    let mapping = ConditionalDistribution::from_rows(
        per_symbol
            .iter()
            .map(|&c| rows[c as usize].clone())
            .collect(),
    )?;
    Ok(BruteForceSolution {
        mapping,
        lagrangian: best.0,
        candidate_space,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortion::{hamming_matrix, mse_matrix};
    use crate::prob::random_conditional;
    use approx::assert_abs_diff_eq;

    fn binary_hamming_source() -> (SemanticSource, DistortionMatrix) {
        let src = SemanticSource::new(
            Distribution::uniform(2),
            ConditionalDistribution::from_rows(vec![vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap(),
            vec![vec![0.0], vec![1.0]],
            None,
            None,
        )
        .unwrap();
        let pixel = hamming_matrix(2);
        (src, pixel)
    }

    /// Random small instance with its own reconstruction alphabet.
    fn random_instance(seed: u64, n: usize, m: usize, n_labels: usize) -> (SemanticSource, DistortionMatrix) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let embeddings: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let xhat_embeddings: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..2).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let src = SemanticSource::new(
            random_distribution(seed.wrapping_add(1), n),
            random_conditional(seed.wrapping_add(2), n, n_labels),
            embeddings,
            None,
            Some(xhat_embeddings),
        )
        .unwrap();
        let pixel = mse_matrix(&src).unwrap();
        (src, pixel)
    }

    fn binary_entropy_nats(p: f64) -> f64 {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    }

    #[test]
    fn binary_hamming_matches_analytic_rate_distortion() {
        // Fixed point of the uniform binary Hamming problem:
        // D(lambda) = 1 / (1 + e^(1/lambda)), R = ln 2 - H_b(D).
        let (src, pixel) = binary_hamming_source();
        for target_d in [0.05f64, 0.1, 0.2] {
            let lambda = 1.0 / ((1.0 - target_d) / target_d).ln();
            let cfg = SolverConfig::new(lambda).with_tol(1e-14);
            let result = solve(&src, &pixel, &cfg).unwrap();
            assert!(result.converged);
            let expected_rate = std::f64::consts::LN_2 - binary_entropy_nats(target_d);
            assert_abs_diff_eq!(result.rate_nats, expected_rate, epsilon = 1e-9);
            assert_abs_diff_eq!(result.pixel_distortion, target_d, epsilon = 1e-9);
        }
    }

    #[test]
    fn matches_independently_coded_classical_solver_at_beta_zero() {
        // Textbook rate-distortion iteration, written out directly.
        fn classical(px: &[f64], d: &[Vec<f64>], lambda: f64) -> (Vec<Vec<f64>>, f64, f64) {
            let n = px.len();
            let m = d[0].len();
            let mut q = vec![1.0 / m as f64; m];
            let mut mapping = vec![vec![0.0; m]; n];
            for _ in 0..200_000 {
                for x in 0..n {
                    let mut z = 0.0;
                    for j in 0..m {
                        mapping[x][j] = q[j] * (-d[x][j] / lambda).exp();
                        z += mapping[x][j];
                    }
                    for j in 0..m {
                        mapping[x][j] /= z;
                    }
                }
                let mut q_new = vec![0.0; m];
                for x in 0..n {
                    for j in 0..m {
                        q_new[j] += px[x] * mapping[x][j];
                    }
                }
                let drift: f64 = q_new
                    .iter()
                    .zip(&q)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                q = q_new;
                if drift < 1e-15 {
                    break;
                }
            }
            let mut rate = 0.0;
            let mut dist = 0.0;
            for x in 0..n {
                for j in 0..m {
                    if mapping[x][j] > 0.0 {
                        rate += px[x] * mapping[x][j] * (mapping[x][j] / q[j]).ln();
                        dist += px[x] * mapping[x][j] * d[x][j];
                    }
                }
            }
            (mapping, rate, dist)
        }

        for seed in [1u64, 5, 9] {
            let (src, pixel) = random_instance(seed, 3, 3, 2);
            let cfg = SolverConfig::new(0.7).with_tol(1e-15).with_max_iters(200_000);
            let result = solve(&src, &pixel, &cfg).unwrap();

            let d: Vec<Vec<f64>> = (0..3).map(|x| pixel.row(x).to_vec()).collect();
            let (mapping, rate, dist) = classical(src.px.as_slice(), &d, 0.7);
            for x in 0..3 {
                for j in 0..3 {
                    assert!(
                        (result.mapping.prob(x, j) - mapping[x][j]).abs() < 1e-8,
                        "seed {seed}: mapping mismatch at ({x},{j})"
                    );
                }
            }
            assert_abs_diff_eq!(result.rate_nats, rate, epsilon = 1e-9);
            assert_abs_diff_eq!(result.pixel_distortion, dist, epsilon = 1e-9);
        }
    }

    #[test]
    fn lagrangian_trace_never_increases() {
        for seed in 0..30u64 {
            let (src, pixel) = random_instance(seed, 4, 3, 2);
            let beta = match seed % 3 {
                0 => 0.0,
                1 => 0.7,
                _ => 2.5,
            };
            let cfg = SolverConfig::new(0.3 + 0.2 * (seed % 5) as f64).with_beta(beta);
            let result = solve(&src, &pixel, &cfg).unwrap();
            for w in result.lagrangian_trace.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-10,
                    "seed {seed}: Lagrangian rose from {} to {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn converged_solves_are_self_consistent() {
        for seed in 0..10u64 {
            let (src, pixel) = random_instance(seed, 4, 3, 2);
            let cfg = SolverConfig::new(0.8)
                .with_beta(if seed % 2 == 0 { 0.0 } else { 1.0 })
                .with_tol(1e-13);
            let result = solve(&src, &pixel, &cfg).unwrap();
            assert!(result.converged, "seed {seed} did not converge");
            let residual = verify_self_consistency(&src, &pixel, &cfg, &result);
            assert!(residual < 1e-6, "seed {seed}: residual {residual}");
        }
    }

    #[test]
    fn enormous_lambda_drives_rate_to_zero() {
        let (src, pixel) = random_instance(3, 4, 3, 2);
        let lambda = 1e4 * pixel.max_finite_cost();
        let result = solve(&src, &pixel, &SolverConfig::new(lambda)).unwrap();
        assert!(result.rate_nats < 1e-6, "rate = {}", result.rate_nats);
    }

    #[test]
    fn joint_cost_and_lambda_rescaling_leaves_mapping_unchanged() {
        // Scaling every cost and lambda by the same factor rescales the
        // Lagrangian but cannot move the optimizer.
        let (src, pixel) = random_instance(11, 4, 3, 2);
        let c = 3.7;
        let scaled_costs: Vec<Vec<f64>> = (0..4)
            .map(|x| pixel.row(x).iter().map(|&v| c * v).collect())
            .collect();
        let scaled = DistortionMatrix::new(scaled_costs, pixel.kind()).unwrap();

        // The stopping rule is absolute in L, which also scales by c.
        let cfg = SolverConfig::new(0.6).with_tol(1e-14);
        let base = solve(&src, &pixel, &cfg).unwrap();
        let cfg_scaled = SolverConfig::new(0.6 * c).with_tol(c * 1e-14);
        let other = solve(&src, &scaled, &cfg_scaled).unwrap();
        for x in 0..4 {
            for j in 0..3 {
                assert_abs_diff_eq!(
                    base.mapping.prob(x, j),
                    other.mapping.prob(x, j),
                    epsilon = 1e-8
                );
            }
        }
        assert_abs_diff_eq!(base.rate_nats, other.rate_nats, epsilon = 1e-8);
    }

    #[test]
    fn rd_curve_is_sorted_and_rate_decreases_with_lambda() {
        let (src, pixel) = random_instance(7, 4, 3, 2);
        let grid = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2];
        let base = SolverConfig::new(1.0).with_tol(1e-13);
        let curve = rd_curve(&src, &pixel, &grid, 0.5, &base);
        assert!(curve.skipped.is_empty());
        assert_eq!(curve.points.len(), grid.len());
        for w in curve.points.windows(2) {
            assert!(w[0].rate_bits <= w[1].rate_bits + 1e-12);
        }
        // Per-lambda view: larger lambda never buys more rate.
        let mut by_lambda = curve.points.clone();
        by_lambda.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        for w in by_lambda.windows(2) {
            assert!(
                w[1].rate_bits <= w[0].rate_bits + 1e-9,
                "rate rose from {} to {} as lambda grew",
                w[0].rate_bits,
                w[1].rate_bits
            );
        }
    }

    #[test]
    fn rd_curve_reports_invalid_lambda_as_skipped() {
        let (src, pixel) = random_instance(7, 3, 3, 2);
        let base = SolverConfig::new(1.0);
        let curve = rd_curve(&src, &pixel, &[0.5, 0.0, 2.0], 0.0, &base);
        assert_eq!(curve.points.len(), 2);
        assert_eq!(curve.skipped.len(), 1);
        assert_eq!(curve.skipped[0].lambda, 0.0);
    }

    #[test]
    fn oracle_candidate_space_is_the_full_grid() {
        let (src, pixel) = random_instance(2, 2, 2, 2);
        let sol = brute_force_solve(&src, &pixel, &SolverConfig::new(0.5), 0.05).unwrap();
        // 21 compositions of 20 into two parts, squared over two symbols.
        assert_eq!(sol.candidate_space, 441);
    }

    #[test]
    fn oracle_matches_analytic_binary_optimum() {
        let (src, pixel) = binary_hamming_source();
        for lambda in [0.3, 0.4, 0.6] {
            let sol = brute_force_solve(&src, &pixel, &SolverConfig::new(lambda), 0.01).unwrap();
            let d = 1.0 / (1.0 + (1.0 / lambda).exp());
            let rate = std::f64::consts::LN_2 - binary_entropy_nats(d);
            let analytic = lambda * rate + d;
            assert!(
                (sol.lagrangian - analytic).abs() < 1e-3,
                "lambda {lambda}: grid {} vs analytic {analytic}",
                sol.lagrangian
            );
            // The grid optimum can only sit above the continuous optimum.
            assert!(sol.lagrangian >= analytic - 1e-12);
        }
    }

    #[test]
    fn oracle_certifies_solver_optimality_on_small_instances() {
        for seed in [2u64, 4, 8] {
            let (src, pixel) = random_instance(seed, 3, 2, 2);
            for beta in [0.0, 1.0] {
                let cfg = SolverConfig::new(0.8).with_beta(beta).with_tol(1e-14);
                let solved = solve(&src, &pixel, &cfg).unwrap();
                let oracle = brute_force_solve(&src, &pixel, &cfg, 0.01).unwrap();
                assert!(
                    solved.lagrangian <= oracle.lagrangian + 1e-3,
                    "seed {seed} beta {beta}: solver {} vs oracle {}",
                    solved.lagrangian,
                    oracle.lagrangian
                );
                assert!(
                    oracle.lagrangian <= solved.lagrangian + 1e-3,
                    "seed {seed} beta {beta}: oracle {} vs solver {}",
                    oracle.lagrangian,
                    solved.lagrangian
                );
            }
        }
    }

    #[test]
    fn oracle_rejects_oversized_instances() {
        let (src, pixel) = random_instance(0, 4, 3, 2);
        assert!(brute_force_solve(&src, &pixel, &SolverConfig::new(1.0), 0.6).is_err());
        let (big_src, big_pixel) = random_instance(0, 5, 3, 2);
        assert!(matches!(
            brute_force_solve(&big_src, &big_pixel, &SolverConfig::new(1.0), 0.1),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn beta_steers_mapping_toward_task_information() {
        // With beta large the solver should retain strictly more I(X_hat; Y)
        // than the pure pixel objective at the same lambda.
        let (src, pixel) = random_instance(21, 4, 3, 3);
        let cfg0 = SolverConfig::new(0.5).with_tol(1e-13);
        let cfg_big = SolverConfig::new(0.5).with_beta(8.0).with_tol(1e-13);
        let plain = solve(&src, &pixel, &cfg0).unwrap();
        let steered = solve(&src, &pixel, &cfg_big).unwrap();
        let mi_plain = mi_with_task(&src, &plain.mapping);
        let mi_steered = mi_with_task(&src, &steered.mapping);
        assert!(
            mi_steered >= mi_plain - 1e-12,
            "I(Xhat;Y) fell from {mi_plain} to {mi_steered} as beta grew"
        );
        assert!(steered.task_distortion_nats <= plain.task_distortion_nats + 1e-12);
    }
}
