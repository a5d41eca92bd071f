//! End-to-end pipeline: seeded synthetic semantic sources, quantizer design
//! from solver output, exact index-channel transmission, Bayes
//! classification, lambda/beta/channel sweeps, and CSV/JSON emission.
//!
//! All sweep statistics come from exact finite joints; Monte Carlo enters
//! only when an SNR axis is converted to flip probabilities or when symbol
//! streams are sampled explicitly.

use crate::bounds::bayes_predictor;
use crate::channel::{index_channel_matrix, measure_ser, ChannelConfig, ChannelKind, CsiMode, Modulation};
use crate::distortion::{mse_matrix, DistortionMatrix, SemanticSource};
use crate::error::{Error, Result};
use crate::par;
use crate::prob::{
    chain_conditionals, entropy, mutual_information, ConditionalDistribution, Distribution,
    JointDistribution,
};
use crate::solver::{mi_with_task, solve, SolverConfig, SolverResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_2, TAU};
use std::fmt::Write as _;
use std::path::Path;

const CSV_HEADER: &str = "lambda,beta,snr_or_flip,rate_bits,entropy_bits,mse,accuracy,task_distortion_bits,i_xhat_y_bits,transfer_accuracy";

fn bits(nats: f64) -> f64 {
    nats / LN_2
}

// ---------------------------------------------------------------------------
// Synthetic sources.
// ---------------------------------------------------------------------------

/// Shape of a generated source: label cluster centers on a circle of radius
/// `spread`, per-symbol jitter, and a softmax temperature for the label
/// posteriors (`0.0` means hard cluster membership).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub spread: f64,
    pub jitter: f64,
    pub temperature: f64,
    /// Draw p(x) from a flat Dirichlet instead of using the uniform prior.
    pub dirichlet_prior: bool,
    /// Attach a second task: the same embeddings partitioned by cluster
    /// centers rotated a quarter angular step.
    pub alt_task: bool,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        // Jitter wider than the spread: the assigned cluster (the label) and
        // the nearest reconstruction point then disagree for some symbols,
        // which is what gives the task term something to trade against.
        GeometryConfig {
            spread: 1.0,
            jitter: 2.0,
            temperature: 0.0,
            dirichlet_prior: false,
            alt_task: true,
        }
    }
}

impl GeometryConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("spread", self.spread),
            ("jitter", self.jitter),
            ("temperature", self.temperature),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "geometry {name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

fn circle_centers(n: usize, radius: f64, phase: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let a = TAU * k as f64 / n as f64 + phase;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Softmax label posterior over `centers` for one embedding; at zero
/// temperature, a point mass on `hard` (or the nearest center when `hard`
/// is `None`, ties to the lowest index).
fn membership_row(
    embedding: &[f64],
    centers: &[Vec<f64>],
    temperature: f64,
    hard: Option<usize>,
) -> Vec<f64> {
    let k = centers.len();
    if temperature == 0.0 {
        let at = hard.unwrap_or_else(|| {
            let mut best = 0;
            for (i, c) in centers.iter().enumerate().skip(1) {
                if squared_distance(embedding, c) < squared_distance(embedding, &centers[best]) {
                    best = i;
                }
            }
            best
        });
        let mut row = vec![0.0; k];
        row[at] = 1.0;
        return row;
    }
    let scores: Vec<f64> = centers
        .iter()
        .map(|c| -squared_distance(embedding, c) / (2.0 * temperature * temperature))
        .collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Builds a seeded source: `n_labels` cluster centers on a circle, symbols
/// assigned round-robin and jittered, label posteriors by soft membership.
/// The RNG draw order (jitter first, then the optional Dirichlet prior) is
/// part of the contract: regression constants depend on it.
pub fn generate_semantic_source(
    n_symbols: usize,
    n_labels: usize,
    geometry: &GeometryConfig,
    seed: u64,
) -> Result<SemanticSource> {
    if n_labels < 2 || n_symbols < n_labels {
        return Err(Error::invalid(format!(
            "need n_symbols >= n_labels >= 2, got {n_symbols} and {n_labels}"
        )));
    }
    geometry.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = circle_centers(n_labels, geometry.spread, 0.0);

    let embeddings: Vec<Vec<f64>> = (0..n_symbols)
        .map(|i| {
            let c = &centers[i % n_labels];
            let mut e = c.clone();
            if geometry.jitter > 0.0 {
                e[0] += rng.random_range(-geometry.jitter..geometry.jitter);
                e[1] += rng.random_range(-geometry.jitter..geometry.jitter);
            }
            e
        })
        .collect();

    let px = if geometry.dirichlet_prior {
        let mass: Vec<f64> = (0..n_symbols).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        Distribution::new(mass)?
    } else {
        Distribution::uniform(n_symbols)
    };

    let rows: Vec<Vec<f64>> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| membership_row(e, &centers, geometry.temperature, Some(i % n_labels)))
        .collect();
    let py_given_x = ConditionalDistribution::from_rows(rows)?;

    let alt = if geometry.alt_task {
        let rotated = circle_centers(n_labels, geometry.spread, TAU / (4 * n_labels) as f64);
        let rows: Vec<Vec<f64>> = embeddings
            .iter()
            .map(|e| membership_row(e, &rotated, geometry.temperature, None))
            .collect();
        Some(ConditionalDistribution::from_rows(rows)?)
    } else {
        None
    };

    // Reconstruction codebook: the unjittered cluster centers. Jittered
    // symbols never coincide with a codeword, and a symbol thrown across the
    // midline reconstructs best at the *other* cluster's center.
    let codebook = circle_centers(n_labels, geometry.spread, 0.0);
    SemanticSource::new(px, py_given_x, embeddings, alt, Some(codebook))
}

// ---------------------------------------------------------------------------
// Quantizer design.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingMode {
    /// Deploy the converged mapping as-is; statistics stay exact over it.
    Stochastic,
    /// Harden each row to its most likely reconstruction, ties to the
    /// lowest index.
    Argmax,
}

fn argmax_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn hard_labels(c: &ConditionalDistribution) -> Vec<usize> {
    c.rows().iter().map(|r| argmax_index(r.as_slice())).collect()
}

/// Turns a converged solve into the deployed index map p(x_hat|x).
pub fn design_quantizer(
    result: &SolverResult,
    mode: MappingMode,
) -> Result<ConditionalDistribution> {
    if !result.converged {
        return Err(Error::infeasible(
            "quantizer design requires a converged solve",
        ));
    }
    match mode {
        MappingMode::Stochastic => Ok(result.mapping.clone()),
        MappingMode::Argmax => {
            let m = result.mapping.n_outputs();
            let rows = result
                .mapping
                .rows()
                .iter()
                .map(|r| Distribution::point_mass(m, argmax_index(r.as_slice())))
                .collect();
            ConditionalDistribution::new(rows)
        }
    }
}

/// Samples one reconstruction index per input symbol from p(x_hat|x).
pub fn sample_quantizer_outputs(
    quantizer: &ConditionalDistribution,
    inputs: &[usize],
    seed: u64,
) -> Result<Vec<usize>> {
    let n = quantizer.n_inputs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inputs
        .iter()
        .map(|&x| {
            if x >= n {
                return Err(Error::invalid(format!(
                    "input symbol {x} outside alphabet of {n}"
                )));
            }
            let u: f64 = rng.random();
            let row = quantizer.row(x).as_slice();
            let mut cum = 0.0;
            for (j, &p) in row.iter().enumerate() {
                cum += p;
                if u < cum {
                    return Ok(j);
                }
            }
            Ok(row.len() - 1)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sweep configuration and records.
// ---------------------------------------------------------------------------

/// The channel axis of a sweep: explicit flip probabilities, or SNRs that
/// are resolved to flip probabilities by measuring the symbol error rate of
/// the given modulation. Rayleigh SER is measured under independent
/// per-symbol fades so the derived flip probability is the ergodic average.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelGrid {
    FlipProb(Vec<f64>),
    SnrDb {
        snrs: Vec<f64>,
        modulation: Modulation,
        kind: ChannelKind,
        n_samples: usize,
    },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub source: SemanticSource,
    /// Overrides the embedding MSE matrix as the reconstruction distortion.
    pub d_rd: Option<DistortionMatrix>,
    pub lambda_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub channel_grid: ChannelGrid,
    pub mapping_mode: MappingMode,
    pub seed: u64,
    /// Optional solver caps for long sweeps; `None` keeps the defaults.
    pub solver_max_iters: Option<usize>,
    pub solver_tol: Option<f64>,
}

impl ExperimentConfig {
    pub fn new(source: SemanticSource, lambda_grid: Vec<f64>, beta_grid: Vec<f64>, channel_grid: ChannelGrid) -> Self {
        ExperimentConfig {
            source,
            d_rd: None,
            lambda_grid,
            beta_grid,
            channel_grid,
            mapping_mode: MappingMode::Stochastic,
            seed: 0,
            solver_max_iters: None,
            solver_tol: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() || self.beta_grid.is_empty() {
            return Err(Error::invalid("lambda and beta grids must be non-empty"));
        }
        if let Some(d) = &self.d_rd {
            if d.n_inputs() != self.source.n_symbols()
                || d.n_outputs() != self.source.n_reconstructions()
            {
                return Err(Error::invalid(format!(
                    "distortion override is {}x{}, source needs {}x{}",
                    d.n_inputs(),
                    d.n_outputs(),
                    self.source.n_symbols(),
                    self.source.n_reconstructions()
                )));
            }
        }
        for &l in &self.lambda_grid {
            if !l.is_finite() || l <= 0.0 {
                return Err(Error::invalid(format!("lambda = {l} must be finite and > 0")));
            }
        }
        for &b in &self.beta_grid {
            if !b.is_finite() || b < 0.0 {
                return Err(Error::invalid(format!("beta = {b} must be finite and >= 0")));
            }
        }
        match &self.channel_grid {
            ChannelGrid::FlipProb(ps) => {
                if ps.is_empty() {
                    return Err(Error::invalid("flip probability grid must be non-empty"));
                }
                for &p in ps {
                    if !p.is_finite() || !(0.0..1.0).contains(&p) {
                        return Err(Error::invalid(format!(
                            "flip probability {p} must lie in [0, 1)"
                        )));
                    }
                }
            }
            ChannelGrid::SnrDb { snrs, n_samples, .. } => {
                if snrs.is_empty() {
                    return Err(Error::invalid("snr grid must be non-empty"));
                }
                if snrs.iter().any(|s| !s.is_finite()) {
                    return Err(Error::invalid("snr grid entries must be finite"));
                }
                if *n_samples == 0 {
                    return Err(Error::invalid("ser measurement needs at least one sample"));
                }
            }
        }
        Ok(())
    }
}

/// One sweep cell. `snr_or_flip` echoes the channel axis as configured:
/// the flip probability, or the SNR in dB when the axis was given as SNRs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub lambda: f64,
    pub beta: f64,
    pub snr_or_flip: f64,
    /// I(X; X_hat) of the deployed quantizer, bits.
    pub rate_bits: f64,
    /// H(X_hat) of the deployed quantizer, bits.
    pub entropy_bits: f64,
    /// Expected squared embedding error after the channel.
    pub mse: f64,
    /// Exact Bayes-classifier accuracy after the channel.
    pub task_accuracy: f64,
    /// I(X;Y) - I(X_hat_rx;Y), bits, clamped at zero.
    pub task_distortion_bits: f64,
    /// I(X_hat_rx; Y), bits.
    pub i_xhat_y_bits: f64,
    pub transfer_accuracy: Option<f64>,
}

/// A grid cell whose solve did not produce a usable mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub lambda: f64,
    pub beta: f64,
    pub snr_or_flip: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Sorted by (lambda, beta, channel axis), all ascending.
    pub records: Vec<ExperimentRecord>,
    pub skipped: Vec<SkippedCell>,
}

// ---------------------------------------------------------------------------
// The pipeline.
// ---------------------------------------------------------------------------

/// (axis label, flip probability) pairs, sorted by label.
fn resolve_channel_axis(cfg: &ExperimentConfig) -> Result<Vec<(f64, f64)>> {
    match &cfg.channel_grid {
        ChannelGrid::FlipProb(ps) => {
            let mut axis: Vec<(f64, f64)> = ps.iter().map(|&p| (p, p)).collect();
            axis.sort_by(|a, b| a.0.total_cmp(&b.0));
            Ok(axis)
        }
        ChannelGrid::SnrDb {
            snrs,
            modulation,
            kind,
            n_samples,
        } => {
            let mut sorted = snrs.clone();
            sorted.sort_by(f64::total_cmp);
            sorted
                .iter()
                .enumerate()
                .map(|(i, &snr)| {
                    let mut ch = ChannelConfig::new(
                        *kind,
                        snr,
                        cfg.seed.wrapping_add(i as u64),
                        CsiMode::Perfect,
                    )?;
                    ch.per_symbol_fading = matches!(kind, ChannelKind::Rayleigh);
                    let ser = measure_ser(*modulation, &ch, *n_samples)?.ser;
                    Ok((snr, ser.min(1.0 - 1e-12)))
                })
                .collect()
        }
    }
}

fn exact_accuracy(
    px: &Distribution,
    transition: &ConditionalDistribution,
    classifier: &[usize],
    truth: &[usize],
) -> f64 {
    let mut acc = 0.0;
    for x in 0..transition.n_inputs() {
        let w = px.get(x);
        if w == 0.0 {
            continue;
        }
        for (xhat, &label) in classifier.iter().enumerate() {
            if label == truth[x] {
                acc += w * transition.prob(x, xhat);
            }
        }
    }
    acc.clamp(0.0, 1.0)
}

/// Runs the full sweep: one solve per (lambda, beta), and per channel point
/// the quantizer composed with the exact index-flip transition, classified
/// by the solver's Bayes predictor. Cells whose solve fails are reported in
/// `skipped` and the sweep continues. Grid cells run in parallel; outputs
/// are independent of scheduling.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let src = &cfg.source;
    let pixel = match &cfg.d_rd {
        Some(d) => d.clone(),
        None => mse_matrix(src)?,
    };
    let axis = resolve_channel_axis(cfg)?;
    let i_xy = src.task_information();
    let y_star = hard_labels(&src.py_given_x);

    let mut lambdas = cfg.lambda_grid.clone();
    lambdas.sort_by(f64::total_cmp);
    let mut betas = cfg.beta_grid.clone();
    betas.sort_by(f64::total_cmp);
    let pairs: Vec<(f64, f64)> = lambdas
        .iter()
        .flat_map(|&l| betas.iter().map(move |&b| (l, b)))
        .collect();

    let per_pair = |i: usize| -> Result<(Vec<ExperimentRecord>, Vec<SkippedCell>)> {
        let (lambda, beta) = pairs[i];
        let skip_all = |reason: String| {
            axis.iter()
                .map(|&(label, _)| SkippedCell {
                    lambda,
                    beta,
                    snr_or_flip: label,
                    reason: reason.clone(),
                })
                .collect::<Vec<_>>()
        };
        let mut solver_cfg = SolverConfig::new(lambda).with_beta(beta);
        if let Some(n) = cfg.solver_max_iters {
            solver_cfg = solver_cfg.with_max_iters(n);
        }
        if let Some(t) = cfg.solver_tol {
            solver_cfg = solver_cfg.with_tol(t);
        }
        let result = match solve(src, &pixel, &solver_cfg) {
            Ok(r) => r,
            Err(e) => return Ok((Vec::new(), skip_all(e.to_string()))),
        };
        let quantizer = match design_quantizer(&result, cfg.mapping_mode) {
            Ok(q) => q,
            Err(e) => return Ok((Vec::new(), skip_all(e.to_string()))),
        };

        let joint = JointDistribution::from_marginal_conditional(&src.px, &quantizer)?;
        let rate_bits = bits(mutual_information(&joint));
        let entropy_bits = bits(entropy(&joint.col_marginal()));
        let classifier = hard_labels(&result.py_given_xhat);

        let mut records = Vec::with_capacity(axis.len());
        for &(label, flip) in &axis {
            let chan = index_channel_matrix(quantizer.n_outputs(), flip)?;
            let through = chain_conditionals(&quantizer, &chan)?;
            let mut mse = 0.0;
            for x in 0..src.n_symbols() {
                let w = src.px.get(x);
                for xhat in 0..through.n_outputs() {
                    let m = w * through.prob(x, xhat);
                    if m > 0.0 {
                        mse += m * pixel.cost(x, xhat);
                    }
                }
            }
            let i_ty = mi_with_task(src, &through);
            let record = ExperimentRecord {
                lambda,
                beta,
                snr_or_flip: label,
                rate_bits,
                entropy_bits,
                mse,
                task_accuracy: exact_accuracy(&src.px, &through, &classifier, &y_star),
                task_distortion_bits: bits((i_xy - i_ty).max(0.0)),
                i_xhat_y_bits: bits(i_ty),
                transfer_accuracy: None,
            };
            debug_assert!(record.rate_bits <= record.entropy_bits + 1e-9);
            records.push(record);
        }
        Ok((records, Vec::new()))
    };

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for cell in par::map_range(pairs.len(), per_pair) {
        let (r, s) = cell?;
        records.extend(r);
        skipped.extend(s);
    }
    Ok(PipelineOutput { records, skipped })
}

// ---------------------------------------------------------------------------
// Transfer evaluation.
// ---------------------------------------------------------------------------

/// How a stored mapping scores on the task that trained it and on the
/// source's alternative task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub beta: f64,
    pub task_a_accuracy: f64,
    pub task_b_accuracy: f64,
}

/// Re-scores stored mappings against the alternative task without
/// re-solving: for each task the classifier is the exact Bayes predictor of
/// the mapping under that task's labels. Results sorted by beta.
pub fn transfer_eval(
    src: &SemanticSource,
    mappings: &[(f64, ConditionalDistribution)],
) -> Result<Vec<TransferRecord>> {
    let alt = src
        .alt_py_given_x
        .as_ref()
        .ok_or_else(|| Error::invalid("transfer evaluation needs a source with an alternative task"))?;
    if mappings.is_empty() {
        return Err(Error::invalid("no mappings to evaluate"));
    }
    let alt_src = SemanticSource::new(
        src.px.clone(),
        alt.clone(),
        src.embeddings.clone(),
        None,
        src.xhat_embeddings.clone(),
    )?;
    let truth_a = hard_labels(&src.py_given_x);
    let truth_b = hard_labels(alt);

    let mut out = Vec::with_capacity(mappings.len());
    for (beta, mapping) in mappings {
        let cls_a = hard_labels(&bayes_predictor(src, mapping)?);
        let cls_b = hard_labels(&bayes_predictor(&alt_src, mapping)?);
        out.push(TransferRecord {
            beta: *beta,
            task_a_accuracy: exact_accuracy(&src.px, mapping, &cls_a, &truth_a),
            task_b_accuracy: exact_accuracy(&src.px, mapping, &cls_b, &truth_b),
        });
    }
    out.sort_by(|a, b| a.beta.total_cmp(&b.beta));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Emission.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::invalid(format!("unknown format '{other}', expected csv or json"))),
        }
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

/// Renders records with the fixed column set; floats carry nine significant
/// digits, and a missing transfer accuracy is an empty field.
pub fn records_to_csv(records: &[ExperimentRecord]) -> String {
    let mut out = String::with_capacity(64 + records.len() * 160);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let transfer = r.transfer_accuracy.map(fmt_float).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            fmt_float(r.lambda),
            fmt_float(r.beta),
            fmt_float(r.snr_or_flip),
            fmt_float(r.rate_bits),
            fmt_float(r.entropy_bits),
            fmt_float(r.mse),
            fmt_float(r.task_accuracy),
            fmt_float(r.task_distortion_bits),
            fmt_float(r.i_xhat_y_bits),
            transfer,
        )
        .expect("writing to a string cannot fail");
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<ExperimentRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => return Err(Error::invalid("csv header does not match the record schema")),
    }
    let parse = |field: &str, line_no: usize| -> Result<f64> {
        field.parse::<f64>().map_err(|_| {
            Error::invalid(format!("line {line_no}: '{field}' is not a number"))
        })
    };
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let line_no = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::invalid(format!(
                "line {line_no}: expected 10 fields, got {}",
                fields.len()
            )));
        }
        records.push(ExperimentRecord {
            lambda: parse(fields[0], line_no)?,
            beta: parse(fields[1], line_no)?,
            snr_or_flip: parse(fields[2], line_no)?,
            rate_bits: parse(fields[3], line_no)?,
            entropy_bits: parse(fields[4], line_no)?,
            mse: parse(fields[5], line_no)?,
            task_accuracy: parse(fields[6], line_no)?,
            task_distortion_bits: parse(fields[7], line_no)?,
            i_xhat_y_bits: parse(fields[8], line_no)?,
            transfer_accuracy: if fields[9].is_empty() {
                None
            } else {
                Some(parse(fields[9], line_no)?)
            },
        });
    }
    Ok(records)
}

/// Writes records to `path` in the chosen format; I/O failures carry the
/// path.
pub fn emit_results(
    records: &[ExperimentRecord],
    path: &Path,
    format: OutputFormat,
) -> Result<()> {
    let text = match format {
        OutputFormat::Csv => records_to_csv(records),
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(records)
                .map_err(|e| Error::invalid(format!("serializing records: {e}")))?;
            s.push('\n');
            s
        }
    };
    std::fs::write(path, text)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::kl_divergence;

    /// I(X;Y) of the reference source (4 symbols, 2 labels, defaults,
    /// seed 7), frozen from the first validated run. With hard labels and a
    /// uniform prior over a balanced assignment this is exactly ln 2.
    const REFERENCE_TASK_INFO_NATS: f64 = 0.693_147_180_559_945_3;

    fn reference_source() -> SemanticSource {
        generate_semantic_source(4, 2, &GeometryConfig::default(), 7).unwrap()
    }

    /// A source whose codebook reproduces every embedding exactly, so a
    /// noiseless pipeline at small lambda can be fully transparent.
    fn transparent_source() -> SemanticSource {
        let embeddings = vec![
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![2.0, 2.0],
        ];
        let py_given_x = ConditionalDistribution::from_rows(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        SemanticSource::new(
            Distribution::uniform(4),
            py_given_x,
            embeddings.clone(),
            None,
            Some(embeddings),
        )
        .unwrap()
    }

    fn flip_config(src: SemanticSource, lambdas: &[f64], betas: &[f64], flips: &[f64]) -> ExperimentConfig {
        ExperimentConfig::new(
            src,
            lambdas.to_vec(),
            betas.to_vec(),
            ChannelGrid::FlipProb(flips.to_vec()),
        )
    }

    #[test]
    fn generated_source_is_deterministic() {
        let a = reference_source();
        let b = reference_source();
        assert_eq!(a.px.as_slice(), b.px.as_slice());
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.py_given_x, b.py_given_x);
        assert_eq!(a.alt_py_given_x, b.alt_py_given_x);
    }

    #[test]
    fn reference_source_task_information_is_frozen() {
        let info = reference_source().task_information();
        assert!(info > 0.0);
        assert!(
            (info - REFERENCE_TASK_INFO_NATS).abs() < 1e-12,
            "I(X;Y) = {info:.17e} drifted from the frozen constant"
        );
    }

    #[test]
    fn hard_membership_saturates_task_information() {
        let geometry = GeometryConfig {
            temperature: 0.0,
            ..GeometryConfig::default()
        };
        let src = generate_semantic_source(4, 4, &geometry, 3).unwrap();
        let h_x = entropy(&src.px);
        assert!((src.task_information() - h_x).abs() < 1e-12);
        assert!((h_x - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_prior_is_seeded_and_non_uniform() {
        let geometry = GeometryConfig {
            dirichlet_prior: true,
            ..GeometryConfig::default()
        };
        let a = generate_semantic_source(6, 2, &geometry, 11).unwrap();
        let b = generate_semantic_source(6, 2, &geometry, 11).unwrap();
        assert_eq!(a.px.as_slice(), b.px.as_slice());
        let spread = a
            .px
            .iter()
            .map(|p| (p - 1.0 / 6.0).abs())
            .fold(0.0, f64::max);
        assert!(spread > 1e-3, "dirichlet prior came out uniform: {:?}", a.px);
    }

    #[test]
    fn alt_task_is_a_different_partition() {
        let src = reference_source();
        let alt = src.alt_py_given_x.as_ref().unwrap();
        let gap: f64 = (0..src.n_symbols())
            .map(|x| kl_divergence(src.py_given_x.row(x), alt.row(x)).unwrap())
            .sum();
        assert!(gap > 0.01, "alt task too close to the primary: {gap}");
    }

    #[test]
    fn generate_rejects_bad_shapes() {
        let g = GeometryConfig::default();
        assert!(generate_semantic_source(3, 5, &g, 0).is_err());
        assert!(generate_semantic_source(4, 1, &g, 0).is_err());
        let bad = GeometryConfig {
            jitter: -0.1,
            ..GeometryConfig::default()
        };
        assert!(generate_semantic_source(4, 2, &bad, 0).is_err());
    }

    #[test]
    fn argmax_quantizer_hardens_with_ties_to_lowest() {
        let src = reference_source();
        let pixel = mse_matrix(&src).unwrap();
        let mut result = solve(&src, &pixel, &SolverConfig::new(0.5)).unwrap();
        result.mapping = ConditionalDistribution::from_rows(vec![
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.1, 0.2, 0.7, 0.0],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let q = design_quantizer(&result, MappingMode::Argmax).unwrap();
        assert_eq!(hard_labels(&q), vec![0, 2, 0, 3]);
        for x in 0..4 {
            let row = q.row(x).as_slice();
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(row.iter().all(|&p| p == 0.0 || p == 1.0));
        }

        result.converged = false;
        assert!(design_quantizer(&result, MappingMode::Argmax).is_err());
    }

    #[test]
    fn stochastic_sampling_matches_the_mapping() {
        let mapping = ConditionalDistribution::from_rows(vec![
            vec![0.2, 0.5, 0.3],
            vec![0.7, 0.1, 0.2],
        ])
        .unwrap();
        let n = 100_000;
        for x in 0..2 {
            let outs = sample_quantizer_outputs(&mapping, &vec![x; n], 42).unwrap();
            let mut counts = [0usize; 3];
            for o in outs {
                counts[o] += 1;
            }
            for (j, &c) in counts.iter().enumerate() {
                let p = mapping.prob(x, j);
                let sigma = (p * (1.0 - p) / n as f64).sqrt();
                assert!(
                    ((c as f64 / n as f64) - p).abs() <= 3.0 * sigma,
                    "row {x} output {j}: {c} of {n} vs p = {p}"
                );
            }
        }
        assert!(sample_quantizer_outputs(&mapping, &[5], 0).is_err());
    }

    #[test]
    fn pipeline_is_transparent_without_noise() {
        let mut cfg = flip_config(transparent_source(), &[0.05], &[0.0], &[0.0]);
        cfg.mapping_mode = MappingMode::Argmax;
        let out = run_pipeline(&cfg).unwrap();
        assert!(out.skipped.is_empty());
        let r = &out.records[0];
        assert!((r.task_accuracy - 1.0).abs() < 1e-12, "accuracy {}", r.task_accuracy);
        assert!(r.mse < 1e-9, "mse {}", r.mse);
        assert!(r.task_distortion_bits < 1e-9);
    }

    #[test]
    fn pipeline_records_are_sorted_and_consistent() {
        let cfg = flip_config(
            reference_source(),
            &[1.0, 0.3],
            &[1.0, 0.0],
            &[0.1, 0.0, 0.3],
        );
        let out = run_pipeline(&cfg).unwrap();
        assert!(out.skipped.is_empty());
        assert_eq!(out.records.len(), 12);
        for w in out.records.windows(2) {
            let key = |r: &ExperimentRecord| (r.lambda, r.beta, r.snr_or_flip);
            assert!(key(&w[0]) <= key(&w[1]), "records out of order");
        }
        for r in &out.records {
            assert!(r.rate_bits <= r.entropy_bits + 1e-9);
            assert!(r.i_xhat_y_bits <= r.rate_bits + 1e-9);
            assert!((0.0..=1.0).contains(&r.task_accuracy));
            assert!(r.mse >= 0.0 && r.task_distortion_bits >= 0.0);
        }
        let again = run_pipeline(&cfg).unwrap();
        assert_eq!(out, again, "pipeline is not deterministic");
    }

    #[test]
    fn accuracy_and_task_mi_fall_with_flip() {
        let cfg = flip_config(reference_source(), &[0.5], &[1.0], &[0.0, 0.1, 0.2, 0.4]);
        let out = run_pipeline(&cfg).unwrap();
        for w in out.records.windows(2) {
            assert!(
                w[1].task_accuracy <= w[0].task_accuracy + 1e-9,
                "accuracy rose with flip: {} -> {}",
                w[0].task_accuracy,
                w[1].task_accuracy
            );
            assert!(w[1].i_xhat_y_bits <= w[0].i_xhat_y_bits + 1e-9);
        }
    }

    #[test]
    fn half_flip_on_binary_source_hits_chance() {
        let geometry = GeometryConfig {
            temperature: 0.0,
            ..GeometryConfig::default()
        };
        let src = generate_semantic_source(2, 2, &geometry, 5).unwrap();
        let mut cfg = flip_config(src, &[0.05], &[0.0], &[0.0, 0.5]);
        cfg.mapping_mode = MappingMode::Argmax;
        let out = run_pipeline(&cfg).unwrap();
        assert!((out.records[0].task_accuracy - 1.0).abs() < 1e-12);
        assert!((out.records[1].task_accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_cell_matches_classical_solver() {
        let src = reference_source();
        let cfg = flip_config(src.clone(), &[0.7], &[0.0], &[0.0]);
        let out = run_pipeline(&cfg).unwrap();
        let r = &out.records[0];
        let pixel = mse_matrix(&src).unwrap();
        let direct = solve(&src, &pixel, &SolverConfig::new(0.7)).unwrap();
        assert!((r.rate_bits - bits(direct.rate_nats)).abs() < 1e-8);
        assert!((r.mse - direct.pixel_distortion).abs() < 1e-8);
    }

    #[test]
    fn snr_axis_resolves_to_flip_probabilities() {
        let mut cfg = ExperimentConfig::new(
            reference_source(),
            vec![0.5],
            vec![0.0],
            ChannelGrid::SnrDb {
                snrs: vec![10.0, 0.0],
                modulation: Modulation::Bpsk,
                kind: ChannelKind::Awgn,
                n_samples: 40_000,
            },
        );
        cfg.seed = 9;
        let out = run_pipeline(&cfg).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[0].snr_or_flip, 0.0);
        assert_eq!(out.records[1].snr_or_flip, 10.0);
        assert!(out.records[1].task_accuracy >= out.records[0].task_accuracy - 1e-12);
        assert!(out.records[1].i_xhat_y_bits >= out.records[0].i_xhat_y_bits - 1e-12);
    }

    #[test]
    fn unconverged_cells_are_skipped_not_fatal() {
        let mut cfg = flip_config(reference_source(), &[0.5, 1.0], &[0.0], &[0.0, 0.2]);
        cfg.solver_max_iters = Some(1);
        let out = run_pipeline(&cfg).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.skipped.len(), 4);
        assert!(out.skipped.iter().all(|s| s.reason.contains("converged")));
    }

    #[test]
    fn custom_distortion_override_is_used() {
        use crate::distortion::hamming_matrix;
        let src = transparent_source();
        let mut cfg = flip_config(src.clone(), &[0.05], &[0.0], &[0.0, 0.2]);
        cfg.mapping_mode = MappingMode::Argmax;
        cfg.d_rd = Some(hamming_matrix(src.n_symbols()));
        let out = run_pipeline(&cfg).unwrap();
        assert!(out.records[0].mse < 1e-12);
        assert!((out.records[1].mse - 0.2).abs() < 1e-12);

        cfg.d_rd = Some(hamming_matrix(src.n_symbols() + 1));
        assert!(run_pipeline(&cfg).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_grids() {
        let src = reference_source();
        assert!(flip_config(src.clone(), &[], &[0.0], &[0.0]).validate().is_err());
        assert!(flip_config(src.clone(), &[0.5], &[-1.0], &[0.0]).validate().is_err());
        assert!(flip_config(src.clone(), &[0.0], &[0.0], &[0.0]).validate().is_err());
        assert!(flip_config(src, &[0.5], &[0.0], &[1.0]).validate().is_err());
    }

    #[test]
    fn transfer_scores_identity_and_constant_mappings() {
        let src = reference_source();
        let n = src.n_symbols();
        let identity = ConditionalDistribution::identity(n);
        let constant =
            ConditionalDistribution::from_rows(vec![{
                let mut row = vec![0.0; n];
                row[0] = 1.0;
                row
            }; n])
            .unwrap();
        let records = transfer_eval(&src, &[(50.0, constant), (0.0, identity)]).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records[0].beta == 0.0 && records[1].beta == 50.0);
        assert!((records[0].task_a_accuracy - 1.0).abs() < 1e-12);
        assert!((records[0].task_b_accuracy - 1.0).abs() < 1e-12);
        assert!(records[1].task_b_accuracy <= 1.0);
    }

    #[test]
    fn beta_zero_mapping_is_task_blind() {
        let src = reference_source();
        let alt_src = SemanticSource::new(
            src.px.clone(),
            src.alt_py_given_x.clone().unwrap(),
            src.embeddings.clone(),
            None,
            src.xhat_embeddings.clone(),
        )
        .unwrap();
        let pixel = mse_matrix(&src).unwrap();
        let cfg = SolverConfig::new(0.6);
        let a = solve(&src, &pixel, &cfg).unwrap();
        let b = solve(&alt_src, &pixel, &cfg).unwrap();
        for x in 0..src.n_symbols() {
            for xhat in 0..a.mapping.n_outputs() {
                assert!((a.mapping.prob(x, xhat) - b.mapping.prob(x, xhat)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transfer_requires_an_alt_task() {
        let geometry = GeometryConfig {
            alt_task: false,
            ..GeometryConfig::default()
        };
        let src = generate_semantic_source(4, 2, &geometry, 7).unwrap();
        let identity = ConditionalDistribution::identity(4);
        assert!(transfer_eval(&src, &[(0.0, identity)]).is_err());
    }

    #[test]
    fn csv_round_trips_at_format_precision() {
        let records = vec![
            ExperimentRecord {
                lambda: 0.5,
                beta: 2.0,
                snr_or_flip: 0.1,
                rate_bits: 1.2345678901,
                entropy_bits: 1.9876543210,
                mse: 0.000123456789,
                task_accuracy: 0.875,
                task_distortion_bits: 0.25,
                i_xhat_y_bits: 0.5,
                transfer_accuracy: Some(0.75),
            },
            ExperimentRecord {
                lambda: 1.0,
                beta: 0.0,
                snr_or_flip: 0.0,
                rate_bits: 2.0,
                entropy_bits: 2.0,
                mse: 0.0,
                task_accuracy: 1.0,
                task_distortion_bits: 0.0,
                i_xhat_y_bits: 1.0,
                transfer_accuracy: None,
            },
        ];
        let text = records_to_csv(&records);
        assert!(text.starts_with(CSV_HEADER));
        let parsed = records_from_csv(&text).unwrap();
        assert_eq!(parsed.len(), records.len());
        for (p, r) in parsed.iter().zip(&records) {
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-7 * b.abs().max(1.0);
            assert!(close(p.rate_bits, r.rate_bits));
            assert!(close(p.mse, r.mse));
            assert_eq!(p.transfer_accuracy.is_some(), r.transfer_accuracy.is_some());
        }

        assert_eq!(records_to_csv(&[]), format!("{CSV_HEADER}\n"));
        assert!(records_from_csv("nonsense\n1,2\n").is_err());
    }

    #[test]
    fn json_round_trips_exactly() {
        let records = vec![ExperimentRecord {
            lambda: 0.3,
            beta: 1.5,
            snr_or_flip: 0.05,
            rate_bits: 1.125,
            entropy_bits: 1.5,
            mse: 0.0625,
            task_accuracy: 0.9375,
            task_distortion_bits: 0.0078125,
            i_xhat_y_bits: 0.84375,
            transfer_accuracy: None,
        }];
        let text = serde_json::to_string(&records).unwrap();
        let parsed: Vec<ExperimentRecord> = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, records);
    }

    #[test]
    fn emit_results_writes_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let records = run_pipeline(&flip_config(reference_source(), &[0.5], &[0.0], &[0.0]))
            .unwrap()
            .records;

        let csv_path = dir.path().join("out.csv");
        emit_results(&records, &csv_path, OutputFormat::Csv).unwrap();
        let parsed = records_from_csv(&std::fs::read_to_string(&csv_path).unwrap()).unwrap();
        assert_eq!(parsed.len(), records.len());

        let json_path = dir.path().join("out.json");
        emit_results(&records, &json_path, OutputFormat::Json).unwrap();
        let parsed: Vec<ExperimentRecord> =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed, records);

        let missing = dir.path().join("no-such-dir").join("out.csv");
        assert!(matches!(
            emit_results(&records, &missing, OutputFormat::Csv),
            Err(Error::Io(_))
        ));
    }
}
