//! `semrd`: command-line driver for the semantic rate-distortion toolkit.
//!
//! Sources are JSON files holding either an explicit instance (`px`,
//! `py_given_x`, `embeddings`, optional `alt_py_given_x`, `xhat_embeddings`,
//! and a `d_rd` cost override where `null` entries mean unreachable pairs)
//! or a generator spec (`n_symbols`, `n_labels`, optional `geometry` and
//! `seed`). Exit codes: 0 success, 1 failed oracle check, 2 invalid input,
//! 3 infeasible instance, 4 I/O error.

use clap::{Args, Parser, Subcommand, ValueEnum};
use semrd_core::channel::{measure_ser, ChannelConfig, ChannelKind, CsiMode, Modulation};
use semrd_core::codec::{
    arithmetic_decode, arithmetic_encode, fit_gmm_pmf, quantize_inference, quantize_train_proxy,
    rate_loss, EmConfig,
};
use semrd_core::distortion::{mse_matrix, DistortionKind, DistortionMatrix, SemanticSource};
use semrd_core::error::{Error, Result};
use semrd_core::estimators::{club_estimate, fit_gaussian_conditional, SampleSet};
use semrd_core::experiments::{
    design_quantizer, emit_results, generate_semantic_source, records_to_csv, run_pipeline,
    transfer_eval, ChannelGrid, ExperimentConfig, GeometryConfig, MappingMode, OutputFormat,
};
use semrd_core::prob::{entropy, ConditionalDistribution, Distribution};
use semrd_core::solver::{
    brute_force_solve, mi_with_task, rd_curve, solve, verify_self_consistency, SolverConfig,
};
use serde::Deserialize;
use serde_json::json;
use std::f64::consts::LN_2;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "semrd", version, about = "Task-oriented semantic rate-distortion toolkit")]
struct Cli {
    /// Seed for stochastic operations (channel measurement, codec fitting).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one (lambda, beta) trade-off point on a source.
    Solve(SolveArgs),
    /// Sweep lambda at fixed beta and emit the rate-distortion curve.
    RdCurve(RdCurveArgs),
    /// Run the sweep described by a JSON config through the full pipeline.
    Pipeline(PipelineArgs),
    /// Solve per-beta mappings and score them on the source's two tasks.
    Transfer(TransferArgs),
    /// Estimate mutual information from paired samples (CSV: x0,..,y0,..).
    MiClub(MiClubArgs),
    /// Integer codec: mixture entropy model plus range coder.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Channel simulation.
    #[command(subcommand)]
    Channel(ChannelCommand),
    /// Check the solver against the exhaustive small-instance oracle.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args)]
struct RdCurveArgs {
    #[arg(long)]
    source: PathBuf,
    /// Comma-separated lambda grid.
    #[arg(long, value_delimiter = ',', required = true)]
    lambdas: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON config: source spec, lambda/beta grids, flip_prob_grid or
    /// snr_grid, mapping_mode, seed, output.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    lambda: f64,
    /// Comma-separated beta grid; one mapping is solved per entry.
    #[arg(long, value_delimiter = ',', required = true)]
    betas: Vec<f64>,
}

#[derive(Args)]
struct MiClubArgs {
    /// CSV of paired samples with header x0,..,x{m},y0,..,y{k}.
    #[arg(long)]
    samples: PathBuf,
}

#[derive(Subcommand)]
enum CodecCommand {
    /// Quantize whitespace-separated values, fit the entropy model, and
    /// range-code them (binary payload; use --out for a file).
    Encode(EncodeArgs),
    /// Decode a payload back to one integer per line.
    Decode(DecodeArgs),
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Mixture components in the entropy model.
    #[arg(long, default_value_t = 2)]
    components: usize,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
}

#[derive(Subcommand)]
enum ChannelCommand {
    /// Measure symbol and bit error rates by Monte Carlo.
    Ser(SerArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModArg {
    Bpsk,
    Qam16,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Awgn,
    Rayleigh,
}

#[derive(Args)]
struct SerArgs {
    #[arg(long, value_enum)]
    modulation: ModArg,
    #[arg(long = "channel", value_enum)]
    kind: KindArg,
    /// SNR in dB.
    #[arg(long)]
    snr: f64,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    /// Draw an independent fade per symbol instead of per block.
    #[arg(long)]
    per_symbol_fading: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// Simplex grid step of the exhaustive search.
    #[arg(long, default_value_t = 0.02)]
    step: f64,
    /// Largest acceptable solver excess over the oracle Lagrangian.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

// ---------------------------------------------------------------------------
// Source loading.
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratedSpec {
    n_symbols: usize,
    n_labels: usize,
    #[serde(default)]
    geometry: GeometryConfig,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceFile {
    px: Vec<f64>,
    py_given_x: Vec<Vec<f64>>,
    embeddings: Vec<Vec<f64>>,
    #[serde(default)]
    alt_py_given_x: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    xhat_embeddings: Option<Vec<Vec<f64>>>,
    /// Cost override d_rd(x, x_hat); a null entry is an unreachable pair.
    #[serde(default)]
    d_rd: Option<Vec<Vec<Option<f64>>>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FileSourceSpec {
    Generated(GeneratedSpec),
    Inline(SourceFile),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SourceSpec {
    Path(String),
    Generated(GeneratedSpec),
    Inline(SourceFile),
}

struct LoadedSource {
    source: SemanticSource,
    d_rd: Option<DistortionMatrix>,
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::invalid(format!("{what}: {e}")))
}

fn build_inline(file: SourceFile) -> Result<LoadedSource> {
    let px = Distribution::new(file.px)?;
    let py_given_x = ConditionalDistribution::from_rows(file.py_given_x)?;
    let alt = file
        .alt_py_given_x
        .map(ConditionalDistribution::from_rows)
        .transpose()?;
    let source = SemanticSource::new(px, py_given_x, file.embeddings, alt, file.xhat_embeddings)?;
    let d_rd = file
        .d_rd
        .map(|rows| {
            let costs = rows
                .into_iter()
                .map(|r| r.into_iter().map(|c| c.unwrap_or(f64::INFINITY)).collect())
                .collect();
            DistortionMatrix::new(costs, DistortionKind::Pixel)
        })
        .transpose()?;
    Ok(LoadedSource { source, d_rd })
}

fn build_source(spec: FileSourceSpec) -> Result<LoadedSource> {
    match spec {
        FileSourceSpec::Generated(g) => Ok(LoadedSource {
            source: generate_semantic_source(g.n_symbols, g.n_labels, &g.geometry, g.seed)?,
            d_rd: None,
        }),
        FileSourceSpec::Inline(file) => build_inline(file),
    }
}

fn load_source(path: &Path) -> Result<LoadedSource> {
    let text = read_file(path)?;
    let spec: FileSourceSpec = parse_json(&text, &format!("source {}", path.display()))?;
    build_source(spec)
}

fn resolve_source_spec(spec: SourceSpec) -> Result<LoadedSource> {
    match spec {
        SourceSpec::Path(p) => load_source(Path::new(&p)),
        SourceSpec::Generated(g) => build_source(FileSourceSpec::Generated(g)),
        SourceSpec::Inline(f) => build_inline(f),
    }
}

fn pixel_matrix(loaded: &LoadedSource) -> Result<DistortionMatrix> {
    match &loaded.d_rd {
        Some(d) => Ok(d.clone()),
        None => mse_matrix(&loaded.source),
    }
}

// ---------------------------------------------------------------------------
// Output plumbing.
// ---------------------------------------------------------------------------

fn bits(nats: f64) -> f64 {
    nats / LN_2
}

fn fnum(v: f64) -> String {
    format!("{v:.8e}")
}

fn write_out(text: &str, out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Key/value CSV for single-record outputs.
fn kv_csv(pairs: &[(&str, String)]) -> String {
    let mut out = String::from("key,value\n");
    for (k, v) in pairs {
        out.push_str(k);
        out.push(',');
        out.push_str(v);
        out.push('\n');
    }
    out
}

fn emit_object(cli: &Cli, value: &serde_json::Value, pairs: &[(&str, String)]) -> Result<()> {
    let text = match cli.format {
        Format::Json => format!("{:#}\n", value),
        Format::Csv => kv_csv(pairs),
    };
    write_out(&text, &cli.out)
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

fn cmd_solve(cli: &Cli, args: &SolveArgs) -> Result<u8> {
    let loaded = load_source(&args.source)?;
    let pixel = pixel_matrix(&loaded)?;
    let mut cfg = SolverConfig::new(args.lambda).with_beta(args.beta);
    if let Some(t) = args.tol {
        cfg = cfg.with_tol(t);
    }
    if let Some(n) = args.max_iters {
        cfg = cfg.with_max_iters(n);
    }
    let result = solve(&loaded.source, &pixel, &cfg)?;
    let residual = verify_self_consistency(&loaded.source, &pixel, &cfg, &result);
    let i_ty_bits = bits(mi_with_task(&loaded.source, &result.mapping));
    let entropy_bits = bits(entropy(&result.pxhat));
    let rate_bits = bits(result.rate_nats);
    let task_bits = bits(result.task_distortion_nats);

    let mapping: Vec<Vec<f64>> = result
        .mapping
        .rows()
        .iter()
        .map(|r| r.as_slice().to_vec())
        .collect();
    let value = json!({
        "lambda": args.lambda,
        "beta": args.beta,
        "converged": result.converged,
        "iterations": result.iterations,
        "rate_bits": rate_bits,
        "entropy_bits": entropy_bits,
        "pixel_distortion": result.pixel_distortion,
        "task_distortion_bits": task_bits,
        "i_xhat_y_bits": i_ty_bits,
        "lagrangian_nats": result.lagrangian,
        "self_consistency": residual,
        "mapping": mapping,
        "pxhat": result.pxhat.as_slice(),
    });
    let pairs = [
        ("lambda", fnum(args.lambda)),
        ("beta", fnum(args.beta)),
        ("converged", result.converged.to_string()),
        ("iterations", result.iterations.to_string()),
        ("rate_bits", fnum(rate_bits)),
        ("entropy_bits", fnum(entropy_bits)),
        ("pixel_distortion", fnum(result.pixel_distortion)),
        ("task_distortion_bits", fnum(task_bits)),
        ("i_xhat_y_bits", fnum(i_ty_bits)),
        ("lagrangian_nats", fnum(result.lagrangian)),
        ("self_consistency", fnum(residual)),
    ];
    emit_object(cli, &value, &pairs)?;
    Ok(0)
}

fn cmd_rd_curve(cli: &Cli, args: &RdCurveArgs) -> Result<u8> {
    let loaded = load_source(&args.source)?;
    let pixel = pixel_matrix(&loaded)?;
    let curve = rd_curve(
        &loaded.source,
        &pixel,
        &args.lambdas,
        args.beta,
        &SolverConfig::new(1.0),
    );
    for s in &curve.skipped {
        eprintln!("warning: lambda = {} skipped: {}", s.lambda, s.reason);
    }
    let text = match cli.format {
        Format::Csv => {
            let mut out =
                String::from("lambda,beta,rate_bits,pixel_distortion,task_distortion_bits,task_mi_bits\n");
            for p in &curve.points {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    fnum(p.lambda),
                    fnum(p.beta),
                    fnum(p.rate_bits),
                    fnum(p.pixel_distortion),
                    fnum(p.task_distortion_bits),
                    fnum(p.task_mi_bits),
                ));
            }
            out
        }
        Format::Json => {
            let points: Vec<_> = curve
                .points
                .iter()
                .map(|p| {
                    json!({
                        "lambda": p.lambda,
                        "beta": p.beta,
                        "rate_bits": p.rate_bits,
                        "pixel_distortion": p.pixel_distortion,
                        "task_distortion_bits": p.task_distortion_bits,
                        "task_mi_bits": p.task_mi_bits,
                    })
                })
                .collect();
            let skipped: Vec<_> = curve
                .skipped
                .iter()
                .map(|s| json!({ "lambda": s.lambda, "reason": s.reason }))
                .collect();
            format!("{:#}\n", json!({ "points": points, "skipped": skipped }))
        }
    };
    write_out(&text, &cli.out)?;
    Ok(0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SnrGridFile {
    snrs: Vec<f64>,
    modulation: Modulation,
    kind: ChannelKind,
    #[serde(default = "default_ser_samples")]
    n_samples: usize,
}

fn default_ser_samples() -> usize {
    100_000
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineFile {
    source: SourceSpec,
    lambda_grid: Vec<f64>,
    beta_grid: Vec<f64>,
    #[serde(default)]
    flip_prob_grid: Option<Vec<f64>>,
    #[serde(default)]
    snr_grid: Option<SnrGridFile>,
    #[serde(default)]
    mapping_mode: Option<MappingMode>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    output: Option<PathBuf>,
    #[serde(default)]
    solver_max_iters: Option<usize>,
    #[serde(default)]
    solver_tol: Option<f64>,
}

fn cmd_pipeline(cli: &Cli, args: &PipelineArgs) -> Result<u8> {
    let text = read_file(&args.config)?;
    let file: PipelineFile = parse_json(&text, &format!("config {}", args.config.display()))?;
    let loaded = resolve_source_spec(file.source)?;

    let channel_grid = match (file.flip_prob_grid, file.snr_grid) {
        (Some(flips), None) => ChannelGrid::FlipProb(flips),
        (None, Some(g)) => ChannelGrid::SnrDb {
            snrs: g.snrs,
            modulation: g.modulation,
            kind: g.kind,
            n_samples: g.n_samples,
        },
        (None, None) => {
            return Err(Error::invalid(
                "config needs a flip_prob_grid or an snr_grid",
            ))
        }
        (Some(_), Some(_)) => {
            return Err(Error::invalid(
                "config must pick one of flip_prob_grid and snr_grid, not both",
            ))
        }
    };

    let mut cfg = ExperimentConfig::new(
        loaded.source,
        file.lambda_grid,
        file.beta_grid,
        channel_grid,
    );
    cfg.d_rd = loaded.d_rd;
    cfg.mapping_mode = file.mapping_mode.unwrap_or(MappingMode::Stochastic);
    cfg.seed = file.seed.unwrap_or(cli.seed);
    cfg.solver_max_iters = file.solver_max_iters;
    cfg.solver_tol = file.solver_tol;

    let out = run_pipeline(&cfg)?;
    for s in &out.skipped {
        eprintln!(
            "warning: cell (lambda={}, beta={}, channel={}) skipped: {}",
            s.lambda, s.beta, s.snr_or_flip, s.reason
        );
    }

    let format = match cli.format {
        Format::Csv => OutputFormat::Csv,
        Format::Json => OutputFormat::Json,
    };
    match cli.out.clone().or(file.output) {
        Some(path) => emit_results(&out.records, &path, format)?,
        None => {
            let text = match format {
                OutputFormat::Csv => records_to_csv(&out.records),
                OutputFormat::Json => {
                    let mut s = serde_json::to_string_pretty(&out.records)
                        .map_err(|e| Error::invalid(format!("serializing records: {e}")))?;
                    s.push('\n');
                    s
                }
            };
            print!("{text}");
        }
    }
    Ok(0)
}

fn cmd_transfer(cli: &Cli, args: &TransferArgs) -> Result<u8> {
    let loaded = load_source(&args.source)?;
    let pixel = pixel_matrix(&loaded)?;
    let mut mappings = Vec::with_capacity(args.betas.len());
    for &beta in &args.betas {
        let result = solve(
            &loaded.source,
            &pixel,
            &SolverConfig::new(args.lambda).with_beta(beta),
        )?;
        mappings.push((beta, design_quantizer(&result, MappingMode::Stochastic)?));
    }
    let records = transfer_eval(&loaded.source, &mappings)?;
    let text = match cli.format {
        Format::Csv => {
            let mut out = String::from("beta,task_a_accuracy,task_b_accuracy\n");
            for r in &records {
                out.push_str(&format!(
                    "{},{},{}\n",
                    fnum(r.beta),
                    fnum(r.task_a_accuracy),
                    fnum(r.task_b_accuracy)
                ));
            }
            out
        }
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&records)
                .map_err(|e| Error::invalid(format!("serializing records: {e}")))?;
            s.push('\n');
            s
        }
    };
    write_out(&text, &cli.out)?;
    Ok(0)
}

fn parse_sample_csv(text: &str) -> Result<SampleSet> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid("sample file is empty"))?;
    let names: Vec<&str> = header.split(',').collect();
    let dim_x = names.iter().take_while(|n| n.starts_with('x')).count();
    let dim_y = names.len() - dim_x;
    for (i, name) in names.iter().enumerate() {
        let expected = if i < dim_x {
            format!("x{i}")
        } else {
            format!("y{}", i - dim_x)
        };
        if *name != expected {
            return Err(Error::invalid(format!(
                "sample header column {i} is '{name}', expected '{expected}'"
            )));
        }
    }
    if dim_x == 0 || dim_y == 0 {
        return Err(Error::invalid("sample header needs x and y columns"));
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim_x + dim_y {
            return Err(Error::invalid(format!(
                "sample line {}: expected {} fields, got {}",
                i + 2,
                dim_x + dim_y,
                fields.len()
            )));
        }
        let parse = |f: &str| {
            f.parse::<f64>()
                .map_err(|_| Error::invalid(format!("sample line {}: '{f}' is not a number", i + 2)))
        };
        xs.push(fields[..dim_x].iter().map(|f| parse(f)).collect::<Result<Vec<_>>>()?);
        ys.push(fields[dim_x..].iter().map(|f| parse(f)).collect::<Result<Vec<_>>>()?);
    }
    SampleSet::new(xs, ys)
}

fn cmd_mi_club(cli: &Cli, args: &MiClubArgs) -> Result<u8> {
    let samples = parse_sample_csv(&read_file(&args.samples)?)?;
    let model = fit_gaussian_conditional(&samples)?;
    let mi_nats = club_estimate(&samples, &model)?;
    let value = json!({
        "n_samples": samples.len(),
        "dim_x": samples.dim_x(),
        "dim_y": samples.dim_y(),
        "mi_nats": mi_nats,
        "mi_bits": bits(mi_nats),
    });
    let pairs = [
        ("n_samples", samples.len().to_string()),
        ("dim_x", samples.dim_x().to_string()),
        ("dim_y", samples.dim_y().to_string()),
        ("mi_nats", fnum(mi_nats)),
        ("mi_bits", fnum(bits(mi_nats))),
    ];
    emit_object(cli, &value, &pairs)?;
    Ok(0)
}

fn cmd_codec_encode(cli: &Cli, args: &EncodeArgs) -> Result<u8> {
    let text = read_file(&args.input)?;
    let values = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::invalid(format!("'{t}' is not a number")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let stream = quantize_inference(&values)?;
    let proxy = quantize_train_proxy(&values, cli.seed);
    let model = fit_gmm_pmf(&proxy, args.components, &EmConfig::seeded(cli.seed))?;
    let payload = arithmetic_encode(&stream, &model)?;

    let loss = rate_loss(&model, &stream)
        .map(|b| format!("{b:.1}"))
        .unwrap_or_else(|_| "n/a (escape symbols)".into());
    eprintln!(
        "{} symbols -> {} bytes ({} header bits), model rate {} bits",
        stream.len(),
        payload.bytes.len(),
        payload.header_bits(),
        loss,
    );
    match &cli.out {
        Some(path) => std::fs::write(path, &payload.bytes).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&payload.bytes)?;
        }
    }
    Ok(0)
}

fn cmd_codec_decode(cli: &Cli, args: &DecodeArgs) -> Result<u8> {
    let bytes = std::fs::read(&args.input).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", args.input.display())))
    })?;
    let stream = arithmetic_decode(&bytes)?;
    let text = match cli.format {
        Format::Json => format!(
            "{:#}\n",
            json!({
                "count": stream.len(),
                "z_min": stream.z_min(),
                "z_max": stream.z_max(),
                "values": stream.values(),
            })
        ),
        Format::Csv => {
            let mut out = String::from("value\n");
            for v in stream.values() {
                out.push_str(&v.to_string());
                out.push('\n');
            }
            out
        }
    };
    write_out(&text, &cli.out)?;
    Ok(0)
}

fn cmd_channel_ser(cli: &Cli, args: &SerArgs) -> Result<u8> {
    let kind = match args.kind {
        KindArg::Awgn => ChannelKind::Awgn,
        KindArg::Rayleigh => ChannelKind::Rayleigh,
    };
    let modulation = match args.modulation {
        ModArg::Bpsk => Modulation::Bpsk,
        ModArg::Qam16 => Modulation::Qam16,
    };
    let mut cfg = ChannelConfig::new(kind, args.snr, cli.seed, CsiMode::Perfect)?;
    cfg.per_symbol_fading = args.per_symbol_fading;
    let report = measure_ser(modulation, &cfg, args.n)?;
    let value = json!({
        "snr_db": args.snr,
        "n_symbols": report.n_symbols,
        "n_bits": report.n_bits,
        "symbol_errors": report.symbol_errors,
        "bit_errors": report.bit_errors,
        "ser": report.ser,
        "ber": report.ber,
    });
    let pairs = [
        ("snr_db", fnum(args.snr)),
        ("n_symbols", report.n_symbols.to_string()),
        ("n_bits", report.n_bits.to_string()),
        ("symbol_errors", report.symbol_errors.to_string()),
        ("bit_errors", report.bit_errors.to_string()),
        ("ser", fnum(report.ser)),
        ("ber", fnum(report.ber)),
    ];
    emit_object(cli, &value, &pairs)?;
    Ok(0)
}

fn cmd_oracle(cli: &Cli, args: &OracleArgs) -> Result<u8> {
    let loaded = load_source(&args.source)?;
    let pixel = pixel_matrix(&loaded)?;
    let cfg = SolverConfig::new(args.lambda).with_beta(args.beta);
    let result = solve(&loaded.source, &pixel, &cfg)?;
    let oracle = brute_force_solve(&loaded.source, &pixel, &cfg, args.step)?;
    let gap = result.lagrangian - oracle.lagrangian;
    let within = gap <= args.tolerance;
    let value = json!({
        "lambda": args.lambda,
        "beta": args.beta,
        "solver_lagrangian": result.lagrangian,
        "oracle_lagrangian": oracle.lagrangian,
        "gap": gap,
        "candidate_space": oracle.candidate_space.to_string(),
        "within_tolerance": within,
    });
    let pairs = [
        ("lambda", fnum(args.lambda)),
        ("beta", fnum(args.beta)),
        ("solver_lagrangian", fnum(result.lagrangian)),
        ("oracle_lagrangian", fnum(oracle.lagrangian)),
        ("gap", fnum(gap)),
        ("candidate_space", oracle.candidate_space.to_string()),
        ("within_tolerance", within.to_string()),
    ];
    emit_object(cli, &value, &pairs)?;
    Ok(if within { 0 } else { 1 })
}

fn run(cli: &Cli) -> Result<u8> {
    #[cfg(feature = "parallel")]
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    if cli.threads.is_some() {
        eprintln!("warning: built without the parallel feature; --threads has no effect");
    }

    match &cli.command {
        Command::Solve(args) => cmd_solve(cli, args),
        Command::RdCurve(args) => cmd_rd_curve(cli, args),
        Command::Pipeline(args) => cmd_pipeline(cli, args),
        Command::Transfer(args) => cmd_transfer(cli, args),
        Command::MiClub(args) => cmd_mi_club(cli, args),
        Command::Codec(CodecCommand::Encode(args)) => cmd_codec_encode(cli, args),
        Command::Codec(CodecCommand::Decode(args)) => cmd_codec_decode(cli, args),
        Command::Channel(ChannelCommand::Ser(args)) => cmd_channel_ser(cli, args),
        Command::Oracle(args) => cmd_oracle(cli, args),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => std::process::exit(i32::from(code)),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::InvalidInput(_) | Error::Decode { .. } => 2,
                Error::Infeasible(_) => 3,
                Error::Io(_) => 4,
            };
            std::process::exit(code);
        }
    }
}
