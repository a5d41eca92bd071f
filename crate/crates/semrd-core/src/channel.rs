//! Memoryless channel simulation: AWGN and single-tap Rayleigh fading,
//! Gray-mapped BPSK/16-QAM modulation, seeded symbol-error-rate
//! measurement, and the discrete index-flip channel used by the pipeline.

use crate::error::{Error, Result};
use crate::par;
use crate::prob::ConditionalDistribution;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

/// Symbols per Monte-Carlo chunk; each chunk draws from its own RNG stream
/// so parallel runs partition the seed space deterministically.
const SER_CHUNK: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsiMode {
    Perfect,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub seed: u64,
    pub csi: CsiMode,
    /// Default is one fading realization per block; flip this for
    /// independent fading per symbol.
    pub per_symbol_fading: bool,
}

impl ChannelConfig {
    pub fn new(kind: ChannelKind, snr_db: f64, seed: u64, csi: CsiMode) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(Error::invalid("snr_db must be finite"));
        }
        Ok(ChannelConfig {
            kind,
            snr_db,
            seed,
            csi,
            per_symbol_fading: false,
        })
    }

    /// Total complex noise variance at unit signal power.
    pub fn noise_variance(&self) -> f64 {
        10f64.powf(-self.snr_db / 10.0)
    }
}

/// A block of complex channel symbols. Modulators produce blocks with unit
/// average power; received blocks carry whatever power the channel left.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSymbolBlock {
    symbols: Vec<Complex64>,
}

impl ComplexSymbolBlock {
    pub fn new(symbols: Vec<Complex64>) -> Result<Self> {
        if symbols.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::invalid("channel symbols must be finite"));
        }
        Ok(ComplexSymbolBlock { symbols })
    }

    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn average_power(&self) -> f64 {
        if self.symbols.is_empty() {
            return 0.0;
        }
        self.symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.symbols.len() as f64
    }
}

/// Channel output: the received block plus the realized fading gains
/// (None for AWGN; one gain per block, or per symbol when configured).
#[derive(Debug, Clone, PartialEq)]
pub struct TransmitOutput {
    pub received: ComplexSymbolBlock,
    pub gains: Option<Vec<Complex64>>,
}

fn complex_normal(rng: &mut ChaCha8Rng, total_variance: f64) -> Complex64 {
    let s = (total_variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Passes the block through the configured channel: ŝ = h·s + n with
/// σ²_n = 10^(−snr_db/10) and, for Rayleigh, h ~ CN(0, 1).
pub fn transmit(block: &ComplexSymbolBlock, cfg: &ChannelConfig) -> Result<TransmitOutput> {
    if !cfg.snr_db.is_finite() {
        return Err(Error::invalid("snr_db must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(transmit_with_rng(block, cfg, &mut rng))
}

/// Gains are drawn before any noise so the realization layout is stable.
fn transmit_with_rng(
    block: &ComplexSymbolBlock,
    cfg: &ChannelConfig,
    rng: &mut ChaCha8Rng,
) -> TransmitOutput {
    let noise_var = cfg.noise_variance();
    let gains = match cfg.kind {
        ChannelKind::Awgn => None,
        ChannelKind::Rayleigh => {
            let count = if cfg.per_symbol_fading { block.len() } else { 1 };
            Some(
                (0..count)
                    .map(|_| complex_normal(rng, 1.0))
                    .collect::<Vec<_>>(),
            )
        }
    };
    let one = Complex64::new(1.0, 0.0);
    let symbols = block
        .symbols()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let h = gains
                .as_ref()
                .map_or(one, |g| g[if g.len() == 1 { 0 } else { i }]);
            h * s + complex_normal(rng, noise_var)
        })
        .collect();
    TransmitOutput {
        received: ComplexSymbolBlock { symbols },
        gains,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Bpsk,
    Qam16,
}

impl Modulation {
    pub fn bits_per_symbol(&self) -> usize {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qam16 => 4,
        }
    }
}

fn check_bits(bits: &[u8], per_symbol: usize) -> Result<()> {
    if bits.len() % per_symbol != 0 {
        return Err(Error::invalid(format!(
            "bit count {} is not a multiple of {per_symbol}",
            bits.len()
        )));
    }
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::invalid("bits must be 0 or 1"));
    }
    Ok(())
}

/// BPSK: bit 0 → +1, bit 1 → −1. Every symbol has unit power.
pub fn modulate_bpsk(bits: &[u8]) -> Result<ComplexSymbolBlock> {
    check_bits(bits, 1)?;
    let symbols = bits
        .iter()
        .map(|&b| Complex64::new(if b == 0 { 1.0 } else { -1.0 }, 0.0))
        .collect();
    Ok(ComplexSymbolBlock { symbols })
}

const QAM16_NORM: f64 = 0.316_227_766_016_837_94; // 1/sqrt(10)

/// Gray code per axis: 00 → −3, 01 → −1, 11 → +1, 10 → +3.
fn gray_level(a: u8, b: u8) -> f64 {
    match (a, b) {
        (0, 0) => -3.0,
        (0, 1) => -1.0,
        (1, 1) => 1.0,
        _ => 3.0,
    }
}

fn gray_bits(level: f64) -> (u8, u8) {
    if level < -2.0 {
        (0, 0)
    } else if level < 0.0 {
        (0, 1)
    } else if level < 2.0 {
        (1, 1)
    } else {
        (1, 0)
    }
}

/// 16-QAM, Gray-mapped per axis, scaled to unit average constellation power.
/// Bits map four at a time: the first pair sets I, the second pair sets Q.
pub fn modulate_qam16(bits: &[u8]) -> Result<ComplexSymbolBlock> {
    check_bits(bits, 4)?;
    let symbols = bits
        .chunks_exact(4)
        .map(|b| {
            Complex64::new(
                gray_level(b[0], b[1]) * QAM16_NORM,
                gray_level(b[2], b[3]) * QAM16_NORM,
            )
        })
        .collect();
    Ok(ComplexSymbolBlock { symbols })
}

/// Equalizes by the realized gains when provided (perfect CSI), otherwise
/// returns the raw symbols.
fn equalized(block: &ComplexSymbolBlock, gains: Option<&[Complex64]>) -> Result<Vec<Complex64>> {
    match gains {
        None => Ok(block.symbols().to_vec()),
        Some(g) => {
            if g.len() != 1 && g.len() != block.len() {
                return Err(Error::invalid(format!(
                    "got {} gains for {} symbols",
                    g.len(),
                    block.len()
                )));
            }
            Ok(block
                .symbols()
                .iter()
                .enumerate()
                .map(|(i, &s)| s / g[if g.len() == 1 { 0 } else { i }])
                .collect())
        }
    }
}

/// Hard nearest-symbol BPSK decisions after optional equalization.
pub fn demodulate_bpsk(
    block: &ComplexSymbolBlock,
    gains: Option<&[Complex64]>,
) -> Result<Vec<u8>> {
    Ok(equalized(block, gains)?
        .iter()
        .map(|s| u8::from(s.re < 0.0))
        .collect())
}

/// Hard nearest-symbol 16-QAM decisions after optional equalization.
pub fn demodulate_qam16(
    block: &ComplexSymbolBlock,
    gains: Option<&[Complex64]>,
) -> Result<Vec<u8>> {
    let mut bits = Vec::with_capacity(4 * block.len());
    for s in equalized(block, gains)? {
        let (i0, i1) = gray_bits(s.re / QAM16_NORM);
        let (q0, q1) = gray_bits(s.im / QAM16_NORM);
        bits.extend_from_slice(&[i0, i1, q0, q1]);
    }
    Ok(bits)
}

/// Monte-Carlo error rates for one modulation/channel configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SerReport {
    pub n_symbols: u64,
    pub n_bits: u64,
    pub symbol_errors: u64,
    pub bit_errors: u64,
    pub ser: f64,
    pub ber: f64,
}

/// Measures SER/BER over `n_symbols` random symbols. Work is chunked and
/// each chunk owns a pair of RNG streams derived from the seed, so results
/// are identical whatever the thread count.
pub fn measure_ser(
    modulation: Modulation,
    cfg: &ChannelConfig,
    n_symbols: usize,
) -> Result<SerReport> {
    if !cfg.snr_db.is_finite() {
        return Err(Error::invalid("snr_db must be finite"));
    }
    if n_symbols == 0 {
        return Err(Error::invalid("need at least one symbol"));
    }
    let bps = modulation.bits_per_symbol();
    let chunks = n_symbols.div_ceil(SER_CHUNK);
    let counts = par::map_range(chunks, |c| {
        let take = SER_CHUNK.min(n_symbols - c * SER_CHUNK);
        let mut bits_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        bits_rng.set_stream(2 * c as u64);
        let mut chan_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        chan_rng.set_stream(2 * c as u64 + 1);
        let bits: Vec<u8> = (0..take * bps).map(|_| bits_rng.random_range(0..2u8)).collect();
        let block = match modulation {
            Modulation::Bpsk => modulate_bpsk(&bits),
            Modulation::Qam16 => modulate_qam16(&bits),
        }
        .expect("generated bits are valid");
        let out = transmit_with_rng(&block, cfg, &mut chan_rng);
        let gains = match (cfg.csi, &out.gains) {
            (CsiMode::Perfect, Some(g)) => Some(g.as_slice()),
            _ => None,
        };
        let decoded = match modulation {
            Modulation::Bpsk => demodulate_bpsk(&out.received, gains),
            Modulation::Qam16 => demodulate_qam16(&out.received, gains),
        }
        .expect("gain layout matches block");
        let mut sym_err = 0u64;
        let mut bit_err = 0u64;
        for (sent, got) in bits.chunks_exact(bps).zip(decoded.chunks_exact(bps)) {
            let wrong = sent.iter().zip(got).filter(|(a, b)| a != b).count() as u64;
            bit_err += wrong;
            sym_err += u64::from(wrong > 0);
        }
        (sym_err, bit_err)
    });
    let (symbol_errors, bit_errors) = counts
        .iter()
        .fold((0u64, 0u64), |(s, b), &(cs, cb)| (s + cs, b + cb));
    let n_bits = (n_symbols * bps) as u64;
    Ok(SerReport {
        n_symbols: n_symbols as u64,
        n_bits,
        symbol_errors,
        bit_errors,
        ser: symbol_errors as f64 / n_symbols as f64,
        ber: bit_errors as f64 / n_bits as f64,
    })
}

/// Gaussian tail probability Q(x) = P(N(0,1) > x).
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn check_flip_prob(flip_prob: f64, alphabet: usize) -> Result<()> {
    if !flip_prob.is_finite() || !(0.0..1.0).contains(&flip_prob) {
        return Err(Error::invalid("flip probability must lie in [0, 1)"));
    }
    if alphabet == 0 {
        return Err(Error::invalid("alphabet must be non-empty"));
    }
    if flip_prob > 0.0 && alphabet < 2 {
        return Err(Error::invalid("flipping needs at least two indices"));
    }
    Ok(())
}

/// Discrete symmetric channel on reconstruction indices: each index is
/// independently replaced by a uniformly random *other* index with
/// probability `flip_prob`.
pub fn index_channel(
    indices: &[usize],
    alphabet: usize,
    flip_prob: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    check_flip_prob(flip_prob, alphabet)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= alphabet) {
        return Err(Error::invalid(format!(
            "index {bad} outside alphabet of size {alphabet}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(indices
        .iter()
        .map(|&i| {
            if flip_prob > 0.0 && rng.random_range(0.0..1.0) < flip_prob {
                (i + rng.random_range(1..alphabet)) % alphabet
            } else {
                i
            }
        })
        .collect())
}

/// Exact transition matrix of [`index_channel`]: 1 − p on the diagonal,
/// p/(n−1) elsewhere.
pub fn index_channel_matrix(alphabet: usize, flip_prob: f64) -> Result<ConditionalDistribution> {
    check_flip_prob(flip_prob, alphabet)?;
    let off = if alphabet > 1 {
        flip_prob / (alphabet - 1) as f64
    } else {
        0.0
    };
    let rows: Vec<Vec<f64>> = (0..alphabet)
        .map(|i| {
            (0..alphabet)
                .map(|j| if i == j { 1.0 - flip_prob } else { off })
                .collect()
        })
        .collect();
    ConditionalDistribution::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{
        chain_conditionals, mutual_information, random_conditional, random_distribution,
        JointDistribution,
    };

    fn random_bits(seed: u64, n: usize) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..2u8)).collect()
    }

    #[test]
    fn awgn_at_huge_snr_is_transparent() {
        let block = modulate_qam16(&random_bits(1, 400)).unwrap();
        let cfg = ChannelConfig::new(ChannelKind::Awgn, 300.0, 3, CsiMode::None).unwrap();
        let out = transmit(&block, &cfg).unwrap();
        assert!(out.gains.is_none());
        for (s, r) in block.symbols().iter().zip(out.received.symbols()) {
            assert!((s - r).norm() < 1e-10);
        }
    }

    #[test]
    fn rayleigh_perfect_csi_equalizes_at_huge_snr() {
        let block = modulate_bpsk(&random_bits(2, 200)).unwrap();
        let cfg = ChannelConfig::new(ChannelKind::Rayleigh, 300.0, 4, CsiMode::Perfect).unwrap();
        let out = transmit(&block, &cfg).unwrap();
        let gains = out.gains.as_deref().unwrap();
        assert_eq!(gains.len(), 1);
        assert!(gains[0].norm() > 1e-3, "degenerate fade for this seed");
        let eq = equalized(&out.received, Some(gains)).unwrap();
        for (s, r) in block.symbols().iter().zip(&eq) {
            assert!((s - r).norm() < 1e-10);
        }
    }

    #[test]
    fn awgn_noise_variance_matches_snr() {
        let zeros = ComplexSymbolBlock::new(vec![Complex64::new(0.0, 0.0); 1_000_000]).unwrap();
        let cfg = ChannelConfig::new(ChannelKind::Awgn, 10.0, 5, CsiMode::None).unwrap();
        let out = transmit(&zeros, &cfg).unwrap();
        let var = out.received.average_power();
        assert!((var - 0.1).abs() < 0.001, "noise variance {var}");
    }

    #[test]
    fn constellations_have_unit_average_power() {
        let bpsk = modulate_bpsk(&random_bits(6, 1000)).unwrap();
        assert!((bpsk.average_power() - 1.0).abs() < 1e-12);
        let qam = modulate_qam16(&random_bits(7, 40_000)).unwrap();
        assert!((qam.average_power() - 1.0).abs() < 0.01);
    }

    #[test]
    fn noiseless_round_trips_reproduce_bits() {
        let bits = random_bits(8, 4000);
        let awgn = ChannelConfig::new(ChannelKind::Awgn, 300.0, 9, CsiMode::None).unwrap();
        let ray = ChannelConfig::new(ChannelKind::Rayleigh, 300.0, 10, CsiMode::Perfect).unwrap();

        let block = modulate_bpsk(&bits).unwrap();
        let out = transmit(&block, &awgn).unwrap();
        assert_eq!(demodulate_bpsk(&out.received, None).unwrap(), bits);
        let out = transmit(&block, &ray).unwrap();
        assert_eq!(
            demodulate_bpsk(&out.received, out.gains.as_deref()).unwrap(),
            bits
        );

        let block = modulate_qam16(&bits).unwrap();
        let out = transmit(&block, &awgn).unwrap();
        assert_eq!(demodulate_qam16(&out.received, None).unwrap(), bits);
        let out = transmit(&block, &ray).unwrap();
        assert_eq!(
            demodulate_qam16(&out.received, out.gains.as_deref()).unwrap(),
            bits
        );
    }

    #[test]
    fn modulators_reject_bad_input() {
        assert!(modulate_qam16(&[0, 1, 1]).is_err());
        assert!(modulate_bpsk(&[0, 2]).is_err());
        assert!(ComplexSymbolBlock::new(vec![Complex64::new(f64::NAN, 0.0)]).is_err());
        let block = modulate_bpsk(&[0, 1, 0]).unwrap();
        let gains = vec![Complex64::new(1.0, 0.0); 2];
        assert!(demodulate_bpsk(&block, Some(&gains)).is_err());
    }

    #[test]
    fn bpsk_awgn_ser_matches_q_function() {
        for snr_db in [0.0, 5.0, 10.0] {
            let cfg = ChannelConfig::new(ChannelKind::Awgn, snr_db, 11, CsiMode::None).unwrap();
            let report = measure_ser(Modulation::Bpsk, &cfg, 1_000_000).unwrap();
            let snr = 10f64.powf(snr_db / 10.0);
            let expected = q_function((2.0 * snr).sqrt());
            let tol = 3.0 * (expected * (1.0 - expected) / 1e6).sqrt();
            assert!(
                (report.ser - expected).abs() <= tol,
                "snr {snr_db} dB: ser {} vs Q {expected}",
                report.ser
            );
        }
    }

    #[test]
    fn bpsk_rayleigh_ber_matches_fading_oracle() {
        let mut cfg = ChannelConfig::new(ChannelKind::Rayleigh, 10.0, 12, CsiMode::Perfect).unwrap();
        cfg.per_symbol_fading = true;
        let report = measure_ser(Modulation::Bpsk, &cfg, 1_000_000).unwrap();
        let g: f64 = 10.0;
        let expected = 0.5 * (1.0 - (g / (1.0 + g)).sqrt());
        let tol = 3.0 * (expected * (1.0 - expected) / 1e6).sqrt();
        assert!(
            (report.ber - expected).abs() <= tol,
            "ber {} vs oracle {expected}",
            report.ber
        );
    }

    #[test]
    fn transmit_is_deterministic() {
        let block = modulate_qam16(&random_bits(13, 800)).unwrap();
        let cfg = ChannelConfig::new(ChannelKind::Rayleigh, 7.0, 14, CsiMode::Perfect).unwrap();
        assert_eq!(transmit(&block, &cfg).unwrap(), transmit(&block, &cfg).unwrap());
        let other = ChannelConfig { seed: 15, ..cfg };
        assert_ne!(transmit(&block, &cfg).unwrap(), transmit(&block, &other).unwrap());
    }

    #[test]
    fn index_channel_is_identity_at_zero_flip() {
        let idx: Vec<usize> = (0..5000).map(|i| i % 7).collect();
        assert_eq!(index_channel(&idx, 7, 0.0, 16).unwrap(), idx);
    }

    #[test]
    fn index_channel_flip_rate_is_binomial() {
        let idx: Vec<usize> = (0..1_000_000).map(|i| i % 5).collect();
        let out = index_channel(&idx, 5, 0.1, 17).unwrap();
        let flips = idx.iter().zip(&out).filter(|(a, b)| a != b).count() as f64;
        let rate = flips / idx.len() as f64;
        let tol = 3.0 * (0.1f64 * 0.9 / 1e6).sqrt();
        assert!((rate - 0.1).abs() <= tol, "flip rate {rate}");
        assert!(out.iter().all(|&i| i < 5));
    }

    #[test]
    fn index_channel_rejects_bad_parameters() {
        assert!(index_channel(&[0, 1], 2, 1.0, 0).is_err());
        assert!(index_channel(&[0, 1], 2, -0.1, 0).is_err());
        assert!(index_channel(&[0, 3], 2, 0.1, 0).is_err());
        assert!(index_channel(&[0], 1, 0.1, 0).is_err());
        assert!(index_channel_matrix(1, 0.5).is_err());
    }

    #[test]
    fn index_matrix_is_exact() {
        let chan = index_channel_matrix(4, 0.3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 0.7 } else { 0.1 };
                assert!((chan.prob(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn index_channel_respects_data_processing() {
        for seed in 0..5 {
            let px = random_distribution(seed, 5);
            let mapping = random_conditional(seed + 100, 5, 4);
            let sent = JointDistribution::from_marginal_conditional(&px, &mapping).unwrap();
            let chan = index_channel_matrix(4, 0.15).unwrap();
            let through = chain_conditionals(&mapping, &chan).unwrap();
            let received = JointDistribution::from_marginal_conditional(&px, &through).unwrap();
            assert!(
                mutual_information(&received) <= mutual_information(&sent) + 1e-9,
                "seed {seed} violates data processing"
            );
        }
    }
}
