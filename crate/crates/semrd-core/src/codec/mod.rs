//! Quantization, Gaussian-mixture symbol PMF, rate accounting, and a
//! bit-exact range-coded payload format for integer symbol streams.
//!
//! The chain mirrors a learned-compression stack: training-time dither,
//! inference-time rounding, a mixture model integrated over unit bins to
//! get per-symbol probabilities, and an entropy coder whose frequency
//! tables are rebuilt deterministically from the payload header alone.

mod gmm;
mod range;

pub use gmm::{fit_gmm_pmf, EmConfig, GmmPmfModel, SCALE_MIN};

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use range::{RangeDecoder, RangeEncoder};
use statrs::function::erf;

const MAGIC: [u8; 4] = *b"SRDC";
const FORMAT_VERSION: u8 = 1;
/// Modeled table spans the means ± this many maximal scales; symbols
/// outside it are escape-coded as raw 64-bit values.
pub const TAIL_SIGMAS: f64 = 12.0;
const FREQ_TOTAL: u32 = 1 << 16;
/// Largest modeled-symbol table: keeps every slot above frequency one with
/// a 16-bit total while bounding table build cost.
const MAX_TABLE_SYMBOLS: i128 = 60_000;
/// Quantized magnitudes beyond 2^53 are not exactly representable in f64.
const MAX_QUANT_MAGNITUDE: f64 = 9_007_199_254_740_992.0;
/// Sanity cap on the header's symbol count to bound decode work on
/// corrupted payloads.
const MAX_DECODE_SYMBOLS: u64 = 1 << 28;

/// Integer symbol sequence with its observed alphabet bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolStream {
    values: Vec<i64>,
    z_min: i64,
    z_max: i64,
}

impl SymbolStream {
    /// Wraps a value sequence; bounds are the observed min/max (0 when empty).
    pub fn new(values: Vec<i64>) -> Self {
        let z_min = values.iter().min().copied().unwrap_or(0);
        let z_max = values.iter().max().copied().unwrap_or(0);
        SymbolStream {
            values,
            z_min,
            z_max,
        }
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn z_min(&self) -> i64 {
        self.z_min
    }

    pub fn z_max(&self) -> i64 {
        self.z_max
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Encoded stream: self-describing header followed by the range-coded body.
#[derive(Debug, Clone, PartialEq)]
pub struct BitPayload {
    pub bytes: Vec<u8>,
    pub bit_length: u64,
    pub header: PayloadHeader,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PayloadHeader {
    pub model: GmmPmfModel,
    pub z_min: i64,
    pub z_max: i64,
    pub count: u64,
}

impl BitPayload {
    pub fn header_bits(&self) -> u64 {
        8 * header_len(self.header.model.component_count()) as u64
    }
}

fn header_len(components: usize) -> usize {
    4 + 1 + 2 + 24 * components + 8 + 8 + 8
}

/// Training-time quantization proxy: adds seeded Uniform(-1/2, 1/2) dither,
/// so each output stays within 0.5 of its input.
pub fn quantize_train_proxy(embeddings: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    embeddings
        .iter()
        .map(|&e| e + rng.random_range(-0.5..0.5))
        .collect()
}

/// Inference-time quantization: round half to even, bounds set to the
/// observed extremes.
pub fn quantize_inference(embeddings: &[f64]) -> Result<SymbolStream> {
    let mut values = Vec::with_capacity(embeddings.len());
    for &e in embeddings {
        if !e.is_finite() {
            return Err(Error::invalid("embeddings must be finite"));
        }
        let r = e.round_ties_even();
        if r.abs() > MAX_QUANT_MAGNITUDE {
            return Err(Error::invalid(format!(
                "embedding {e} is too large to quantize exactly"
            )));
        }
        values.push(r as i64);
    }
    Ok(SymbolStream::new(values))
}

/// Standard-normal interval probability with tail-safe erfc branches.
fn std_normal_interval(a: f64, b: f64) -> f64 {
    const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
    let p = if a >= 0.0 {
        0.5 * (erf::erfc(a * INV_SQRT2) - erf::erfc(b * INV_SQRT2))
    } else if b <= 0.0 {
        0.5 * (erf::erfc(-b * INV_SQRT2) - erf::erfc(-a * INV_SQRT2))
    } else {
        0.5 * (erf::erf(b * INV_SQRT2) + erf::erf(-a * INV_SQRT2))
    };
    p.max(0.0)
}

/// Probability the model assigns to integer symbol `z`: the mixture mass
/// of the unit bin [z - 1/2, z + 1/2].
pub fn pmf_integrate(model: &GmmPmfModel, z: i64) -> f64 {
    let zf = z as f64;
    model
        .weights()
        .iter()
        .zip(model.means())
        .zip(model.scales())
        .map(|((&w, &mu), &sigma)| {
            w * std_normal_interval((zf - 0.5 - mu) / sigma, (zf + 0.5 - mu) / sigma)
        })
        .sum()
}

/// Ideal code length of the stream under the model, in bits.
pub fn rate_loss(model: &GmmPmfModel, stream: &SymbolStream) -> Result<f64> {
    let mut bits = 0.0;
    for &z in stream.values() {
        let p = pmf_integrate(model, z);
        if p <= 0.0 {
            return Err(Error::infeasible(format!(
                "symbol {z} has no modeled probability mass; only the coder's escape path can represent it"
            )));
        }
        bits -= p.log2();
    }
    Ok(bits)
}

/// 16-bit frequency line over the modeled span plus a trailing escape slot.
/// Built from header data only, so encoder and decoder always agree.
struct FreqTable {
    lo: i64,
    /// Per-slot frequencies; the last slot is the escape.
    freqs: Vec<u32>,
    /// Per-slot interval starts.
    cum: Vec<u32>,
}

impl FreqTable {
    fn build(model: &GmmPmfModel, z_min: i64, z_max: i64) -> FreqTable {
        let sigma = model.max_scale();
        let mu_min = model.means().iter().cloned().fold(f64::MAX, f64::min);
        let mu_max = model.means().iter().cloned().fold(f64::MIN, f64::max);
        let mut lo = ((mu_min - TAIL_SIGMAS * sigma).floor() as i64).max(z_min) as i128;
        let mut hi = ((mu_max + TAIL_SIGMAS * sigma).ceil() as i64).min(z_max) as i128;
        if lo > hi {
            // Nothing modeled inside the stream bounds: everything escapes.
            return FreqTable {
                lo: 0,
                freqs: vec![FREQ_TOTAL],
                cum: vec![0],
            };
        }
        if hi - lo + 1 > MAX_TABLE_SYMBOLS {
            // Recenter a capped window on the mixture mean, deterministically.
            let mean: f64 = model
                .weights()
                .iter()
                .zip(model.means())
                .map(|(&w, &mu)| w * mu)
                .sum();
            let center = (mean.round() as i64 as i128).clamp(lo, hi);
            let mut new_lo = (center - MAX_TABLE_SYMBOLS / 2).max(lo);
            let mut new_hi = new_lo + MAX_TABLE_SYMBOLS - 1;
            if new_hi > hi {
                new_hi = hi;
                new_lo = new_hi - MAX_TABLE_SYMBOLS + 1;
            }
            lo = new_lo;
            hi = new_hi;
        }
        let k = (hi - lo + 1) as usize;
        let lo = lo as i64;

        let p: Vec<f64> = (0..k).map(|i| pmf_integrate(model, lo + i as i64)).collect();
        let total_p: f64 = p.iter().sum();
        let budget = FREQ_TOTAL - 1; // escape keeps the final unit slot
        let extra = budget - k as u32;
        let mut freqs = vec![1u32; k];
        if extra > 0 {
            if total_p > 0.0 {
                let mut rem: Vec<(f64, usize)> = Vec::with_capacity(k);
                let mut assigned = 0u32;
                for (i, &pi) in p.iter().enumerate() {
                    let raw = pi / total_p * f64::from(extra);
                    let base = raw.floor();
                    freqs[i] += base as u32;
                    assigned += base as u32;
                    rem.push((raw - base, i));
                }
                rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let leftover = extra - assigned;
                for j in 0..leftover as usize {
                    freqs[rem[j % k].1] += 1;
                }
            } else {
                let (q, r) = (extra / k as u32, extra % k as u32);
                for (i, f) in freqs.iter_mut().enumerate() {
                    *f += q + u32::from((i as u32) < r);
                }
            }
        }
        freqs.push(1);
        let cum: Vec<u32> = freqs
            .iter()
            .scan(0u32, |acc, &f| {
                let start = *acc;
                *acc += f;
                Some(start)
            })
            .collect();
        debug_assert_eq!(cum.last().unwrap() + freqs.last().unwrap(), FREQ_TOTAL);
        FreqTable { lo, freqs, cum }
    }

    /// Index of the escape slot.
    fn escape(&self) -> usize {
        self.freqs.len() - 1
    }

    fn slot_of(&self, z: i64) -> usize {
        let offset = i128::from(z) - i128::from(self.lo);
        if offset >= 0 && offset < self.escape() as i128 {
            offset as usize
        } else {
            self.escape()
        }
    }
}

/// Encodes the stream against the model into a self-describing payload.
pub fn arithmetic_encode(stream: &SymbolStream, model: &GmmPmfModel) -> Result<BitPayload> {
    let m = model.component_count();
    if m > usize::from(u16::MAX) {
        return Err(Error::invalid("too many mixture components to serialize"));
    }
    let mut bytes = Vec::with_capacity(header_len(m) + stream.len() / 2 + 16);
    bytes.extend_from_slice(&MAGIC);
    bytes.push(FORMAT_VERSION);
    bytes.extend_from_slice(&(m as u16).to_be_bytes());
    for &w in model.weights() {
        bytes.extend_from_slice(&w.to_be_bytes());
    }
    for &mu in model.means() {
        bytes.extend_from_slice(&mu.to_be_bytes());
    }
    for &s in model.scales() {
        bytes.extend_from_slice(&s.to_be_bytes());
    }
    bytes.extend_from_slice(&stream.z_min().to_be_bytes());
    bytes.extend_from_slice(&stream.z_max().to_be_bytes());
    bytes.extend_from_slice(&(stream.len() as u64).to_be_bytes());
    debug_assert_eq!(bytes.len(), header_len(m));

    let table = FreqTable::build(model, stream.z_min(), stream.z_max());
    let mut enc = RangeEncoder::new();
    for &z in stream.values() {
        let slot = table.slot_of(z);
        enc.encode(table.cum[slot], table.freqs[slot], FREQ_TOTAL);
        if slot == table.escape() {
            for b in (z as u64).to_be_bytes() {
                enc.encode(u32::from(b), 1, 256);
            }
        }
    }
    bytes.extend_from_slice(&enc.finish());

    Ok(BitPayload {
        bit_length: 8 * bytes.len() as u64,
        header: PayloadHeader {
            model: model.clone(),
            z_min: stream.z_min(),
            z_max: stream.z_max(),
            count: stream.len() as u64,
        },
        bytes,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Decode {
                position: self.bytes.len(),
                reason: format!("truncated header: need {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a payload produced by [`arithmetic_encode`]. Corruption is
/// reported with the byte position at which it was detected.
pub fn arithmetic_decode(bytes: &[u8]) -> Result<SymbolStream> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Decode {
            position: 0,
            reason: "bad magic; not a coded symbol payload".into(),
        });
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::Decode {
            position: 4,
            reason: format!("unsupported format version {version}"),
        });
    }
    let m = usize::from(r.u16()?);
    if m == 0 {
        return Err(Error::Decode {
            position: 5,
            reason: "zero mixture components".into(),
        });
    }
    fn read_f64s(r: &mut Reader, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| r.f64()).collect()
    }
    let weights = read_f64s(&mut r, m)?;
    let means = read_f64s(&mut r, m)?;
    let scales = read_f64s(&mut r, m)?;
    let model = GmmPmfModel::new(weights, means, scales).map_err(|e| Error::Decode {
        position: 7,
        reason: format!("invalid model parameters: {e}"),
    })?;
    let bounds_pos = r.pos;
    let z_min = r.i64()?;
    let z_max = r.i64()?;
    if z_min > z_max {
        return Err(Error::Decode {
            position: bounds_pos,
            reason: format!("inverted symbol bounds [{z_min}, {z_max}]"),
        });
    }
    let count_pos = r.pos;
    let count = r.u64()?;
    if count > MAX_DECODE_SYMBOLS {
        return Err(Error::Decode {
            position: count_pos,
            reason: format!("symbol count {count} exceeds decoder limit"),
        });
    }
    let header_end = r.pos;

    let table = FreqTable::build(&model, z_min, z_max);
    let mut dec = RangeDecoder::new(&bytes[header_end..]);
    let mut values = Vec::with_capacity(count as usize);
    for i in 0..count {
        let target = dec.decode_target(FREQ_TOTAL);
        let slot = table.cum.partition_point(|&c| c <= target) - 1;
        dec.commit(table.cum[slot], table.freqs[slot]);
        let value = if slot == table.escape() {
            let mut raw = [0u8; 8];
            for b in raw.iter_mut() {
                let t = dec.decode_target(256);
                dec.commit(t, 1);
                *b = t as u8;
            }
            i64::from_be_bytes(raw)
        } else {
            table.lo + slot as i64
        };
        if value < z_min || value > z_max {
            return Err(Error::Decode {
                position: header_end + dec.consumed(),
                reason: format!("symbol {i} decoded outside header bounds"),
            });
        }
        values.push(value);
    }
    Ok(SymbolStream::new(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    #[test]
    fn train_proxy_is_seeded_and_bounded() {
        let e: Vec<f64> = (0..500).map(|i| (i as f64) * 0.37 - 90.0).collect();
        let a = quantize_train_proxy(&e, 5);
        let b = quantize_train_proxy(&e, 5);
        let c = quantize_train_proxy(&e, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (x, y) in e.iter().zip(&a) {
            assert!((x - y).abs() <= 0.5);
        }
    }

    #[test]
    fn train_proxy_noise_is_centered() {
        let e = vec![0.0; 1_000_000];
        let out = quantize_train_proxy(&e, 42);
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!(mean.abs() < 0.002, "dither mean {mean}");
    }

    #[test]
    fn inference_rounds_half_to_even() {
        let s = quantize_inference(&[0.4, 0.6, 0.5, 1.5, -0.5, -1.5, 3.0]).unwrap();
        assert_eq!(s.values(), &[0, 1, 0, 2, 0, -2, 3]);
        assert_eq!((s.z_min(), s.z_max()), (-2, 3));
        let again: Vec<f64> = s.values().iter().map(|&z| z as f64).collect();
        assert_eq!(quantize_inference(&again).unwrap(), s);
        assert!(quantize_inference(&[f64::NAN]).is_err());
        assert!(quantize_inference(&[1e17]).is_err());
    }

    #[test]
    fn pmf_matches_normal_cdf_oracle() {
        let model = GmmPmfModel::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let p = pmf_integrate(&model, 0);
        assert!((p - 0.382_924_922_548_026).abs() < 1e-9, "pmf {p}");
    }

    #[test]
    fn pmf_telescopes_to_unit_mass() {
        let model = GmmPmfModel::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let sum: f64 = (-50..=50).map(|z| pmf_integrate(&model, z)).sum();
        assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
    }

    #[test]
    fn fitted_model_mass_is_unit_within_twelve_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let samples: Vec<f64> = (0..2000)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                if i % 2 == 0 {
                    z * 0.8 - 3.0
                } else {
                    z * 1.4 + 4.0
                }
            })
            .collect();
        let model = fit_gmm_pmf(&samples, 2, &EmConfig::seeded(7)).unwrap();
        let sigma = model.max_scale();
        let lo = (model.means()[0] - TAIL_SIGMAS * sigma).floor() as i64;
        let hi = (model.means()[model.component_count() - 1] + TAIL_SIGMAS * sigma).ceil() as i64;
        let sum: f64 = (lo..=hi).map(|z| pmf_integrate(&model, z)).sum();
        assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
    }

    #[test]
    fn pmf_concentrates_with_tiny_scale() {
        let model = GmmPmfModel::new(vec![1.0], vec![2.3], vec![0.01]).unwrap();
        assert!(pmf_integrate(&model, 2) > 1.0 - 1e-12);
    }

    /// 256 near-delta components, one per byte value: each integer in
    /// 0..=255 gets probability 1/256 to float precision.
    fn uniform_256_model() -> GmmPmfModel {
        let weights = vec![1.0 / 256.0; 256];
        let means: Vec<f64> = (0..256).map(|i| i as f64).collect();
        let scales = vec![0.01; 256];
        GmmPmfModel::new(weights, means, scales).unwrap()
    }

    #[test]
    fn rate_loss_of_uniform_bytes_is_eight_bits_each() {
        let model = uniform_256_model();
        let values: Vec<i64> = (0..500).map(|i| (i * 41) % 256).collect();
        let n = values.len() as f64;
        let bits = rate_loss(&model, &SymbolStream::new(values)).unwrap();
        assert!((bits - 8.0 * n).abs() < 1e-3, "rate {bits}");
    }

    #[test]
    fn rate_loss_of_certain_symbol_is_free() {
        let model = GmmPmfModel::new(vec![1.0], vec![5.0], vec![1e-3]).unwrap();
        let bits = rate_loss(&model, &SymbolStream::new(vec![5; 1000])).unwrap();
        assert!(bits.abs() < 1e-6, "rate {bits}");
    }

    #[test]
    fn rate_loss_rejects_unmodeled_symbol() {
        let model = GmmPmfModel::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let err = rate_loss(&model, &SymbolStream::new(vec![1_000_000_000])).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn rate_loss_tracks_empirical_entropy_under_mle_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let latent: Vec<f64> = (0..20_000)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                2.5 * z
            })
            .collect();
        let stream = quantize_inference(&latent).unwrap();
        let model = fit_gmm_pmf(&latent, 1, &EmConfig::seeded(8)).unwrap();
        let mut counts = std::collections::HashMap::new();
        for &z in stream.values() {
            *counts.entry(z).or_insert(0usize) += 1;
        }
        let n = stream.len() as f64;
        let empirical: f64 = counts
            .values()
            .map(|&c| {
                let f = c as f64 / n;
                -f * f.log2()
            })
            .sum::<f64>()
            * n;
        let bits = rate_loss(&model, &stream).unwrap();
        let ratio = bits / empirical;
        assert!(
            (ratio - 1.0).abs() < 0.01,
            "cross-entropy {bits} vs empirical {empirical}"
        );
    }

    #[test]
    fn empty_stream_round_trips_header_only() {
        let model = GmmPmfModel::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let stream = SymbolStream::new(vec![]);
        let payload = arithmetic_encode(&stream, &model).unwrap();
        assert_eq!(payload.bytes.len() as u64 * 8, payload.bit_length);
        assert_eq!(payload.bit_length, payload.header_bits());
        assert_eq!(payload.header.count, 0);
        assert_eq!(arithmetic_decode(&payload.bytes).unwrap(), stream);
    }

    #[test]
    fn uniform_256_payload_meets_rate_bound() {
        let model = uniform_256_model();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let values: Vec<i64> = (0..10_000).map(|_| rng.random_range(0..256)).collect();
        let stream = SymbolStream::new(values);
        let payload = arithmetic_encode(&stream, &model).unwrap();
        let body_bits = payload.bit_length - payload.header_bits();
        assert!(
            body_bits >= 80_000 && body_bits <= 80_000 + 64,
            "body {body_bits} bits"
        );
        assert_eq!(arithmetic_decode(&payload.bytes).unwrap(), stream);
    }

    #[test]
    fn gaussian_stream_meets_rate_tightness() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let latent: Vec<f64> = (0..2000)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                3.0 * z + 1.0
            })
            .collect();
        let stream = quantize_inference(&latent).unwrap();
        let model = fit_gmm_pmf(&latent, 2, &EmConfig::seeded(9)).unwrap();
        let payload = arithmetic_encode(&stream, &model).unwrap();
        let rate = rate_loss(&model, &stream).unwrap();
        assert!(
            payload.bit_length as f64 <= rate + 32.0 + payload.header_bits() as f64,
            "payload {} bits vs rate {rate}",
            payload.bit_length
        );
        assert_eq!(arithmetic_decode(&payload.bytes).unwrap(), stream);
    }

    #[test]
    fn seeded_streams_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0DEC);
        for case in 0..200 {
            let m = rng.random_range(1..4);
            let mut weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for w in weights.iter_mut() {
                *w /= total;
            }
            let means: Vec<f64> = (0..m).map(|_| rng.random_range(-20.0..20.0)).collect();
            let scales: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..5.0)).collect();
            let model = GmmPmfModel::new(weights, means, scales).unwrap();
            let n = rng.random_range(0..1200);
            let values: Vec<i64> = (0..n)
                .map(|_| {
                    if rng.random_range(0.0..1.0) < 0.005 {
                        rng.random_range(-1_000_000_000..1_000_000_000)
                    } else {
                        let j = rng.random_range(0..m);
                        let z: f64 = rng.sample(StandardNormal);
                        (model.means()[j] + model.scales()[j] * z).round() as i64
                    }
                })
                .collect();
            let stream = SymbolStream::new(values);
            let payload = arithmetic_encode(&stream, &model).unwrap();
            assert!(payload.bit_length <= 8 * payload.bytes.len() as u64);
            let back = arithmetic_decode(&payload.bytes).unwrap();
            assert_eq!(back, stream, "case {case} mismatched");
            if case < 3 {
                let again = arithmetic_encode(&stream, &model).unwrap();
                assert_eq!(again.bytes, payload.bytes, "case {case} nondeterministic");
            }
        }
    }

    #[test]
    fn corrupted_payloads_report_positions() {
        let model = GmmPmfModel::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let stream = quantize_inference(&[0.2, -1.4, 2.6, 0.9]).unwrap();
        let good = arithmetic_encode(&stream, &model).unwrap().bytes;

        let mut bad = good.clone();
        bad[0] = b'X';
        match arithmetic_decode(&bad).unwrap_err() {
            Error::Decode { position, .. } => assert_eq!(position, 0),
            other => panic!("expected decode error, got {other}"),
        }

        match arithmetic_decode(&good[..3]).unwrap_err() {
            Error::Decode { position, .. } => assert_eq!(position, 3),
            other => panic!("expected decode error, got {other}"),
        }

        let mut bad = good.clone();
        bad[4] = 9;
        match arithmetic_decode(&bad).unwrap_err() {
            Error::Decode { position, .. } => assert_eq!(position, 4),
            other => panic!("expected decode error, got {other}"),
        }

        // Scale array starts after magic/version/M and two f64 arrays.
        let mut bad = good.clone();
        let scale_at = 7 + 16;
        bad[scale_at..scale_at + 8].copy_from_slice(&(-1.0f64).to_be_bytes());
        match arithmetic_decode(&bad).unwrap_err() {
            Error::Decode { position, reason } => {
                assert_eq!(position, 7);
                assert!(reason.contains("model"), "reason: {reason}");
            }
            other => panic!("expected decode error, got {other}"),
        }

        let mut bad = good.clone();
        let count_at = header_len(1) - 8;
        bad[count_at..count_at + 8].copy_from_slice(&u64::MAX.to_be_bytes());
        assert!(arithmetic_decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn rounding_quantizer_is_within_half_and_idempotent(
            xs in proptest::collection::vec(-1e6f64..1e6, 0..64)
        ) {
            let s = quantize_inference(&xs).unwrap();
            for (&x, &z) in xs.iter().zip(s.values()) {
                prop_assert!((x - z as f64).abs() <= 0.5);
                prop_assert!(z >= s.z_min() && z <= s.z_max());
            }
            let again: Vec<f64> = s.values().iter().map(|&z| z as f64).collect();
            prop_assert_eq!(quantize_inference(&again).unwrap(), s);
        }
    }
}
