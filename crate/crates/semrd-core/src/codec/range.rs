//! Carry-correct binary range coder with 16-bit frequency tables.
//!
//! 64-bit low / 32-bit range state in the classic carry-cache arrangement:
//! the encoder defers each output byte until the next carry can no longer
//! reach it. Termination picks the representative of the final interval with
//! the most trailing zero bits, strips the resulting zero tail (and the
//! always-zero leading byte), and the decoder feeds zeros once the body runs
//! out — so well-modeled streams cost only a couple of bytes beyond the
//! information content.

/// Renormalization threshold: top byte of the 32-bit range.
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    /// Raw output including the leading zero byte; stripped on `finish`.
    bytes: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            bytes: Vec::new(),
        }
    }

    /// Narrows the interval to the slice [start, start + width) of `total`.
    /// Caller guarantees start + width <= total, width >= 1, and
    /// total <= 1 << 16 so the division below never underflows the range.
    pub fn encode(&mut self, start: u32, width: u32, total: u32) {
        let r = self.range / total;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * width;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            self.bytes.push(self.cache.wrapping_add(carry));
            for _ in 1..self.cache_size {
                self.bytes.push(0xFFu8.wrapping_add(carry));
            }
            self.cache = (self.low >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Seals the interval and returns the body bytes. The representative is
    /// aligned to the largest power of two that still lies inside
    /// [low, low + range), so its trailing zero bytes never need storing.
    /// Alignment stays below 1 << 33 to keep the flush carry at most one.
    pub fn finish(mut self) -> Vec<u8> {
        let low = self.low;
        let range = u64::from(self.range);
        let mut v = low;
        for shift in (0..=32).rev() {
            let step = 1u64 << shift;
            let aligned = low.div_ceil(step) * step;
            if aligned < low + range && aligned < 1 << 33 {
                v = aligned;
                break;
            }
        }
        self.low = v;
        for _ in 0..5 {
            self.shift_low();
        }
        let mut body = self.bytes;
        while body.last() == Some(&0) {
            body.pop();
        }
        body
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    body: &'a [u8],
    next: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(body: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            code: 0,
            range: u32::MAX,
            body,
            next: 0,
        };
        // The encoder's cache priming emits one leading byte above the first
        // 32-bit window; skip it before filling the code register.
        let _ = d.take();
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.take());
        }
        d
    }

    /// Zero-pads past the stripped tail.
    fn take(&mut self) -> u8 {
        let b = self.body.get(self.next).copied().unwrap_or(0);
        self.next += 1;
        b
    }

    /// Body bytes actually consumed so far (padding excluded).
    pub fn consumed(&self) -> usize {
        self.next.min(self.body.len())
    }

    /// Locates the current code point within a `total`-sized frequency line.
    pub fn decode_target(&mut self, total: u32) -> u32 {
        self.range /= total;
        (self.code / self.range).min(total - 1)
    }

    /// Commits the slice [start, start + width) the caller resolved from the
    /// target, mirroring the encoder's narrowing exactly.
    pub fn commit(&mut self, start: u32, width: u32) {
        self.code -= start * self.range;
        self.range *= width;
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.take());
            self.range <<= 8;
        }
    }
}
