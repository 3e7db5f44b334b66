//! Byte-oriented range coder.
//!
//! 64-bit low/range registers, renormalized 32 bits at a time, driven by
//! integer frequencies that always sum to `FREQ_TOTAL` (16-bit). Carries are
//! resolved by walking the already-emitted bytes, which is exact because the
//! whole payload lives in memory. Decoding the produced stream with the same
//! frequency tables reproduces the symbol sequence bit-exactly.

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

const RENORM_THRESHOLD: u64 = 1 << 32;

pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
        }
    }

    /// Encode a symbol occupying `[cum, cum + freq)` out of `FREQ_TOTAL`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0, "zero-frequency symbol");
        debug_assert!(cum.checked_add(freq).map_or(false, |e| e <= FREQ_TOTAL));
        let r = self.range >> FREQ_BITS;
        let (low, carry) = self.low.overflowing_add(r * cum as u64);
        self.low = low;
        if carry {
            self.propagate_carry();
        }
        self.range = r * freq as u64;
        while self.range < RENORM_THRESHOLD {
            self.emit_word();
            self.range <<= 32;
        }
    }

    fn emit_word(&mut self) {
        let word = (self.low >> 32) as u32;
        self.out.extend_from_slice(&word.to_be_bytes());
        self.low <<= 32;
    }

    fn propagate_carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            if *b == 0xFF {
                *b = 0;
            } else {
                *b += 1;
                return;
            }
        }
        // low + range never exceeds the stream capacity, so a carry always
        // finds a non-0xFF byte
        unreachable!("carry escaped the emitted stream");
    }

    /// Flush the remaining 64 bits of state and return the payload.
    pub fn finish(mut self) -> Vec<u8> {
        self.emit_word();
        self.emit_word();
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            code: 0,
            range: u64::MAX,
            bytes,
            pos: 0,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        // reads past the payload see zeros; the symbol count bounds decoding
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative-frequency slot of the next symbol.
    pub fn slot(&self) -> u32 {
        let r = self.range >> FREQ_BITS;
        ((self.code / r) as u32).min(FREQ_TOTAL - 1)
    }

    /// Consume the symbol previously identified via [`Self::slot`].
    pub fn consume(&mut self, cum: u32, freq: u32) {
        let r = self.range >> FREQ_BITS;
        self.code -= r * cum as u64;
        self.range = r * freq as u64;
        while self.range < RENORM_THRESHOLD {
            for _ in 0..4 {
                self.code = (self.code << 8) | self.next_byte() as u64;
            }
            self.range <<= 32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Build a strictly positive frequency table summing to FREQ_TOTAL.
    fn random_table(rng: &mut ChaCha8Rng, symbols: usize) -> Vec<u32> {
        let mut freqs: Vec<u32> = (0..symbols).map(|_| rng.gen_range(1..2000)).collect();
        let sum: u32 = freqs.iter().sum();
        // rescale and fix the remainder on symbol 0
        let mut total = 0u32;
        for f in freqs.iter_mut() {
            *f = (((*f as u64) * (FREQ_TOTAL as u64 - symbols as u64)) / sum as u64) as u32 + 1;
            total += *f;
        }
        freqs[0] += FREQ_TOTAL - total;
        freqs
    }

    fn cumulate(freqs: &[u32]) -> Vec<u32> {
        let mut cum = vec![0u32; freqs.len() + 1];
        for (i, &f) in freqs.iter().enumerate() {
            cum[i + 1] = cum[i] + f;
        }
        cum
    }

    #[test]
    fn empty_stream_is_flush_only() {
        let enc = RangeEncoder::new();
        let bytes = enc.finish();
        assert_eq!(bytes.len(), 8);
    }

    #[test]
    fn roundtrip_random_symbols() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..20 {
            let symbols = rng.gen_range(2..40);
            let freqs = random_table(&mut rng, symbols);
            let cum = cumulate(&freqs);
            let n = rng.gen_range(1..5000);
            let data: Vec<usize> = (0..n).map(|_| rng.gen_range(0..symbols)).collect();

            let mut enc = RangeEncoder::new();
            for &s in &data {
                enc.encode(cum[s], freqs[s]);
            }
            let bytes = enc.finish();

            let mut dec = RangeDecoder::new(&bytes);
            for (i, &want) in data.iter().enumerate() {
                let slot = dec.slot();
                let sym = match cum.binary_search(&slot) {
                    Ok(exact) => exact,
                    Err(ins) => ins - 1,
                };
                assert_eq!(sym, want, "trial {trial}, symbol {i}");
                dec.consume(cum[sym], freqs[sym]);
            }
        }
    }

    #[test]
    fn skewed_distribution_codes_near_entropy() {
        // p(0) = 255/256, p(1) = 1/256; entropy ~ 0.0369 bits/symbol
        let freqs = [FREQ_TOTAL - 256, 256];
        let cum = [0u32, FREQ_TOTAL - 256, FREQ_TOTAL];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let data: Vec<usize> = (0..n)
            .map(|_| usize::from(rng.gen_range(0..256) == 0))
            .collect();
        let mut enc = RangeEncoder::new();
        for &s in &data {
            enc.encode(cum[s], freqs[s]);
        }
        let bytes = enc.finish();
        let entropy_bits: f64 = data
            .iter()
            .map(|&s| -((freqs[s] as f64) / FREQ_TOTAL as f64).log2())
            .sum();
        let actual_bits = (bytes.len() * 8) as f64;
        assert!(actual_bits <= entropy_bits * 1.01 + 128.0,
            "actual {actual_bits} vs entropy {entropy_bits}");

        let mut dec = RangeDecoder::new(&bytes);
        for &want in &data {
            let slot = dec.slot();
            let sym = usize::from(slot >= cum[1]);
            assert_eq!(sym, want);
            dec.consume(cum[sym], freqs[sym]);
        }
    }

    /// Long runs of the most probable symbol exercise carry propagation.
    #[test]
    fn carry_chains_roundtrip() {
        let freqs = [FREQ_TOTAL - 1, 1];
        let cum = [0u32, FREQ_TOTAL - 1, FREQ_TOTAL];
        for pattern in 0..8u64 {
            let mut data = vec![0usize; 3000];
            let mut rng = ChaCha8Rng::seed_from_u64(pattern);
            for _ in 0..5 {
                let at = rng.gen_range(0..3000);
                data[at] = 1;
            }
            let mut enc = RangeEncoder::new();
            for &s in &data {
                enc.encode(cum[s], freqs[s]);
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes);
            for &want in &data {
                let slot = dec.slot();
                let sym = usize::from(slot >= cum[1]);
                assert_eq!(sym, want);
                dec.consume(cum[sym], freqs[sym]);
            }
        }
    }
}
