//! Carry-propagating range coder with a 32-bit range and 64-bit low, over
//! frequency tables whose totals are `2^PROB_BITS`.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

/// Cumulative frequency table: `cum[s]..cum[s + 1]` is symbol `s`'s slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    cum: Vec<u32>,
}

impl FrequencyTable {
    /// Builds a table from per-symbol frequencies, each ≥ 1, summing to
    /// [`PROB_TOTAL`].
    pub fn new(freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() || freqs.iter().any(|&f| f == 0) {
            return Err(Error::contract("frequencies must be positive"));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        let mut acc = 0u64;
        for &f in freqs {
            acc += f as u64;
            cum.push(acc.min(u32::MAX as u64) as u32);
        }
        if acc != PROB_TOTAL as u64 {
            return Err(Error::contract(format!(
                "frequencies sum to {acc}, expected {PROB_TOTAL}"
            )));
        }
        Ok(FrequencyTable { cum })
    }

    /// Quantizes a probability vector, giving every symbol at least one slot
    /// and the rounding remainder to the most probable symbol.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self> {
        let n = probs.len();
        if n == 0 || n as u32 >= PROB_TOTAL {
            return Err(Error::contract("bad alphabet size"));
        }
        let total: f64 = probs.iter().sum();
        if !(total > 0.0 && total.is_finite()) || probs.iter().any(|&p| p < 0.0) {
            return Err(Error::contract("probabilities must be non-negative with positive sum"));
        }
        let spare = (PROB_TOTAL - n as u32) as f64;
        let mut freqs: Vec<u32> = probs
            .iter()
            .map(|&p| 1 + (p / total * spare).floor() as u32)
            .collect();
        let used: u32 = freqs.iter().sum();
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        freqs[best] += PROB_TOTAL - used;
        FrequencyTable::new(&freqs)
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// `−log₂(freq/total)` for symbol `s`.
    pub fn cost_bits(&self, s: usize) -> f64 {
        -(self.freq(s) as f64 / PROB_TOTAL as f64).log2()
    }

    fn find(&self, target: u32) -> usize {
        // last index with cum[i] <= target
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
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
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &FrequencyTable, symbol: usize) {
        let start = table.cum[symbol];
        let size = table.freq(symbol);
        let r = self.range >> PROB_BITS;
        self.low += r as u64 * start as u64;
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    decoded: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        if input.len() < 5 {
            return Err(Error::Decode {
                symbol_index: 0,
                msg: format!("payload of {} bytes is shorter than the coder preamble", input.len()),
            });
        }
        let mut code = 0u32;
        for &b in &input[1..5] {
            code = (code << 8) | b as u32;
        }
        Ok(RangeDecoder {
            input,
            pos: 5,
            code,
            range: u32::MAX,
            decoded: 0,
        })
    }

    pub fn decode(&mut self, table: &FrequencyTable) -> Result<usize> {
        let r = self.range >> PROB_BITS;
        let target = self.code / r;
        if target >= PROB_TOTAL {
            return Err(Error::Decode {
                symbol_index: self.decoded,
                msg: "code value outside the table range".into(),
            });
        }
        let s = table.find(target);
        self.code -= r * table.cum[s];
        self.range = r * table.freq(s);
        while self.range < TOP {
            let byte = *self.input.get(self.pos).ok_or_else(|| Error::Decode {
                symbol_index: self.decoded,
                msg: "payload exhausted".into(),
            })?;
            self.pos += 1;
            self.code = (self.code << 8) | byte as u32;
            self.range <<= 8;
        }
        self.decoded += 1;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn skewed_table(n: usize, seed: u64) -> FrequencyTable {
        let mut r = SplitMix64::new(seed);
        let probs: Vec<f64> = (0..n).map(|_| r.next_f64().powi(4) + 1e-6).collect();
        FrequencyTable::from_probabilities(&probs).unwrap()
    }

    #[test]
    fn table_sums_to_total() {
        let t = skewed_table(128, 3);
        let total: u32 = (0..t.symbols()).map(|s| t.freq(s)).sum();
        assert_eq!(total, PROB_TOTAL);
        assert!((0..t.symbols()).all(|s| t.freq(s) >= 1));
    }

    #[test]
    fn rejects_bad_frequencies() {
        assert!(FrequencyTable::new(&[0, PROB_TOTAL]).is_err());
        assert!(FrequencyTable::new(&[1, 2]).is_err());
    }

    #[test]
    fn empty_stream_round_trips() {
        let bytes = RangeEncoder::new().finish();
        assert_eq!(bytes.len(), 5);
        RangeDecoder::new(&bytes).unwrap();
    }

    #[test]
    fn truncated_payload_reports_symbol() {
        let t = skewed_table(16, 1);
        let mut enc = RangeEncoder::new();
        for i in 0..2000 {
            enc.encode(&t, i % 16);
        }
        let bytes = enc.finish();
        let cut = &bytes[..bytes.len() / 2];
        let mut dec = RangeDecoder::new(cut).unwrap();
        let err = (0..2000).find_map(|_| dec.decode(&t).err()).unwrap();
        assert!(matches!(err, Error::Decode { symbol_index, .. } if symbol_index > 0));
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(seed in any::<u64>(), len in 0usize..600) {
            let t = skewed_table(32, seed);
            let mut r = SplitMix64::new(seed ^ 0xABCD);
            let syms: Vec<usize> = (0..len).map(|_| r.range_inclusive(0, 31) as usize).collect();
            let mut enc = RangeEncoder::new();
            for &s in &syms {
                enc.encode(&t, s);
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes).unwrap();
            for &s in &syms {
                prop_assert_eq!(dec.decode(&t).unwrap(), s);
            }
        }
    }
}
