//! Variable-width LZW over a dense integer alphabet.
//!
//! Codes `0..K` are the literals, `K` is CLEAR, `K+1` is end-of-stream and
//! dictionary entries start at `K+2`. The code width grows with the number of
//! codes emitted since the last reset, so encoder and decoder agree on it
//! without the classic one-entry lag problem. When the dictionary reaches
//! `2^max_dict_bits` entries the encoder emits CLEAR and both sides start over.
//! Codes are packed LSB-first.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LzwParams {
    pub alphabet: u32,
    pub min_width: u8,
    pub max_dict_bits: u8,
}

impl LzwParams {
    pub const MAX_DICT_BITS: u8 = 16;

    pub fn for_alphabet(alphabet: u32) -> Result<Self> {
        let p = Self {
            alphabet,
            min_width: 9.max(bit_length(alphabet as u64 + 1)),
            max_dict_bits: Self::MAX_DICT_BITS,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_dict_bits == 0 || self.max_dict_bits > 24 {
            return Err(Error::InvalidArgument(format!("dictionary bits {} out of range", self.max_dict_bits)));
        }
        if self.alphabet as u64 + 2 >= self.dict_limit() {
            return Err(Error::InvalidArgument(format!(
                "alphabet of {} symbols does not fit a 2^{} dictionary",
                self.alphabet, self.max_dict_bits
            )));
        }
        if (self.min_width as u32) < bit_length(self.alphabet as u64 + 1) as u32 || self.min_width > self.max_dict_bits.max(9) {
            return Err(Error::InvalidArgument(format!("initial code width {} invalid", self.min_width)));
        }
        Ok(())
    }

    fn clear(&self) -> u32 {
        self.alphabet
    }

    fn eof(&self) -> u32 {
        self.alphabet + 1
    }

    fn first_free(&self) -> u32 {
        self.alphabet + 2
    }

    fn dict_limit(&self) -> u64 {
        1u64 << self.max_dict_bits
    }

    /// Width of the `k`-th code after a reset: enough for any code the
    /// encoder may hold at that point (`first_free + k - 1`).
    fn width(&self, k: u64) -> u8 {
        self.min_width.max(bit_length(self.first_free() as u64 + k))
    }
}

fn bit_length(v: u64) -> u8 {
    (64 - v.leading_zeros()) as u8
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    bits: u32,
}

impl BitWriter {
    fn new() -> Self {
        Self { out: Vec::new(), acc: 0, bits: 0 }
    }

    fn put(&mut self, code: u32, width: u8) {
        self.acc |= (code as u64) << self.bits;
        self.bits += width as u32;
        while self.bits >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.bits -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.bits > 0 {
            self.out.push(self.acc as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    fn get(&mut self, width: u8) -> Result<u32> {
        let end = self.pos + width as u64;
        if end > self.data.len() as u64 * 8 {
            return Err(Error::CorruptStream {
                bit: self.pos,
                msg: "stream ends before end-of-stream code".into(),
            });
        }
        let mut v = 0u32;
        for i in 0..width as u64 {
            let b = self.pos + i;
            let bit = (self.data[(b / 8) as usize] >> (b % 8)) & 1;
            v |= (bit as u32) << i;
        }
        self.pos = end;
        Ok(v)
    }
}

pub fn lzw_encode(symbols: &[u32], params: &LzwParams) -> Result<Vec<u8>> {
    params.validate()?;
    let mut w = BitWriter::new();
    let mut dict: HashMap<(u32, u32), u32> = HashMap::new();
    let mut next = params.first_free();
    let mut k: u64 = 0;
    let mut prefix: Option<u32> = None;
    for &s in symbols {
        if s >= params.alphabet {
            return Err(Error::InvalidArgument(format!("symbol {s} outside alphabet of {}", params.alphabet)));
        }
        let Some(p) = prefix else {
            prefix = Some(s);
            continue;
        };
        if let Some(&c) = dict.get(&(p, s)) {
            prefix = Some(c);
            continue;
        }
        w.put(p, params.width(k));
        k += 1;
        dict.insert((p, s), next);
        next += 1;
        if next as u64 == params.dict_limit() {
            w.put(params.clear(), params.width(k));
            dict.clear();
            next = params.first_free();
            k = 0;
        }
        prefix = Some(s);
    }
    if let Some(p) = prefix {
        w.put(p, params.width(k));
        k += 1;
    }
    w.put(params.eof(), params.width(k));
    Ok(w.finish())
}

pub fn lzw_decode(bytes: &[u8], params: &LzwParams) -> Result<Vec<u32>> {
    params.validate()?;
    let mut r = BitReader { data: bytes, pos: 0 };
    // Entry `c - first_free` is (prefix code, last symbol, first symbol).
    let mut entries: Vec<(u32, u32, u32)> = Vec::new();
    let mut out = Vec::new();
    let mut k: u64 = 0;
    let mut prev: Option<u32> = None;
    let mut scratch = Vec::new();
    loop {
        let at = r.pos;
        let code = r.get(params.width(k))?;
        k += 1;
        if code == params.eof() {
            break;
        }
        if code == params.clear() {
            entries.clear();
            prev = None;
            k = 0;
            continue;
        }
        let next = params.first_free() + entries.len() as u32;
        let first_of = |c: u32, entries: &[(u32, u32, u32)]| {
            if c < params.alphabet {
                c
            } else {
                entries[(c - params.first_free()) as usize].2
            }
        };
        match prev {
            None => {
                if code >= params.alphabet {
                    return Err(Error::CorruptStream {
                        bit: at,
                        msg: format!("code {code} where a literal is required"),
                    });
                }
                out.push(code);
            }
            Some(p) => {
                let head = if code < next {
                    first_of(code, &entries)
                } else if code == next {
                    first_of(p, &entries)
                } else {
                    return Err(Error::CorruptStream {
                        bit: at,
                        msg: format!("code {code} beyond dictionary size {next}"),
                    });
                };
                if (next as u64) < params.dict_limit() {
                    entries.push((p, head, first_of(p, &entries)));
                }
                expand(code, params, &entries, &mut scratch);
                out.extend(scratch.iter().rev());
            }
        }
        prev = Some(code);
    }
    Ok(out)
}

/// Writes the string of `code` into `buf` in reverse order.
fn expand(mut code: u32, params: &LzwParams, entries: &[(u32, u32, u32)], buf: &mut Vec<u32>) {
    buf.clear();
    while code >= params.alphabet {
        let (p, last, _) = entries[(code - params.first_free()) as usize];
        buf.push(last);
        code = p;
    }
    buf.push(code);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(symbols: &[u32], alphabet: u32) -> Vec<u8> {
        let p = LzwParams::for_alphabet(alphabet).unwrap();
        let enc = lzw_encode(symbols, &p).unwrap();
        assert_eq!(lzw_decode(&enc, &p).unwrap(), symbols);
        enc
    }

    #[test]
    fn empty_stream() {
        let enc = roundtrip(&[], 3);
        assert_eq!(enc.len(), 2);
    }

    #[test]
    fn kwkwk_case() {
        roundtrip(&[0, 0, 0, 0, 0, 0, 0], 2);
        roundtrip(&[0, 1, 0, 1, 0, 1, 0], 2);
    }

    #[test]
    fn identical_symbols_compress() {
        let s = vec![1u32; 10_000];
        let enc = roundtrip(&s, 5);
        assert!(enc.len() < 400, "{}", enc.len());
    }

    #[test]
    fn dictionary_reset() {
        // Enough distinct pairs to overflow a 2^16 dictionary several times.
        let mut x = 12345u64;
        let s: Vec<u32> = (0..400_000)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 33) % 200) as u32
            })
            .collect();
        roundtrip(&s, 200);
    }

    #[test]
    fn width_grows_from_nine_bits() {
        let p = LzwParams::for_alphabet(3).unwrap();
        assert_eq!(p.min_width, 9);
        assert_eq!(p.width(0), 9);
        assert_eq!(p.width(506), 9);
        assert_eq!(p.width(507), 10);
        let big = LzwParams::for_alphabet(1000).unwrap();
        assert_eq!(big.min_width, 10);
    }

    #[test]
    fn corrupt_streams_report_position() {
        let p = LzwParams::for_alphabet(4).unwrap();
        assert!(matches!(lzw_decode(&[], &p), Err(Error::CorruptStream { bit: 0, .. })));
        // First code must be a literal; 300 is a dictionary code.
        let mut w = BitWriter::new();
        w.put(300, 9);
        assert!(matches!(lzw_decode(&w.finish(), &p), Err(Error::CorruptStream { bit: 0, .. })));
        let mut w = BitWriter::new();
        w.put(1, 9);
        w.put(400, 9);
        assert!(matches!(lzw_decode(&w.finish(), &p), Err(Error::CorruptStream { bit: 9, .. })));
        let enc = lzw_encode(&[1, 2, 3, 1, 2, 3], &p).unwrap();
        assert!(lzw_decode(&enc[..enc.len() - 1], &p).is_err());
    }

    #[test]
    fn rejects_out_of_alphabet_symbol() {
        let p = LzwParams::for_alphabet(4).unwrap();
        assert!(lzw_encode(&[4], &p).is_err());
    }
}
