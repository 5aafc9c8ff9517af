//! `WSPZ` compressed-model container. All integers little-endian:
//!
//! ```text
//! magic "WSPZ" | version u16 | mode u8 | delta f64 | seed u64 | prng u8
//! input C,H,W u32×3 | layer count u32 | per layer: kind u8, C, D, r, stride u32
//! codebook count u32 | (bin i32, value f64)*
//! bias count u32 | f64*
//! lzw: min width u8 | max dict bits u8 | alphabet u32 | symbol count u64 | bin i32 per symbol
//! stream length u64 | stream bytes
//! crc32 of everything above
//! ```

use std::collections::BTreeMap;

use super::lzw::{lzw_decode, lzw_encode, LzwParams};
use super::{DitherStream, QuantMode, QuantizedModel};
use crate::error::{Error, Result};
use crate::nn::{Architecture, LayerSpec};

pub const MAGIC: &[u8; 4] = b"WSPZ";
pub const FORMAT_VERSION: u16 = 1;

pub fn write_container(qm: &QuantizedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(qm.mode.code());
    out.extend_from_slice(&qm.delta.to_le_bytes());
    out.extend_from_slice(&qm.seed.to_le_bytes());
    out.push(DitherStream::PRNG_ID);
    write_arch(&mut out, &qm.arch)?;

    put_u32(&mut out, qm.codebook.len())?;
    for (&b, &c) in &qm.codebook {
        out.extend_from_slice(&b.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
    }
    put_u32(&mut out, qm.raw.len())?;
    for v in &qm.raw {
        out.extend_from_slice(&v.to_le_bytes());
    }

    let mut alphabet: Vec<i32> = qm.bins.clone();
    alphabet.sort_unstable();
    alphabet.dedup();
    let index: BTreeMap<i32, u32> = alphabet.iter().enumerate().map(|(i, &b)| (b, i as u32)).collect();
    let symbols: Vec<u32> = qm.bins.iter().map(|b| index[b]).collect();
    let params = LzwParams::for_alphabet(alphabet.len() as u32)?;
    out.push(params.min_width);
    out.push(params.max_dict_bits);
    put_u32(&mut out, alphabet.len())?;
    out.extend_from_slice(&(symbols.len() as u64).to_le_bytes());
    for b in &alphabet {
        out.extend_from_slice(&b.to_le_bytes());
    }
    let stream = lzw_encode(&symbols, &params)?;
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    out.extend_from_slice(&stream);

    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn read_container(bytes: &[u8]) -> Result<QuantizedModel> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Format { pos: 0, msg: "container too short".into() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader { data: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format { pos: 0, msg: "bad magic".into() });
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format { pos: 4, msg: format!("unsupported version {version}") });
    }
    let at = r.pos;
    let mode = QuantMode::from_code(r.u8()?).ok_or_else(|| Error::Format { pos: at, msg: "unknown mode".into() })?;
    let delta = r.f64()?;
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Format { pos: r.pos - 8, msg: format!("invalid cell size {delta}") });
    }
    let seed = r.u64()?;
    let at = r.pos;
    let prng = r.u8()?;
    if prng != DitherStream::PRNG_ID {
        return Err(Error::Format { pos: at, msg: format!("unknown dither generator {prng}") });
    }
    let arch = read_arch(&mut r)?;

    let n = r.u32()? as usize;
    let mut codebook = BTreeMap::new();
    for _ in 0..n {
        let at = r.pos;
        let b = r.i32()?;
        let c = r.f64()?;
        if b == 0 || codebook.insert(b, c).is_some() {
            return Err(Error::Format { pos: at, msg: format!("invalid codebook bin {b}") });
        }
    }
    let n = r.u32()? as usize;
    let raw = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;

    let at = r.pos;
    let min_width = r.u8()?;
    let max_dict_bits = r.u8()?;
    let alphabet = r.u32()?;
    let params = LzwParams { alphabet, min_width, max_dict_bits };
    params.validate().map_err(|e| Error::Format { pos: at, msg: e.to_string() })?;
    let count = r.u64()?;
    let mapping = (0..alphabet).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
    let len = r.u64()? as usize;
    let at = r.pos;
    let stream = r.take(len)?;
    if r.pos != body.len() {
        return Err(Error::Format { pos: r.pos, msg: "trailing bytes".into() });
    }
    let symbols = lzw_decode(stream, &params).map_err(|e| match e {
        Error::CorruptStream { bit, msg } => Error::Format {
            pos: at + (bit / 8) as usize,
            msg: format!("coded stream bit {bit}: {msg}"),
        },
        other => other,
    })?;
    if symbols.len() as u64 != count {
        return Err(Error::Format { pos: at, msg: format!("decoded {} symbols, header says {count}", symbols.len()) });
    }
    let bins: Vec<i32> = symbols.iter().map(|&s| mapping[s as usize]).collect();
    if let Some(b) = bins.iter().find(|b| **b != 0 && !codebook.contains_key(*b)) {
        return Err(Error::Format { pos: at, msg: format!("bin {b} has no codebook entry") });
    }
    Ok(QuantizedModel { mode, delta, seed, arch, bins, codebook, raw })
}

/// Original size (4 bytes per parameter, biases included) over container size.
pub fn compression_ratio(num_params: usize, container_bytes: usize) -> f64 {
    (4 * num_params) as f64 / container_bytes as f64
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Writes the layer table shared by the container and checkpoint formats.
pub fn write_arch(out: &mut Vec<u8>, arch: &Architecture) -> Result<()> {
    for d in arch.input {
        put_u32(out, d)?;
    }
    put_u32(out, arch.layers.len())?;
    for l in &arch.layers {
        let (c, d, r, s) = match *l {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride } => (in_channels, out_channels, kernel, stride),
            LayerSpec::Relu => (0, 0, 0, 0),
            LayerSpec::MaxPool { size } => (0, 0, size, size),
            LayerSpec::Dense { inputs, outputs } => (inputs, outputs, 1, 1),
        };
        out.push(l.kind_code());
        for v in [c, d, r, s] {
            put_u32(out, v)?;
        }
    }
    Ok(())
}

pub fn read_arch(r: &mut Reader<'_>) -> Result<Architecture> {
    let input = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let at = r.pos;
        let kind = r.u8()?;
        let [c, d, k, s] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
        layers.push(match kind {
            0 => LayerSpec::Conv { in_channels: c, out_channels: d, kernel: k, stride: s },
            1 => LayerSpec::Relu,
            2 => LayerSpec::MaxPool { size: k },
            3 => LayerSpec::Dense { inputs: c, outputs: d },
            _ => return Err(Error::Format { pos: at, msg: format!("unknown layer kind {kind}") }),
        });
    }
    let arch = Architecture { input, layers };
    arch.shapes().map_err(|e| Error::Format { pos: r.pos, msg: format!("inconsistent architecture: {e}") })?;
    Ok(arch)
}

/// Little-endian cursor that reports the byte offset of a short read.
pub struct Reader<'a> {
    pub data: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| Error::Format {
            pos: self.pos,
            msg: format!("truncated: need {n} bytes"),
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Network;

    fn model(mode: QuantMode) -> QuantizedModel {
        let net = Network::<f64>::init_he(Architecture::paper_net(), 3).unwrap();
        QuantizedModel::from_network(&net, 0.02, mode, 11).unwrap()
    }

    #[test]
    fn roundtrip_both_modes() {
        for mode in [QuantMode::Uniform, QuantMode::Dithered] {
            let qm = model(mode);
            let bytes = write_container(&qm).unwrap();
            assert_eq!(&bytes[..4], MAGIC);
            let back = read_container(&bytes).unwrap();
            assert_eq!(back, qm);
            let a = back.dequantize().unwrap();
            let b = read_container(&bytes).unwrap().dequantize().unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = write_container(&model(QuantMode::Dithered)).unwrap();
        for pos in [0, 5, 40, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(read_container(&bad), Err(Error::Crc { .. })), "byte {pos}");
        }
        assert!(read_container(&bytes[..bytes.len() - 3]).is_err());
        assert!(read_container(&[]).is_err());
    }

    #[test]
    fn bad_magic_with_valid_crc() {
        let mut bytes = write_container(&model(QuantMode::Uniform)).unwrap();
        bytes[0] = b'X';
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(read_container(&bytes), Err(Error::Format { pos: 0, .. })));
    }

    #[test]
    fn ratio_counts_four_bytes_per_parameter() {
        assert_eq!(compression_ratio(1000, 400), 10.0);
    }
}
