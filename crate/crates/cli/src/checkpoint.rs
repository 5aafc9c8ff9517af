//! `WSPC` training checkpoint: architecture, raw f64 parameters, optimizer
//! and regularizer state, iteration counter, trailing CRC-32. Little-endian.

use winojoint::compressor::{read_arch, write_arch, Reader};
use winojoint::nn::{Optimizer, OptimizerKind};
use winojoint::{Network, RegularizerState, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"WSPC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    /// Global iterations completed.
    pub iteration: u64,
    pub optimizer: Optimizer<f64>,
    pub reg: RegularizerState,
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(CliError::Format(format!("byte {}: tensor rank {rank} too large", r.pos)));
    }
    let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<winojoint::Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    if n.saturating_mul(8) > r.data.len() - r.pos {
        return Err(CliError::Format(format!("byte {}: tensor larger than file", r.pos)));
    }
    let data = (0..n).map(|_| r.f64()).collect::<winojoint::Result<Vec<_>>>()?;
    Ok(Tensor::from_vec(&shape, data)?)
}

fn put_tensors(out: &mut Vec<u8>, ts: &[Tensor]) {
    out.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for t in ts {
        put_tensor(out, t);
    }
}

fn get_tensors(r: &mut Reader<'_>) -> Result<Vec<Tensor>> {
    let n = r.u32()? as usize;
    (0..n).map(|_| get_tensor(r)).collect()
}

fn put_optimizer(out: &mut Vec<u8>, o: &Optimizer<f64>) {
    let (code, b1, b2, eps) = match o.kind {
        OptimizerKind::Sgd => (0u8, 0.0, 0.0, 0.0),
        OptimizerKind::Adam { beta1, beta2, eps } => (1u8, beta1, beta2, eps),
    };
    out.push(code);
    for v in [b1, b2, eps, o.lr] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&o.step.to_le_bytes());
    let (m, v) = o.moments();
    put_tensors(out, m);
    put_tensors(out, v);
}

fn get_optimizer(r: &mut Reader<'_>) -> Result<Optimizer<f64>> {
    let at = r.pos;
    let code = r.u8()?;
    let (b1, b2, eps, lr) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let kind = match code {
        0 => OptimizerKind::Sgd,
        1 => OptimizerKind::Adam { beta1: b1, beta2: b2, eps },
        _ => return Err(CliError::Format(format!("byte {at}: unknown optimizer kind {code}"))),
    };
    let step = r.u64()?;
    let first = get_tensors(r)?;
    let second = get_tensors(r)?;
    Ok(Optimizer::restore(kind, lr, step, first, second))
}

pub fn write_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_arch(&mut out, ck.net.architecture())?;
    out.extend_from_slice(&ck.iteration.to_le_bytes());
    put_tensors(&mut out, ck.net.params());
    put_optimizer(&mut out, &ck.optimizer);
    let reg = &ck.reg;
    for v in [reg.zeta_wd(), reg.zeta_sd(), reg.alpha, reg.theta_wd, reg.theta_sd] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(reg.learnable as u8);
    put_optimizer(&mut out, reg.optimizer());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 10 {
        return Err(CliError::Format("checkpoint too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(winojoint::Error::Crc { stored, computed }.into());
    }
    let mut r = Reader::new(body);
    if r.take(4)? != MAGIC {
        return Err(CliError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CliError::Format(format!("unsupported checkpoint version {version}")));
    }
    let arch = read_arch(&mut r)?;
    let iteration = r.u64()?;
    let params = get_tensors(&mut r)?;
    let net = Network::from_params(arch, params)?;
    let optimizer = get_optimizer(&mut r)?;
    let (zwd, zsd, alpha, theta_wd, theta_sd) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let learnable = r.u8()? != 0;
    let zopt = get_optimizer(&mut r)?;
    if r.pos != body.len() {
        return Err(CliError::Format(format!("byte {}: trailing data", r.pos)));
    }
    let mut reg = RegularizerState::new(zwd, alpha, zopt.kind, zopt.lr);
    reg.set_zeta(zwd, zsd);
    reg.theta_wd = theta_wd;
    reg.theta_sd = theta_sd;
    reg.learnable = learnable;
    reg.set_optimizer(zopt);
    Ok(Checkpoint { net, iteration, optimizer, reg })
}
