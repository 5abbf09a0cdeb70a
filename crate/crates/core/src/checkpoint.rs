//! Binary checkpoints.
//!
//! Layout, all integers `u32` little-endian unless noted:
//!
//! ```text
//! "BHFA1"
//! in_channels side n_blocks widths[n_blocks] reductions[n_blocks] latent
//! n_tensors
//! { ndim dims[ndim] f64-LE values } × n_tensors      (declaration order)
//! optional optimizer section:
//!   "ADAM" u64 step u64 episodes_done f64 lr f64 beta1 f64 beta2 f64 eps
//!   n_tensors { tensor } × n_tensors (first moments) { tensor } × n_tensors (second moments)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoder::{Architecture, EncoderModel, Param};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 5] = b"BHFA1";
pub const OPTIMIZER_MAGIC: &[u8; 4] = b"ADAM";

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub adam: Adam,
    pub episodes_done: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub optimizer: Option<OptimizerState>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_arch(out: &mut Vec<u8>, arch: &Architecture) {
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(out, arch.in_channels);
    put_u32(out, arch.side);
    put_u32(out, arch.widths.len());
    for &w in &arch.widths {
        put_u32(out, w);
    }
    for &r in &arch.reductions {
        put_u32(out, r);
    }
    put_u32(out, arch.latent);
}

/// Serialises a model and, optionally, optimizer progress.
pub fn encode(model: &EncoderModel, optimizer: Option<(&Adam, u64)>) -> Vec<u8> {
    let mut out = Vec::new();
    put_arch(&mut out, model.arch());
    put_u32(&mut out, model.params().len());
    for p in model.params() {
        put_tensor(&mut out, &p.value);
    }
    if let Some((adam, episodes)) = optimizer {
        out.extend_from_slice(OPTIMIZER_MAGIC);
        out.extend_from_slice(&adam.steps().to_le_bytes());
        out.extend_from_slice(&episodes.to_le_bytes());
        for v in [adam.lr, adam.beta1, adam.beta2, adam.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let (m, v) = adam.moments();
        put_u32(&mut out, m.len());
        for t in m.iter().chain(v) {
            put_tensor(&mut out, t);
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()?;
        if ndim > 8 {
            return Err(Error::format(self.path, format!("implausible tensor rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n * 8 > self.buf.len() - self.pos {
            return Err(Error::format(self.path, "tensor extends past end of checkpoint"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }

    fn arch(&mut self) -> Result<Architecture> {
        if self.take(MODEL_MAGIC.len())? != MODEL_MAGIC {
            return Err(Error::format(self.path, "not a BHFA1 checkpoint"));
        }
        let in_channels = self.u32()?;
        let side = self.u32()?;
        let blocks = self.u32()?;
        if blocks > 64 {
            return Err(Error::format(self.path, format!("implausible block count {blocks}")));
        }
        let widths = (0..blocks).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let reductions = (0..blocks).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let latent = self.u32()?;
        Architecture::with_reductions(in_channels, side, widths, latent, reductions)
            .map_err(|e| Error::format(self.path, format!("invalid architecture header: {e}")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut cur = Cursor { buf: bytes, pos: 0, path };
    let arch = cur.arch()?;
    let count = cur.u32()?;
    let layout = arch.layout();
    if count != layout.len() {
        return Err(Error::format(path, format!("expected {} tensors, found {count}", layout.len())));
    }
    let mut params = Vec::with_capacity(count);
    for (name, _) in &layout {
        params.push(Param { name: name.clone(), value: cur.tensor()? });
    }
    let model = EncoderModel::from_params(arch, params).map_err(|e| Error::format(path, e.to_string()))?;
    let optimizer = if cur.pos == bytes.len() {
        None
    } else {
        if cur.take(OPTIMIZER_MAGIC.len())? != OPTIMIZER_MAGIC {
            return Err(Error::format(path, "unexpected trailing data after parameters"));
        }
        let step = cur.u64()?;
        let episodes_done = cur.u64()?;
        let (lr, beta1, beta2, eps) = (cur.f64()?, cur.f64()?, cur.f64()?, cur.f64()?);
        let n = cur.u32()?;
        let m = (0..n).map(|_| cur.tensor()).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|_| cur.tensor()).collect::<Result<Vec<_>>>()?;
        if cur.pos != bytes.len() {
            return Err(Error::format(path, "unexpected trailing data after optimizer state"));
        }
        let mut adam = Adam::new(lr, beta1, beta2, eps);
        adam.restore(step, m, v)?;
        Some(OptimizerState { adam, episodes_done })
    };
    Ok(Checkpoint { model, optimizer })
}

pub fn save(path: &Path, model: &EncoderModel, optimizer: Option<(&Adam, u64)>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(model, optimizer)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads only the architecture header.
pub fn read_architecture(path: &Path) -> Result<Architecture> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Cursor { buf: &bytes, pos: 0, path }.arch()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Architecture::new(1, 8, vec![4, 8], 4).unwrap();
        let model = EncoderModel::new(arch, 99);
        let bytes = encode(&model, None);
        assert_eq!(&bytes[..5], b"BHFA1");
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.model, model);
        assert!(back.optimizer.is_none());
        assert_eq!(encode(&back.model, None), bytes);
    }

    #[test]
    fn optimizer_section_round_trips() {
        let arch = Architecture::new(1, 8, vec![4, 8], 4).unwrap();
        let mut model = EncoderModel::new(arch, 5);
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let grads: Vec<Tensor> = model.params().iter().map(|p| p.value.map(|v| v * 0.5 + 0.1)).collect();
        adam.step(model.params_mut().iter_mut().map(|p| &mut p.value), &grads).unwrap();
        let bytes = encode(&model, Some((&adam, 7)));
        let back = decode(&bytes, Path::new("mem")).unwrap();
        let opt = back.optimizer.unwrap();
        assert_eq!(opt.episodes_done, 7);
        assert_eq!(opt.adam, adam);
        assert_eq!(encode(&back.model, Some((&opt.adam, 7))), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let arch = Architecture::new(1, 8, vec![4, 8], 4).unwrap();
        let bytes = encode(&EncoderModel::new(arch, 1), None);
        let p = Path::new("mem");
        assert!(decode(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, p).is_err());
        let mut trailing = bytes;
        trailing.extend_from_slice(b"junk");
        assert!(decode(&trailing, p).is_err());
    }
}
