//! `PNKC` checkpoints.
//!
//! ```text
//! "PNKC" | version:u32 | config hash (64 hex bytes) | config_len:u32 | config text
//! | epoch:u32 | n_params:u32 | n_buffers:u32
//! | manifest: per tensor name_len:u16, name, ndim:u8, dims:u32…
//! | params f32… | buffers f64… | has_velocity:u8 | velocity f32…
//! ```

use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PNKC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_hash: String,
    pub epoch: u32,
    pub store: ParamStore<f32>,
    pub velocity: Option<Vec<Vec<f32>>>,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, epoch: u32, store: &ParamStore<f32>, velocity: Option<&[Vec<f32>]>) -> Self {
        Checkpoint {
            config_text: config.render(),
            config_hash: config.hash(),
            epoch,
            store: store.clone(),
            velocity: velocity.filter(|v| !v.is_empty()).map(<[Vec<f32>]>::to_vec),
        }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config_text)
    }

    /// Rebuilds the model from the embedded config and checks that the stored
    /// tensors match its layout.
    pub fn restore(&self) -> Result<(ExperimentConfig, Detector, ParamStore<f32>)> {
        let cfg = self.config()?;
        let (model, fresh) = Detector::build::<f32>(&cfg.model_spec(), 0)?;
        if fresh.param_names() != self.store.param_names() || fresh.buffer_names() != self.store.buffer_names() {
            return Err(Error::config("checkpoint tensors do not match the model built from its config"));
        }
        for (a, b) in fresh.params().iter().zip(self.store.params()) {
            if a.shape() != b.shape() {
                return Err(Error::config("checkpoint tensor shapes do not match the model"));
            }
        }
        for (a, b) in fresh.buffers().iter().zip(self.store.buffers()) {
            if a.len() != b.len() {
                return Err(Error::config("checkpoint buffer sizes do not match the model"));
            }
        }
        Ok((cfg, model, self.store.clone()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        u32le(&mut out, VERSION as usize);
        let mut hash = self.config_hash.as_bytes().to_vec();
        hash.resize(64, b'0');
        out.extend_from_slice(&hash);
        u32le(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        u32le(&mut out, self.epoch as usize);
        let s = &self.store;
        u32le(&mut out, s.params().len());
        u32le(&mut out, s.buffers().len());
        let entry = |out: &mut Vec<u8>, name: &str, dims: &[usize]| {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for &d in dims {
                u32le(out, d);
            }
        };
        for (t, n) in s.params().iter().zip(s.param_names()) {
            entry(&mut out, n, t.shape());
        }
        for (b, n) in s.buffers().iter().zip(s.buffer_names()) {
            entry(&mut out, n, &[b.len()]);
        }
        for t in s.params() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for b in s.buffers() {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.velocity {
            Some(vel) => {
                out.push(1);
                for v in vel.iter().flatten() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad magic, expected \"PNKC\"".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = String::from_utf8(r.take(64)?.to_vec()).map_err(|_| r.err("config hash is not ASCII"))?;
        let n = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.err("config text is not UTF-8"))?;
        let epoch = r.u32()?;
        let n_params = r.u32()? as usize;
        let n_buffers = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n_params + n_buffers);
        for _ in 0..n_params + n_buffers {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("tensor name is not UTF-8"))?;
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, dims));
        }
        let mut store = ParamStore::new();
        for (name, dims) in &manifest[..n_params] {
            let count: usize = dims.iter().product();
            let data = r.f32s(count)?;
            store.add_param(name.clone(), Tensor::from_vec(dims, data)?);
        }
        for (name, dims) in &manifest[n_params..] {
            let count: usize = dims.iter().product();
            let raw = r.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.add_buffer(name.clone(), data);
        }
        let velocity = match r.take(1)?[0] {
            0 => None,
            1 => Some(
                store
                    .params()
                    .iter()
                    .map(|p| p.numel())
                    .collect::<Vec<_>>()
                    .into_iter()
                    .map(|n| r.f32s(n))
                    .collect::<Result<Vec<_>>>()?,
            ),
            f => return Err(r.err(format!("bad optimizer-state flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let ck = Checkpoint {
            config_text,
            config_hash,
            epoch,
            store,
            velocity,
        };
        if ck.config()?.hash() != ck.config_hash {
            return Err(Error::Format {
                offset: 8,
                detail: "config hash does not match the embedded config".into(),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.model.widths = vec![4, 8, 8, 16, 16];
        c.model.head_width = 8;
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = small_config();
        let (_, mut store) = Detector::build::<f32>(&cfg.model_spec(), 3).unwrap();
        store.buffers_mut()[0][0] = 0.123456789;
        let vel: Vec<Vec<f32>> = store.params().iter().map(|p| vec![0.5; p.numel()]).collect();
        let ck = Checkpoint::new(&cfg, 7, &store, Some(&vel));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.epoch, 7);
        assert_eq!(back.velocity.as_ref().unwrap(), &vel);
        assert_eq!(back.store.params(), store.params());
        assert_eq!(back.store.buffers(), store.buffers());
        assert_eq!(back.config().unwrap(), cfg);
        back.restore().unwrap();
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let cfg = small_config();
        let (_, store) = Detector::build::<f32>(&cfg.model_spec(), 3).unwrap();
        let bytes = Checkpoint::new(&cfg, 1, &store, None).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut tampered = bytes.clone();
        tampered[8] ^= 1;
        assert!(Checkpoint::from_bytes(&tampered).is_err());
    }
}
