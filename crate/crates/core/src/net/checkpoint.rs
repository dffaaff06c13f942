//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EVSSMCK\0"
//! version  u32
//! header   u32 length + UTF-8 `key=value` lines (network config, resolution,
//!          iteration, seed)
//! count    u32
//! count x  { name: u32 length + UTF-8, dtype: u8 (1 = f64), rank: u32,
//!            extents: rank x u64, payload: f64 values }
//! ```
//!
//! Optimizer tensors are stored alongside the parameters under an `adam.`
//! prefix.

use std::path::Path;

use super::{NetParams, NetworkConfig};
use crate::config::{parse_key_values, parse_value};
use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EVSSMCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const OPTIMIZER_PREFIX: &str = "adam.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    /// Resolution the screening weights were sized for.
    pub height: usize,
    pub width: usize,
    pub iteration: u64,
    pub seed: u64,
    pub params: ParamStore,
    /// Optimizer moments; every key starts with `adam.`.
    pub optimizer: ParamStore,
}

impl Checkpoint {
    pub fn new(config: &NetworkConfig, height: usize, width: usize, params: &NetParams) -> Self {
        Self {
            config: config.clone(),
            height,
            width,
            iteration: 0,
            seed: 0,
            params: params.to_store(""),
            optimizer: ParamStore::new(),
        }
    }

    /// Rebuilds typed parameters, checking every name and shape.
    pub fn net_params(&self) -> Result<NetParams> {
        let mut p = NetParams::init(&self.config, self.height, self.width, 0)?;
        p.load_store(&self.params, "")?;
        let expected = p.to_store("");
        if let Some(extra) = self.params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Format(format!("unexpected parameter `{extra}`")));
        }
        Ok(p)
    }

    fn header(&self) -> String {
        let mut lines: Vec<String> = self.config.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        lines.push(format!("height={}", self.height));
        lines.push(format!("width={}", self.width));
        lines.push(format!("iteration={}", self.iteration));
        lines.push(format!("seed={}", self.seed));
        lines.join("\n") + "\n"
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = self.header();
        put_str(&mut out, &header);
        let count = self.params.len() + self.optimizer.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in self.params.iter().chain(&self.optimizer) {
            put_str(&mut out, name);
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header = r.string()?;
        let mut config = NetworkConfig::default();
        let (mut height, mut width, mut iteration, mut seed) = (None, None, None, None);
        for (k, v) in parse_key_values(&header)? {
            match k.as_str() {
                "height" => height = Some(parse_value(&k, &v)?),
                "width" => width = Some(parse_value(&k, &v)?),
                "iteration" => iteration = Some(parse_value(&k, &v)?),
                "seed" => seed = Some(parse_value(&k, &v)?),
                _ if config.set(&k, &v)? => {}
                _ => return Err(Error::Format(format!("unknown header key `{k}`"))),
            }
        }
        config.validate()?;
        let missing = |what: &str| Error::Format(format!("checkpoint header lacks `{what}`"));
        let mut ck = Checkpoint {
            config,
            height: height.ok_or_else(|| missing("height"))?,
            width: width.ok_or_else(|| missing("width"))?,
            iteration: iteration.ok_or_else(|| missing("iteration"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            params: ParamStore::new(),
            optimizer: ParamStore::new(),
        };
        let count = r.u32()?;
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Format(format!("tensor `{name}` has unsupported dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
            let n = n.filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining())).ok_or_else(|| {
                Error::Format(format!("tensor `{name}` with shape {shape:?} exceeds the file"))
            })?;
            let data = r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data)?;
            let store = if name.starts_with(OPTIMIZER_PREFIX) { &mut ck.optimizer } else { &mut ck.params };
            if store.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after the last tensor", r.remaining())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}
