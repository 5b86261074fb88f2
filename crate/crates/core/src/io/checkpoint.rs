//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "VQVK" u32:version u8:kind
//! u64:len config-text
//! u64:step
//! rng: [u8; 32] seed, u64 stream, u128 word position
//! table:params
//! u8:has_ema  [tensor:counts tensor:sums]
//! u8:has_adam [u64:t f32:lr f32:beta1 f32:beta2 f32:eps table:m table:v]
//! ```
//!
//! A table is `u32:count` entries of `u32:len name u32:rank u64:dims… f32:data…`.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::RunConfig;
use super::{IoError, Result};
use crate::nets::{Params, VqVae, EMBEDDINGS};
use crate::prior::Prior;
use crate::quantizer::{Codebook, EmaState};
use crate::tensor::Tensor;
use crate::trainer::{Adam, RngState};

pub const MAGIC: &[u8; 4] = b"VQVK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    VqVae(VqVae),
    Prior(Prior),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub rng: RngState,
    pub model: Model,
    pub adam: Option<Adam>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn str32(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }
    fn table<'a>(&mut self, entries: impl ExactSizeIterator<Item = (&'a str, Tensor)>) {
        self.u32(entries.len() as u32);
        for (name, t) in entries {
            self.str32(name);
            self.tensor(&t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| IoError::format(self.path, "truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| IoError::format(self.path, "checkpoint string is not UTF-8"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut n = 1usize;
        for _ in 0..rank {
            let d = usize::try_from(self.u64()?)
                .map_err(|_| IoError::format(self.path, "tensor dimension overflow"))?;
            n = n
                .checked_mul(d)
                .ok_or_else(|| IoError::format(self.path, "tensor dimension overflow"))?;
            shape.push(d);
        }
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| IoError::format(self.path, "tensor dimension overflow"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| IoError::format(self.path, e.to_string()))
    }
    fn table(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let n = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = self.string(len)?;
            let t = self.tensor()?;
            if out.insert(name.clone(), t).is_some() {
                return Err(IoError::format(self.path, format!("duplicate tensor `{name}`")));
            }
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(match self.model {
            Model::VqVae(_) => 0,
            Model::Prior(_) => 1,
        });
        let text = self.config.to_text();
        w.u64(text.len() as u64);
        w.bytes(text.as_bytes());
        w.u64(self.step);
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());

        let mut params: BTreeMap<&str, Tensor> = BTreeMap::new();
        let ema = match &self.model {
            Model::VqVae(m) => {
                for (k, v) in m.params.iter() {
                    params.insert(k, v.clone());
                }
                params.insert(EMBEDDINGS, m.codebook.embeddings.clone());
                m.codebook.ema.as_ref()
            }
            Model::Prior(p) => {
                for (k, v) in p.params.iter() {
                    params.insert(k, v.clone());
                }
                None
            }
        };
        w.table(params.into_iter());
        match ema {
            Some(e) => {
                w.u8(1);
                w.tensor(&Tensor::new([e.counts.len()], e.counts.clone()).unwrap());
                w.tensor(&e.sums);
            }
            None => w.u8(0),
        }
        match &self.adam {
            Some(a) => {
                w.u8(1);
                w.u64(a.t);
                w.f32(a.lr);
                w.f32(a.beta1);
                w.f32(a.beta2);
                w.f32(a.eps);
                let flat = |v: &Vec<f32>| Tensor::new([v.len()], v.clone()).unwrap();
                w.table(a.moments.iter().map(|(k, (m, _))| (k.as_str(), flat(m))));
                w.table(a.moments.iter().map(|(k, (_, v))| (k.as_str(), flat(v))));
            }
            None => w.u8(0),
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(IoError::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(IoError::format(
                path,
                format!("checkpoint version {version} is not supported (expected {VERSION})"),
            ));
        }
        let kind = r.u8()?;
        let len = usize::try_from(r.u64()?)
            .map_err(|_| IoError::format(path, "config length overflow"))?;
        let text = r.string(len)?;
        let config = RunConfig::parse(&text)
            .map_err(|e| IoError::format(path, format!("embedded config: {e}")))?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.take(32)?.try_into().unwrap(),
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let mut params = r.table()?;
        let ema = match r.u8()? {
            0 => None,
            1 => {
                let counts = r.tensor()?.into_data();
                let sums = r.tensor()?;
                Some(EmaState { counts, sums })
            }
            f => return Err(IoError::format(path, format!("bad EMA flag {f}"))),
        };
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let (lr, beta1, beta2, eps) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?);
                let m = r.table()?;
                let mut v = r.table()?;
                let mut moments = BTreeMap::new();
                for (k, mt) in m {
                    let vt = v.remove(&k).ok_or_else(|| {
                        IoError::format(path, format!("missing second moment for `{k}`"))
                    })?;
                    moments.insert(k, (mt.into_data(), vt.into_data()));
                }
                Some(Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    t,
                    moments,
                })
            }
            f => return Err(IoError::format(path, format!("bad optimiser flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(IoError::format(path, "trailing bytes after checkpoint"));
        }

        let model = match kind {
            0 => {
                let spec = config.model.clone();
                spec.validate()
                    .map_err(|e| IoError::format(path, e.to_string()))?;
                let embeddings = params
                    .remove(EMBEDDINGS)
                    .ok_or_else(|| IoError::format(path, "checkpoint has no codebook"))?;
                let mut codebook =
                    Codebook::from_embeddings(embeddings, spec.beta, spec.gamma, spec.ema);
                if spec.ema != ema.is_some() {
                    return Err(IoError::format(path, "EMA state does not match config"));
                }
                codebook.ema = ema;
                let model = VqVae {
                    spec,
                    params: to_params(params),
                    codebook,
                };
                check_shapes(&model.params, &init_like_vqvae(&model), path)?;
                Model::VqVae(model)
            }
            1 => {
                let spec = config.prior.clone();
                spec.validate()
                    .map_err(|e| IoError::format(path, e.to_string()))?;
                let prior = Prior {
                    spec,
                    params: to_params(params),
                };
                check_shapes(&prior.params, &init_like_prior(&prior), path)?;
                Model::Prior(prior)
            }
            k => return Err(IoError::format(path, format!("unknown checkpoint kind {k}"))),
        };
        Ok(Checkpoint {
            config,
            step,
            rng,
            model,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    pub fn into_vqvae(self, path: &Path) -> Result<(VqVae, Self)> {
        match &self.model {
            Model::VqVae(m) => Ok((m.clone(), self)),
            Model::Prior(_) => Err(IoError::format(path, "expected a VQ-VAE checkpoint, found a prior")),
        }
    }

    pub fn into_prior(self, path: &Path) -> Result<(Prior, Self)> {
        match &self.model {
            Model::Prior(p) => Ok((p.clone(), self)),
            Model::VqVae(_) => Err(IoError::format(path, "expected a prior checkpoint, found a VQ-VAE")),
        }
    }
}

fn to_params(table: BTreeMap<String, Tensor>) -> Params {
    let mut p = Params::new();
    for (k, v) in table {
        p.insert(k, v);
    }
    p
}

fn init_like_vqvae(m: &VqVae) -> Params {
    use rand::SeedableRng;
    crate::nets::init_params(&m.spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
}

fn init_like_prior(p: &Prior) -> Params {
    use rand::SeedableRng;
    Prior::new(p.spec.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
        .expect("validated spec")
        .params
}

/// Checks that the loaded table has exactly the parameters the `ModelSpec` implies.
fn check_shapes(got: &Params, want: &Params, path: &Path) -> Result<()> {
    for (k, w) in want.iter() {
        match got.get(k) {
            None => return Err(IoError::format(path, format!("missing parameter `{k}`"))),
            Some(g) if g.shape() != w.shape() => {
                return Err(IoError::format(
                    path,
                    format!("parameter `{k}` has shape {:?}, expected {:?}", g.shape(), w.shape()),
                ))
            }
            _ => {}
        }
    }
    if let Some((k, _)) = got.iter().find(|(k, _)| want.get(k).is_none()) {
        return Err(IoError::format(path, format!("unexpected parameter `{k}`")));
    }
    Ok(())
}
