//! The `SQCK` checkpoint container.
//!
//! Layout (little-endian): magic `SQCK`, version u32, config fingerprint
//! (32 bytes), epoch u32, validation metric f64, config JSON (u32 length +
//! UTF-8), parameter count u32 and records, optimizer flag u32, then when
//! the flag is 1: Adam step u64, lr, beta1, beta2, eps as f64, record count
//! u32 and moment records named `m:<param>` / `v:<param>`.
//!
//! A record is: name (u32 length + UTF-8), ndim u32, dims u32 each, f32
//! payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use seqinsert_tensor::{AdamConfig, AdamState, ParamStore, Tensor};

use crate::codec::{put_f32s, put_f64, put_string, put_u32, put_u64, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SQCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_NDIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub epoch: u32,
    pub val_metric: f64,
    /// The run configuration the parameters were trained with.
    pub config_json: String,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_string(out, name);
    put_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    put_f32s(out, t.data());
}

fn read_record(r: &mut Reader<'_>) -> Result<(String, Tensor<f32>)> {
    let name = r.string("record name")?;
    let ndim = r.u32("record rank")? as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Malformed(format!("tensor `{name}` has rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32("record dims")? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Malformed(format!("tensor `{name}` is too large")))?;
    let data = r.f32s(numel, "record payload")?;
    let t = Tensor::new(shape, data).map_err(|e| Error::Malformed(format!("tensor `{name}`: {e}")))?;
    Ok((name, t))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        out.extend_from_slice(&self.fingerprint);
        put_u32(&mut out, self.epoch);
        put_f64(&mut out, self.val_metric);
        put_string(&mut out, &self.config_json);
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_record(&mut out, name, t);
        }
        match &self.optimizer {
            None => put_u32(&mut out, 0),
            Some(opt) => {
                put_u32(&mut out, 1);
                put_u64(&mut out, opt.step);
                for v in [opt.config.lr, opt.config.beta1, opt.config.beta2, opt.config.eps] {
                    put_f64(&mut out, v);
                }
                put_u32(&mut out, (opt.first.len() + opt.second.len()) as u32);
                for (name, t) in &opt.first {
                    put_record(&mut out, &format!("m:{name}"), t);
                }
                for (name, t) in &opt.second {
                    put_record(&mut out, &format!("v:{name}"), t);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let fingerprint: [u8; 32] = r.take(32, "fingerprint")?.try_into().unwrap();
        let epoch = r.u32("epoch")?;
        let val_metric = r.f64("validation metric")?;
        let config_json = r.string("config")?;
        let n_params = r.u32("parameter count")?;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let (name, t) = read_record(&mut r)?;
            if params.get(&name).is_some() {
                return Err(Error::Malformed(format!("duplicate parameter `{name}`")));
            }
            params.insert(name, t);
        }
        let optimizer = match r.u32("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("adam step")?;
                let config = AdamConfig {
                    lr: r.f64("adam lr")?,
                    beta1: r.f64("adam beta1")?,
                    beta2: r.f64("adam beta2")?,
                    eps: r.f64("adam eps")?,
                };
                let count = r.u32("moment count")?;
                let mut first = BTreeMap::new();
                let mut second = BTreeMap::new();
                for _ in 0..count {
                    let (name, t) = read_record(&mut r)?;
                    let (map, pname) = if let Some(p) = name.strip_prefix("m:") {
                        (&mut first, p)
                    } else if let Some(p) = name.strip_prefix("v:") {
                        (&mut second, p)
                    } else {
                        return Err(Error::Malformed(format!("unexpected optimizer record `{name}`")));
                    };
                    match params.get(pname) {
                        Some(p) if p.shape() == t.shape() => {}
                        _ => return Err(Error::Malformed(format!("moment `{name}` matches no parameter"))),
                    }
                    if map.insert(pname.to_string(), t).is_some() {
                        return Err(Error::Malformed(format!("duplicate optimizer record `{name}`")));
                    }
                }
                Some(AdamState {
                    config,
                    step,
                    first,
                    second,
                })
            }
            f => return Err(Error::Malformed(format!("optimizer flag must be 0 or 1, got {f}"))),
        };
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes after checkpoint", r.remaining())));
        }
        Ok(Self {
            fingerprint,
            epoch,
            val_metric,
            config_json,
            params,
            optimizer,
        })
    }
}

impl Checkpoint {
    /// Checks that the stored parameters have exactly the names and shapes
    /// of `expected`, as produced by the model's initializer.
    pub fn check_params(&self, expected: &ParamStore<f32>) -> Result<()> {
        for (name, t) in expected.iter() {
            match self.params.get(name) {
                None => return Err(Error::Malformed(format!("checkpoint lacks parameter `{name}`"))),
                Some(got) if got.shape() != t.shape() => {
                    return Err(Error::Malformed(format!(
                        "parameter `{name}` has shape {:?}, model expects {:?}",
                        got.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some((name, _)) = self.params.iter().find(|(n, _)| expected.get(n).is_none()) {
            return Err(Error::Malformed(format!("checkpoint has unexpected parameter `{name}`")));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
