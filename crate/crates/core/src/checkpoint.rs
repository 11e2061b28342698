//! Binary model checkpoints.
//!
//! Layout: the magic bytes, a little-endian `u32` version, a length-prefixed
//! text header of `key = value` lines, then every parameter as a
//! length-prefixed name, `u32` rows and cols, and little-endian `f64` data.

use std::io::{Read, Write};
use std::path::Path;

use crate::ag::Tensor;
use crate::config::{parse_lines, parse_value, KeyValue};
use crate::data::YNorm;
use crate::error::{Error, Result};
use crate::model::{GiteModel, ModelConfig};

pub const MAGIC: &[u8; 8] = b"GITECKPT";
pub const VERSION: u32 = 1;

fn header(model: &GiteModel) -> String {
    let mut out = model.config.render();
    out.push_str(&format!("covariates = {}\n", model.covariates));
    out.push_str(&format!("log_degree_denominator = {}\n", model.log_deg_denominator));
    out.push_str(&format!("y_mean = {}\n", model.y_norm.mean));
    out.push_str(&format!("y_std = {}\n", model.y_norm.std));
    out
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(model: &GiteModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let head = header(model);
    put_u32(&mut buf, head.len())?;
    buf.extend_from_slice(head.as_bytes());
    put_u32(&mut buf, model.params.len())?;
    for (name, t) in model.params.iter() {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rows())?;
        put_u32(&mut buf, t.cols())?;
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("non-UTF-8 text".into()))
    }
}

pub fn from_bytes(data: &[u8]) -> Result<GiteModel> {
    let mut c = Cursor { data, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let head = c.text()?;
    let mut config = ModelConfig::default();
    let (mut covariates, mut denom, mut mean, mut std) = (None, None, None, None);
    for (_, k, v) in parse_lines(head, "checkpoint header")? {
        match k.as_str() {
            "covariates" => covariates = Some(parse_value::<usize>(&k, &v)?),
            "log_degree_denominator" => denom = Some(parse_value::<f64>(&k, &v)?),
            "y_mean" => mean = Some(parse_value::<f64>(&k, &v)?),
            "y_std" => std = Some(parse_value::<f64>(&k, &v)?),
            _ => config.set(&k, &v)?,
        }
    }
    let missing = |k: &str| Error::Checkpoint(format!("header lacks {k}"));
    let y_norm = YNorm {
        mean: mean.ok_or_else(|| missing("y_mean"))?,
        std: std.ok_or_else(|| missing("y_std"))?,
    };
    let mut model = GiteModel::with_stats(
        config,
        covariates.ok_or_else(|| missing("covariates"))?,
        denom.ok_or_else(|| missing("log_degree_denominator"))?,
        y_norm,
        0,
    )?;
    let count = c.u32()?;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, architecture has {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name = c.text()?.to_string();
        let (rows, cols) = (c.u32()?, c.u32()?);
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
        let expected = model.params.get(id);
        if (expected.rows(), expected.cols()) != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "{name}: stored {rows}x{cols}, expected {}x{}",
                expected.rows(),
                expected.cols()
            )));
        }
        let raw = c.take(rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        *model.params.get_mut(id) = Tensor::matrix(rows, cols, values)?;
    }
    if c.pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save(model: &GiteModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GiteModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
