use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

pub const METRICS_HEADER: [&str; 10] = [
    "step",
    "epoch",
    "lr",
    "train_loss",
    "train_acc",
    "holdout_acc",
    "grad_global_norm",
    "clip_fraction",
    "diverged",
    "wallclock_s",
];

/// One logged training step. `holdout_acc` is filled only on evaluation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub holdout_acc: Option<f64>,
    pub grad_global_norm: f64,
    pub clip_fraction: f64,
    pub diverged: bool,
    pub wallclock_s: f64,
}

pub fn write_metrics<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != METRICS_HEADER {
        return Err(Error::Data(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"NFCKPT01";

/// Writes every parameter as name, shape and little-endian f64 values.
pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for p in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rank() as u64).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        self.at += n;
        Ok(s)
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")) as usize)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f64>)>> {
    let bytes = fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!("{} is not a checkpoint", path.display())));
    }
    let count = c.usize()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.usize()?;
        let name =
            String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
        let rank = c.usize()?;
        let shape = (0..rank).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}
