//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "UDALABCK"
//! version  u32      1
//! spec     u32 length + UTF-8 JSON of the ModelSpec
//! count    u32      number of entries
//! entry    u32 name length, UTF-8 name,
//!          u32 rank, rank x u64 dims,
//!          prod(dims) x f64 values
//! ```
//!
//! Entries are the trainable tensors in canonical order followed by
//! `feature.{i}.bn.running_mean` / `feature.{i}.bn.running_var` for every
//! batch-norm layer. Values are stored bit-exactly.

use std::path::Path;

use super::model::{ModelSpec, UdaModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"UDALABCK";
const VERSION: u32 = 1;

fn entries(model: &UdaModel) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out: Vec<_> = model
        .params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data().to_vec()))
        .collect();
    for (i, l) in model.features.iter().enumerate() {
        if let Some(bn) = &l.bn {
            let d = bn.dim();
            out.push((format!("feature.{i}.bn.running_mean"), vec![d], bn.running_mean.clone()));
            out.push((format!("feature.{i}.bn.running_var"), vec![d], bn.running_var.clone()));
        }
    }
    out
}

pub fn to_bytes(model: &UdaModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let spec = serde_json::to_vec(&model.spec).expect("model spec serializes");
    buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec);
    let items = entries(model);
    buf.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, shape, data) in items {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<UdaModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let spec_len = r.u32()? as usize;
    let spec: ModelSpec = serde_json::from_slice(r.take(spec_len)?)
        .map_err(|e| Error::Checkpoint(format!("model spec: {e}")))?;
    let mut model = UdaModel::zeros(&spec)?;
    let expected = entries(&model);
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} entries, found {count}",
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for (want_name, want_shape, _) in &expected {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::Checkpoint(format!("expected entry `{want_name}`, found `{name}`")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(Error::Checkpoint(format!("entry `{name}` has shape {shape:?}, expected {want_shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        loaded.push((shape, data));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let n_params = model.params().len();
    let mut it = loaded.into_iter();
    for slot in model.params_mut().into_iter().take(n_params) {
        let (shape, data) = it.next().expect("counted");
        *slot = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    for l in &mut model.features {
        if let Some(bn) = &mut l.bn {
            bn.running_mean = it.next().expect("counted").1;
            bn.running_var = it.next().expect("counted").1;
            bn.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
    }
    Ok(model)
}

pub fn save(model: &UdaModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<UdaModel> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::BatchStats;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = UdaModel::init(&ModelSpec::default(), 11).unwrap();
        m.update_running_stats(&[
            BatchStats { mean: vec![0.1; 32], var: vec![0.3; 32], rows: 8 },
            BatchStats { mean: vec![-0.2; 32], var: vec![1.7; 32], rows: 8 },
        ]);
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let m = UdaModel::init(&ModelSpec::default(), 1).unwrap();
        let bytes = to_bytes(&m);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
