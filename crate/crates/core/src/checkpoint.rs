//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DEML1"
//! u32 count, then `count` u64 config values:
//!     scales, branches, dim, share_fnet_across_scales, use_cam,
//!     input_channels, input_size,
//!     fnet stage count, (out_channels, stride) per stage,
//!     gnet stage count, (out_channels, stride) per stage
//! u64 parameter count, then per parameter:
//!     u32 name length, name bytes (UTF-8),
//!     u32 rank, u64 per dimension,
//!     f64 per element
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{BackboneConfig, ConvStage, Model, ModelConfig, Param, ParamKind};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"DEML1";

fn config_ints(c: &ModelConfig) -> Vec<u64> {
    let b = &c.backbone;
    let mut v = vec![
        c.scales as u64,
        c.branches as u64,
        c.dim as u64,
        c.share_fnet_across_scales as u64,
        c.use_cam as u64,
        b.input_channels as u64,
        b.input_size as u64,
    ];
    for stages in [&b.fnet, &b.gnet] {
        v.push(stages.len() as u64);
        for s in stages {
            v.extend([s.out_channels as u64, s.stride as u64]);
        }
    }
    v
}

fn config_from_ints(v: &[u64]) -> Result<ModelConfig> {
    let bad = || Error::Checkpoint(format!("malformed config block of {} values", v.len()));
    let mut it = v.iter().map(|&x| usize::try_from(x).map_err(|_| bad()));
    let mut next = || it.next().ok_or_else(bad)?;
    let (scales, branches, dim) = (next()?, next()?, next()?);
    let share = next()? != 0;
    let use_cam = next()? != 0;
    let (input_channels, input_size) = (next()?, next()?);
    let mut stages = || -> Result<Vec<ConvStage>> {
        let n = next()?;
        if n > 64 {
            return Err(bad());
        }
        (0..n).map(|_| Ok(ConvStage::new(next()?, next()?))).collect()
    };
    let fnet = stages()?;
    let gnet = stages()?;
    if next().is_ok() {
        return Err(bad());
    }
    Ok(ModelConfig {
        scales,
        branches,
        dim,
        share_fnet_across_scales: share,
        use_cam,
        backbone: BackboneConfig { input_channels, input_size, fnet, gnet },
    })
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let ints = config_ints(&model.config);
    out.extend((ints.len() as u32).to_le_bytes());
    for v in ints {
        out.extend(v.to_le_bytes());
    }
    out.extend((model.params().len() as u64).to_le_bytes());
    for p in model.params() {
        out.extend((p.name.len() as u32).to_le_bytes());
        out.extend(p.name.as_bytes());
        out.extend((p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend(x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated at byte {} reading {what}: need {n} bytes, {} left",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} out of range")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("missing DEML1 magic".into()));
    }
    let count = r.u32("config count")? as usize;
    let ints = (0..count).map(|_| r.u64("config value")).collect::<Result<Vec<_>>>()?;
    let config = config_from_ints(&ints)?;
    let n = r.len("parameter count")?;
    let mut params = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("parameter name before byte {} is not UTF-8", r.pos)))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("shape {shape:?} of {name} overflows")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let kind = if name.starts_with("learner") { ParamKind::Learner } else { ParamKind::Backbone };
        params.push(Param { value: Tensor::new(&shape, data)?, name, kind });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_params(config, params)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model {
        let config = ModelConfig { scales: 2, branches: 2, dim: 16, ..ModelConfig::default() };
        Model::new(config, 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = small();
        let bytes = to_bytes(&m);
        assert_eq!(&bytes[..5], b"DEML1");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = to_bytes(&small());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(Error::Checkpoint(_))));
    }
}
