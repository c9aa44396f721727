//! Binary checkpoint: the run configuration, input normalization and every
//! model tensor, little-endian, followed by an FNV-1a checksum.
//!
//! ```text
//! magic "WMAPCKPT" | u32 version
//! u64 len | config text (key=value)
//! u64 channels | f64 mean[channels] | f64 std[channels]
//! u64 tensors | per tensor: u32 name len | name | u32 rank | u64 dims[rank] | f64 values
//! u64 checksum of all preceding bytes
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::{Model, NamedTensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::synth::ChannelNorm;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"WMAPCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub norm: ChannelNorm,
    pub tensors: Vec<NamedTensor>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl Checkpoint {
    pub fn new(config: RunConfig, norm: ChannelNorm, model: &Model) -> Self {
        Self { config, norm, tensors: model.params.tensors().to_vec() }
    }

    /// Rebuilds the model described by the stored configuration and loads the weights.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone(), self.config.seed)?;
        model.params.load_from(&self.tensors)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_string();
        b.extend_from_slice(&(text.len() as u64).to_le_bytes());
        b.extend_from_slice(text.as_bytes());
        b.extend_from_slice(&(self.norm.mean.len() as u64).to_le_bytes());
        for v in self.norm.mean.iter().chain(&self.norm.std) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            b.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            b.extend_from_slice(t.name.as_bytes());
            b.extend_from_slice(&(t.tensor.rank() as u32).to_le_bytes());
            for &d in t.tensor.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.tensor.values() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupt file)".into()));
        }
        let r = &mut Reader { bytes: body, pos: r.pos };
        let len = r.len()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::parse_str(text)?;
        let channels = r.len()?;
        let mean = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.filter(|n| n * 8 <= r.remaining()).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {name} {shape:?} exceeds the file"))
            })?;
            let values = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(shape, values).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push(NamedTensor { name, tensor });
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { config, norm: ChannelNorm { mean, std }, tensors })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
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
            return Err(Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::blocks::HeadConfig;

    fn small() -> Checkpoint {
        let mut config = RunConfig::default();
        config.model.backbone = BackboneConfig { stem_channels: 4, num_blocks: 2, layers_per_block: 1, growth_rate: 2, ..BackboneConfig::default() };
        config.model.head = HeadConfig { maps_per_class: 2, ..HeadConfig::default() };
        let model = Model::new(config.model.clone(), 3).unwrap();
        Checkpoint::new(config, ChannelNorm { mean: vec![0.25], std: vec![0.125] }, &model)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = small();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!((&back.config, &back.norm), (&ck.config, &ck.norm));
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert_eq!(back.model().unwrap().params.tensors(), ck.model().unwrap().params.tensors());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = small().to_bytes();
        for cut in [0, 5, 12, 100, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        let mut version = bytes.clone();
        version[8] = 9;
        let err = Checkpoint::from_bytes(&version).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn mismatched_architecture_rejected() {
        let mut ck = small();
        ck.tensors.pop();
        assert!(matches!(ck.model(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = small();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), ck.to_bytes());
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
