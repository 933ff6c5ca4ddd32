//! Named-tensor container used for training state and external weights.
//!
//! ```text
//! "SCCK"  u8 version=1
//! u64 step
//! u32 config length, UTF-8 JSON config snapshot
//! u32 entry count
//! per entry: u32 name length, UTF-8 name, u64 record length
//! records: one SCGT tensor per entry, in table order
//! ```

use std::path::Path;

use scgen_core::adversary::FeatureExtractor;
use scgen_core::Tensor4;

use crate::error::{read_file, write_file, Error, Result};
use crate::scgt::{self, Reader};

pub const MAGIC: [u8; 4] = *b"SCCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Resolved experiment configuration as JSON.
    pub config: String,
    pub tensors: Vec<(String, Tensor4<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor4<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let records: Vec<Vec<u8>> = self.tensors.iter().map(|(_, t)| scgt::encode(t)).collect();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for ((name, _), rec) in self.tensors.iter().zip(&records) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
        }
        for rec in records {
            out.extend_from_slice(&rec);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", 0, "bad magic, expected SCCK"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.fail("config is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.fail("entry name is not UTF-8"))?;
            let size = r.u64()?;
            table.push((name, size));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, size) in table {
            let start = r.pos();
            let t = scgt::read_tensor(&mut r)?;
            if (r.pos() - start) as u64 != size {
                return Err(Error::format(
                    "checkpoint",
                    start as u64,
                    format!("record `{name}` spans {} bytes, table says {size}", r.pos() - start),
                ));
            }
            tensors.push((name, t));
        }
        if !r.at_end() {
            return Err(r.fail("trailing bytes after last record"));
        }
        Ok(Checkpoint { step, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::decode(&read_file(path)?).map_err(|e| match e {
            Error::Format { what, offset, detail } => {
                Error::Format { what, offset, detail: format!("{detail} in {}", path.display()) }
            }
            other => other,
        })
    }
}

/// Feature-extractor weights stored as `stage{i}.weight` and `stage{i}.bias`
/// entries, `i` counting from zero.
pub fn load_feature_extractor(path: &Path) -> Result<FeatureExtractor<f32>> {
    let ck = Checkpoint::load(path)?;
    let mut stages = Vec::new();
    while let Some(w) = ck.get(&format!("stage{}.weight", stages.len())) {
        let name = format!("stage{}.bias", stages.len());
        let b = ck.get(&name).ok_or_else(|| Error::Data(format!("{}: missing `{name}`", path.display())))?;
        stages.push((w.clone(), b.data().to_vec()));
    }
    Ok(FeatureExtractor::from_weights(stages)?)
}

pub fn save_feature_extractor(path: &Path, phi: &FeatureExtractor<f32>) -> Result<()> {
    let mut tensors = Vec::new();
    for (i, (w, b)) in phi.stages().iter().enumerate() {
        tensors.push((format!("stage{i}.weight"), w.clone()));
        tensors.push((format!("stage{i}.bias"), Tensor4::from_vec(scgen_core::Shape::vector(b.len()), b.clone())?));
    }
    Checkpoint { step: 0, config: String::new(), tensors }.save(path)
}
