//! Binary checkpoint: magic `SRMX1`, then little-endian fields.
//!
//! Layout: magic, u32 version, u32 hidden, u32 kernel, u32 classes,
//! u64 iteration, f64 teacher momentum, u64 parameter count, student
//! parameters, teacher parameters.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::model::{ModelConfig, TinySegModel};
use super::teacher::TeacherState;

pub const MAGIC: &[u8; 5] = b"SRMX1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub student: TinySegModel,
    pub teacher: TeacherState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.student.config;
        let n = self.student.params.len();
        let mut out = Vec::with_capacity(45 + 16 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [cfg.hidden, cfg.kernel, cfg.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.teacher.alpha.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for p in self.student.params.iter().chain(&self.teacher.model.params) {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::InvalidState("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::InvalidState(format!("unsupported checkpoint version {version}")));
        }
        let config = ModelConfig {
            hidden: r.u32()? as usize,
            kernel: r.u32()? as usize,
            num_classes: r.u32()? as usize,
        };
        let iteration = r.u64()?;
        let alpha = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let n = r.u64()? as usize;
        if n != config.param_count() {
            return Err(Error::InvalidState(format!(
                "checkpoint holds {n} parameters but its model needs {}",
                config.param_count()
            )));
        }
        let mut read_params = || -> Result<Vec<f64>> {
            let raw = r.take(n * 8)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let student = TinySegModel::from_params(config, read_params()?)?;
        let teacher = TinySegModel::from_params(config, read_params()?)?;
        if r.pos != bytes.len() {
            return Err(Error::InvalidState("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            iteration,
            student,
            teacher: TeacherState { model: teacher, alpha },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::InvalidState("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
