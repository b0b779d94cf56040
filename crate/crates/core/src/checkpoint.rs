//! Versioned binary container for trained tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CFFG" | u32 version | 32-byte schema fingerprint
//! u32 stage length | stage tag (utf-8)
//! u32 metadata length | metadata (JSON)
//! u32 tensor count | per tensor: u32 name length | name | u32 rank | u64 dims... | f64 values
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Tensors are written in name order so identical content gives identical
//! bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hex;
use crate::nn::Matrix;

pub const MAGIC: &[u8; 4] = b"CFFG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Blackbox,
    Autoencoder,
    Actor,
    Critic,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Blackbox => "blackbox",
            Stage::Autoencoder => "autoencoder",
            Stage::Actor => "actor",
            Stage::Critic => "critic",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blackbox" => Ok(Stage::Blackbox),
            "autoencoder" => Ok(Stage::Autoencoder),
            "actor" => Ok(Stage::Actor),
            "critic" => Ok(Stage::Critic),
            other => Err(Error::Format(format!("unknown checkpoint stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub fingerprint: [u8; 32],
    /// Stage configuration, seed and anything else needed to rebuild.
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        put_bytes(&mut out, self.stage.as_str().as_bytes())?;
        put_bytes(&mut out, serde_json::to_string(&self.metadata)?.as_bytes())?;
        put_u32(&mut out, self.tensors.len())?;
        for (name, m) in &self.tensors {
            put_bytes(&mut out, name.as_bytes())?;
            put_u32(&mut out, 2)?;
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 + 32 {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Format("checkpoint checksum does not match its contents".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version}, this build reads {VERSION}"
            )));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stage: Stage = r.string()?.parse()?;
        let metadata = serde_json::from_str(&r.string()?)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match dims[..] {
                [n] => (1, n),
                [rows, cols] => (rows, cols),
                _ => return Err(Error::Format(format!("tensor {name} has unsupported rank {rank}"))),
            };
            let len = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("tensor {name} runs past the end of the file")))?;
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let m = Matrix::from_vec(rows, cols, data)?;
            if tensors.insert(name.clone(), m).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after the tensor table", r.remaining())));
        }
        Ok(Checkpoint {
            stage,
            fingerprint,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Reads a checkpoint and checks its stage and schema fingerprint.
    pub fn load(path: impl AsRef<Path>, stage: Stage, fingerprint: &[u8; 32]) -> Result<Self> {
        let path = path.as_ref();
        let ck = Self::read(path)?;
        if ck.stage != stage {
            return Err(Error::Config(format!(
                "{} holds a {} checkpoint, expected {stage}",
                path.display(),
                ck.stage
            )));
        }
        if &ck.fingerprint != fingerprint {
            return Err(Error::FingerprintMismatch(format!(
                "{} was written for schema {}, current schema is {}",
                path.display(),
                hex(&ck.fingerprint),
                hex(fingerprint)
            )));
        }
        Ok(ck)
    }

    pub fn metadata<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Format(format!("{} checkpoint lacks metadata field {key:?}", self.stage)))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit a checkpoint field")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(out, b.len())?;
    out.extend_from_slice(b);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not utf-8".into()))
    }
}
