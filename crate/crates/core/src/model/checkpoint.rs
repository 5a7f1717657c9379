//! Binary checkpoint format.
//!
//! ```text
//! "CARFTCKPT\n"                      10 bytes
//! version            u32 LE          (= 1)
//! tensor count       u32 LE
//! per tensor:
//!   name length      u32 LE, then UTF-8 name
//!   rows, cols       u64 LE each
//!   values           rows*cols f64 LE, row-major
//! metadata:
//!   name length      u32 LE, then "__meta"
//!   byte length      u64 LE, then UTF-8 "key=value\n" lines
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::numerics::Matrix;

use super::{ClassifierHead, Classifier, DualEncoder, ImageEncoder, LogitScale, TextEncoder, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"CARFTCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_NAME: &str = "__meta";

pub type Metadata = BTreeMap<String, String>;

const IMAGE_TENSORS: [&str; 4] = ["image.w1", "image.b1", "image.w2", "image.b2"];
const TEXT_TENSORS: [&str; 2] = ["text.embed", "text.proj"];
const LOGIT_SCALE: &str = "logit_scale";
const HEAD_WEIGHT: &str = "head.weight";
const HEAD_BIAS: &str = "head.bias";

/// Named tensors plus string metadata, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Matrix)>,
    pub meta: Metadata,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Matrix)>, meta: Metadata) -> Result<Self> {
        for (i, (name, _)) in tensors.iter().enumerate() {
            if name == META_NAME || name.is_empty() {
                return Err(CheckpointError::Malformed(format!("reserved tensor name {name:?}")).into());
            }
            if tensors[..i].iter().any(|(n, _)| n == name) {
                return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")).into());
            }
        }
        for (k, v) in &meta {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(CheckpointError::Malformed(format!("invalid metadata entry {k:?}")).into());
            }
        }
        Ok(Self { tensors, meta })
    }

    pub fn tensors(&self) -> &[(String, Matrix)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(n, m)| (n.as_str(), m))
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()).into())
    }

    pub fn has_head(&self) -> bool {
        self.get(HEAD_WEIGHT).is_some()
    }

    /// Tensors updated by fine-tuning (image tower and head).
    pub fn is_trainable(name: &str) -> bool {
        name.starts_with("image.") || name.starts_with("head.")
    }

    fn base(model: &DualEncoder) -> Vec<(String, Matrix)> {
        let mut t: Vec<(String, Matrix)> = IMAGE_TENSORS
            .iter()
            .zip([&model.image.w1, &model.image.b1, &model.image.w2, &model.image.b2])
            .map(|(n, m)| (n.to_string(), m.clone()))
            .collect();
        t.push((TEXT_TENSORS[0].into(), model.text.embed.clone()));
        t.push((TEXT_TENSORS[1].into(), model.text.proj.clone()));
        t.push((
            LOGIT_SCALE.into(),
            Matrix::from_vec(1, 1, vec![model.logit_scale.get()]).expect("finite scale"),
        ));
        t
    }

    pub fn from_dual(model: &DualEncoder, mut meta: Metadata) -> Self {
        let tensors = Self::base(model);
        meta.insert("vocab".into(), model.vocab.words().join(","));
        Self::new(tensors, meta).expect("well-formed model tensors")
    }

    pub fn from_classifier(model: &Classifier, mut meta: Metadata) -> Self {
        let mut tensors = Self::base(&model.dual_encoder());
        tensors.push((HEAD_WEIGHT.into(), model.head.weight.clone()));
        if let Some(b) = &model.head.bias {
            tensors.push((HEAD_BIAS.into(), b.clone()));
        }
        meta.insert("vocab".into(), model.vocab.words().join(","));
        meta.insert("scale_head".into(), model.scale_head.to_string());
        Self::new(tensors, meta).expect("well-formed model tensors")
    }

    fn shape_err(name: &str, m: &Matrix) -> Error {
        CheckpointError::ShapeMismatch {
            name: name.to_string(),
            rows: m.rows() as u64,
            cols: m.cols() as u64,
        }
        .into()
    }

    pub fn to_dual(&self) -> Result<DualEncoder> {
        let [w1, b1, w2, b2] = IMAGE_TENSORS.map(|n| self.require(n));
        let (w1, b1, w2, b2) = (w1?, b1?, w2?, b2?);
        if b1.shape() != (w1.rows(), 1) {
            return Err(Self::shape_err("image.b1", b1));
        }
        if w2.cols() != w1.rows() {
            return Err(Self::shape_err("image.w2", w2));
        }
        if b2.shape() != (w2.rows(), 1) {
            return Err(Self::shape_err("image.b2", b2));
        }
        let d = w2.rows();
        let embed = self.require(TEXT_TENSORS[0])?;
        let proj = self.require(TEXT_TENSORS[1])?;
        if embed.cols() != d {
            return Err(Self::shape_err("text.embed", embed));
        }
        if proj.shape() != (d, d) {
            return Err(Self::shape_err("text.proj", proj));
        }
        let scale = self.require(LOGIT_SCALE)?;
        if scale.shape() != (1, 1) {
            return Err(Self::shape_err(LOGIT_SCALE, scale));
        }
        let vocab_words: Vec<String> = self
            .meta
            .get("vocab")
            .ok_or_else(|| CheckpointError::Malformed("metadata lacks vocab".into()))?
            .split(',')
            .map(String::from)
            .collect();
        let vocab = Vocabulary::new(vocab_words)
            .map_err(|e| Error::from(CheckpointError::Malformed(e.to_string())))?;
        if vocab.len() != embed.rows() {
            return Err(Self::shape_err("text.embed", embed));
        }
        Ok(DualEncoder {
            image: ImageEncoder {
                w1: w1.clone(),
                b1: b1.clone(),
                w2: w2.clone(),
                b2: b2.clone(),
            },
            text: TextEncoder {
                embed: embed.clone(),
                proj: proj.clone(),
            },
            logit_scale: LogitScale::new(scale.get(0, 0))
                .map_err(|e| Error::from(CheckpointError::Malformed(e.to_string())))?,
            vocab,
        })
    }

    pub fn to_classifier(&self) -> Result<Classifier> {
        let dual = self.to_dual()?;
        let weight = self.require(HEAD_WEIGHT)?;
        if weight.rows() != dual.image.embed_dim() {
            return Err(Self::shape_err(HEAD_WEIGHT, weight));
        }
        let bias = match self.get(HEAD_BIAS) {
            Some(b) if b.shape() != (weight.cols(), 1) => return Err(Self::shape_err(HEAD_BIAS, b)),
            other => other.cloned(),
        };
        let scale_head = self.meta.get("scale_head").map_or(true, |v| v != "false");
        Ok(Classifier::from_pretrained(
            &dual,
            ClassifierHead {
                weight: weight.clone(),
                bias,
            },
            scale_head,
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            out.extend_from_slice(&m.to_le_bytes());
        }
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(META_NAME.len() as u32).to_le_bytes());
        out.extend_from_slice(META_NAME.as_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len(), "magic").ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version).into());
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rows = r.u64("tensor rows")?;
            let cols = r.u64("tensor cols")?;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .filter(|&n| n > 0)
                .ok_or_else(|| CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    rows,
                    cols,
                })?;
            let raw = r.take(usize::try_from(n).map_err(|_| CheckpointError::Truncated("tensor data"))?, "tensor data")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let m = Matrix::from_vec(rows as usize, cols as usize, data)
                .map_err(|e| Error::from(CheckpointError::Malformed(format!("tensor {name}: {e}"))))?;
            tensors.push((name, m));
        }
        let meta_name = r.string("metadata name")?;
        if meta_name != META_NAME {
            return Err(CheckpointError::Malformed(format!("expected {META_NAME}, found {meta_name:?}")).into());
        }
        let len = r.u64("metadata length")?;
        let raw = r.take(usize::try_from(len).map_err(|_| CheckpointError::Truncated("metadata"))?, "metadata")?;
        let text = std::str::from_utf8(raw).map_err(|_| CheckpointError::Malformed("metadata is not UTF-8".into()))?;
        let mut meta = Metadata::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes after metadata".into()).into());
        }
        Self::new(tensors, meta)
    }

    /// True when every tensor and metadata entry match bit for bit.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.meta == other.meta
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(what)),
        }
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> std::result::Result<String, CheckpointError> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
