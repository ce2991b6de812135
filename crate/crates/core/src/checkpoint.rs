//! `LVM1` model files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "LVM1"
//! u32 header length, header JSON (model config, image width, tokenizer,
//!     stop words, vocabularies)
//! u32 tensor count
//! per tensor, in `Parameterized` visiting order:
//!     u32 rank, rank × u32 dims, f32 values (row-major)
//! ```
//!
//! Fusion tensors, when present, come after the generator under the
//! `fusion.` prefix: projection weight, projection bias, gate weight, gate bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{StopWordList, TokenizerConfig};
use crate::error::{Error, Result};
use crate::model::{GuidedModel, ModelConfig};
use crate::nn::Parameterized;
use crate::training::Preprocess;
use crate::vocab::Vocab;

const MAGIC: &[u8; 4] = b"LVM1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    d_img: Option<usize>,
    m: usize,
    use_positions: bool,
    tokenizer: TokenizerConfig,
    stopwords: Vec<String>,
    src_vocab: Vec<String>,
    tgt_vocab: Vec<String>,
}

/// A trained model plus everything needed to run it on raw text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: GuidedModel<f32>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub preprocess: Preprocess,
    /// Images retrieved per token at inference.
    pub m: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.model.net.cfg.clone(),
            d_img: self.model.fusion.as_ref().map(|f| f.d_img()),
            m: self.m,
            use_positions: self.model.net.use_positions,
            tokenizer: self.preprocess.tokenizer.clone(),
            stopwords: self.preprocess.stoplist.words().map(str::to_string).collect(),
            src_vocab: self.src_vocab.tokens().to_vec(),
            tgt_vocab: self.tgt_vocab.tokens().to_vec(),
        };
        let json = serde_json::to_vec(&header)?;
        let params = self.model.params();
        let mut out = Vec::with_capacity(8 + json.len() + 4 * self.model.num_params() + 16 * params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32_of(json.len())?.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&u32_of(params.len())?.to_le_bytes());
        for p in &params {
            out.extend_from_slice(&u32_of(p.shape.len())?.to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&u32_of(d)?.to_le_bytes());
            }
            for v in p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        header.config.validate()?;
        let mut model = GuidedModel::<f32>::init(&header.config, header.d_img, 0)?;
        model.net.use_positions = header.use_positions;
        model.net.rebuild_positions();
        let count = r.u32()? as usize;
        {
            let mut params = model.params_mut();
            if count != params.len() {
                return Err(Error::Format(format!(
                    "expected {} tensors, found {count}",
                    params.len()
                )));
            }
            for p in params.iter_mut() {
                let rank = r.u32()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u32()? as usize);
                }
                if shape != p.shape {
                    return Err(Error::Format(format!(
                        "tensor {}: expected shape {:?}, found {shape:?}",
                        p.name, p.shape
                    )));
                }
                for v in p.data.iter_mut() {
                    *v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let src_vocab = Vocab::from_list(header.src_vocab)?;
        let tgt_vocab = Vocab::from_list(header.tgt_vocab)?;
        if src_vocab.len() != header.config.vocab_src || tgt_vocab.len() != header.config.vocab_tgt {
            return Err(Error::Format("vocabulary sizes disagree with the model config".into()));
        }
        header.tokenizer.validate()?;
        Ok(Self {
            model,
            src_vocab,
            tgt_vocab,
            preprocess: Preprocess {
                tokenizer: header.tokenizer,
                stoplist: StopWordList::new(header.stopwords),
            },
            m: header.m,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
