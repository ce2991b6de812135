//! Precomputed image features, pooling, and the per-token image tensor.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! b"LVF1" | count: u32 | dim: u32 | count × ( id_len: u16 | id: [u8] | dim × f32 )
//! ```

use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use crate::corpus::TokenSequence;
use crate::dictionary::WordImageDictionary;
use crate::error::{Error, Result};
use crate::real::Real;

const FEATURE_MAGIC: &[u8; 4] = b"LVF1";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureStore {
    dim: usize,
    vectors: IndexMap<String, Vec<f32>>,
}

impl ImageFeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: IndexMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&[f32]> {
        self.vectors.get(image_id).map(Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn insert(&mut self, image_id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let image_id = image_id.into();
        if vector.len() != self.dim {
            return Err(Error::Dimension(format!(
                "image `{image_id}` has {} components, store dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!("image `{image_id}` has non-finite components")));
        }
        if image_id.len() > u16::MAX as usize {
            return Err(Error::Precondition(format!("image id too long: {} bytes", image_id.len())));
        }
        self.vectors.insert(image_id, vector);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.len() * (2 + 16 + 4 * self.dim));
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.vectors.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, v) in &self.vectors {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::Format("feature file: missing LVF1 header".into()));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut store = Self::new(dim);
        let mut pos = 12;
        for record in 0..count {
            let fail = |message: String| Error::FeatureLoad { record, message };
            let id_len = bytes
                .get(pos..pos + 2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
                .ok_or_else(|| fail("truncated before id length".into()))?;
            pos += 2;
            let id_bytes = bytes
                .get(pos..pos + id_len)
                .ok_or_else(|| fail("truncated inside id".into()))?;
            let id = std::str::from_utf8(id_bytes)
                .map_err(|e| fail(format!("id is not UTF-8: {e}")))?
                .to_string();
            pos += id_len;
            let raw = bytes
                .get(pos..pos + 4 * dim)
                .ok_or_else(|| fail(format!("truncated inside vector of `{id}`")))?;
            pos += 4 * dim;
            let vector: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(bad) = vector.iter().position(|v| !v.is_finite()) {
                return Err(fail(format!("non-finite component {bad} in `{id}`")));
            }
            if store.vectors.contains_key(&id) {
                return Err(fail(format!("duplicate image id `{id}`")));
            }
            store.vectors.insert(id, vector);
        }
        if pos != bytes.len() {
            return Err(Error::FeatureLoad {
                record: count,
                message: format!("{} trailing bytes after last record", bytes.len() - pos),
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Mean over rows of a `p × dim` feature grid.
pub fn pool(grid: ArrayView2<'_, f32>) -> Result<Array1<f32>> {
    if grid.nrows() == 0 {
        return Err(Error::Precondition("pooling needs at least one row".into()));
    }
    Ok(grid.mean_axis(Axis(0)).expect("non-empty"))
}

/// `n × m × d_img` image features for a token sequence plus the validity mask.
/// Valid slots always form a prefix of each row; padded slots are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T = f32> {
    pub values: Array3<T>,
    pub mask: Array2<bool>,
}

impl<T: Real> ImageTensor<T> {
    pub fn zeros(n: usize, m: usize, dim: usize) -> Self {
        Self {
            values: Array3::zeros((n, m, dim)),
            mask: Array2::from_elem((n, m), false),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// Number of real images retrieved for token `i`.
    pub fn valid_count(&self, i: usize) -> usize {
        self.mask.row(i).iter().filter(|&&b| b).count()
    }

    pub fn cast<U: Real>(&self) -> ImageTensor<U> {
        ImageTensor {
            values: self.values.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())),
            mask: self.mask.clone(),
        }
    }
}

/// Image ids for every token: the first `m` dictionary images. When a
/// sentence-level `paired` image is given it takes the first slot of every
/// token that has a dictionary entry, and the remaining `m - 1` slots come
/// from the dictionary (skipping the paired id itself).
pub fn retrieve_image_ids<'a>(
    dict: &'a WordImageDictionary,
    tokens: &TokenSequence,
    m: usize,
    paired: Option<&'a str>,
) -> Vec<Vec<&'a str>> {
    tokens
        .iter()
        .map(|t| match paired {
            Some(p) if dict.contains(t) && m > 0 => std::iter::once(p)
                .chain(dict.lookup(t, m).into_iter().filter(|id| *id != p))
                .take(m)
                .collect(),
            _ => dict.lookup(t, m),
        })
        .collect()
}

pub fn assemble_image_tensor(
    dict: &WordImageDictionary,
    store: &ImageFeatureStore,
    tokens: &TokenSequence,
    m: usize,
) -> Result<ImageTensor<f32>> {
    assemble_with_paired(dict, store, tokens, m, None)
}

pub fn assemble_with_paired(
    dict: &WordImageDictionary,
    store: &ImageFeatureStore,
    tokens: &TokenSequence,
    m: usize,
    paired: Option<&str>,
) -> Result<ImageTensor<f32>> {
    if m == 0 {
        return Err(Error::Precondition("m must be at least 1".into()));
    }
    let ids = retrieve_image_ids(dict, tokens, m, paired);
    let mut out = ImageTensor::zeros(tokens.len(), m, store.dim());
    for (i, (token, row)) in tokens.iter().zip(&ids).enumerate() {
        for (j, id) in row.iter().enumerate() {
            let v = store.get(id).ok_or_else(|| Error::MissingImage {
                token: token.clone(),
                image_id: id.to_string(),
            })?;
            out.values
                .slice_mut(ndarray::s![i, j, ..])
                .assign(&ndarray::ArrayView1::from(v));
            out.mask[[i, j]] = true;
        }
    }
    Ok(out)
}
