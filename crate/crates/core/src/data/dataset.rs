use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::hex;
use super::DatasetConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u64)]
pub enum SplitKind {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SplitKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// Labeled single-channel square images of one split.
///
/// Images are stored back to back in raster order; [`Split::batch`] gathers
/// `[B, 1, S, S]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub kind: SplitKind,
    pub image_size: usize,
    pub images: Vec<f32>,
    /// 0 = normal, 1 = abnormal.
    pub labels: Vec<u8>,
    /// Binary tumor masks, when ground truth is known.
    pub masks: Option<Vec<f32>>,
    /// Randomly drawn tumor grid position of each abnormal image.
    pub positions: Vec<Option<u8>>,
    pub seeds: Vec<u64>,
}

impl Split {
    pub fn empty(kind: SplitKind, image_size: usize) -> Self {
        Split {
            kind,
            image_size,
            images: Vec::new(),
            labels: Vec::new(),
            masks: None,
            positions: Vec::new(),
            seeds: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn mask(&self, i: usize) -> Option<&[f32]> {
        let p = self.pixels();
        self.masks.as_ref().map(|m| &m[i * p..(i + 1) * p])
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        let s = self.image_size;
        Tensor::new(vec![1, 1, s, s], self.image(i).to_vec()).expect("image size matches")
    }

    /// Gathers the listed images into `[B, 1, S, S]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * s * s);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::arg(format!("image index {i} out of range ({})", self.len())));
            }
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), 1, s, s], data)
    }

    pub fn labels_f<T: crate::tensor::Real>(&self, indices: &[usize]) -> Vec<T> {
        indices.iter().map(|&i| T::of_f64(self.labels[i] as f64)).collect()
    }

    pub fn abnormal_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == 1).collect()
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update(self.kind.name());
        h.update((self.image_size as u64).to_le_bytes());
        for v in &self.images {
            h.update(v.to_le_bytes());
        }
        h.update(&self.labels);
        if let Some(m) = &self.masks {
            for v in m {
                h.update(v.to_le_bytes());
            }
        }
        for s in &self.seeds {
            h.update(s.to_le_bytes());
        }
    }
}

/// Train/validation/test splits, plus the generating config for synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: Option<DatasetConfig>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn image_size(&self) -> usize {
        self.train.image_size
    }

    /// Hex SHA-256 of every split's bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in [&self.train, &self.val, &self.test] {
            s.hash_into(&mut h);
        }
        hex(&h.finalize())
    }
}
