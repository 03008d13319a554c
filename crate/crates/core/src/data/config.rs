use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-level Poisson blob process for the clustered lumpy background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundParams {
    /// Mean number of clusters per image.
    pub mean_clusters: f64,
    /// Mean number of blobs per cluster.
    pub mean_blobs_per_cluster: f64,
    /// Standard deviation (px) of blob offsets around their cluster centre.
    pub cluster_spread: f64,
    /// Gaussian width (px) of each blob.
    pub blob_width: f64,
    pub blob_amplitude: f64,
}

impl Default for BackgroundParams {
    fn default() -> Self {
        BackgroundParams {
            mean_clusters: 20.0,
            mean_blobs_per_cluster: 5.0,
            cluster_spread: 6.0,
            blob_width: 2.5,
            blob_amplitude: 1.0,
        }
    }
}

/// Symmetric Gaussian tumor inserted on the normalised background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TumorParams {
    pub amplitude: f64,
    /// Gaussian width (px); the ground-truth mask is the disk of radius `2 * width`.
    pub width: f64,
}

impl Default for TumorParams {
    fn default() -> Self {
        TumorParams {
            amplitude: 0.8,
            width: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One tumor at a uniformly drawn position of the 3×3 grid.
    SingleTumor,
    /// A tumor at the image centre plus one at a uniformly drawn grid position.
    TwoTumor,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SingleTumor => "single_tumor",
            Variant::TwoTumor => "two_tumor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single_tumor" => Ok(Variant::SingleTumor),
            "two_tumor" => Ok(Variant::TwoTumor),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub background: BackgroundParams,
    pub tumor: TumorParams,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 64,
            train_per_class: 1000,
            val_per_class: 200,
            test_per_class: 200,
            background: BackgroundParams::default(),
            tumor: TumorParams::default(),
            variant: Variant::SingleTumor,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 8 || !s.is_power_of_two() {
            return Err(Error::Config(format!(
                "image_size must be a power of two of at least 8, got {s}"
            )));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("per-class split counts must be positive".into()));
        }
        let b = &self.background;
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(b.mean_clusters) || !finite_nonneg(b.mean_blobs_per_cluster) {
            return Err(Error::Config("background means must be finite and non-negative".into()));
        }
        if !(b.cluster_spread.is_finite() && b.cluster_spread >= 0.0)
            || !(b.blob_width.is_finite() && b.blob_width > 0.0)
            || !b.blob_amplitude.is_finite()
        {
            return Err(Error::Config("invalid background blob parameters".into()));
        }
        if !(self.tumor.width.is_finite() && self.tumor.width > 0.0) || !self.tumor.amplitude.is_finite() {
            return Err(Error::Config(
                "tumor width must be positive and amplitude finite".into(),
            ));
        }
        Ok(())
    }

    /// Stable content hash of the configuration (hex SHA-256 of its JSON form).
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(DatasetConfig::default().validate().is_ok());
        let bad = DatasetConfig {
            image_size: 48,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DatasetConfig {
            val_per_class: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = DatasetConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
