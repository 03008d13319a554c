use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::config::{csv_err, LossKind, TrainConfig, TrainReport};
use super::fit::{distill_interpretable, fit, CachedRegression, FeatureCache};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{overlap_top_k, random_overlap_baseline, ssim};
use crate::models::{DecoderSpec, ModelGraph};
use crate::nn::InitScheme;
use crate::rng::{stream, Stream};
use crate::tensor::{Tape, Tensor};

/// Where latent values land in the zero-padded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroPadLayout {
    /// Channel-major flatten, then row-major fill from the top-left pixel.
    Raster,
    /// Channel `k` of latent pixel `(y, x)` goes to pixel
    /// `(2y + k / 2, 2x + k % 2)`; needs at most four channels. This is the
    /// arrangement a 2×2 stride-2 transpose convolution can express.
    Blocked,
}

impl ZeroPadLayout {
    pub fn name(self) -> &'static str {
        match self {
            ZeroPadLayout::Raster => "raster",
            ZeroPadLayout::Blocked => "blocked",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raster" => Ok(ZeroPadLayout::Raster),
            "blocked" => Ok(ZeroPadLayout::Blocked),
            _ => Err(Error::Config(format!(
                "unknown zero-pad layout `{s}` (expected raster or blocked)"
            ))),
        }
    }
}

fn latent_dims(latent: &Tensor) -> Result<(usize, usize, usize)> {
    match latent.shape() {
        [c, h, w] | [1, c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape(format!("latent must be [C, h, w], got {s:?}"))),
    }
}

/// Zero image `[1, S, S]` holding the latent values according to `layout`.
pub fn zero_pad_target(latent: &Tensor, size: usize, layout: ZeroPadLayout) -> Result<Tensor> {
    let (c, h, w) = latent_dims(latent)?;
    let mut out = vec![0.0f32; size * size];
    match layout {
        ZeroPadLayout::Raster => {
            if c * h * w > size * size {
                return Err(Error::shape(format!(
                    "latent of {} values does not fit a {size}x{size} image",
                    c * h * w
                )));
            }
            out[..latent.numel()].copy_from_slice(latent.data());
        }
        ZeroPadLayout::Blocked => {
            if c > 4 || 2 * h > size || 2 * w > size {
                return Err(Error::shape(format!(
                    "blocked layout needs at most 4 channels and 2x upsampling to fit {size}x{size}, got [{c}, {h}, {w}]"
                )));
            }
            let d = latent.data();
            for k in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[(2 * y + k / 2) * size + 2 * x + k % 2] = d[(k * h + y) * w + x];
                    }
                }
            }
        }
    }
    Tensor::new(vec![1, size, size], out)
}

/// Zero-pad targets `[N, 1, S, S]` for a batch of latents `[N, C, h, w]`.
pub fn zero_pad_targets(latents: &Tensor, size: usize, layout: ZeroPadLayout) -> Result<Tensor> {
    let (n, c, h, w) = latents.dims4()?;
    let mut data = Vec::with_capacity(n * size * size);
    for i in 0..n {
        let item = Tensor::new(vec![c, h, w], latents.outer(i).to_vec())?;
        data.extend(zero_pad_target(&item, size, layout)?.into_data());
    }
    Tensor::new(vec![n, 1, size, size], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroPadConfig {
    pub decoder: DecoderSpec,
    pub layout: ZeroPadLayout,
    pub init: InitScheme,
    /// Supervised stage that learns to emit the zero-padded latent.
    pub stage1: TrainConfig,
    /// Distillation used by stage 2 and by every perturbed arm.
    pub distill: TrainConfig,
    pub sigmas: Vec<f64>,
    /// Stage 1 counts as converged when its best validation MSE is below this.
    pub convergence_threshold: f64,
    /// Test images used for SSIM and overlap (0 = all).
    pub eval_images: usize,
    pub top_fraction: f64,
}

impl ZeroPadConfig {
    pub const DEFAULT_SIGMAS: [f64; 7] = [0.01, 0.03, 0.07, 0.09, 0.1, 0.2, 0.3];

    pub fn new(decoder: DecoderSpec, stage1: TrainConfig, distill: TrainConfig, init: InitScheme) -> Self {
        ZeroPadConfig {
            decoder,
            layout: ZeroPadLayout::Blocked,
            init,
            stage1: stage1.with_loss(LossKind::Mse),
            distill: distill.with_loss(LossKind::Mse),
            sigmas: Self::DEFAULT_SIGMAS.to_vec(),
            convergence_threshold: 1e-2,
            eval_images: 0,
            top_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroPadRow {
    pub sigma: f64,
    pub mean_ssim: f64,
    pub mean_overlap: f64,
    pub distill_val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroPadReport {
    pub layout: ZeroPadLayout,
    pub stage1: TrainReport,
    pub stage1_converged: bool,
    pub stage1_ssim: f64,
    pub stage1_overlap: f64,
    pub stage2: TrainReport,
    pub stage2_ssim: f64,
    pub stage2_overlap: f64,
    pub random_baseline: f64,
    pub rows: Vec<ZeroPadRow>,
}

impl ZeroPadReport {
    /// `arm,sigma,mean_ssim,mean_overlap,distill_val_mse`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["arm", "sigma", "mean_ssim", "mean_overlap", "distill_val_mse"])
            .map_err(|e| csv_err(path, e))?;
        let mut rows = vec![
            (
                "stage1".to_string(),
                0.0,
                self.stage1_ssim,
                self.stage1_overlap,
                self.stage1.best_val_loss,
            ),
            (
                "stage2".to_string(),
                0.0,
                self.stage2_ssim,
                self.stage2_overlap,
                self.stage2.best_val_loss,
            ),
        ];
        rows.extend(self.rows.iter().map(|r| {
            (
                "perturbed".to_string(),
                r.sigma,
                r.mean_ssim,
                r.mean_overlap,
                r.distill_val_mse,
            )
        }));
        for (arm, s, a, b, c) in rows {
            w.write_record([arm, s.to_string(), a.to_string(), b.to_string(), c.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// E-maps decoded from cached features.
fn decode_cached(model: &ModelGraph, cache: &FeatureCache, idx: &[usize]) -> Result<Tensor> {
    let mut parts = Vec::new();
    let mut tape = Tape::new();
    for chunk in idx.chunks(32) {
        tape.clear();
        let b = model.params.bind_frozen(&mut tape);
        let f = cache.record(&mut tape, chunk)?;
        let m = model.record_decoder(&mut tape, &b, f)?;
        parts.push(tape.value(m).clone());
    }
    Tensor::concat_outer(&parts.iter().collect::<Vec<_>>())
}

struct Probe<'a> {
    split: &'a Split,
    cache: FeatureCache,
    targets: Tensor,
    idx: Vec<usize>,
    top_fraction: f64,
}

impl Probe<'_> {
    /// Mean SSIM to the zero-pad target and mean top-k overlap on abnormal images.
    fn measure(&self, model: &ModelGraph) -> Result<(f64, f64)> {
        let maps = decode_cached(model, &self.cache, &self.idx)?;
        let s = self.split.image_size;
        let mut ssim_total = 0.0;
        let (mut overlap_total, mut n_abnormal) = (0.0, 0usize);
        for (j, &i) in self.idx.iter().enumerate() {
            let map: Vec<f64> = maps.outer(j).iter().map(|&v| v as f64).collect();
            let target: Vec<f64> = self.targets.outer(i).iter().map(|&v| v as f64).collect();
            ssim_total += ssim(&map, &target, s, s)?;
            if let Some(mask) = self.split.mask(i).filter(|_| self.split.labels[i] == 1) {
                overlap_total += overlap_top_k(&map, mask, self.top_fraction)?;
                n_abnormal += 1;
            }
        }
        let overlap = if n_abnormal > 0 {
            overlap_total / n_abnormal as f64
        } else {
            f64::NAN
        };
        Ok((ssim_total / self.idx.len() as f64, overlap))
    }
}

fn perturb(model: &mut ModelGraph, sigma: f64, seed: u64) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::arg(format!("noise level {sigma}: {e}")))?;
    for (i, p) in model.params.iter_mut().enumerate() {
        if p.name.starts_with("dec.") {
            let mut rng = stream(seed, Stream::Noise, &[sigma.to_bits(), i as u64]);
            for v in p.value.data_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
    }
    Ok(())
}

/// Three stages: learn the zero-padded latent with a head-less decoder,
/// distil from that initialisation, then distil again from noisy copies of
/// the stage-1 weights.
pub fn zero_pad_experiment(blackbox: &ModelGraph, data: &Dataset, cfg: &ZeroPadConfig) -> Result<ZeroPadReport> {
    let size = blackbox.image_size;
    let mut stage1 = ModelGraph::build_interpretable(blackbox, cfg.decoder, cfg.init)?;

    let regression = |split: &Split| -> Result<(FeatureCache, Tensor)> {
        let cache = FeatureCache::new(&stage1, split)?;
        let targets = zero_pad_targets(&cache.latent, size, cfg.layout)?;
        Ok((cache, targets))
    };
    let obj = CachedRegression {
        train: regression(&data.train)?,
        val: regression(&data.val)?,
        map_targets: true,
    };
    let (test_cache, test_targets) = regression(&data.test)?;
    let stage1_report = fit(&mut stage1, &obj, &cfg.stage1, "zeropad-stage1")?;
    drop(obj);
    let stage1_converged = stage1_report.best_val_loss <= cfg.convergence_threshold;
    if !stage1_converged {
        log::warn!(
            "zero-pad stage 1 did not converge: best validation MSE {:.4} above {}",
            stage1_report.best_val_loss,
            cfg.convergence_threshold
        );
    }

    let n_eval = if cfg.eval_images == 0 {
        data.test.len()
    } else {
        cfg.eval_images.min(data.test.len())
    };
    let probe = Probe {
        split: &data.test,
        cache: test_cache,
        targets: test_targets,
        idx: spread_indices(data.test.len(), n_eval),
        top_fraction: cfg.top_fraction,
    };
    let random_baseline = mean_baseline(&data.test, &probe.idx);

    let (stage1_ssim, stage1_overlap) = probe.measure(&stage1)?;
    log::info!("zero-pad stage 1: ssim {stage1_ssim:.4} overlap {stage1_overlap:.2}%");

    let mut stage2 = stage1.clone();
    let stage2_report = distill_interpretable(&mut stage2, blackbox, data, &cfg.distill)?;
    let (stage2_ssim, stage2_overlap) = probe.measure(&stage2)?;
    log::info!("zero-pad stage 2: ssim {stage2_ssim:.4} overlap {stage2_overlap:.2}%");

    let mut rows = Vec::new();
    for &sigma in &cfg.sigmas {
        let mut arm = stage1.clone();
        perturb(&mut arm, sigma, cfg.init.seed)?;
        let r = distill_interpretable(&mut arm, blackbox, data, &cfg.distill)?;
        let (mean_ssim, mean_overlap) = probe.measure(&arm)?;
        log::info!("zero-pad sigma {sigma}: ssim {mean_ssim:.4} overlap {mean_overlap:.2}%");
        rows.push(ZeroPadRow {
            sigma,
            mean_ssim,
            mean_overlap,
            distill_val_mse: r.best_val_loss,
        });
    }
    Ok(ZeroPadReport {
        layout: cfg.layout,
        stage1: stage1_report,
        stage1_converged,
        stage1_ssim,
        stage1_overlap,
        stage2: stage2_report,
        stage2_ssim,
        stage2_overlap,
        random_baseline,
        rows,
    })
}

/// `k` indices spread evenly over `0..n`, covering both classes of a split
/// stored normals-first.
pub(crate) fn spread_indices(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    (0..k).map(|j| j * n / k).collect()
}

pub(crate) fn mean_baseline(split: &Split, idx: &[usize]) -> f64 {
    let masks: Vec<&[f32]> = idx
        .iter()
        .filter(|&&i| split.labels[i] == 1)
        .filter_map(|&i| split.mask(i))
        .collect();
    if masks.is_empty() {
        return f64::NAN;
    }
    masks.iter().map(|m| random_overlap_baseline(m)).sum::<f64>() / masks.len() as f64
}
