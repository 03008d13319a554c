use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::ssim;
use super::metrics::{overlap_top_k, positive_pixel_histogram, Histogram};
use super::report::{evaluate, write_rows};
use crate::data::{write_pgm8, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::{integrated_gradients, saliency, BlackBoxSpec, DecoderSpec, ModelGraph};
use crate::nn::{InitKind, InitScheme};
use crate::tensor::{file, Tensor};
use crate::train::{
    all_images, distill_interpretable, mean_baseline, spread_indices, train_blackbox, LossKind, TrainConfig,
    TrainReport,
};

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn eval_indices(split: &Split, eval_images: usize) -> Vec<usize> {
    let k = if eval_images == 0 { split.len() } else { eval_images };
    spread_indices(split.len(), k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Emap,
    Saliency,
    IntegratedGradients,
}

impl AttributionMethod {
    pub const ALL: [AttributionMethod; 3] = [
        AttributionMethod::Emap,
        AttributionMethod::Saliency,
        AttributionMethod::IntegratedGradients,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttributionMethod::Emap => "emap",
            AttributionMethod::Saliency => "saliency",
            AttributionMethod::IntegratedGradients => "integrated_gradients",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attribution method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapConfig {
    pub top_fraction: f64,
    pub methods: Vec<AttributionMethod>,
    pub ig_steps: usize,
    /// Abnormal test images analysed (0 = all).
    pub max_images: usize,
}

impl Default for OverlapConfig {
    fn default() -> Self {
        OverlapConfig {
            top_fraction: 0.01,
            methods: AttributionMethod::ALL.to_vec(),
            ig_steps: 50,
            max_images: 0,
        }
    }
}

impl OverlapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "top_fraction {} outside (0, 1]",
                self.top_fraction
            )));
        }
        if self.ig_steps == 0 {
            return Err(Error::Config("ig_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub image_index: usize,
    pub method: AttributionMethod,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub rows: Vec<OverlapRow>,
    pub mean: BTreeMap<AttributionMethod, f64>,
    /// Mean mask-area share of the analysed images, in percent.
    pub random_baseline: f64,
}

impl OverlapReport {
    /// `image_index,method,percent`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.image_index.to_string(),
                    r.method.name().to_string(),
                    r.percent.to_string(),
                ]
            })
            .collect();
        write_rows(path, &["image_index", "method", "percent"], &rows)
    }
}

/// Top-k overlap of E-maps (from `interp`) and of saliency / integrated
/// gradients (of `blackbox`) with the tumor masks of abnormal images.
pub fn overlap_study(
    interp: &ModelGraph,
    blackbox: &ModelGraph,
    split: &Split,
    cfg: &OverlapConfig,
) -> Result<OverlapReport> {
    cfg.validate()?;
    let abnormal: Vec<usize> = split
        .abnormal_indices()
        .into_iter()
        .filter(|&i| split.mask(i).is_some())
        .collect();
    if abnormal.is_empty() {
        return Err(Error::arg("overlap study needs abnormal images with masks"));
    }
    let take = if cfg.max_images == 0 {
        abnormal.len()
    } else {
        cfg.max_images
    };
    let picked: Vec<usize> = spread_indices(abnormal.len(), take)
        .into_iter()
        .map(|j| abnormal[j])
        .collect();
    let mut rows = Vec::new();
    for &i in &picked {
        let image = split.image_tensor(i);
        let mask = split.mask(i).expect("filtered above");
        for &method in &cfg.methods {
            let map = match method {
                AttributionMethod::Emap => interp.compute_emap(&image)?.map,
                AttributionMethod::Saliency => saliency(blackbox, &image)?,
                AttributionMethod::IntegratedGradients => integrated_gradients(blackbox, &image, cfg.ig_steps, None)?,
            };
            rows.push(OverlapRow {
                image_index: i,
                method,
                percent: overlap_top_k(&to_f64(map.data()), mask, cfg.top_fraction)?,
            });
        }
    }
    let mut mean = BTreeMap::new();
    for &m in &cfg.methods {
        let v: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.percent).collect();
        mean.insert(m, v.iter().sum::<f64>() / v.len() as f64);
    }
    Ok(OverlapReport {
        rows,
        mean,
        random_baseline: mean_baseline(split, &picked),
    })
}

impl Histogram {
    /// `bin_lo,bin_hi,count_normal,count_abnormal`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<[String; 4]> = (0..self.normal.len())
            .map(|i| {
                [
                    self.edges[i].to_string(),
                    self.edges[i + 1].to_string(),
                    self.normal[i].to_string(),
                    self.abnormal[i].to_string(),
                ]
            })
            .collect();
        write_rows(path, &["bin_lo", "bin_hi", "count_normal", "count_abnormal"], &rows)
    }
}

/// Histogram of positive E-map values of a split, by class.
pub fn histogram_study(model: &ModelGraph, split: &Split, bins: usize) -> Result<Histogram> {
    let (maps, _) = model.emaps(&all_images(split)?)?;
    let maps: Vec<Vec<f64>> = (0..split.len()).map(|i| to_f64(maps.outer(i))).collect();
    let by_class = |label: u8| -> Vec<&[f64]> {
        (0..split.len())
            .filter(|&i| split.labels[i] == label)
            .map(|i| maps[i].as_slice())
            .collect()
    };
    let (normal, abnormal) = (by_class(0), by_class(1));
    if normal.is_empty() || abnormal.is_empty() {
        return Err(Error::arg("histogram needs maps of both classes"));
    }
    positive_pixel_histogram(&normal, &abnormal, bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityPair {
    pub arm_i: usize,
    pub arm_j: usize,
    pub mean_ssim: f64,
}

/// Mean E-map SSIM over the selected images for every ordered pair of models.
pub fn stability_matrix(models: &[&ModelGraph], split: &Split, eval_images: usize) -> Result<Vec<StabilityPair>> {
    let idx = eval_indices(split, eval_images);
    let images = split.batch(&idx)?;
    let s = split.image_size;
    let maps: Vec<Tensor> = models
        .iter()
        .map(|m| m.emaps(&images).map(|(maps, _)| maps))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for i in 0..models.len() {
        for j in 0..models.len() {
            let mean_ssim = if i == j {
                1.0
            } else if j < i {
                pairs
                    .iter()
                    .find(|p: &&StabilityPair| p.arm_i == j && p.arm_j == i)
                    .map(|p| p.mean_ssim)
                    .expect("computed earlier")
            } else {
                let mut total = 0.0;
                for k in 0..idx.len() {
                    total += ssim(&to_f64(maps[i].outer(k)), &to_f64(maps[j].outer(k)), s, s)?;
                }
                total / idx.len() as f64
            };
            pairs.push(StabilityPair {
                arm_i: i,
                arm_j: j,
                mean_ssim,
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub decoder: DecoderSpec,
    pub schemes: Vec<InitKind>,
    /// Seed and scheme parameters shared by every arm; the kind is replaced per arm.
    pub init: InitScheme,
    pub train: TrainConfig,
    /// Test images compared (0 = all).
    pub eval_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityArm {
    pub scheme: InitKind,
    pub report: Option<TrainReport>,
    /// Set when the arm failed; the arm is left out of the matrix.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub arms: Vec<StabilityArm>,
    /// Indices into `arms` of the converged arms that form the matrix.
    pub matrix_arms: Vec<usize>,
    pub pairs: Vec<StabilityPair>,
    pub mean_pairwise: f64,
}

impl StabilityReport {
    /// `arm_i,arm_j,mean_ssim` with arms named by init scheme.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let name = |k: usize| self.arms[self.matrix_arms[k]].scheme.name().to_string();
        let rows: Vec<[String; 3]> = self
            .pairs
            .iter()
            .map(|p| [name(p.arm_i), name(p.arm_j), p.mean_ssim.to_string()])
            .collect();
        write_rows(path, &["arm_i", "arm_j", "mean_ssim"], &rows)
    }
}

pub(crate) fn mean_off_diagonal(pairs: &[StabilityPair]) -> f64 {
    let off: Vec<f64> = pairs
        .iter()
        .filter(|p| p.arm_i < p.arm_j)
        .map(|p| p.mean_ssim)
        .collect();
    if off.is_empty() {
        f64::NAN
    } else {
        off.iter().sum::<f64>() / off.len() as f64
    }
}

/// Independent distillations under different decoder initialisations and the
/// pairwise SSIM of their E-maps. Returns the trained arms alongside.
pub fn stability_study(
    blackbox: &ModelGraph,
    data: &Dataset,
    cfg: &StabilityConfig,
) -> Result<(StabilityReport, Vec<Option<ModelGraph>>)> {
    let mut arms = Vec::new();
    let mut models = Vec::new();
    for &scheme in &cfg.schemes {
        let init = InitScheme {
            kind: scheme,
            ..cfg.init
        };
        let mut m = ModelGraph::build_interpretable(blackbox, cfg.decoder, init)?;
        match distill_interpretable(&mut m, blackbox, data, &cfg.train.with_loss(LossKind::Mse)) {
            Ok(r) => {
                arms.push(StabilityArm {
                    scheme,
                    report: Some(r),
                    failure: None,
                });
                models.push(Some(m));
            }
            Err(e @ (Error::Diverged { .. } | Error::NonFinite { .. })) => {
                log::warn!("stability arm {} failed: {e}", scheme.name());
                arms.push(StabilityArm {
                    scheme,
                    report: None,
                    failure: Some(e.to_string()),
                });
                models.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let matrix_arms: Vec<usize> = (0..arms.len()).filter(|&i| models[i].is_some()).collect();
    let converged: Vec<&ModelGraph> = models.iter().flatten().collect();
    let pairs = stability_matrix(&converged, &data.test, cfg.eval_images)?;
    Ok((
        StabilityReport {
            mean_pairwise: mean_off_diagonal(&pairs),
            arms,
            matrix_arms,
            pairs,
        },
        models,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arm: String,
    pub blackbox_acc: f64,
    pub distilled_acc: f64,
}

/// `arm,blackbox_acc,distilled_acc`
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let rows: Vec<[String; 3]> = rows
        .iter()
        .map(|r| [r.arm.clone(), r.blackbox_acc.to_string(), r.distilled_acc.to_string()])
        .collect();
    write_rows(path, &["arm", "blackbox_acc", "distilled_acc"], &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub blackbox: BlackBoxSpec,
    pub decoder: DecoderSpec,
    pub blackbox_train: TrainConfig,
    pub distill: TrainConfig,
    pub init: InitScheme,
}

fn test_accuracy(model: &ModelGraph, data: &Dataset) -> Result<f64> {
    Ok(evaluate(model, &data.test, None, 0.01)?.accuracy)
}

/// Trains one black box per encoder depth and distils each; test accuracies.
pub fn sweep_encoder_depth(data: &Dataset, depths: &[usize], cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &d in depths {
        let spec = BlackBoxSpec {
            conv_layers: d,
            ..cfg.blackbox
        };
        let mut bb = ModelGraph::build_blackbox(spec, data.image_size(), cfg.init)?;
        train_blackbox(&mut bb, data, &cfg.blackbox_train.with_loss(LossKind::Bce))?;
        let mut m = ModelGraph::build_interpretable(&bb, cfg.decoder, cfg.init)?;
        distill_interpretable(&mut m, &bb, data, &cfg.distill.with_loss(LossKind::Mse))?;
        let row = SweepRow {
            arm: format!("encoder_{d}"),
            blackbox_acc: test_accuracy(&bb, data)?,
            distilled_acc: test_accuracy(&m, data)?,
        };
        log::info!(
            "{}: black box {:.4}, distilled {:.4}",
            row.arm,
            row.blackbox_acc,
            row.distilled_acc
        );
        rows.push(row);
    }
    Ok(rows)
}

/// Distils one interpretable network per decoder depth from a fixed black box.
pub fn sweep_decoder_depth(
    blackbox: &ModelGraph,
    data: &Dataset,
    convs: &[usize],
    cfg: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    let bb_acc = test_accuracy(blackbox, data)?;
    let mut rows = Vec::new();
    for &c in convs {
        let dec = DecoderSpec {
            conv_layers: c,
            ..cfg.decoder
        };
        let mut m = ModelGraph::build_interpretable(blackbox, dec, cfg.init)?;
        distill_interpretable(&mut m, blackbox, data, &cfg.distill.with_loss(LossKind::Mse))?;
        let row = SweepRow {
            arm: format!("decoder_{c}"),
            blackbox_acc: bb_acc,
            distilled_acc: test_accuracy(&m, data)?,
        };
        log::info!("{}: distilled {:.4}", row.arm, row.distilled_acc);
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpFnSummary {
    /// Examples written per category (`tp`, `tn`, `fp`, `fn`).
    pub written: BTreeMap<String, usize>,
    /// Categories with no members.
    pub empty: Vec<String>,
    pub files_written: usize,
}

/// Writes up to `per_category` image (8-bit PGM) and E-map (`.f32t`) pairs
/// for each outcome category, plus `index.csv`.
pub fn export_fp_fn(model: &ModelGraph, split: &Split, out_dir: &Path, per_category: usize) -> Result<FpFnSummary> {
    if !model.is_interpretable() {
        return Err(Error::arg("FP/FN export needs an interpretable model"));
    }
    let (maps, t) = model.emaps(&all_images(split)?)?;
    let s = split.image_size;
    let mut written = BTreeMap::new();
    let mut empty = Vec::new();
    let mut rows = Vec::new();
    for (cat, pred, label) in [("tp", true, 1u8), ("tn", false, 0), ("fp", true, 0), ("fn", false, 1)] {
        let members: Vec<usize> = (0..split.len())
            .filter(|&i| (t[i] > 0.0) == pred && split.labels[i] == label)
            .collect();
        if members.is_empty() {
            log::info!("no {cat} cases; category skipped");
            empty.push(cat.to_string());
            continue;
        }
        let dir = out_dir.join(cat);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let chosen = &members[..members.len().min(per_category)];
        for &i in chosen {
            let image_file = format!("{cat}/image_{i:05}.pgm");
            let emap_file = format!("{cat}/emap_{i:05}.f32t");
            write_pgm8(&out_dir.join(&image_file), s, s, split.image(i))?;
            let map = Tensor::new(vec![1, s, s], maps.outer(i).to_vec())?;
            file::write(&out_dir.join(&emap_file), &map)?;
            rows.push([
                cat.to_string(),
                i.to_string(),
                split.labels[i].to_string(),
                t[i].to_string(),
                image_file,
                emap_file,
            ]);
        }
        written.insert(cat.to_string(), chosen.len());
    }
    write_rows(
        &out_dir.join("index.csv"),
        &["category", "image_index", "label", "t_hat", "image_file", "emap_file"],
        &rows,
    )?;
    Ok(FpFnSummary {
        files_written: rows.len() * 2,
        written,
        empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, DatasetConfig};

    fn setup() -> (Dataset, ModelGraph, ModelGraph) {
        let data = gen_dataset(&DatasetConfig {
            image_size: 16,
            train_per_class: 6,
            val_per_class: 2,
            test_per_class: 4,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let spec = BlackBoxSpec {
            conv_layers: 1,
            filters: 2,
            kernel: 3,
        };
        let bb = ModelGraph::build_blackbox(spec, 16, InitScheme::glorot(1)).unwrap();
        let dec = DecoderSpec {
            conv_layers: 0,
            filters: 2,
            kernel: 3,
            ..Default::default()
        };
        let m = ModelGraph::build_interpretable(&bb, dec, InitScheme::glorot(2)).unwrap();
        (data, bb, m)
    }

    #[test]
    fn stability_matrix_is_symmetric_with_unit_diagonal() {
        let (data, bb, m) = setup();
        let dec = *m.arch.decoder().unwrap();
        let other = ModelGraph::build_interpretable(&bb, dec, InitScheme::glorot(9)).unwrap();
        let pairs = stability_matrix(&[&m, &other, &m], &data.test, 0).unwrap();
        assert_eq!(pairs.len(), 9);
        let at = |i, j| pairs.iter().find(|p| p.arm_i == i && p.arm_j == j).unwrap().mean_ssim;
        for i in 0..3 {
            assert_eq!(at(i, i), 1.0);
            for j in 0..3 {
                assert_eq!(at(i, j), at(j, i));
            }
        }
        assert!((at(0, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fp_fn_index_matches_files() {
        let (data, _, m) = setup();
        let dir = tempfile::tempdir().unwrap();
        let s = export_fp_fn(&m, &data.test, dir.path(), 2).unwrap();
        let index = fs::read_to_string(dir.path().join("index.csv")).unwrap();
        let rows = index.lines().count() - 1;
        assert_eq!(rows * 2, s.files_written);
        let on_disk: usize = ["tp", "tn", "fp", "fn"]
            .iter()
            .filter_map(|c| fs::read_dir(dir.path().join(c)).ok())
            .map(|d| d.count())
            .sum();
        assert_eq!(on_disk, s.files_written);
        for line in index.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let t: f32 = f[3].parse().unwrap();
            assert!(f[0].starts_with('t') || f[0].starts_with('f'));
            let predicted_abnormal = t > 0.0;
            assert_eq!(predicted_abnormal, f[0] == "tp" || f[0] == "fp");
        }
    }

    #[test]
    fn overlap_study_reports_every_method() {
        let (data, bb, m) = setup();
        let cfg = OverlapConfig {
            ig_steps: 4,
            ..Default::default()
        };
        let r = overlap_study(&m, &bb, &data.test, &cfg).unwrap();
        assert_eq!(r.rows.len(), 4 * 3);
        assert_eq!(r.mean.len(), 3);
        assert!(r.random_baseline > 0.0);
    }

    #[test]
    fn histogram_from_model() {
        let (data, _, m) = setup();
        let h = histogram_study(&m, &data.test, 10).unwrap();
        assert!(h.normal.len() == 10 || h.normal.is_empty());
    }
}
