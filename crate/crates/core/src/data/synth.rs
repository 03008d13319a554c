//! Clustered lumpy backgrounds with inserted Gaussian tumors.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use super::{Dataset, DatasetConfig, Split, SplitKind, Variant};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Index of the grid position at the image centre.
pub const CENTER_INDEX: usize = 4;

/// `(row, col)` of grid position `index` (row-major over the 3×3 grid at
/// multiples of a quarter of the image size).
pub fn grid_position(index: usize, size: usize) -> Result<(usize, usize)> {
    if index > 8 {
        return Err(Error::arg(format!("tumor position index {index} is not in 0..=8")));
    }
    let q = size / 4;
    Ok(((index / 3 + 1) * q, (index % 3 + 1) * q))
}

fn poisson(rng: &mut rng::Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as usize
}

/// Separable unit-height Gaussian profile centred at `c`.
fn profile(size: usize, c: f64, width: f64) -> Vec<f64> {
    let k = 1.0 / (2.0 * width * width);
    (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d * k).exp()
        })
        .collect()
}

/// One background `[1, 1, S, S]`, min-max normalised to `[0, 1]` (a constant
/// field maps to 0.5).
pub fn gen_background(cfg: &DatasetConfig, image_seed: u64) -> Tensor {
    let s = cfg.image_size;
    let b = &cfg.background;
    let mut rng = rng::stream(image_seed, Stream::Dataset, &[0]);
    let mut field = vec![0.0f64; s * s];
    let spread = Normal::new(0.0, b.cluster_spread.max(0.0)).expect("non-negative spread");
    let clusters = poisson(&mut rng, b.mean_clusters);
    for _ in 0..clusters {
        let cy = rng.random::<f64>() * s as f64;
        let cx = rng.random::<f64>() * s as f64;
        let blobs = poisson(&mut rng, b.mean_blobs_per_cluster);
        for _ in 0..blobs {
            let by = cy + spread.sample(&mut rng);
            let bx = cx + spread.sample(&mut rng);
            let gy = profile(s, by, b.blob_width);
            let gx = profile(s, bx, b.blob_width);
            for (y, &vy) in gy.iter().enumerate() {
                let a = b.blob_amplitude * vy;
                let row = &mut field[y * s..(y + 1) * s];
                for (f, &vx) in row.iter_mut().zip(&gx) {
                    *f += a * vx;
                }
            }
        }
    }
    let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let data = if hi > lo {
        field.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
    } else {
        vec![0.5f32; s * s]
    };
    Tensor::new(vec![1, 1, s, s], data).expect("shape matches")
}

/// Binary disk of radius `2 * width` around each listed grid position.
pub fn tumor_mask(size: usize, positions: &[usize], width: f64) -> Result<Tensor> {
    let r2 = (2.0 * width) * (2.0 * width);
    let mut mask = vec![0.0f32; size * size];
    for &p in positions {
        let (cy, cx) = grid_position(p, size)?;
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - cy as f64;
                let dx = x as f64 - cx as f64;
                if dy * dy + dx * dx <= r2 {
                    mask[y * size + x] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![1, 1, size, size], mask)
}

/// Adds one Gaussian tumor per listed grid position, clips to `[0, 1]`, and
/// returns `(image, mask)`.
pub fn insert_tumors(bg: &Tensor, positions: &[usize], amplitude: f64, width: f64) -> Result<(Tensor, Tensor)> {
    let (_, _, s, sw) = bg.dims4()?;
    if s != sw || bg.numel() != s * s {
        return Err(Error::shape(format!(
            "expected a single square image, got {:?}",
            bg.shape()
        )));
    }
    let mut added = vec![0.0f64; s * s];
    for &p in positions {
        let (cy, cx) = grid_position(p, s)?;
        let gy = profile(s, cy as f64, width);
        let gx = profile(s, cx as f64, width);
        for y in 0..s {
            for x in 0..s {
                added[y * s + x] += amplitude * gy[y] * gx[x];
            }
        }
    }
    let data = bg
        .data()
        .iter()
        .zip(&added)
        .map(|(&v, &a)| ((v as f64 + a) as f32).clamp(0.0, 1.0))
        .collect();
    let image = Tensor::new(bg.shape().to_vec(), data)?;
    Ok((image, tumor_mask(s, positions, width)?))
}

pub fn insert_tumor(bg: &Tensor, position_index: usize, amplitude: f64, width: f64) -> Result<(Tensor, Tensor)> {
    insert_tumors(bg, &[position_index], amplitude, width)
}

#[derive(Debug, Clone)]
pub struct GeneratedImage {
    pub image: Tensor,
    pub mask: Tensor,
    /// Randomly drawn grid position (abnormal images only).
    pub position: Option<usize>,
}

/// Generates one image of class `label` from its per-image seed.
pub fn gen_image(cfg: &DatasetConfig, image_seed: u64, label: u8) -> Result<GeneratedImage> {
    let bg = gen_background(cfg, image_seed);
    if label == 0 {
        let s = cfg.image_size;
        return Ok(GeneratedImage {
            image: bg,
            mask: Tensor::zeros(&[1, 1, s, s]),
            position: None,
        });
    }
    let mut rng = rng::stream(image_seed, Stream::Dataset, &[1]);
    let position = rng.random_range(0..9usize);
    let positions = match cfg.variant {
        Variant::SingleTumor => vec![position],
        Variant::TwoTumor => vec![CENTER_INDEX, position],
    };
    let (image, mask) = insert_tumors(&bg, &positions, cfg.tumor.amplitude, cfg.tumor.width)?;
    Ok(GeneratedImage {
        image,
        mask,
        position: Some(position),
    })
}

fn image_seed(cfg: &DatasetConfig, split: SplitKind, label: u8, index: usize) -> u64 {
    rng::derive(
        cfg.seed,
        &[Stream::Image as u64, split as u64, label as u64, index as u64],
    )
}

/// Materialises every split. Normals come first in each split, then abnormals.
pub fn gen_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut splits = Vec::with_capacity(3);
    for kind in SplitKind::ALL {
        let per_class = match kind {
            SplitKind::Train => cfg.train_per_class,
            SplitKind::Val => cfg.val_per_class,
            SplitKind::Test => cfg.test_per_class,
        };
        let jobs: Vec<(u8, u64)> = [0u8, 1]
            .iter()
            .flat_map(|&label| (0..per_class).map(move |i| (label, i)))
            .map(|(label, i)| (label, image_seed(cfg, kind, label, i)))
            .collect();
        let items: Vec<GeneratedImage> = jobs
            .par_iter()
            .map(|&(label, seed)| gen_image(cfg, seed, label))
            .collect::<Result<_>>()?;
        let s = cfg.image_size;
        let mut split = Split::empty(kind, s);
        let mut masks = Vec::with_capacity(items.len() * s * s);
        for ((label, seed), item) in jobs.into_iter().zip(items) {
            split.images.extend_from_slice(item.image.data());
            masks.extend_from_slice(item.mask.data());
            split.labels.push(label);
            split.positions.push(item.position.map(|p| p as u8));
            split.seeds.push(seed);
        }
        split.masks = Some(masks);
        splits.push(split);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        config: Some(cfg.clone()),
        train,
        val,
        test,
    })
}
