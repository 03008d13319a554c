use serde::Serialize;

use crate::error::{Error, Result};

/// One operating point of an ROC curve. Items with `score >= threshold` are
/// called positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Roc {
    pub auc: f64,
    /// From `(0, 0)` at threshold `+inf` to `(1, 1)`.
    pub points: Vec<RocPoint>,
}

/// ROC curve over every unique score and its trapezoid area.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::arg(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::arg("ROC analysis needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of one positive-negative pair.
    let mut area2 = 0u128;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(Roc {
        auc: area2 as f64 / (2 * pos * neg) as f64,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOptions {
    /// Min-max normalise each image to `[0, 1]` first (constants become 0.5).
    pub normalize: bool,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions {
            normalize: true,
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Values mapped to `[0, 1]` by min-max scaling; constant input maps to 0.5.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; values.len()]
    }
}

/// Mean structural similarity over all valid window positions, with the
/// default Gaussian window and constants and dynamic range 1.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    ssim_with(a, b, height, width, &SsimOptions::default())
}

pub fn ssim_with(a: &[f64], b: &[f64], height: usize, width: usize, opts: &SsimOptions) -> Result<f64> {
    if a.len() != b.len() || a.len() != height * width {
        return Err(Error::shape(format!(
            "ssim inputs of {} and {} values for a {height}x{width} image",
            a.len(),
            b.len()
        )));
    }
    let win = opts.window;
    if height < win || width < win {
        return Err(Error::shape(format!(
            "ssim window {win} exceeds the {height}x{width} image"
        )));
    }
    let (a, b) = if opts.normalize {
        (min_max_normalize(a), min_max_normalize(b))
    } else {
        (a.to_vec(), b.to_vec())
    };
    let half = (win / 2) as f64;
    let mut g: Vec<f64> = (0..win)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * opts.sigma * opts.sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);

    let (oh, ow) = (height - win + 1, width - win + 1);
    let filter = |img: &[f64]| -> Vec<f64> {
        let mut rows = vec![0.0; height * ow];
        for y in 0..height {
            for x in 0..ow {
                rows[y * ow + x] = (0..win).map(|k| g[k] * img[y * width + x + k]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..win).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
            }
        }
        out
    };
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter(&a);
    let mu_b = filter(&b);
    let e_aa = filter(&prod(&a, &a));
    let e_bb = filter(&prod(&b, &b));
    let e_ab = filter(&prod(&a, &b));
    let c1 = opts.k1 * opts.k1;
    let c2 = opts.k2 * opts.k2;
    let mut acc = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / (oh * ow) as f64)
}

/// Number of pixels selected by a top fraction.
pub fn top_k_count(top_fraction: f64, pixels: usize) -> usize {
    (((top_fraction * pixels as f64) - 1e-9).ceil() as usize).clamp(1, pixels)
}

/// Percentage of the `⌈top_fraction·n⌉` largest map values (ties broken in
/// raster order) that fall inside the mask (`mask > 0.5`).
pub fn overlap_top_k(map: &[f64], mask: &[f32], top_fraction: f64) -> Result<f64> {
    if map.len() != mask.len() {
        return Err(Error::shape(format!(
            "map has {} pixels but mask has {}",
            map.len(),
            mask.len()
        )));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::arg(format!("top fraction {top_fraction} outside (0, 1]")));
    }
    if !mask.iter().any(|&m| m > 0.5) {
        return Err(Error::arg("overlap needs a mask with at least one pixel"));
    }
    let k = top_k_count(top_fraction, map.len());
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&i, &j| map[j].total_cmp(&map[i]).then(i.cmp(&j)));
    let hits = order[..k].iter().filter(|&&i| mask[i] > 0.5).count();
    Ok(100.0 * hits as f64 / k as f64)
}

/// Expected overlap of a random map: the mask's share of the image, in percent.
pub fn random_overlap_baseline(mask: &[f32]) -> f64 {
    100.0 * mask.iter().filter(|&&m| m > 0.5).count() as f64 / mask.len() as f64
}

/// Histogram of strictly positive E-map values with edges shared by both classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` edges from 0 to the largest positive value, or empty when
    /// no value is positive.
    pub edges: Vec<f64>,
    pub normal: Vec<u64>,
    pub abnormal: Vec<u64>,
}

impl Histogram {
    /// Count-weighted sum of bin centres for one class (1 = abnormal).
    pub fn positive_mass(&self, label: u8) -> f64 {
        let counts = if label == 1 { &self.abnormal } else { &self.normal };
        counts
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * 0.5 * (self.edges[i] + self.edges[i + 1]))
            .sum()
    }
}

pub fn positive_pixel_histogram(normal: &[&[f64]], abnormal: &[&[f64]], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::arg("histogram needs at least one bin"));
    }
    let max = normal
        .iter()
        .chain(abnormal)
        .flat_map(|m| m.iter())
        .cloned()
        .filter(|&v| v > 0.0)
        .fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(Histogram {
            edges: Vec::new(),
            normal: Vec::new(),
            abnormal: Vec::new(),
        });
    }
    let edges: Vec<f64> = (0..=bins).map(|i| max * i as f64 / bins as f64).collect();
    let count = |maps: &[&[f64]]| {
        let mut c = vec![0u64; bins];
        for &v in maps.iter().flat_map(|m| m.iter()) {
            if v > 0.0 {
                let bin = ((v / max) * bins as f64) as usize;
                c[bin.min(bins - 1)] += 1;
            }
        }
        c
    };
    Ok(Histogram {
        normal: count(normal),
        abnormal: count(abnormal),
        edges,
    })
}

/// Counts at the decision rule `t > 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > 0.0, l == 1) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    pub fn sensitivity(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_).max(1) as f64
    }

    pub fn specificity(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp).max(1) as f64
    }
}

/// Mean squared and mean absolute differences.
pub fn estimation_errors(t: &[f64], t_hat: &[f64]) -> (f64, f64) {
    let n = t.len().max(1) as f64;
    let mse = t.iter().zip(t_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let mae = t.iter().zip(t_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    (mse, mae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng as _;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_examples() {
        let r = roc_auc(&[0.9, 0.4, 0.6, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!((r.auc - 0.75).abs() < 1e-12);
        let r = roc_auc(&[3.0, 2.0, 1.0, 0.0], &[1, 1, 0, 0]).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.points.first().unwrap().fpr, 0.0);
        assert_eq!(r.points.last().unwrap().tpr, 1.0);
        assert!(roc_auc(&[1.0, 2.0], &[1, 1]).is_err());
    }

    #[test]
    fn trapezoid_matches_pairwise_with_ties() {
        let mut rng = stream(11, Stream::Probe, &[]);
        for _ in 0..100 {
            let n = rng.random_range(2..=200);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 4.0).collect();
            let a = roc_auc(&scores, &labels).unwrap().auc;
            assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-9);
        }
    }

    #[test]
    fn shuffled_labels_are_near_chance() {
        let mut rng = stream(12, Stream::Probe, &[]);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..10_000).map(|_| rng.random_range(0..2)).collect();
        let a = roc_auc(&scores, &labels).unwrap().auc;
        assert!(a > 0.47 && a < 0.53, "{a}");
    }

    #[test]
    fn ssim_properties() {
        let mut rng = stream(13, Stream::Probe, &[]);
        let a: Vec<f64> = (0..256).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..256).map(|_| rng.random()).collect();
        assert_eq!(ssim(&a, &a, 16, 16).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b, 16, 16).unwrap(), ssim(&b, &a, 16, 16).unwrap());
        assert!(ssim(&a, &b[..255], 16, 16).is_err());
    }

    #[test]
    fn ssim_of_constants() {
        let zero = vec![0.0; 144];
        let one = vec![1.0; 144];
        assert_eq!(ssim(&zero, &one, 12, 12).unwrap(), 1.0);
        let raw = SsimOptions {
            normalize: false,
            ..Default::default()
        };
        let v = ssim_with(&zero, &one, 12, 12, &raw).unwrap();
        assert!((v - 1e-4 / (1.0 + 1e-4)).abs() < 1e-12);
    }

    #[test]
    fn overlap_rules() {
        let mask: Vec<f32> = (0..100).map(|i| if i < 10 { 1.0 } else { 0.0 }).collect();
        let map: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
        assert_eq!(overlap_top_k(&map, &mask, 0.05).unwrap(), 100.0);
        assert_eq!(overlap_top_k(&map, &mask, 0.1).unwrap(), 100.0);
        assert_eq!(overlap_top_k(&map, &mask, 0.2).unwrap(), 50.0);
        // Ties are taken in raster order.
        let flat = vec![1.0; 100];
        assert_eq!(overlap_top_k(&flat, &mask, 0.1).unwrap(), 100.0);
        assert!(overlap_top_k(&map, &[0.0; 100], 0.1).is_err());
        assert_eq!(top_k_count(0.01, 4096), 41);
        assert_eq!(top_k_count(0.01, 100), 1);
    }

    #[test]
    fn random_map_overlap_matches_mask_fraction() {
        let mut rng = stream(14, Stream::Probe, &[]);
        let mask: Vec<f32> = (0..400).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let trials = 10_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let map: Vec<f64> = (0..400).map(|_| rng.random()).collect();
            total += overlap_top_k(&map, &mask, 0.05).unwrap();
        }
        let mean = total / trials as f64;
        assert!((mean - random_overlap_baseline(&mask)).abs() < 2.0, "{mean}");
    }

    #[test]
    fn histogram_cases() {
        let zeros = [0.0; 4];
        let h = positive_pixel_histogram(&[&zeros], &[&zeros], 50).unwrap();
        assert!(h.normal.is_empty() && h.abnormal.is_empty());
        let m = [-1.0, 2.0, 2.0];
        let h = positive_pixel_histogram(&[&m], &[&zeros], 50).unwrap();
        let nonzero: Vec<_> = h.normal.iter().filter(|&&c| c > 0).collect();
        assert_eq!(nonzero, vec![&2]);
        assert_eq!(h.edges.len(), 51);
        assert_eq!(h.positive_mass(1), 0.0);
    }

    #[test]
    fn confusion_counts() {
        let c = Confusion::from_scores(&[1.0, -1.0, 0.5, 0.0], &[1, 0, 0, 1]);
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (1, 1, 1, 1));
        assert_eq!(c.accuracy(), 0.5);
        let (mse, mae) = estimation_errors(&[1.0, 2.0], &[1.0, 4.0]);
        assert_eq!((mse, mae), (2.0, 1.0));
    }
}
