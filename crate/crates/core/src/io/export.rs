use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{export_split_pgm, write_pgm16, Dataset, DatasetConfig, Split, SplitKind};
use crate::error::{Error, Result};
use crate::models::Emap;
use crate::tensor::{file, Tensor};

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `base.f32t` (raw values), `base.pgm` (16-bit, min-max normalised)
/// and `base.meta` (min, max, raster sum, t_hat, image index).
pub fn export_emap(emap: &Emap, base: &Path, image_index: usize) -> Result<()> {
    let s = *emap.map.shape().last().expect("rank-4 map");
    let map = Tensor::new(vec![1, s, s], emap.map.data().to_vec())?;
    file::write(&with_ext(base, "f32t"), &map)?;
    let (min, max) = write_pgm16(&with_ext(base, "pgm"), s, s, map.data())?;
    let meta = format!(
        "min = {min:?}\nmax = {max:?}\nsum = {:?}\nt_hat = {:?}\nimage_index = {image_index}\n",
        map.sum(),
        emap.t_hat
    );
    let path = with_ext(base, "meta");
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

/// Reads the `key = value` pairs of a `.meta` file.
pub fn read_meta(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

const MANIFEST: &str = "manifest.csv";
const CONFIG: &str = "dataset.json";

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ManifestRow {
    index: usize,
    split: String,
    label: u8,
    position_index: Option<u8>,
    seed: u64,
}

/// Writes a dataset: per split `images.f32t`, `masks.f32t` and 8-bit PGMs
/// under `<split>/pgm/<label>/`, plus `manifest.csv` and the generating
/// config as `dataset.json`.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    for kind in SplitKind::ALL {
        let split = data.split(kind);
        let sd = dir.join(kind.name());
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        for i in 0..split.len() {
            w.serialize(ManifestRow {
                index: i,
                split: kind.name().into(),
                label: split.labels[i],
                position_index: split.positions[i],
                seed: split.seeds[i],
            })
            .map_err(|e| csv_err(&manifest, e))?;
        }
        if split.is_empty() {
            continue;
        }
        let s = split.image_size;
        let shape = vec![split.len(), 1, s, s];
        file::write(
            &sd.join("images.f32t"),
            &Tensor::new(shape.clone(), split.images.clone())?,
        )?;
        if let Some(m) = &split.masks {
            file::write(&sd.join("masks.f32t"), &Tensor::new(shape, m.clone())?)?;
        }
        export_split_pgm(split, &sd.join("pgm"))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    let config = dir.join(CONFIG);
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "image_size": data.image_size(),
        "config": data.config,
        "content_hash": data.content_hash(),
    }))?;
    fs::write(&config, json + "\n").map_err(|e| Error::io(&config, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let config_path = dir.join(CONFIG);
    let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let header: serde_json::Value = serde_json::from_str(&text)?;
    let image_size = header["image_size"].as_u64().ok_or_else(|| Error::File {
        path: config_path.clone(),
        message: "missing image_size".into(),
    })? as usize;
    let config: Option<DatasetConfig> = serde_json::from_value(header["config"].clone())?;

    let manifest = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    let mut splits: Vec<Split> = SplitKind::ALL.iter().map(|&k| Split::empty(k, image_size)).collect();
    for row in r.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| csv_err(&manifest, e))?;
        let kind = SplitKind::parse(&row.split).map_err(|e| Error::File {
            path: manifest.clone(),
            message: e.to_string(),
        })?;
        let split = &mut splits[kind as usize];
        if row.index != split.len() {
            return Err(Error::File {
                path: manifest.clone(),
                message: format!("{} rows out of order at index {}", row.split, row.index),
            });
        }
        split.labels.push(row.label);
        split.positions.push(row.position_index);
        split.seeds.push(row.seed);
    }
    for split in &mut splits {
        if split.is_empty() {
            continue;
        }
        let sd = dir.join(split.kind.name());
        let want = [split.len(), 1, image_size, image_size];
        let read = |name: &str| -> Result<Option<Vec<f32>>> {
            let path = sd.join(name);
            if !path.exists() {
                return Ok(None);
            }
            let t = file::read(&path)?;
            if t.shape() != want {
                return Err(Error::File {
                    path,
                    message: format!("shape {:?} disagrees with the manifest {want:?}", t.shape()),
                });
            }
            Ok(Some(t.into_data()))
        };
        split.images = read("images.f32t")?.ok_or_else(|| Error::File {
            path: sd.join("images.f32t"),
            message: "missing".into(),
        })?;
        split.masks = read("masks.f32t")?;
    }
    let [train, val, test]: [Split; 3] = splits.try_into().expect("three splits");
    Ok(Dataset {
        config,
        train,
        val,
        test,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, read_pgm};

    #[test]
    fn meta_sum_matches_payload_and_reload_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let map = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i * 37 % 11) as f32 - 5.0) * 0.013);
        let emap = Emap {
            t_hat: map.sum(),
            map: map.clone(),
        };
        let base = dir.path().join("e");
        export_emap(&emap, &base, 3).unwrap();
        let back = file::read(&with_ext(&base, "f32t")).unwrap();
        assert_eq!(back.to_le_bytes(), map.to_le_bytes());
        let meta = read_meta(&with_ext(&base, "meta")).unwrap();
        let get = |k: &str| meta.iter().find(|(a, _)| a == k).unwrap().1.clone();
        let mut acc = 0.0f32;
        for &v in back.data() {
            acc += v;
        }
        assert_eq!(get("sum").parse::<f32>().unwrap(), acc);
        assert_eq!(get("image_index"), "3");
    }

    #[test]
    fn constant_map_exports_mid_grey() {
        let dir = tempfile::tempdir().unwrap();
        let emap = Emap {
            map: Tensor::full(&[1, 1, 4, 4], 0.25),
            t_hat: 4.0,
        };
        let base = dir.path().join("c");
        export_emap(&emap, &base, 0).unwrap();
        let (_, _, px) = read_pgm(&with_ext(&base, "pgm")).unwrap();
        assert!(px.iter().all(|&v| (v - 0.5).abs() < 1e-4));
    }

    #[test]
    fn dataset_round_trip() {
        let data = gen_dataset(&DatasetConfig {
            image_size: 16,
            train_per_class: 3,
            val_per_class: 2,
            test_per_class: 2,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(
            manifest.lines().next().unwrap(),
            "index,split,label,position_index,seed"
        );
        assert_eq!(manifest.lines().count(), 1 + 14);
        assert!(dir.path().join("train/pgm/1/000003.pgm").exists());
    }
}
