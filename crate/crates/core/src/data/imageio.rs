//! Binary PGM (P5) and 8-bit grayscale PNG input/output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Split, SplitKind};
use crate::error::{Error, Result};

fn file_err(path: &Path, message: impl Into<String>) -> Error {
    Error::File {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes values in `[0, 1]` as an 8-bit P5 image (values are clamped).
pub fn write_pgm8(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes a 16-bit P5 image, min-max normalising `values` (a constant map
/// becomes mid-grey). Returns `(min, max)` so the mapping can be inverted.
pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<(f32, f32)> {
    if values.len() != width * height {
        return Err(Error::shape(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let norm = if hi > lo {
            ((v - lo) as f64 / (hi - lo) as f64).clamp(0.0, 1.0)
        } else {
            0.5
        };
        let q = (norm * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok((lo, hi))
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Reads a P5 image as `(width, height, values in [0, 1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.get(..2) != Some(b"P5") {
        return Err(file_err(path, "not a binary PGM (P5) file"));
    }
    let mut pos = 2;
    let mut header = [0usize; 3];
    for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
        let tok = next_token(&bytes, &mut pos).ok_or_else(|| file_err(path, format!("missing {name}")))?;
        *slot = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| file_err(path, format!("bad {name}")))?;
    }
    let [width, height, maxval] = header;
    if !(1..=65535).contains(&maxval) {
        return Err(file_err(path, format!("maxval {maxval} out of range")));
    }
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    let n = width * height;
    let values = if maxval < 256 {
        if data.len() < n {
            return Err(file_err(path, "truncated pixel data"));
        }
        data[..n].iter().map(|&b| b as f32 / maxval as f32).collect()
    } else {
        if data.len() < 2 * n {
            return Err(file_err(path, "truncated pixel data"));
        }
        data[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / maxval as f32)
            .collect()
    };
    Ok((width, height, values))
}

fn read_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| file_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| file_err(path, e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(file_err(
            path,
            format!(
                "expected 8-bit grayscale PNG, found {:?} {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let values = buf[..w * h].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((w, h, values))
}

/// Reads a grayscale PGM or PNG (chosen by extension) as values in `[0, 1]`.
pub fn read_gray_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    match extension(path).as_deref() {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        _ => Err(file_err(path, "unsupported image extension")),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

fn class_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| matches!(extension(p).as_deref(), Some("pgm" | "png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads `root/0/*` (normal) and `root/1/*` (abnormal) grayscale images in
/// lexicographic order. Images must already be `expected_size` square.
pub fn load_image_dir(root: &Path, expected_size: usize, kind: SplitKind) -> Result<Split> {
    let mut split = Split::empty(kind, expected_size);
    for label in [0u8, 1] {
        for path in class_files(&root.join(label.to_string()))? {
            let (w, h, values) = read_gray_image(&path)?;
            if w != expected_size || h != expected_size {
                return Err(file_err(
                    &path,
                    format!("image is {w}x{h}, expected {expected_size}x{expected_size}"),
                ));
            }
            split.images.extend_from_slice(&values);
            split.labels.push(label);
            split.positions.push(None);
            split.seeds.push(0);
        }
    }
    if split.is_empty() {
        log::warn!("no images found under {}", root.display());
    }
    Ok(split)
}

/// Writes a split as `dir/<label>/<index>.pgm`, the layout [`load_image_dir`] reads.
pub fn export_split_pgm(split: &Split, dir: &Path) -> Result<()> {
    let s = split.image_size;
    for label in ["0", "1"] {
        let d = dir.join(label);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for i in 0..split.len() {
        let path = dir.join(split.labels[i].to_string()).join(format!("{i:06}.pgm"));
        write_pgm8(&path, s, s, split.image(i))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, DatasetConfig};

    #[test]
    fn empty_directory_gives_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        let s = load_image_dir(dir.path(), 8, SplitKind::Test).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn full_intensity_maps_to_one() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("1")).unwrap();
        let mut bytes = b"P5\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0]);
        fs::write(dir.path().join("1/a.pgm"), bytes).unwrap();
        let s = load_image_dir(dir.path(), 2, SplitKind::Train).unwrap_err();
        assert!(s.to_string().contains("a.pgm"));

        let (w, h, v) = read_pgm(&dir.path().join("1/a.pgm")).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(v, vec![1.0, 0.0]);
    }

    #[test]
    fn png_input() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("0")).unwrap();
        let path = dir.path().join("0/x.png");
        let file = fs::File::create(&path).unwrap();
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), 2, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()
            .unwrap()
            .write_image_data(&[0, 51, 102, 255])
            .unwrap();
        let s = load_image_dir(dir.path(), 2, SplitKind::Train).unwrap();
        assert_eq!(s.labels, vec![0]);
        assert_eq!(s.images, vec![0.0, 0.2, 0.4, 1.0]);
    }

    #[test]
    fn unreadable_file_names_its_path() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("0")).unwrap();
        fs::write(dir.path().join("0/broken.pgm"), b"P2 nope").unwrap();
        let err = load_image_dir(dir.path(), 4, SplitKind::Train).unwrap_err();
        assert!(err.to_string().contains("broken.pgm"));
    }

    #[test]
    fn pgm_export_round_trip_within_quantisation() {
        let cfg = DatasetConfig {
            image_size: 16,
            train_per_class: 3,
            val_per_class: 1,
            test_per_class: 1,
            ..Default::default()
        };
        let d = gen_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_split_pgm(&d.train, dir.path()).unwrap();
        let back = load_image_dir(dir.path(), 16, SplitKind::Train).unwrap();
        assert_eq!(back.labels, d.train.labels);
        let worst = back
            .images
            .iter()
            .zip(&d.train.images)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 255.0, "{worst}");
    }

    #[test]
    fn pgm16_constant_is_mid_grey() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let (lo, hi) = write_pgm16(&p, 3, 2, &[4.0; 6]).unwrap();
        assert_eq!((lo, hi), (4.0, 4.0));
        let (_, _, v) = read_pgm(&p).unwrap();
        assert!(v.iter().all(|&x| (x - 32768.0 / 65535.0).abs() < 1e-7));
    }
}
