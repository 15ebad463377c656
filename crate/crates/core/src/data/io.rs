use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::RgbImage;
use super::shapes::{generate_split, DatasetConfig, Scene, Split};
use crate::encoder::GtBox;
use crate::error::{Error, Result};

pub const LABELS_FILE: &str = "labels.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
const IMAGES_DIR: &str = "images";
const MANIFEST_VERSION: u32 = 1;

/// Encodes an image as binary PPM (P6, maxval 255).
pub fn ppm_bytes(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, ppm_bytes(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes, path)
}

fn parse_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let err = |offset: usize, reason: &str| Error::Parse {
        path: path.to_path_buf(),
        offset,
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, "header field out of range"))?;
        if i < 2 && *field == 0 {
            return Err(err(start, "zero image dimension"));
        }
    }
    if fields[2] != 255 {
        return Err(err(pos, "only maxval 255 is supported"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected whitespace after maxval")),
    }
    let (w, h) = (fields[0], fields[1]);
    let need = w * h * 3;
    let have = bytes.len() - pos;
    if have < need {
        return Err(err(
            bytes.len(),
            &format!("truncated pixel data: need {need} bytes, found {have}"),
        ));
    }
    if have > need {
        return Err(err(pos + need, "trailing bytes after pixel data"));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        pixels: bytes[pos..].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LabelLine {
    image: String,
    boxes: Vec<GtBox>,
}

/// One split held in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<RgbImage>,
    pub labels: Vec<Vec<GtBox>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Generates a split in memory, named as [`write_dataset`] names files.
    pub fn generate(config: &DatasetConfig, split: Split) -> Result<Dataset> {
        Ok(Self::from_scenes(config, split, generate_split(config, split)?).0)
    }

    fn from_scenes(config: &DatasetConfig, split: Split, scenes: Vec<Scene>) -> (Dataset, usize) {
        let start = config.first_index(split);
        let mut data = Dataset::default();
        let mut failures = 0;
        for (i, s) in scenes.into_iter().enumerate() {
            data.names.push(format!("{:06}.ppm", start as usize + i));
            data.images.push(s.image);
            data.labels.push(s.boxes);
            failures += s.placement_failures;
        }
        (data, failures)
    }

    /// Subset by indices, preserving order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    fn labels_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (name, boxes) in self.names.iter().zip(&self.labels) {
            let line = LabelLine {
                image: name.clone(),
                boxes: boxes.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    /// SHA-256 over the label file and every image file, in label order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.labels_bytes()?);
        for (name, img) in self.names.iter().zip(&self.images) {
            h.update(name.as_bytes());
            h.update(ppm_bytes(img));
        }
        Ok(hex(&h.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes `images/*.ppm` and `labels.jsonl` under `dir`.
pub fn write_split(dir: &Path, data: &Dataset) -> Result<()> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (name, img) in data.names.iter().zip(&data.images) {
        write_ppm(&images.join(name), img)?;
    }
    let labels = dir.join(LABELS_FILE);
    fs::write(&labels, data.labels_bytes()?).map_err(|e| Error::io(&labels, e))
}

/// Loads a split directory written by [`write_split`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let labels_path = dir.join(LABELS_FILE);
    let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut data = Dataset::default();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let parsed: LabelLine = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                path: labels_path.clone(),
                offset: offset + e.column().saturating_sub(1),
                reason: e.to_string(),
            })?;
            let img_path = dir.join(IMAGES_DIR).join(&parsed.image);
            if !img_path.is_file() {
                return Err(Error::Dataset {
                    path: labels_path.clone(),
                    reason: format!("label references missing image `{}`", parsed.image),
                });
            }
            data.images.push(read_ppm(&img_path)?);
            data.names.push(parsed.image);
            data.labels.push(parsed.boxes);
        }
        offset += line.len();
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: Split,
    pub num_images: usize,
    pub num_boxes: usize,
    pub placement_failures: usize,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub splits: Vec<SplitSummary>,
    /// SHA-256 over the split checksums.
    pub checksum: String,
}

pub fn dataset_checksum(splits: &[SplitSummary]) -> String {
    let mut h = Sha256::new();
    for s in splits {
        h.update(s.split.name().as_bytes());
        h.update(s.checksum.as_bytes());
    }
    hex(&h.finalize())
}

/// Generates both splits into `out_dir/{train,val}` and writes the manifest.
pub fn write_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let mut splits = Vec::new();
    for split in [Split::Train, Split::Val] {
        let (data, failures) = Dataset::from_scenes(config, split, generate_split(config, split)?);
        write_split(&out_dir.join(split.name()), &data)?;
        splits.push(SplitSummary {
            split,
            num_images: data.len(),
            num_boxes: data.labels.iter().map(Vec::len).sum(),
            placement_failures: failures,
            checksum: data.checksum()?,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config: config.clone(),
        checksum: dataset_checksum(&splits),
        splits,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(data_dir: &Path) -> Result<DatasetManifest> {
    let path: PathBuf = data_dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.clone(),
        offset: e.column(),
        reason: e.to_string(),
    })?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Dataset {
            path,
            reason: format!("manifest version {} unsupported (expected {MANIFEST_VERSION})", m.version),
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_and_errors() {
        let mut img = RgbImage::new(3, 2);
        img.put(2, 1, [1, 2, 3]);
        let bytes = ppm_bytes(&img);
        let p = Path::new("x.ppm");
        assert_eq!(parse_ppm(&bytes, p).unwrap(), img);
        match parse_ppm(&bytes[..bytes.len() - 1], p) {
            Err(Error::Parse { reason, .. }) => assert!(reason.contains("truncated")),
            other => panic!("{other:?}"),
        }
        match parse_ppm(b"P5\n1 1\n255\n\0", p) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let commented = b"P6 # c\n1 1\n255\n\x01\x02\x03";
        assert_eq!(parse_ppm(commented, p).unwrap().get(0, 0), [1, 2, 3]);
    }
}
