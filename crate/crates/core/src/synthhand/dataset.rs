use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::skeleton::{HandSkeleton, Vec3, NUM_JOINTS};
use super::{render, sample_pose, PoseSample, SynthConfig};
use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng;

pub const RASTER_MAGIC: [u8; 4] = *b"EQIM";
const FORMAT_VERSION: u32 = 1;
const INDEX_FILE: &str = "index.json";
const LABEL_FILE: &str = "labels.json";
const IMAGE_DIR: &str = "images";

/// Raster layout: magic, then H, W, C as little-endian u32, then `H·W·C` bytes.
pub fn write_raster(path: &Path, img: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + img.data().len());
    buf.extend_from_slice(&RASTER_MAGIC);
    for v in [img.height(), img.width(), CHANNELS] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&img.to_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn parse_raster(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 16 || bytes[..4] != RASTER_MAGIC {
        return Err(Error::format(path, "not a raster file (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    if c != CHANNELS {
        return Err(Error::format(path, format!("expected {CHANNELS} channels, found {c}")));
    }
    let body = &bytes[16..];
    if body.len() != h * w * c {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, header promises {}", body.len(), h * w * c),
        ));
    }
    Ok((h, w, body.to_vec()))
}

pub fn read_raster(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w, body) = parse_raster(path, &bytes)?;
    Image::from_bytes(h, w, &body)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub n: usize,
    pub seed: u64,
    pub labeled_fraction: f64,
    pub num_labeled: usize,
    pub config: SynthConfig,
    pub skeleton: HandSkeleton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub id: usize,
    pub image: String,
    pub j3d: Vec<Vec3>,
    pub j2d: Vec<[f64; 2]>,
    pub d_r: Vec<f64>,
    pub k: [[f64; 3]; 3],
    pub labeled: bool,
}

/// Samples held in memory with 8-bit pixels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub labels: Vec<LabelRecord>,
    size: usize,
    pixels: Vec<Vec<u8>>,
    intrinsics: Vec<Intrinsics>,
}

fn num_labeled(n: usize, fraction: f64) -> usize {
    // Tolerate products like 0.29·100 = 28.999… landing just below an integer.
    ((n as f64 * fraction + 1e-9).floor() as usize).min(n)
}

fn image_name(i: usize) -> String {
    format!("{IMAGE_DIR}/{i:06}.img")
}

/// Deterministic in `(n, seed, labeled_fraction, cfg)`; the first
/// `floor(n·fraction)` samples are marked labeled.
pub fn generate(n: usize, seed: u64, labeled_fraction: f64, cfg: &SynthConfig) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&labeled_fraction) {
        return Err(Error::invalid(format!(
            "labeled fraction must lie in [0, 1], got {labeled_fraction}"
        )));
    }
    cfg.validate()?;
    let skeleton = HandSkeleton::default();
    let k = cfg.intrinsics();
    let cut = num_labeled(n, labeled_fraction);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, rng::STREAM_DATASET, i as u64);
        let pose = sample_pose(&mut r, &skeleton, cfg);
        let style = rng::derive_seed(seed, "style", i as u64);
        let mut s = render(&skeleton, &pose.j3d, &k, cfg.image_size, style)?;
        s.labeled = i < cut;
        samples.push(s);
    }
    let index = DatasetIndex {
        format_version: FORMAT_VERSION,
        n,
        seed,
        labeled_fraction,
        num_labeled: cut,
        config: cfg.clone(),
        skeleton,
    };
    Ok(Dataset::from_samples(index, samples))
}

/// Generates and writes a dataset under `out`: `index.json`, `labels.json`
/// and one raster per sample in `images/`.
pub fn make_dataset(n: usize, seed: u64, labeled_fraction: f64, cfg: &SynthConfig, out: &Path) -> Result<Dataset> {
    let ds = generate(n, seed, labeled_fraction, cfg)?;
    ds.save(out)?;
    Ok(ds)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

impl Dataset {
    pub fn from_samples(index: DatasetIndex, samples: Vec<PoseSample>) -> Self {
        let size = samples.first().map_or(index.config.image_size, |s| s.image.width());
        let mut labels = Vec::with_capacity(samples.len());
        let mut pixels = Vec::with_capacity(samples.len());
        let mut intrinsics = Vec::with_capacity(samples.len());
        for (i, s) in samples.into_iter().enumerate() {
            labels.push(LabelRecord {
                id: i,
                image: image_name(i),
                j3d: s.j3d,
                j2d: s.j2d,
                d_r: s.d_r,
                k: s.k.matrix(),
                labeled: s.labeled,
            });
            pixels.push(s.image.to_bytes());
            intrinsics.push(s.k);
        }
        Dataset {
            index,
            labels,
            size,
            pixels,
            intrinsics,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn image(&self, i: usize) -> Image {
        Image::from_bytes(self.size, self.size, &self.pixels[i]).expect("stored with matching size")
    }

    pub fn intrinsics(&self, i: usize) -> Intrinsics {
        self.intrinsics[i]
    }

    pub fn sample(&self, i: usize) -> PoseSample {
        let l = &self.labels[i];
        PoseSample {
            image: self.image(i),
            j3d: l.j3d.clone(),
            j2d: l.j2d.clone(),
            d_r: l.d_r.clone(),
            k: self.intrinsics[i],
            labeled: l.labeled,
        }
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].labeled).collect()
    }

    /// Subset keeping `indices` in order, renumbered from zero.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let samples = indices.iter().map(|&i| self.sample(i)).collect::<Vec<_>>();
        let mut index = self.index.clone();
        index.n = samples.len();
        index.num_labeled = samples.iter().filter(|s| s.labeled).count();
        Dataset::from_samples(index, samples)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let img_dir = out.join(IMAGE_DIR);
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (i, l) in self.labels.iter().enumerate() {
            write_raster(&out.join(&l.image), &self.image(i))?;
        }
        write_json(&out.join(LABEL_FILE), &self.labels)?;
        write_json(&out.join(INDEX_FILE), &self.index)
    }

    pub fn index_path(dir: &Path) -> PathBuf {
        dir.join(INDEX_FILE)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let index_path = dir.join(INDEX_FILE);
        if !index_path.exists() {
            return Err(Error::io(
                &index_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset index not found"),
            ));
        }
        let index: DatasetIndex = read_json(&index_path)?;
        if index.format_version != FORMAT_VERSION {
            return Err(Error::format(
                &index_path,
                format!("unsupported dataset version {}", index.format_version),
            ));
        }
        let label_path = dir.join(LABEL_FILE);
        let labels: Vec<LabelRecord> = read_json(&label_path)?;
        if labels.len() != index.n {
            return Err(Error::format(
                &label_path,
                format!("index lists {} samples, labels hold {}", index.n, labels.len()),
            ));
        }
        let size = index.config.image_size;
        let mut pixels = Vec::with_capacity(labels.len());
        let mut intrinsics = Vec::with_capacity(labels.len());
        for l in &labels {
            if l.j3d.len() != NUM_JOINTS || l.j2d.len() != NUM_JOINTS || l.d_r.len() != NUM_JOINTS {
                return Err(Error::format(&label_path, format!("sample {} has wrong joint count", l.id)));
            }
            let path = dir.join(&l.image);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (h, w, body) = parse_raster(&path, &bytes)?;
            if h != size || w != size {
                return Err(Error::format(&path, format!("image is {h}x{w}, dataset size is {size}")));
            }
            pixels.push(body);
            intrinsics.push(Intrinsics::from_matrix(&l.k).map_err(|e| Error::format(&label_path, e.to_string()))?);
        }
        Ok(Dataset {
            index,
            labels,
            size,
            pixels,
            intrinsics,
        })
    }
}
