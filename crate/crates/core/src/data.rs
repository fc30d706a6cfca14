//! Labeled image collections: the CIFAR-10 binary format and a seeded
//! procedural generator for hermetic runs.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::patch::Image;
use crate::rng::{self, tag};

pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Splits off the last `test_fraction` of each class, keeping order.
    pub fn split(&self, test_fraction: f64) -> (Dataset, Dataset) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in 0..self.num_classes {
            let members: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] as usize == class)
                .collect();
            let n_test = (members.len() as f64 * test_fraction).round() as usize;
            let cut = members.len() - n_test;
            train.extend_from_slice(&members[..cut]);
            test.extend_from_slice(&members[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        (self.subset(&train), self.subset(&test))
    }
}

/// Decodes CIFAR-10 binary records: one label byte, then 1024 red, 1024
/// green and 1024 blue bytes, each plane row-major.
pub fn decode_cifar10(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::format(
            path,
            format!(
                "length {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
                bytes.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    let mut labels = Vec::with_capacity(images.capacity());
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label >= 10 {
            return Err(Error::format(path, format!("record {r} has label {label}")));
        }
        let planes = &rec[1..];
        let mut data = Vec::with_capacity(CIFAR_PLANE * 3);
        for i in 0..CIFAR_PLANE {
            for c in 0..3 {
                data.push(planes[c * CIFAR_PLANE + i] as f32 / 255.0);
            }
        }
        images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, data)?);
        labels.push(label);
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: 10,
    })
}

/// Inverse of [`decode_cifar10`] for images whose values are multiples of 1/255.
pub fn encode_cifar10(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_BYTES);
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        out.push(label);
        for c in 0..3 {
            for i in 0..CIFAR_PLANE {
                out.push((img.data[3 * i + c] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Loads one `.bin` file, or every `*.bin` in a directory whose name starts
/// with `prefix` (e.g. `data_batch` or `test_batch`), in name order.
pub fn load_cifar10(path: &Path, prefix: &str) -> Result<Dataset> {
    let files = if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x == "bin")
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with(prefix))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::format(path, format!("no {prefix}*.bin files")));
        }
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut all = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        num_classes: 10,
    };
    for f in files {
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        let ds = decode_cifar10(&bytes, &f)?;
        all.images.extend(ds.images);
        all.labels.extend(ds.labels);
    }
    Ok(all)
}

/// Parameters of the procedural dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub num_classes: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 1024,
            num_classes: 4,
            side: 32,
            seed: 0,
        }
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Seeded procedural images. The class fixes the foreground structure while
/// colors, position, size and background gradient vary per sample:
///
/// * 0: a filled rectangle
/// * 1: horizontal stripes
/// * 2: vertical stripes
/// * 3: a filled disc
/// * 4+: diagonal stripes with class-dependent period
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.count == 0 || spec.num_classes < 2 || spec.side < 4 {
        return Err(Error::InvalidInput(format!(
            "synthetic dataset needs count > 0, >= 2 classes and side >= 4 (got {spec:?})"
        )));
    }
    let s = spec.side;
    let mut images = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let class = i % spec.num_classes;
        let mut rng = rng::stream(spec.seed, &[tag::DATA, i as u64]);
        let bg0 = random_color(&mut rng);
        let bg1 = random_color(&mut rng);
        let fg = random_color(&mut rng);
        let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (ca, sa) = (angle.cos(), angle.sin());
        let half = rng.random_range(s / 5..=s / 3) as isize;
        let cy = rng.random_range(half as i64..=s as i64 - half as i64) as isize;
        let cx = rng.random_range(half as i64..=s as i64 - half as i64) as isize;
        let period = rng.random_range(3i64..=5) as isize;
        let phase = rng.random_range(0..period as i64) as isize;
        let mut img = Image::filled(s, s, 0.0);
        for y in 0..s {
            for x in 0..s {
                let u = ((x as f32 / s as f32 - 0.5) * ca + (y as f32 / s as f32 - 0.5) * sa + 0.5).clamp(0.0, 1.0);
                let (dy, dx) = (y as isize - cy, x as isize - cx);
                let inside_box = dy.abs() < half && dx.abs() < half;
                let on = match class {
                    0 => inside_box,
                    1 => inside_box && (dy + phase).rem_euclid(period) < period / 2 + 1,
                    2 => inside_box && (dx + phase).rem_euclid(period) < period / 2 + 1,
                    3 => dy * dy + dx * dx < half * half,
                    k => {
                        let p = 2 + k as isize;
                        inside_box && (dx + dy + phase).rem_euclid(p) < p / 2
                    }
                };
                for c in 0..3 {
                    let bg = bg0[c] * (1.0 - u) + bg1[c] * u;
                    *img.at_mut(y, x, c) = if on { fg[c] } else { bg };
                }
            }
        }
        images.push(img);
        labels.push(class as u8);
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: spec.num_classes,
    })
}
