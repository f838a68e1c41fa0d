//! Dataset parsing, sampling, and batching.
//!
//! Two binary formats are supported byte-exactly:
//!
//! - IDX (MNIST): big-endian `0x00000803` magic + dims for images,
//!   `0x00000801` + count for labels, then raw bytes.
//! - CIFAR-10 batches: 3073-byte records, one label byte followed by 3072
//!   channel-planar RGB pixel bytes.
//!
//! Pixels normalize to `[0,1]` by `v / 255`. Writers for both formats back
//! the round-trip tests and the synthetic corpus in [`synthetic`].

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 3073;

/// In-memory dataset: images in `[0,1]`, one label per image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    /// FNV-1a 64 over the source file bytes, in load order.
    pub content_hash: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// New dataset from a list of indices, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Dataset {
        let (c, h, w) = self.image_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Dataset {
            name: self.name.clone(),
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("shape consistent"),
            labels,
            num_classes: self.num_classes,
            content_hash: self.content_hash,
        }
    }
}

pub fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    let mut h = if seed == 0 { 0xcbf29ce484222325 } else { seed };
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            expected: end,
            found: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Header of an IDX image file: `(count, rows, cols)`.
pub fn parse_idx_image_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    Ok((
        be_u32(bytes, 4, path)? as usize,
        be_u32(bytes, 8, path)? as usize,
        be_u32(bytes, 12, path)? as usize,
    ))
}

/// Loads an MNIST-style IDX image/label file pair.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_file(images_path)?;
    let (count, rows, cols) = parse_idx_image_header(&img_bytes, images_path)?;
    let expect = 16 + count * rows * cols;
    if img_bytes.len() < expect {
        return Err(Error::Truncated {
            path: images_path.display().to_string(),
            expected: expect,
            found: img_bytes.len(),
        });
    }
    let lbl_bytes = read_file(labels_path)?;
    let magic = be_u32(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let lbl_count = be_u32(&lbl_bytes, 4, labels_path)? as usize;
    if lbl_bytes.len() < 8 + lbl_count {
        return Err(Error::Truncated {
            path: labels_path.display().to_string(),
            expected: 8 + lbl_count,
            found: lbl_bytes.len(),
        });
    }
    if lbl_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: lbl_count,
        });
    }
    let num_classes = 10;
    let labels = lbl_bytes[8..8 + count].to_vec();
    if let Some(bad) = labels.iter().find(|l| usize::from(**l) >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: usize::from(*bad),
            classes: num_classes,
        });
    }
    let data: Vec<f32> = img_bytes[16..expect].iter().map(|v| f32::from(*v) / 255.0).collect();
    let hash = fnv1a64(&lbl_bytes, fnv1a64(&img_bytes, 0));
    Ok(Dataset {
        name: "mnist".into(),
        images: Tensor::new(vec![count, 1, rows, cols], data)?,
        labels,
        num_classes,
        content_hash: hash,
    })
}

/// Loads one or more CIFAR-10 binary batch files, concatenated in order.
pub fn load_cifar10(paths: &[PathBuf]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument {
            op: "load_cifar10",
            reason: "no batch files given".into(),
        });
    }
    let num_classes = 10;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut hash = 0u64;
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::InvalidRecordLength {
                path: path.display().to_string(),
                len: bytes.len(),
                record: CIFAR_RECORD_BYTES,
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            let label = record[0];
            if usize::from(label) >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: usize::from(label),
                    classes: num_classes,
                });
            }
            labels.push(label);
            data.extend(record[1..].iter().map(|v| f32::from(*v) / 255.0));
        }
        hash = fnv1a64(&bytes, hash);
    }
    let count = labels.len();
    Ok(Dataset {
        name: "cifar10".into(),
        images: Tensor::new(vec![count, 3, 32, 32], data)?,
        labels,
        num_classes,
        content_hash: hash,
    })
}

// -- serializers (fixtures and synthetic corpora) ---------------------------

/// Quantizes normalized pixels back to bytes; inverse of the `/255` map.
pub fn to_bytes(images: &Tensor) -> Vec<u8> {
    images
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn write_idx_images(path: &Path, images: &[u8], count: usize, rows: usize, cols: usize) -> Result<()> {
    debug_assert_eq!(images.len(), count * rows * cols);
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(images);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes CIFAR-10 records: per image one label byte + 3072 pixel bytes.
pub fn write_cifar_batch(path: &Path, labels: &[u8], pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), labels.len() * 3072);
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD_BYTES);
    for (i, label) in labels.iter().enumerate() {
        out.push(*label);
        out.extend_from_slice(&pixels[i * 3072..(i + 1) * 3072]);
    }
    std::fs::write(path, out)?;
    Ok(())
}

// -- dataset directories ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "cifar10" => Ok(Self::Cifar10),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::Cifar10 => "cifar10",
        }
    }
}

/// Loads the train/test pair for a dataset from its standard file names
/// under `dir` (`train-images-idx3-ubyte`, `data_batch_1.bin`, ...).
pub fn load_dir(kind: DatasetKind, dir: &Path) -> Result<(Dataset, Dataset)> {
    match kind {
        DatasetKind::Mnist => {
            let train = load_mnist(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_mnist(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            Ok((train, test))
        }
        DatasetKind::Cifar10 => {
            let train_paths: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            let train_paths = if train_paths.is_empty() {
                vec![dir.join("data_batch_1.bin")]
            } else {
                train_paths
            };
            let train = load_cifar10(&train_paths)?;
            let test = load_cifar10(&[dir.join("test_batch.bin")])?;
            Ok((train, test))
        }
    }
}

// -- encoding, sampling, batching --------------------------------------------

/// One-hot rows, one per label.
pub fn one_hot(labels: &[u8], num_classes: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[labels.len(), num_classes]);
    for (row, label) in labels.iter().enumerate() {
        let l = usize::from(*label);
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: num_classes,
            });
        }
        out.data_mut()[row * num_classes + l] = 1.0;
    }
    Ok(out)
}

/// Draws `n` items without replacement, stratified: `n / K` per class
/// (exactly equal counts; the remainder of `n` is dropped). Selection
/// within a class is a seeded shuffle of its file-order indices.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::InvalidArgument {
            op: "subsample",
            reason: format!("asked for {n} of {}", ds.len()),
        });
    }
    let per_class = n / ds.num_classes;
    if per_class == 0 {
        return Err(Error::InvalidArgument {
            op: "subsample",
            reason: format!("{n} samples cannot cover {} classes", ds.num_classes),
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, l) in ds.labels.iter().enumerate() {
        by_class[usize::from(*l)].push(i);
    }
    let mut rng = SplitMix64::derive(seed, "subsample");
    let mut picked = Vec::with_capacity(per_class * ds.num_classes);
    for (class, mut indices) in by_class.into_iter().enumerate() {
        if indices.len() < per_class {
            return Err(Error::InvalidArgument {
                op: "subsample",
                reason: format!(
                    "class {class} has {} samples, need {per_class}",
                    indices.len()
                ),
            });
        }
        rng.shuffle(&mut indices);
        picked.extend_from_slice(&indices[..per_class]);
    }
    Ok(ds.gather(&picked))
}

/// Index order for one epoch: a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mixed = seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15);
        SplitMix64::derive(mixed, "shuffle").shuffle(&mut order);
    }
    order
}

/// Mini-batches for one epoch: `ceil(N / batch)` batches, the last possibly
/// short, each materialized as `(images, labels)`.
pub fn batches<'d>(
    ds: &'d Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    shuffle: bool,
) -> impl Iterator<Item = (Tensor, Vec<u8>)> + 'd {
    assert!(batch_size > 0, "batch size must be positive");
    let order = epoch_order(ds.len(), seed, epoch, shuffle);
    (0..ds.len().div_ceil(batch_size)).map(move |b| {
        let lo = b * batch_size;
        let hi = (lo + batch_size).min(order.len());
        let batch = ds.gather(&order[lo..hi]);
        (batch.images, batch.labels)
    })
}

/// Procedurally generated stand-in corpora in the real file formats.
///
/// Each class gets a geometric signature (blob position and size for the
/// grayscale set; directional color gradients and checker period for the
/// RGB set) plus per-sample jitter and pixel noise, so a small network can
/// learn them quickly but not trivially. Classes cycle `0,1,...,9,0,...`,
/// keeping every prefix nearly balanced.
pub mod synthetic {
    use super::*;

    fn clamp_u8(v: f32) -> u8 {
        v.round().clamp(0.0, 255.0) as u8
    }

    /// Grayscale 28x28 class patterns, written as an IDX image/label pair.
    /// Returns the two paths.
    pub fn write_digits_idx(
        dir: &Path,
        prefix: &str,
        count: usize,
        seed: u64,
    ) -> Result<(PathBuf, PathBuf)> {
        let mut rng = SplitMix64::derive(seed, "synthetic-digits");
        let (rows, cols) = (28usize, 28usize);
        let mut images = vec![0u8; count * rows * cols];
        let mut labels = vec![0u8; count];
        for i in 0..count {
            let class = (i % 10) as u8;
            labels[i] = class;
            let angle = f32::from(class) * std::f32::consts::TAU / 10.0;
            let jx = rng.uniform(-2.0, 2.0);
            let jy = rng.uniform(-2.0, 2.0);
            let cx = 14.0 + 7.0 * angle.cos() + jx;
            let cy = 14.0 + 7.0 * angle.sin() + jy;
            let radius = 3.0 + f32::from(class % 5);
            let img = &mut images[i * rows * cols..(i + 1) * rows * cols];
            for y in 0..rows {
                for x in 0..cols {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    let base = if d2 <= radius * radius { 230.0 } else { 25.0 };
                    img[y * cols + x] = clamp_u8(base + rng.uniform(-20.0, 20.0));
                }
            }
        }
        std::fs::create_dir_all(dir)?;
        let images_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
        let labels_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
        write_idx_images(&images_path, &images, count, rows, cols)?;
        write_idx_labels(&labels_path, &labels)?;
        Ok((images_path, labels_path))
    }

    /// RGB 32x32 class textures, written as one CIFAR-10 binary batch file.
    pub fn write_textures_cifar(dir: &Path, file_name: &str, count: usize, seed: u64) -> Result<PathBuf> {
        let mut rng = SplitMix64::derive(seed, "synthetic-textures");
        let plane = 32 * 32;
        let mut pixels = vec![0u8; count * 3 * plane];
        let mut labels = vec![0u8; count];
        for i in 0..count {
            let class = (i % 10) as u8;
            labels[i] = class;
            let angle = f32::from(class) * std::f32::consts::TAU / 10.0;
            let (sx, sy) = (angle.cos(), angle.sin());
            let period = 2 + usize::from(class % 4);
            let img = &mut pixels[i * 3 * plane..(i + 1) * 3 * plane];
            for y in 0..32 {
                for x in 0..32 {
                    let p = y * 32 + x;
                    let r = 128.0 + 90.0 * sx * (x as f32 - 16.0) / 16.0;
                    let g = 128.0 + 90.0 * sy * (y as f32 - 16.0) / 16.0;
                    let checker = ((x / period + y / period) % 2) as f32;
                    let b = 60.0 + 140.0 * checker;
                    img[p] = clamp_u8(r + rng.uniform(-18.0, 18.0));
                    img[plane + p] = clamp_u8(g + rng.uniform(-18.0, 18.0));
                    img[2 * plane + p] = clamp_u8(b + rng.uniform(-18.0, 18.0));
                }
            }
        }
        std::fs::create_dir_all(dir)?;
        let path = dir.join(file_name);
        write_cifar_batch(&path, &labels, &pixels)?;
        Ok(path)
    }

    /// Writes a full synthetic data directory with the standard train/test
    /// file names for `kind`.
    pub fn write_dataset_dir(kind: DatasetKind, dir: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
        match kind {
            DatasetKind::Mnist => {
                write_digits_idx(dir, "train", train, seed)?;
                let (ip, lp) = write_digits_idx(dir, "t10k", test, seed.wrapping_add(1))?;
                let _ = (ip, lp);
            }
            DatasetKind::Cifar10 => {
                write_textures_cifar(dir, "data_batch_1.bin", train, seed)?;
                write_textures_cifar(dir, "test_batch.bin", test, seed.wrapping_add(1))?;
            }
        }
        Ok(())
    }
}
