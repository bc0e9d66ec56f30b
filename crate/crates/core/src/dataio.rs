//! MNIST IDX and CIFAR binary loaders, ZCA whitening, augmentation and
//! deterministic batching.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::network::DatasetKind;
use crate::scalar::Scalar;
use crate::seeds;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR10_RECORD: usize = 1 + 3072;
pub const CIFAR100_RECORD: usize = 2 + 3072;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Images scaled to `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    /// `[M, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(name: &str, split: Split, images: Tensor<f32>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let [m, ..] = images.dims4()?;
        if m != labels.len() {
            return Err(Error::Format(format!("{} images but {} labels", m, labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Format(format!("label {} out of range for {} classes", l, n_classes)));
        }
        Ok(Dataset { name: name.into(), split, images, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.image_len();
        &self.images.data()[i * d..(i + 1) * d]
    }

    /// Copies the listed items into a new batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let d = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape();
        let t = Tensor::from_vec(&[indices.len(), c, h, w], data).expect("gathered length");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset { name: self.name.clone(), split: self.split, images, labels, n_classes: self.n_classes }
    }

    /// The first `n` items (all when `n ≥ len`).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = fs::read(path)?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {}", path.display(), e)))?;
        bytes = out;
    }
    Ok(bytes)
}

/// `stem` or `stem.gz` inside `dir`.
fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} not found in {}", stem, dir.display()),
    )))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX image file into `[M, 1, rows, cols]` scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("IDX image magic {:#010x}, expected {:#010x}", magic, IDX_IMAGES_MAGIC)));
    }
    let (m, rows, cols) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let need = 16 + m * rows * cols;
    if bytes.len() != need {
        return Err(Error::Format(format!("IDX image file has {} bytes, header implies {}", bytes.len(), need)));
    }
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(&[m, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("IDX label magic {:#010x}, expected {:#010x}", magic, IDX_LABELS_MAGIC)));
    }
    let m = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + m {
        return Err(Error::Format(format!("IDX label file has {} bytes, header implies {}", bytes.len(), 8 + m)));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads `train-*` and `t10k-*` IDX files (optionally gzipped) from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let load = |img: &str, lab: &str, split| -> Result<Dataset> {
        let images = parse_idx_images(&read_maybe_gz(&find_file(dir, img)?)?)?;
        let labels = parse_idx_labels(&read_maybe_gz(&find_file(dir, lab)?)?)?;
        let [_, _, h, w] = images.dims4()?;
        if (h, w) != (28, 28) {
            return Err(Error::Format(format!("MNIST images must be 28×28, got {}×{}", h, w)));
        }
        Dataset::new("mnist", split, images, labels, 10)
    };
    Ok((
        load("train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train)?,
        load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Val)?,
    ))
}

/// Parses concatenated CIFAR records (R, G, B planes of 32×32 after the label bytes).
pub fn parse_cifar(bytes: &[u8], kind: DatasetKind) -> Result<(Tensor<f32>, Vec<usize>)> {
    let (record, label_at) = match kind {
        DatasetKind::Cifar10 => (CIFAR10_RECORD, 0),
        DatasetKind::Cifar100 => (CIFAR100_RECORD, 1),
        DatasetKind::Mnist => return Err(invalid!("MNIST is not stored in CIFAR records")),
    };
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Format(format!("CIFAR file of {} bytes is not a multiple of {}", bytes.len(), record)));
    }
    let m = bytes.len() / record;
    let mut data = Vec::with_capacity(m * 3072);
    let mut labels = Vec::with_capacity(m);
    for r in bytes.chunks_exact(record) {
        labels.push(r[label_at] as usize);
        data.extend(r[record - 3072..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor::from_vec(&[m, 3, 32, 32], data)?, labels))
}

/// Loads the binary CIFAR-10 (`data_batch_{1..5}.bin`, `test_batch.bin`) or
/// CIFAR-100 (`train.bin`, `test.bin`) distribution from `dir`.
pub fn load_cifar(dir: &Path, kind: DatasetKind) -> Result<(Dataset, Dataset)> {
    let (train_files, test_file): (Vec<String>, &str) = match kind {
        DatasetKind::Cifar10 => ((1..=5).map(|i| format!("data_batch_{i}.bin")).collect(), "test_batch.bin"),
        DatasetKind::Cifar100 => (vec!["train.bin".into()], "test.bin"),
        DatasetKind::Mnist => return Err(invalid!("use load_mnist for MNIST")),
    };
    let read = |names: &[String]| -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut bytes = Vec::new();
        for n in names {
            let part = read_maybe_gz(&find_file(dir, n)?)?;
            // validate each file separately so a short file is reported by name
            parse_cifar(&part, kind).map_err(|e| Error::Format(format!("{}: {}", n, e)))?;
            bytes.extend(part);
        }
        parse_cifar(&bytes, kind)
    };
    let (ti, tl) = read(&train_files)?;
    let (vi, vl) = read(&[test_file.to_string()])?;
    let k = kind.n_classes();
    Ok((Dataset::new(kind.name(), Split::Train, ti, tl, k)?, Dataset::new(kind.name(), Split::Val, vi, vl, k)?))
}

/// Loads the train and validation splits of `kind` from `dir`.
pub fn load_dataset(dir: &Path, kind: DatasetKind) -> Result<(Dataset, Dataset)> {
    match kind {
        DatasetKind::Mnist => load_mnist(dir),
        _ => load_cifar(dir, kind),
    }
}

/// Pixel-space whitening `x ↦ W (x − μ)` with `W = U (Λ + εI)^{-1/2} Uᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZcaTransform {
    pub mean: Vec<f64>,
    /// Symmetric `d × d`, row-major.
    pub matrix: Vec<f64>,
    pub epsilon: f64,
}

pub const DEFAULT_ZCA_EPS: f64 = 1e-2;

/// Fits ZCA on the training split.
pub fn zca_fit(train: &Dataset, epsilon: f64) -> Result<ZcaTransform> {
    if train.split != Split::Train {
        return Err(invalid!("whitening statistics must come from the training split"));
    }
    zca_fit_images(&train.images, epsilon)
}

/// Fits ZCA on `[M, C, H, W]` images.
pub fn zca_fit_images(images: &Tensor<f32>, epsilon: f64) -> Result<ZcaTransform> {
    let m = images.shape()[0];
    if m < 2 {
        return Err(invalid!("whitening needs at least two images"));
    }
    let d = images.len() / m;
    let x = DMatrix::from_row_iterator(m, d, images.data().iter().map(|&v| v as f64));
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / m as f64).collect();
    let mut centered = x;
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let mut cov = centered.transpose() * &centered / m as f64;
    let sym = (&cov + cov.transpose()) * 0.5;
    cov = sym;
    let eig = SymmetricEigen::new(cov);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
    if let Some(&neg) = eig.eigenvalues.iter().find(|&&v| v < -1e-9 * scale) {
        return Err(Error::NonFinite(format!("pixel covariance is not PSD (eigenvalue {neg})")));
    }
    let inv_sqrt: Vec<f64> = eig.eigenvalues.iter().map(|&v| 1.0 / (v.max(0.0) + epsilon).sqrt()).collect();
    let u = &eig.eigenvectors;
    let mut scaled = u.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= inv_sqrt[j];
    }
    let w = scaled * u.transpose();
    let w = (&w + w.transpose()) * 0.5;
    let matrix = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| w[(i, j)]).collect();
    Ok(ZcaTransform { mean, matrix, epsilon })
}

impl ZcaTransform {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Whitens a `[B, C, H, W]` batch.
    pub fn apply<T: Scalar>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let b = images.shape()[0];
        let d = self.dim();
        if images.len() != b * d {
            return Err(invalid!("whitening expects {} values per image", d));
        }
        let x = DMatrix::from_row_iterator(b, d, images.data().iter().map(|v| v.to_f64_lossy()));
        let mut c = x;
        for (j, mut col) in c.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.mean[j]);
        }
        let w = DMatrix::from_row_slice(d, d, &self.matrix);
        let y = c * w;
        let data = (0..b).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| T::from_f64_lossy(y[(i, j)])).collect();
        Tensor::from_vec(images.shape(), data)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub crop_padding: usize,
    pub hflip: bool,
}

impl AugmentSpec {
    /// Padding 2 and crop only for MNIST; padding 4 with flips for CIFAR.
    pub fn for_dataset(kind: DatasetKind) -> Self {
        match kind {
            DatasetKind::Mnist => AugmentSpec { crop_padding: 2, hflip: false },
            _ => AugmentSpec { crop_padding: 4, hflip: true },
        }
    }

    pub fn is_identity(&self) -> bool {
        self.crop_padding == 0 && !self.hflip
    }
}

/// Crops `[C, H, W]` from the zero-padded image at offset `(dy, dx)` in
/// `0..=2·pad`, then mirrors columns when `flip`.
pub fn crop_flip<T: Scalar>(img: &[T], shape: [usize; 3], pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<T> {
    let [c, h, w] = shape;
    let mut out = vec![T::zero(); img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y + dy;
            if sy < pad || sy >= h + pad {
                continue;
            }
            for x in 0..w {
                let sx = x + dx;
                if sx < pad || sx >= w + pad {
                    continue;
                }
                let ox = if flip { w - 1 - x } else { x };
                out[ch * h * w + y * w + ox] = img[ch * h * w + (sy - pad) * w + (sx - pad)];
            }
        }
    }
    out
}

/// Random crop (and flip) of every image in a `[B, C, H, W]` batch. Draws
/// `dy`, `dx` and, when enabled, the flip coin per image in that order.
pub fn augment<T: Scalar, R: Rng + ?Sized>(batch: &Tensor<T>, spec: AugmentSpec, rng: &mut R) -> Result<Tensor<T>> {
    let [b, c, h, w] = batch.dims4()?;
    if spec.is_identity() {
        return Ok(batch.clone());
    }
    let d = c * h * w;
    let p = spec.crop_padding;
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..b {
        let dy = rng.random_range(0..=2 * p);
        let dx = rng.random_range(0..=2 * p);
        let flip = spec.hflip && rng.random_bool(0.5);
        out.extend(crop_flip(&batch.data()[i * d..(i + 1) * d], [c, h, w], p, dy, dx, flip));
    }
    Tensor::from_vec(batch.shape(), out)
}

/// Item indices of every batch of one epoch; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(invalid!("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut seeds::stream(seed, &[epoch]));
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Turns raw images into network input: optional augmentation, then whitening.
#[derive(Clone, Debug, Default)]
pub struct Preprocess {
    pub augment: Option<AugmentSpec>,
    pub zca: Option<ZcaTransform>,
}

impl Preprocess {
    pub fn batch<T: Scalar, R: Rng + ?Sized>(&self, raw: &Tensor<f32>, train: bool, rng: &mut R) -> Result<Tensor<T>> {
        let mut x: Tensor<T> = raw.cast();
        if train {
            if let Some(spec) = self.augment {
                x = augment(&x, spec, rng)?;
            }
        }
        if let Some(z) = &self.zca {
            x = z.apply(&x)?;
        }
        Ok(x)
    }
}
