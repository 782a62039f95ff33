//! Datasets: MNIST IDX files, CIFAR-10 binary batches and synthetic
//! Gaussian clusters, plus a small binary cache format.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CACHE_MAGIC: &[u8; 8] = b"QATDSET\0";
const CACHE_VERSION: u32 = 1;

/// Per-dimension noise of [`make_synthetic`].
pub const SYNTHETIC_NOISE: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("images {:?} with {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// First `n` samples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        let data = self.images.data()[..n * self.sample_len()].to_vec();
        Self {
            images: Tensor::new(shape, data).expect("prefix of a valid tensor"),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Gathers the given samples into a `[n, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.sample_shape();
        let images = Tensor::new([indices.len(), c, h, w], data).expect("batch shape");
        (images, labels)
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let [c, h, w] = self.sample_shape();
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (j, &v) in self.images.data().iter().enumerate() {
            let ch = (j / plane) % c;
            sum[ch] += f64::from(v);
            sq[ch] += f64::from(v) * f64::from(v);
        }
        let count = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        (mean.into_iter().map(|m| m as f32).collect(), std)
    }

    /// `x <- (x - mean[c]) / std[c]`.
    pub fn standardize(&mut self, mean: &[f32], std: &[f32]) -> Result<()> {
        let [c, h, w] = self.sample_shape();
        if mean.len() != c || std.len() != c {
            return Err(Error::shape(
                "standardize",
                format!("{} channels, {} means, {} stds", c, mean.len(), std.len()),
            ));
        }
        let plane = h * w;
        for (j, v) in self.images.data_mut().iter_mut().enumerate() {
            let ch = (j / plane) % c;
            *v = (*v - mean[ch]) / std[ch];
        }
        Ok(())
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + self.images.numel() * 4 + self.len() * 4);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.push(match self.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        buf.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for &d in self.images.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in self.images.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(path, &bytes);
        if r.take(8)? != CACHE_MAGIC {
            return Err(r.error(0, "not a dataset cache"));
        }
        let version = r.u32_le()?;
        if version != CACHE_VERSION {
            return Err(r.error(8, format!("unsupported cache version {version}")));
        }
        let split = match r.take(1)?[0] {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(r.error(12, format!("bad split tag {other}"))),
        };
        let num_classes = r.u32_le()? as usize;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u64_le()? as usize;
        }
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f32_le()).collect::<Result<Vec<_>>>()?;
        let labels = (0..shape[0])
            .map(|_| r.u32_le().map(|l| l as usize))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, "trailing bytes"));
        }
        Dataset::new(Tensor::new(shape, data)?, labels, num_classes, split)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn error(&self, offset: u64, reason: impl Into<String>) -> Error {
        Error::Format {
            path: PathBuf::from(self.path),
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_le(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads an IDX image/label file pair (MNIST layout).
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let mut r = Reader::new(images_path, &img_bytes);
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.error(0, format!("bad image magic {magic:#010x}")));
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(n * rows * cols)?;
    if r.pos != img_bytes.len() {
        return Err(r.error(r.pos as u64, "trailing bytes after pixel data"));
    }
    let data: Vec<f32> = pixels.iter().map(|&b| f32::from(b) / 255.0).collect();

    let lab_bytes = fs::read(labels_path)?;
    let mut r = Reader::new(labels_path, &lab_bytes);
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.error(0, format!("bad label magic {magic:#010x}")));
    }
    let nl = r.u32_be()? as usize;
    if nl != n {
        return Err(r.error(4, format!("{nl} labels for {n} images")));
    }
    let raw = r.take(n)?;
    if r.pos != lab_bytes.len() {
        return Err(r.error(r.pos as u64, "trailing bytes after labels"));
    }
    let labels: Vec<usize> = raw.iter().map(|&b| usize::from(b)).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(Tensor::new([n, 1, rows, cols], data)?, labels, num_classes, split)
}

/// Loads the standard MNIST file names from a directory.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let (img, lab) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    load_idx(&dir.join(img), &dir.join(lab), split)
}

/// Concatenates CIFAR-10 binary batch files.
pub fn load_cifar_bin(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::invalid("load_cifar_bin: no files given"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            let whole = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
            return Err(Error::Format {
                path: path.clone(),
                offset: whole,
                reason: format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
            });
        }
        for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(Error::Format {
                    path: path.clone(),
                    offset: (i * CIFAR_RECORD) as u64,
                    reason: format!("label {} out of range", rec[0]),
                });
            }
            labels.push(usize::from(rec[0]));
            data.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new([n, 3, 32, 32], data)?, labels, 10, split)
}

/// Standard CIFAR-10 batch file names inside `dir`.
pub fn cifar_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Gaussian clusters around `±1` sign-pattern means, mapped into `[0, 1]`.
///
/// Class means depend only on `seed`; the two splits draw noise from
/// separate streams. Samples are laid out as `[1, s, s]` when `dim` is a
/// perfect square and `[1, 1, dim]` otherwise.
pub fn make_synthetic(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    make_synthetic_with_noise(num_classes, n_per_class, dim, seed, split, SYNTHETIC_NOISE)
}

pub fn make_synthetic_with_noise(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    seed: u64,
    split: Split,
    noise: f64,
) -> Result<Dataset> {
    if num_classes < 2 || n_per_class == 0 || dim == 0 {
        return Err(Error::invalid(format!(
            "synthetic dataset needs >= 2 classes, samples and dims (got {num_classes}, {n_per_class}, {dim})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_hamming = (dim / 4).max(1);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut attempts = 0;
    while means.len() < num_classes {
        let m: Vec<f64> = (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let far = means
            .iter()
            .all(|o| o.iter().zip(&m).filter(|(a, b)| a != b).count() >= min_hamming);
        attempts += 1;
        if far || attempts > 10_000 {
            means.push(m);
        }
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let normal = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
    let n = num_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    // interleave classes so any prefix is balanced
    for _ in 0..n_per_class {
        for (c, mean) in means.iter().enumerate() {
            for &mu in mean {
                let v: f64 = mu + normal.sample(&mut noise_rng);
                data.push(((v + 2.0) / 4.0).clamp(0.0, 1.0) as f32);
            }
            labels.push(c);
        }
    }
    let side = (dim as f64).sqrt().round() as usize;
    let shape = if side * side == dim {
        [n, 1, side, side]
    } else {
        [n, 1, 1, dim]
    };
    Dataset::new(Tensor::new(shape, data)?, labels, num_classes, split)
}

/// Random shuffle of `0..n`.
pub fn epoch_order<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Random crop with zero padding `pad` and horizontal flip, in place on a
/// `[N, C, H, W]` batch.
pub fn augment_crop_flip<R: Rng>(batch: &mut Tensor<f32>, pad: usize, rng: &mut R) {
    let s = batch.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = pad as i64;
    let mut tmp = vec![0.0f32; c * h * w];
    for i in 0..n {
        let dy = rng.random_range(-pad..=pad) as isize;
        let dx = rng.random_range(-pad..=pad) as isize;
        let flip = rng.random::<bool>();
        let img = &mut batch.data_mut()[i * c * h * w..(i + 1) * c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { w - 1 - x } else { x };
                    let sx = sx0 as isize + dx;
                    tmp[(ch * h + y) * w + x] = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        img[(ch * h + sy as usize) * w + sx as usize]
                    };
                }
            }
        }
        img.copy_from_slice(&tmp);
    }
}
