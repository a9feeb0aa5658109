//! Image datasets, normalization and patch tokenization.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
/// Environment variable naming the directory with the binary batches.
pub const CIFAR_ENV: &str = "CO4_CIFAR10_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Cifar10Bin,
    SyntheticBlobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    pub train_limit: usize,
    pub val_limit: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Seed of the synthetic generator.
    pub data_seed: u64,
    /// Distance between synthetic class means, in noise standard deviations.
    pub separation: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DataSource::Cifar10Bin,
            root: None,
            train_limit: 5000,
            val_limit: 1000,
            patch_size: 4,
            image_size: 32,
            channels: 3,
            num_classes: 10,
            data_seed: 0,
            separation: 8.0,
        }
    }
}

impl DatasetSpec {
    /// Small two-class synthetic problem.
    pub fn blobs(classes: usize, train: usize, val: usize) -> Self {
        DatasetSpec {
            source: DataSource::SyntheticBlobs,
            train_limit: train,
            val_limit: val,
            patch_size: 4,
            image_size: 8,
            channels: 3,
            num_classes: classes,
            ..DatasetSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.train_limit == 0 || self.val_limit == 0 || self.num_classes < 2 || self.channels == 0 {
            return Err(Error::config("dataset sizes, classes and channels must be positive"));
        }
        if self.source == DataSource::Cifar10Bin && (self.image_size != 32 || self.channels != 3 || self.num_classes != 10) {
            return Err(Error::config("CIFAR-10 is 3x32x32 with 10 classes"));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Directory holding the CIFAR-10 batches: the configured root, else
    /// `$CO4_CIFAR10_DIR`, else `data/cifar-10-batches-bin`.
    pub fn cifar_root(&self) -> PathBuf {
        self.root
            .clone()
            .or_else(|| std::env::var_os(CIFAR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/cifar-10-batches-bin"))
    }
}

/// Normalized images `(n, C, H, W)` stored flat, with labels.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub size: usize,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let l = self.image_len();
        &self.images[i * l..(i + 1) * l]
    }
}

/// Train and validation splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: ImageSet,
    pub val: ImageSet,
    pub spec: DatasetSpec,
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    match spec.source {
        DataSource::Cifar10Bin => load_cifar10(spec),
        DataSource::SyntheticBlobs => Ok(synthetic_blobs(spec)),
    }
}

/// Raw CIFAR-10 records: `(label, 3072 channel-major pixel bytes)`.
pub fn read_cifar_records<R: Read>(mut r: R, limit: usize) -> Result<Vec<(u8, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    let mut buf = vec![0u8; CIFAR_RECORD];
    while out.len() < limit {
        let mut filled = 0;
        while filled < CIFAR_RECORD {
            let got = r.read(&mut buf[filled..])?;
            if got == 0 {
                break;
            }
            filled += got;
        }
        if filled == 0 {
            break;
        }
        if filled < CIFAR_RECORD {
            return Err(Error::format(offset, format!("short record: {filled} of {CIFAR_RECORD} bytes")));
        }
        if buf[0] > 9 {
            return Err(Error::format(offset, format!("label {} outside 0..=9", buf[0])));
        }
        out.push((buf[0], buf[1..].to_vec()));
        offset += CIFAR_RECORD as u64;
    }
    Ok(out)
}

/// Number of records in a CIFAR-10 binary file, checking the record size.
pub fn count_cifar_records(path: &Path) -> Result<usize> {
    let len = std::fs::metadata(path)?.len();
    if len % CIFAR_RECORD as u64 != 0 {
        let offset = len - len % CIFAR_RECORD as u64;
        return Err(Error::format(offset, format!("{} has a truncated trailing record", path.display())));
    }
    Ok((len / CIFAR_RECORD as u64) as usize)
}

/// Pixel byte to `[0, 1]`, then per-channel normalization.
pub fn normalize_pixel(byte: u8, channel: usize) -> f64 {
    (byte as f64 / 255.0 - CIFAR_MEAN[channel]) / CIFAR_STD[channel]
}

fn records_to_set(records: Vec<(u8, Vec<u8>)>) -> ImageSet {
    let mut images = Vec::with_capacity(records.len() * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(records.len());
    for (label, px) in records {
        labels.push(label as usize);
        images.extend(px.iter().enumerate().map(|(i, &b)| normalize_pixel(b, i / 1024)));
    }
    ImageSet {
        images,
        labels,
        channels: 3,
        size: 32,
    }
}

fn open_batch(root: &Path, name: &str) -> Result<BufReader<File>> {
    let path = root.join(name);
    if !path.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("CIFAR-10 batch {} not found; set {CIFAR_ENV} or the data root", path.display()),
        )));
    }
    count_cifar_records(&path)?;
    Ok(BufReader::new(File::open(&path)?))
}

pub fn load_cifar10(spec: &DatasetSpec) -> Result<Dataset> {
    let root = spec.cifar_root();
    let mut train = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        if train.len() >= spec.train_limit {
            break;
        }
        let want = spec.train_limit - train.len();
        train.extend(read_cifar_records(open_batch(&root, name)?, want)?);
    }
    let val = read_cifar_records(open_batch(&root, CIFAR_TEST_FILE)?, spec.val_limit)?;
    if train.len() < spec.train_limit || val.len() < spec.val_limit {
        return Err(Error::format(
            0,
            format!(
                "requested {}/{} records, found {}/{}",
                spec.train_limit,
                spec.val_limit,
                train.len(),
                val.len()
            ),
        ));
    }
    Ok(Dataset {
        train: records_to_set(train),
        val: records_to_set(val),
        spec: spec.clone(),
    })
}

/// Isotropic Gaussian classes in pixel space. Class means sit on random
/// unit directions scaled so neighbouring means are `separation` noise
/// standard deviations apart.
pub fn synthetic_blobs(spec: &DatasetSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.data_seed);
    let dim = spec.image_len();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm * spec.separation / std::f64::consts::SQRT_2).collect()
        })
        .collect();
    let mut make = |n: usize| {
        let mut images = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.num_classes;
            labels.push(c);
            images.extend(means[c].iter().map(|m| m + normal.sample(&mut rng)));
        }
        ImageSet {
            images,
            labels,
            channels: spec.channels,
            size: spec.image_size,
        }
    };
    let train = make(spec.train_limit);
    let val = make(spec.val_limit);
    Dataset {
        train,
        val,
        spec: spec.clone(),
    }
}

/// `(B, C, H, W)` to `(B, N, C*p*p)`, patches in row-major order, each
/// patch flattened channel-major.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("patchify needs (B, C, H, W), got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("{h}x{w} image not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for dy in 0..patch {
                        let row = ((bi * c + ci) * h + py * patch + dy) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, channels: usize, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    let s = tokens.shape();
    let (gh, gw) = (height / patch, width / patch);
    if s.len() != 3 || s[1] != gh * gw || s[2] != channels * patch * patch || !height.is_multiple_of(patch) || !width.is_multiple_of(patch)
    {
        return Err(Error::shape(format!(
            "tokens {s:?} do not tile a {channels}x{height}x{width} image with patch {patch}"
        )));
    }
    let b = s[0];
    let mut out = vec![0.0; b * channels * height * width];
    let mut it = tokens.data().iter();
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..channels {
                    for dy in 0..patch {
                        let row = ((bi * channels + ci) * height + py * patch + dy) * width + px * patch;
                        for dx in 0..patch {
                            out[row + dx] = *it.next().expect("length checked");
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, channels, height, width], out)
}

/// One mini-batch of tokens and labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: Tensor,
    pub labels: Vec<usize>,
}

/// Deterministic epoch order for a given seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)));
    order.shuffle(&mut rng);
    order
}

/// Gathers `idx` from `set` and tokenizes it.
pub fn make_batch(set: &ImageSet, idx: &[usize], patch: usize) -> Result<Batch> {
    let l = set.image_len();
    let mut data = Vec::with_capacity(idx.len() * l);
    for &i in idx {
        data.extend_from_slice(set.image(i));
    }
    let images = Tensor::new(vec![idx.len(), set.channels, set.size, set.size], data)?;
    Ok(Batch {
        tokens: patchify(&images, patch)?,
        labels: idx.iter().map(|&i| set.labels[i]).collect(),
    })
}

/// Batches of one epoch in order; the last partial batch is kept.
pub fn epoch_batches<'a>(set: &'a ImageSet, order: &[usize], batch: usize, patch: usize) -> impl Iterator<Item = Result<Batch>> + 'a {
    let order = order.to_vec();
    (0..order.len().div_ceil(batch)).map(move |bi| {
        let idx = &order[bi * batch..((bi + 1) * batch).min(order.len())];
        make_batch(set, idx, patch)
    })
}

/// Produces batches on a background thread through a bounded queue. Order
/// is identical to [`epoch_batches`].
pub fn prefetch_batches(
    set: ImageSet,
    order: Vec<usize>,
    batch: usize,
    patch: usize,
    depth: usize,
) -> std::sync::mpsc::Receiver<Result<Batch>> {
    let (tx, rx) = std::sync::mpsc::sync_channel(depth.max(1));
    std::thread::spawn(move || {
        for b in epoch_batches(&set, &order, batch, patch) {
            if tx.send(b).is_err() {
                break;
            }
        }
    });
    rx
}

/// FNV-1a over the bit patterns of a tensor, for comparing token streams.
pub fn digest(t: &Tensor, mut h: u64) -> u64 {
    for v in t.data() {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

pub const DIGEST_SEED: u64 = 0xcbf2_9ce4_8422_2325;
