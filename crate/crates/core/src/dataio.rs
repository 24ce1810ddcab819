//! Dataset loaders (MNIST IDX, CIFAR-10 binary batches), augmentation and a
//! synthetic classification task.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_TRAIN_COUNT: usize = 60_000;
pub const MNIST_TEST_COUNT: usize = 10_000;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.247, 0.243, 0.261];
pub const CIFAR_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`, expected train or test"))),
        }
    }
}

/// Labelled images, `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(
                "dataset",
                format!("images must be [N, C, H, W], got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at the given indices, in order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let x = self.images.gather_outer(indices)?;
        let y = indices.iter().map(|&i| self.labels[i] as usize).collect();
        Ok((x, y))
    }

    /// The first `n` examples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Dataset::new(self.images.slice_outer(0, n)?, self.labels[..n].to_vec(), self.split)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, _) = self.batch(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(x, labels, self.split)
    }
}

fn dataset_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn read_u32_be(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| dataset_err(path, format!("truncated header at byte {at}")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != expected {
        return Err(dataset_err(
            path,
            format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        ));
    }
    Ok(())
}

/// Parses an IDX image file into `[N, 1, rows, cols]` with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let n = read_u32_be(bytes, 4, path)? as usize;
    let rows = read_u32_be(bytes, 8, path)? as usize;
    let cols = read_u32_be(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() != need {
        return Err(dataset_err(
            path,
            format!("expected {need} pixel bytes for {n}x{rows}x{cols}, found {}", body.len()),
        ));
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let n = read_u32_be(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(dataset_err(
            path,
            format!("expected {n} label bytes, found {}", body.len()),
        ));
    }
    if let Some(pos) = body.iter().position(|&l| l > 9) {
        return Err(dataset_err(path, format!("label {} at index {pos} outside 0..=9", body[pos])));
    }
    Ok(body.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| dataset_err(path, e.to_string()))
}

/// Finds the first existing candidate among the usual file name spellings.
fn locate(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| dataset_err(dir, format!("none of {names:?} found")))
}

fn load_mnist_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let img_path = locate(
        dir,
        &[&format!("{prefix}-images-idx3-ubyte"), &format!("{prefix}-images.idx3-ubyte")],
    )?;
    let lbl_path = locate(
        dir,
        &[&format!("{prefix}-labels-idx1-ubyte"), &format!("{prefix}-labels.idx1-ubyte")],
    )?;
    let images = parse_idx_images(&read(&img_path)?, &img_path)?;
    let labels = parse_idx_labels(&read(&lbl_path)?, &lbl_path)?;
    if images.shape()[0] != labels.len() {
        return Err(dataset_err(
            &lbl_path,
            format!("{} labels for {} images", labels.len(), images.shape()[0]),
        ));
    }
    if images.shape()[2..] != [28, 28] {
        return Err(dataset_err(&img_path, format!("expected 28x28 images, got {:?}", &images.shape()[2..])));
    }
    Dataset::new(images, labels, split)
}

/// Loads the MNIST train and test splits (60k and 10k images in the standard
/// distribution) from a directory of uncompressed IDX files.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    Ok((
        load_mnist_split(dir, "train", Split::Train)?,
        load_mnist_split(dir, "t10k", Split::Test)?,
    ))
}

/// Parses CIFAR-10 binary records into normalized `[N, 3, 32, 32]` images.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(dataset_err(
            path,
            format!("size {} is not a positive multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let plane = 32 * 32;
    let mut pixels = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(dataset_err(path, format!("label {} in record {i} outside 0..=9", rec[0])));
        }
        labels.push(rec[0]);
        for (c, chan) in rec[1..].chunks_exact(plane).enumerate() {
            pixels.extend(chan.iter().map(|&b| (b as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]));
        }
    }
    Ok((pixels, labels))
}

fn load_cifar_files(dir: &Path, names: &[String], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let path = locate(dir, &[name])?;
        let (p, l) = parse_cifar_records(&read(&path)?, &path)?;
        if l.len() != CIFAR_BATCH_RECORDS {
            return Err(dataset_err(
                &path,
                format!("expected {CIFAR_BATCH_RECORDS} records, found {}", l.len()),
            ));
        }
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, split)
}

/// Loads CIFAR-10 binary batches (`data_batch_1.bin`..`data_batch_5.bin`,
/// `test_batch.bin`), looking in `dir` and in `dir/cifar-10-batches-bin`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let mut dir = dir.as_ref().to_path_buf();
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join("test_batch.bin").is_file() && nested.is_dir() {
        dir = nested;
    }
    let train_names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    Ok((
        load_cifar_files(&dir, &train_names, Split::Train)?,
        load_cifar_files(&dir, &["test_batch.bin".to_string()], Split::Test)?,
    ))
}

/// One augmentation draw: crop offset into the padded image and flip flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentChoice {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentChoice {
    pub const IDENTITY: AugmentChoice = AugmentChoice {
        dy: CIFAR_PAD,
        dx: CIFAR_PAD,
        flip: false,
    };

    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        AugmentChoice {
            dy: rng.gen_range(0..=2 * CIFAR_PAD),
            dx: rng.gen_range(0..=2 * CIFAR_PAD),
            flip: rng.gen_bool(0.5),
        }
    }
}

/// Applies explicit crop/flip choices, one per image, to a `[N, C, H, W]` batch
/// zero-padded by [`CIFAR_PAD`] on every side.
pub fn augment_with(batch: &Tensor<f32>, choices: &[AugmentChoice]) -> Result<Tensor<f32>> {
    let &[n, c, h, w] = batch.shape() else {
        return Err(Error::shape("augment", format!("expected [N, C, H, W], got {:?}", batch.shape())));
    };
    if choices.len() != n {
        return Err(Error::shape("augment", format!("{} choices for {n} images", choices.len())));
    }
    if let Some(bad) = choices.iter().find(|a| a.dy > 2 * CIFAR_PAD || a.dx > 2 * CIFAR_PAD) {
        return Err(Error::invalid(format!("crop offset {bad:?} outside the padded image")));
    }
    let src = batch.data();
    let mut out = vec![0.0f32; src.len()];
    for (i, a) in choices.iter().enumerate() {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                let sy = (y + a.dy) as isize - CIFAR_PAD as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let ox = if a.flip { w - 1 - x } else { x };
                    let sx = (ox + a.dx) as isize - CIFAR_PAD as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(batch.shape().to_vec(), out)
}

/// Random pad-crop-flip augmentation.
pub fn augment_cifar<R: Rng>(batch: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
    let n = batch.shape().first().copied().unwrap_or(0);
    let choices: Vec<AugmentChoice> = (0..n).map(|_| AugmentChoice::draw(rng)).collect();
    augment_with(batch, &choices)
}

/// Gaussian-blob classification task with inputs shaped `[1, 1, dim]`.
/// Class centres are drawn from the seed; examples add unit noise scaled by
/// `noise`.
pub fn synthetic_clusters(
    n: usize,
    dim: usize,
    classes: usize,
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if n == 0 || dim == 0 || !(2..=256).contains(&classes) {
        return Err(Error::invalid("synthetic task needs n, dim > 0 and 2..=256 classes"));
    }
    let mut centre_rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let centres: Vec<f64> = (0..classes * dim).map(|_| std.sample(&mut centre_rng)).collect();
    let stream = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stream << 32));
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(0..classes);
        labels.push(k as u8);
        for d in 0..dim {
            data.push((centres[k * dim + d] + noise * std.sample(&mut rng)) as f32);
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 1, dim], data)?, labels, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(magic: u32, n: u32, rows: u32, cols: u32, px: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [magic, n, rows, cols] {
            v.extend(x.to_be_bytes());
        }
        v.extend(px);
        v
    }

    #[test]
    fn idx_fixture_round_trips() {
        let px: Vec<u8> = (0..8).map(|i| i * 30).collect();
        let bytes = idx_images(IDX_IMAGES_MAGIC, 2, 2, 2, &px);
        let t = parse_idx_images(&bytes, Path::new("fixture")).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        for (v, p) in t.data().iter().zip(&px) {
            assert_eq!(*v, *p as f32 / 255.0);
        }
    }

    #[test]
    fn idx_wrong_magic_names_expected() {
        let bytes = idx_images(0x802, 1, 1, 1, &[0]);
        let err = parse_idx_images(&bytes, Path::new("f")).unwrap_err().to_string();
        assert!(err.contains("0x00000803"), "{err}");
        assert!(err.contains("0x00000802"), "{err}");
    }

    #[test]
    fn idx_truncated() {
        let bytes = idx_images(IDX_IMAGES_MAGIC, 2, 2, 2, &[0; 7]);
        assert!(parse_idx_images(&bytes, Path::new("f")).is_err());
        assert!(parse_idx_images(&bytes[..10], Path::new("f")).is_err());
    }

    #[test]
    fn cifar_normalization_centres_mean_pixel() {
        let mut rec = vec![3u8];
        let r = (0.4914f32 * 255.0).round() as u8;
        rec.extend(std::iter::repeat_n(r, 1024));
        rec.extend(std::iter::repeat_n(0, 2048));
        let (px, labels) = parse_cifar_records(&rec, Path::new("f")).unwrap();
        assert_eq!(labels, vec![3]);
        assert!(px[..1024].iter().all(|v| v.abs() < 0.01));
        assert!(parse_cifar_records(&rec[..3000], Path::new("f")).is_err());
    }

    #[test]
    fn cifar_records_are_channel_planes() {
        let mut bytes = Vec::new();
        for (label, fill) in [(7u8, [255u8, 0, 0]), (1, [0, 0, 255])] {
            bytes.push(label);
            for v in fill {
                bytes.extend(std::iter::repeat_n(v, 1024));
            }
        }
        let (px, labels) = parse_cifar_records(&bytes, Path::new("f")).unwrap();
        assert_eq!(labels, vec![7, 1]);
        assert_eq!(px.len(), 2 * 3072);
        let hi = |c: usize| (1.0 - CIFAR_MEAN[c]) / CIFAR_STD[c];
        let lo = |c: usize| -CIFAR_MEAN[c] / CIFAR_STD[c];
        assert_eq!((px[0], px[1024], px[2047], px[2048]), (hi(0), lo(1), lo(1), lo(2)));
        assert_eq!((px[3072], px[3072 + 2048]), (lo(0), hi(2)));
        bytes[3073] = 10;
        assert!(parse_cifar_records(&bytes, Path::new("f")).unwrap_err().to_string().contains("record 1"));
    }

    #[test]
    fn cifar_batch_with_wrong_record_count() {
        let tmp = tempfile::tempdir().unwrap();
        let nested = tmp.path().join("cifar-10-batches-bin");
        std::fs::create_dir(&nested).unwrap();
        std::fs::write(nested.join("test_batch.bin"), vec![0u8; 2 * CIFAR_RECORD_BYTES]).unwrap();
        for i in 1..=5 {
            std::fs::write(nested.join(format!("data_batch_{i}.bin")), vec![0u8; CIFAR_RECORD_BYTES]).unwrap();
        }
        let err = load_cifar10(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("data_batch_1.bin"), "{err}");
        assert!(err.contains("found 1"), "{err}");
        assert!(load_cifar10(tmp.path().join("missing")).is_err());
    }

    #[test]
    fn identity_and_double_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[2, 3, 32, 32], |_| rng.gen::<f32>());
        let id = augment_with(&x, &[AugmentChoice::IDENTITY; 2]).unwrap();
        assert_eq!(id, x);
        let flip = AugmentChoice { flip: true, ..AugmentChoice::IDENTITY };
        let twice = augment_with(&augment_with(&x, &[flip; 2]).unwrap(), &[flip; 2]).unwrap();
        assert_eq!(twice, x);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic_clusters(50, 8, 4, 0.5, 3, Split::Train).unwrap();
        let b = synthetic_clusters(50, 8, 4, 0.5, 3, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image_shape(), &[1, 1, 8]);
        let t = synthetic_clusters(50, 8, 4, 0.5, 3, Split::Test).unwrap();
        assert_ne!(a.images, t.images);
    }
}
