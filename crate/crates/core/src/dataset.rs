//! On-disk dataset formats (CIFAR-10 binary, IDX) and deterministic batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::tensor::Tensor;

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_CLASSES: u8 = 10;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Cifar10Binary,
    Idx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Where a dataset lives and how to normalize it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub format: DatasetFormat,
    pub root: PathBuf,
    pub split: Split,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Images held as raw bytes, `[N, C, S, S]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<usize>,
    channels: usize,
    side: usize,
}

impl Dataset {
    pub fn from_bytes(pixels: Vec<u8>, labels: Vec<usize>, channels: usize, side: usize) -> Result<Self> {
        if pixels.len() != labels.len() * channels * side * side {
            return Err(Error::Dimension(format!(
                "{} pixel bytes for {} images of {channels}x{side}x{side}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            pixels,
            labels,
            channels,
            side,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// First `n` records.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.channels * self.side * self.side;
        Dataset {
            pixels: self.pixels[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            channels: self.channels,
            side: self.side,
        }
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let per = self.channels * self.side * self.side;
        Dataset {
            pixels: indices.iter().flat_map(|&i| &self.pixels[i * per..(i + 1) * per]).copied().collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            channels: self.channels,
            side: self.side,
        }
    }

    /// Gathers `indices` into a batch with pixels scaled to `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let per = self.channels * self.side * self.side;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&b| b as f64 / 255.0));
        }
        let shape = [indices.len(), self.channels, self.side, self.side];
        ImageBatch {
            pixels: Tensor::new(&shape, data).expect("extent computed above"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Sample order for one epoch; shuffled when `rng` is given.
    pub fn epoch_order<R: Rng + ?Sized>(&self, rng: Option<&mut R>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order
    }

    /// Splits an epoch order into batch index lists.
    pub fn batches(order: &[usize], batch_size: usize, drop_last: bool) -> Vec<Vec<usize>> {
        let batch_size = batch_size.max(1);
        order
            .chunks(batch_size)
            .filter(|c| !drop_last || c.len() == batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Writes the records as CIFAR-10 binary files of at most 10000 records.
    pub fn write_cifar10(&self, dir: &Path, split: Split) -> Result<Vec<PathBuf>> {
        if self.channels != 3 || self.side != CIFAR_SIDE {
            return Err(Error::Argument("CIFAR-10 records are 3x32x32".into()));
        }
        if self.labels.iter().any(|&l| l >= CIFAR_CLASSES as usize) {
            return Err(Error::Argument("CIFAR-10 labels must be below 10".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let per = 3 * CIFAR_SIDE * CIFAR_SIDE;
        let mut paths = Vec::new();
        let names = cifar_file_names(split);
        for (chunk, name) in (0..self.len()).collect::<Vec<_>>().chunks(10_000).zip(names) {
            let mut bytes = Vec::with_capacity(chunk.len() * CIFAR_RECORD);
            for &i in chunk {
                bytes.push(self.labels[i] as u8);
                bytes.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
            }
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

fn cifar_file_names(split: Split) -> Vec<&'static str> {
    match split {
        Split::Train => vec![
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        Split::Val => vec!["test_batch.bin"],
    }
}

/// Loads every record of `source`.
pub fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source.format {
        DatasetFormat::Cifar10Binary => load_cifar10(&source.root, source.split),
        DatasetFormat::Idx => load_idx(&source.root, source.split),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Loads the files of one split that exist under `root`. Training files
/// beyond the first are optional, so partial copies still load.
pub fn load_cifar10(root: &Path, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut found = 0;
    for name in cifar_file_names(split) {
        let path = root.join(name);
        if !path.exists() {
            continue;
        }
        found += 1;
        let bytes = read(&path)?;
        parse_cifar10_file(&path, &bytes, &mut pixels, &mut labels)?;
    }
    if found == 0 {
        return Err(Error::io(
            root.join(cifar_file_names(split)[0]),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no CIFAR-10 batch files"),
        ));
    }
    Dataset::from_bytes(pixels, labels, 3, CIFAR_SIDE)
}

fn parse_cifar10_file(path: &Path, bytes: &[u8], pixels: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(format_err(
            path,
            whole,
            format!(
                "trailing {} bytes do not form a {CIFAR_RECORD}-byte record",
                bytes.len() - whole
            ),
        ));
    }
    if let Some(rec) = bytes.chunks(CIFAR_RECORD).position(|r| r[0] >= CIFAR_CLASSES) {
        return Err(format_err(
            path,
            rec * CIFAR_RECORD,
            format!("label byte {} is not a CIFAR-10 class", bytes[rec * CIFAR_RECORD]),
        ));
    }
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

fn idx_file_names(split: Split) -> (&'static str, &'static str) {
    match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Val => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
}

/// Parses an IDX header, returning the dimensions and payload offset.
fn idx_header(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, usize)> {
    let be = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| format_err(path, bytes.len(), "header truncated"))
    };
    let found = be(0)?;
    if found != magic {
        return Err(format_err(path, 0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank).map(|i| be(4 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let offset = 4 + 4 * rank;
    let want = offset + dims.iter().product::<usize>();
    if bytes.len() != want {
        return Err(format_err(
            path,
            bytes.len().min(want),
            format!("declared dimensions {dims:?} need {want} bytes, file has {}", bytes.len()),
        ));
    }
    Ok((dims, offset))
}

pub fn load_idx(root: &Path, split: Split) -> Result<Dataset> {
    let (img_name, lbl_name) = idx_file_names(split);
    let img_path = root.join(img_name);
    let lbl_path = root.join(lbl_name);
    let img = read(&img_path)?;
    let lbl = read(&lbl_path)?;
    let (idims, ioff) = idx_header(&img_path, &img, IDX_IMAGES_MAGIC)?;
    let (ldims, loff) = idx_header(&lbl_path, &lbl, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(format_err(
            &lbl_path,
            4,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    if idims[1] != idims[2] {
        return Err(format_err(&img_path, 8, "images must be square"));
    }
    let labels = lbl[loff..].iter().map(|&b| b as usize).collect();
    Dataset::from_bytes(img[ioff..].to_vec(), labels, 1, idims[1])
}

/// Writes `dataset` (single channel) as an IDX image/label file pair.
pub fn write_idx(dataset: &Dataset, root: &Path, split: Split) -> Result<()> {
    if dataset.channels != 1 {
        return Err(Error::Argument("IDX images are single channel".into()));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let (img_name, lbl_name) = idx_file_names(split);
    let n = dataset.len() as u32;
    let s = dataset.side as u32;
    let mut img = Vec::new();
    for v in [IDX_IMAGES_MAGIC, n, s, s] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(&dataset.pixels);
    let mut lbl = Vec::new();
    for v in [IDX_LABELS_MAGIC, n] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend(dataset.labels.iter().map(|&l| l as u8));
    let (ip, lp) = (root.join(img_name), root.join(lbl_name));
    fs::write(&ip, img).map_err(|e| Error::io(&ip, e))?;
    fs::write(&lp, lbl).map_err(|e| Error::io(&lp, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cifar(n: usize) -> Dataset {
        let per = 3 * 32 * 32;
        let pixels = (0..n * per).map(|i| (i % 251) as u8).collect();
        Dataset::from_bytes(pixels, (0..n).map(|i| i % 10).collect(), 3, 32).unwrap()
    }

    #[test]
    fn cifar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_cifar(7);
        ds.write_cifar10(dir.path(), Split::Val).unwrap();
        let back = load_cifar10(dir.path(), Split::Val).unwrap();
        assert_eq!(back, ds);
        let b = back.batch(&[0, 3]);
        assert_eq!(b.pixels.shape(), &[2, 3, 32, 32]);
        assert_eq!(b.labels, vec![0, 3]);
        assert!(b.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn truncated_cifar_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let paths = tiny_cifar(3).write_cifar10(dir.path(), Split::Val).unwrap();
        let bytes = fs::read(&paths[0]).unwrap();
        fs::write(&paths[0], &bytes[..bytes.len() - 1]).unwrap();
        match load_cifar10(dir.path(), Split::Val) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * CIFAR_RECORD as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_label_byte_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let paths = tiny_cifar(2).write_cifar10(dir.path(), Split::Val).unwrap();
        let mut bytes = fs::read(&paths[0]).unwrap();
        bytes[CIFAR_RECORD] = 42;
        fs::write(&paths[0], bytes).unwrap();
        assert!(matches!(
            load_cifar10(dir.path(), Split::Val),
            Err(Error::Format { offset, .. }) if offset == CIFAR_RECORD as u64
        ));
    }

    #[test]
    fn idx_round_trip_and_magic_check() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::from_bytes((0..5 * 28 * 28).map(|i| i as u8).collect(), vec![1, 2, 3, 4, 5], 1, 28).unwrap();
        write_idx(&ds, dir.path(), Split::Train).unwrap();
        assert_eq!(load_idx(dir.path(), Split::Train).unwrap(), ds);

        let p = dir.path().join("train-images-idx3-ubyte");
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] = 0x01;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_idx(dir.path(), Split::Train), Err(Error::Format { offset: 0, .. })));
        bytes[3] = 0x03;
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_idx(dir.path(), Split::Train), Err(Error::Format { .. })));
    }

    #[test]
    fn shuffled_order_is_seed_deterministic() {
        let ds = tiny_cifar(20);
        let a = ds.epoch_order(Some(&mut ChaCha8Rng::seed_from_u64(3)));
        let b = ds.epoch_order(Some(&mut ChaCha8Rng::seed_from_u64(3)));
        assert_eq!(a, b);
        assert_ne!(a, (0..20).collect::<Vec<_>>());
        let batches = Dataset::batches(&a, 8, true);
        assert_eq!(batches.len(), 2);
        assert_eq!(Dataset::batches(&a, 8, false).len(), 3);
    }
}
