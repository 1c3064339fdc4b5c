//! MNIST IDX files and deterministic mini-batching.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::tensor::FloatTensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    let mut reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(reader)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
    } else {
        reader.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    }
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends at byte {}", bytes.len()),
        })
}

/// Images scaled to `[0, 1]`, `count × 784` row-major.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)?;
    let cols = be_u32(bytes, 12, path)?;
    if rows as usize != SIDE || cols as usize != SIDE {
        return Err(Error::Dimensions {
            path: path.to_path_buf(),
            rows,
            cols,
        });
    }
    let body = &bytes[16..];
    let need = count * PIXELS;
    if body.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{count} images need {need} pixel bytes, found {}", body.len()),
        });
    }
    Ok(body[..need].iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{count} labels declared, found {}", body.len()),
        });
    }
    let labels = body[..count].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(Error::LabelRange {
            label: bad as usize,
            classes: CLASSES,
        });
    }
    Ok(labels)
}

pub fn load_idx_images(path: &Path) -> Result<Vec<f32>> {
    parse_idx_images(&read_all(path)?, path)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read_all(path)?, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * PIXELS {
            return Err(Error::CountMismatch {
                images: images.len() / PIXELS,
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::LabelRange {
                label: l as usize,
                classes: CLASSES,
            });
        }
        Ok(LabeledDataset { images, labels })
    }

    /// Load one split from `dir`, accepting plain or `.gz` IDX files.
    pub fn load_mnist(dir: &Path, split: Split) -> Result<Self> {
        let images = locate(dir, &format!("{}-images-idx3-ubyte", split.prefix()))?;
        let labels = locate(dir, &format!("{}-labels-idx1-ubyte", split.prefix()))?;
        LabeledDataset::new(load_idx_images(&images)?, load_idx_labels(&labels)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    /// First `n` samples (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            images: self.images[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// `N×1×28×28` batch and its labels for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> (FloatTensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let x = FloatTensor::from_vec(&[indices.len(), 1, SIDE, SIDE], data).expect("whole images");
        (x, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::io(
        plain,
        std::io::Error::new(std::io::ErrorKind::NotFound, "no plain or .gz IDX file"),
    ))
}

/// Shuffled index batches; the final partial batch is kept.
pub fn batches(len: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = stream(shuffle_seed, Domain::Shuffle, epoch, 0, 0);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
