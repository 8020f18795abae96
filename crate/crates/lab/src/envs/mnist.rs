//! IDX-format MNIST ingestion and the one-step bandit reward.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{LabError, Result};

pub const PIXELS: usize = 28 * 28;
pub const CLASSES: usize = 10;
const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Environment variable consulted when no directory is given explicitly.
pub const MNIST_DIR_ENV: &str = "TPO_MNIST_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn stems(self) -> (&'static str, &'static str) {
        match self {
            MnistSplit::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            MnistSplit::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }

    pub fn expected_len(self) -> usize {
        match self {
            MnistSplit::Train => 60_000,
            MnistSplit::Test => 10_000,
        }
    }
}

/// Row-major `len × 784` pixels in `[0, 1]` with labels in `0..10`.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistDataset {
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
}

impl MnistDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn label_histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// FNV-1a over the label histogram, logged to identify the data.
    pub fn histogram_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for count in self.label_histogram() {
            for b in (count as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Resolves the data directory: explicit path first, then the environment.
pub fn resolve_mnist_dir(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from))
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LabError::Io(format!("{what}: truncated header")))
}

/// Parses an IDX image file into `(count, rows, cols, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IMAGE_MAGIC {
        return Err(LabError::Format(format!("image file magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() < want {
        return Err(LabError::Io(format!("image file truncated: {} of {want} pixel bytes", body.len())));
    }
    Ok((n, rows, cols, body[..want].iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != LABEL_MAGIC {
        return Err(LabError::Format(format!("label file magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = read_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(LabError::Io(format!("label file truncated: {} of {n} labels", body.len())));
    }
    let labels = body[..n].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(LabError::Format(format!("label {bad} outside 0..{CLASSES}")));
    }
    Ok(labels)
}

/// Validates a pair of parsed files as one dataset.
pub fn assemble(images: (usize, usize, usize, Vec<f64>), labels: Vec<u8>) -> Result<MnistDataset> {
    let (n, rows, cols, pixels) = images;
    if rows * cols != PIXELS {
        return Err(LabError::Format(format!("images are {rows}×{cols}, expected 28×28")));
    }
    if labels.len() != n {
        return Err(LabError::Format(format!("{} labels for {n} images", labels.len())));
    }
    Ok(MnistDataset { images: pixels, labels })
}

pub fn load_mnist(dir: &Path, split: MnistSplit) -> Result<MnistDataset> {
    let (img, lab) = split.stems();
    let read = |stem: &str| {
        fs::read(dir.join(stem)).map_err(|e| LabError::Io(format!("{}: {e}", dir.join(stem).display())))
    };
    let ds = assemble(parse_idx_images(&read(img)?)?, parse_idx_labels(&read(lab)?)?)?;
    log::info!(
        "loaded MNIST {split:?}: {} examples, label histogram checksum {:016x}",
        ds.len(),
        ds.histogram_checksum()
    );
    Ok(ds)
}

/// Writes the dataset back as an IDX pair, rounding pixels to bytes.
pub fn write_idx(ds: &MnistDataset, images: &mut impl Write, labels: &mut impl Write) -> std::io::Result<()> {
    images.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    for d in [ds.len() as u32, 28, 28] {
        images.write_all(&d.to_be_bytes())?;
    }
    let bytes: Vec<u8> = ds.images.iter().map(|&p| (p * 255.0).round() as u8).collect();
    images.write_all(&bytes)?;
    labels.write_all(&LABEL_MAGIC.to_be_bytes())?;
    labels.write_all(&(ds.len() as u32).to_be_bytes())?;
    labels.write_all(&ds.labels)
}

/// `1{action = label}`; the learner sees only this value.
pub fn mnist_bandit_reward(action: usize, label: usize) -> f64 {
    if action == label {
        1.0
    } else {
        0.0
    }
}
