use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};

/// Bytes per record: one label byte followed by 1024 R, 1024 G, 1024 B bytes.
pub const RECORD_BYTES: usize = 3073;
pub const PIXEL_BYTES: usize = 3072;

pub const CIFAR_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    label: u8,
    pixels: Vec<u8>,
}

impl CifarRecord {
    pub fn new(label: u8, pixels: Vec<u8>) -> Result<Self> {
        ensure!(label <= 9, Data, "label {label} out of range 0..=9");
        ensure!(
            pixels.len() == PIXEL_BYTES,
            Data,
            "record has {} pixel bytes, expected {PIXEL_BYTES}",
            pixels.len()
        );
        Ok(Self { label, pixels })
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    /// Planar RGB, each plane row-major 32x32.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    ensure!(
        bytes.len().is_multiple_of(RECORD_BYTES),
        Data,
        "truncated record: {} bytes is not a multiple of {RECORD_BYTES}",
        bytes.len()
    );
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            CifarRecord::new(rec[0], rec[1..].to_vec()).map_err(|e| Error::Data(format!("record {i}: {e}")))
        })
        .collect()
}

/// Reads one CIFAR-10 binary batch file, records in file order.
pub fn load_cifar10(path: &Path) -> Result<Vec<CifarRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Inverse of [`parse_cifar10`].
pub fn serialize_cifar10(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarSplit {
    /// `data_batch_1.bin` .. `data_batch_5.bin`
    Train,
    /// `test_batch.bin`
    Test,
}

impl CifarSplit {
    pub fn files(self) -> Vec<String> {
        match self {
            Self::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Self::Test => vec!["test_batch.bin".into()],
        }
    }
}

/// Loads a split from an extracted `cifar-10-batches-bin` directory.
pub fn load_cifar10_split(dir: &Path, split: CifarSplit) -> Result<Vec<CifarRecord>> {
    let mut out = Vec::new();
    for f in split.files() {
        out.extend(load_cifar10(&dir.join(f))?);
    }
    Ok(out)
}
