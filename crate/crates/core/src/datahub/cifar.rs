//! CIFAR-10 binary batches: each record is one label byte followed by
//! 3072 pixel bytes (R, G, B planes of 32×32, row-major).

use std::path::Path;

use super::Dataset;
use crate::tensornet::Tensor;
use crate::{Error, Result};

pub const CIFAR10_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

fn parse_records(path: &Path, bytes: &[u8], pixels: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let complete = bytes.len() / CIFAR10_RECORD_LEN * CIFAR10_RECORD_LEN;
    if complete != bytes.len() {
        return Err(Error::format(format!(
            "{}: truncated record at offset {complete} ({} trailing bytes)",
            path.display(),
            bytes.len() - complete
        )));
    }
    for (i, record) in bytes.chunks_exact(CIFAR10_RECORD_LEN).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(Error::format(format!(
                "{}: label byte {label} at offset {} exceeds 9",
                path.display(),
                i * CIFAR10_RECORD_LEN
            )));
        }
        labels.push(label as usize);
        pixels.extend(record[1..].iter().map(|&p| f32::from(p) / 255.0));
    }
    Ok(())
}

fn load_files(paths: &[&Path]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(*path, e))?;
        parse_records(path, &bytes, &mut pixels, &mut labels)?;
    }
    if labels.is_empty() {
        return Err(Error::format("CIFAR-10 input contains no records"));
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10)
}

/// One binary batch file, records in file order.
pub fn load_cifar10_file(path: &Path) -> Result<Dataset> {
    load_files(&[path])
}

/// The training batches `data_batch_1.bin` .. `data_batch_5.bin` found in
/// `dir`, concatenated in numeric order. At least one must exist.
pub fn load_cifar10_binary(dir: &Path) -> Result<Dataset> {
    let paths: Vec<_> = TRAIN_FILES.iter().map(|f| dir.join(f)).filter(|p| p.is_file()).collect();
    if paths.is_empty() {
        return Err(Error::format(format!(
            "{}: no data_batch_*.bin files found",
            dir.display()
        )));
    }
    let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
    load_files(&refs)
}

/// `test_batch.bin` from `dir`.
pub fn load_cifar10_test(dir: &Path) -> Result<Dataset> {
    load_cifar10_file(&dir.join(TEST_FILE))
}
