//! CIFAR-10 binary-batch reader (the `cifar-10-batches-bin` layout).

use crate::{Error, Result, Scalar};
use ndarray::Array3;
use std::io::Read;
use std::path::Path;

const RECORD: usize = 1 + 3 * 32 * 32;

pub const TRAIN_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_BATCH: &str = "test_batch.bin";

/// Reads one CIFAR-10 binary batch file: records of
/// `label u8 + 3072 bytes` in CHW order (R plane, G plane, B plane).
pub fn read_batch<F: Scalar>(path: &Path) -> Result<(Vec<Array3<F>>, Vec<u32>)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.is_empty() || raw.len() % RECORD != 0 {
        return Err(Error::data(
            path,
            format!("size {} is not a multiple of the {RECORD}-byte record", raw.len()),
        ));
    }
    let n = raw.len() / RECORD;
    let scale = F::from_f64_c(1.0 / 255.0);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in raw.chunks_exact(RECORD) {
        let label = rec[0] as u32;
        if label > 9 {
            return Err(Error::data(path, format!("label {label} out of range")));
        }
        let mut img = Array3::zeros((3, 32, 32));
        for (dst, &src) in img
            .as_slice_mut()
            .expect("fresh array is contiguous")
            .iter_mut()
            .zip(&rec[1..])
        {
            *dst = F::from_f64_c(src as f64) * scale;
        }
        images.push(img);
        labels.push(label);
    }
    Ok((images, labels))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use std::io::Write;
    use std::path::Path;

    pub fn write_batch(path: &Path, n: usize) {
        let mut buf = Vec::new();
        for i in 0..n {
            buf.push((i % 10) as u8);
            for p in 0..3 * 32 * 32 {
                buf.push(((i * 31 + p * 7) % 256) as u8);
            }
        }
        std::fs::File::create(path).unwrap().write_all(&buf).unwrap();
    }
}
