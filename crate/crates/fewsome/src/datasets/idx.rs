//! IDX image/label file reader (the MNIST family's canonical format),
//! transparently handling gzip-compressed files.

use crate::{Error, Result, Scalar};
use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;
use ndarray::Array3;
use std::io::Read;
use std::path::{Path, PathBuf};

const IMAGE_MAGIC: u32 = 0x0803;
const LABEL_MAGIC: u32 = 0x0801;

/// Opens `path`, or `path` with a `.gz` suffix, decompressing as needed.
fn open_maybe_gz(path: &Path) -> Result<(PathBuf, Box<dyn Read>)> {
    let gz_path = {
        let mut s = path.as_os_str().to_owned();
        s.push(".gz");
        PathBuf::from(s)
    };
    let (actual, gz) = if path.exists() {
        (
            path.to_path_buf(),
            path.extension().is_some_and(|e| e == "gz"),
        )
    } else if gz_path.exists() {
        (gz_path, true)
    } else {
        return Err(Error::data(path, "file not found (also tried .gz)"));
    };
    let file = std::fs::File::open(&actual).map_err(|e| Error::io(&actual, e))?;
    let reader: Box<dyn Read> = if gz {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok((actual, reader))
}

/// Reads an IDX image file into per-image `(1, h, w)` tensors scaled to
/// `[0, 1]`.
pub fn read_idx_images<F: Scalar>(path: &Path) -> Result<Vec<Array3<F>>> {
    let (actual, mut r) = open_maybe_gz(path)?;
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|e| Error::io(&actual, e))?;
    if magic != IMAGE_MAGIC {
        return Err(Error::data(
            &actual,
            format!("bad image magic 0x{magic:08x}"),
        ));
    }
    let n = r.read_u32::<BigEndian>().map_err(|e| Error::io(&actual, e))? as usize;
    let h = r.read_u32::<BigEndian>().map_err(|e| Error::io(&actual, e))? as usize;
    let w = r.read_u32::<BigEndian>().map_err(|e| Error::io(&actual, e))? as usize;
    let mut raw = vec![0u8; n * h * w];
    r.read_exact(&mut raw).map_err(|e| Error::io(&actual, e))?;

    let scale = F::from_f64_c(1.0 / 255.0);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = Array3::zeros((1, h, w));
        let plane = &raw[i * h * w..(i + 1) * h * w];
        for (dst, &src) in img
            .as_slice_mut()
            .expect("fresh array is contiguous")
            .iter_mut()
            .zip(plane)
        {
            *dst = F::from_f64_c(src as f64) * scale;
        }
        images.push(img);
    }
    Ok(images)
}

/// Reads an IDX label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u32>> {
    let (actual, mut r) = open_maybe_gz(path)?;
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|e| Error::io(&actual, e))?;
    if magic != LABEL_MAGIC {
        return Err(Error::data(
            &actual,
            format!("bad label magic 0x{magic:08x}"),
        ));
    }
    let n = r.read_u32::<BigEndian>().map_err(|e| Error::io(&actual, e))? as usize;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw).map_err(|e| Error::io(&actual, e))?;
    Ok(raw.into_iter().map(u32::from).collect())
}
