//! Readers for the standard public distributions of the image datasets.
//!
//! Expected layouts under `root` (either directly or in a subdirectory named
//! after the dataset):
//! - MNIST / FMNIST: `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`
//! - CIFAR10: `cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin`
//! - CIFAR100: `cifar-100-binary/{train,test}.bin`
//! - SVHN: `{train,test}_32x32.mat`

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::{GzDecoder, ZlibDecoder};

use super::dataset::DatasetHandle;
use crate::error::{Error, Result};

type RawSplit = (Vec<u8>, Vec<usize>);

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptDataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// First existing candidate among `root/name` and `root/sub/name`, also
/// accepting a `.gz` suffix.
fn locate(root: &Path, subdirs: &[&str], name: &str) -> Result<PathBuf> {
    let mut tried = Vec::new();
    for dir in std::iter::once(root.to_path_buf()).chain(subdirs.iter().map(|s| root.join(s))) {
        for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
            if candidate.is_file() {
                return Ok(candidate);
            }
            tried.push(candidate);
        }
    }
    Err(corrupt(&root.join(name), format!("file not found (tried {} locations)", tried.len())))
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| corrupt(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < 16 || be_u32(&bytes, 0) != 0x0803 {
        return Err(corrupt(path, "bad idx3 magic"));
    }
    let (n, h, w) = (
        be_u32(&bytes, 4) as usize,
        be_u32(&bytes, 8) as usize,
        be_u32(&bytes, 12) as usize,
    );
    if bytes.len() != 16 + n * h * w {
        return Err(corrupt(path, "truncated idx3 payload"));
    }
    Ok((bytes[16..].to_vec(), n, h, w))
}

fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < 8 || be_u32(&bytes, 0) != 0x0801 {
        return Err(corrupt(path, "bad idx1 magic"));
    }
    let n = be_u32(&bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(corrupt(path, "truncated idx1 payload"));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

pub(super) fn load_idx(name: &str, root: &Path) -> Result<DatasetHandle> {
    let subdirs = [name, &format!("{name}/raw")];
    let subdirs: Vec<&str> = subdirs.iter().map(|s| s.as_ref()).collect();
    let split = |prefix: &str| -> Result<(RawSplit, usize, usize)> {
        let img_path = locate(root, &subdirs, &format!("{prefix}-images-idx3-ubyte"))?;
        let lbl_path = locate(root, &subdirs, &format!("{prefix}-labels-idx1-ubyte"))?;
        let (pixels, n, h, w) = read_idx_images(&img_path)?;
        let labels = read_idx_labels(&lbl_path)?;
        if labels.len() != n {
            return Err(corrupt(&lbl_path, "label count differs from image count"));
        }
        if labels.iter().any(|&l| l >= 10) {
            return Err(corrupt(&lbl_path, "label out of range"));
        }
        Ok(((pixels, labels), h, w))
    };
    let (train, h, w) = split("train")?;
    let (test, _, _) = split("t10k")?;
    Ok(DatasetHandle::from_raw(name, 10, [1, h, w], train, test))
}

fn read_cifar_records(path: &Path, label_offset: usize, header: usize, out: &mut RawSplit, classes: usize) -> Result<()> {
    let bytes = read_maybe_gz(path)?;
    let record = header + 3072;
    if bytes.len() % record != 0 {
        return Err(corrupt(path, "size is not a whole number of records"));
    }
    for rec in bytes.chunks(record) {
        let label = rec[label_offset] as usize;
        if label >= classes {
            return Err(corrupt(path, format!("label {label} out of range")));
        }
        out.1.push(label);
        out.0.extend_from_slice(&rec[header..]);
    }
    Ok(())
}

pub(super) fn load_cifar10(root: &Path) -> Result<DatasetHandle> {
    let subdirs = ["cifar-10-batches-bin", "CIFAR10/cifar-10-batches-bin", "CIFAR10"];
    let mut train = (Vec::new(), Vec::new());
    for i in 1..=5 {
        let p = locate(root, &subdirs, &format!("data_batch_{i}.bin"))?;
        read_cifar_records(&p, 0, 1, &mut train, 10)?;
    }
    let mut test = (Vec::new(), Vec::new());
    read_cifar_records(&locate(root, &subdirs, "test_batch.bin")?, 0, 1, &mut test, 10)?;
    Ok(DatasetHandle::from_raw("CIFAR10", 10, [3, 32, 32], train, test))
}

pub(super) fn load_cifar100(root: &Path) -> Result<DatasetHandle> {
    let subdirs = ["cifar-100-binary", "CIFAR100/cifar-100-binary", "CIFAR100"];
    let mut train = (Vec::new(), Vec::new());
    read_cifar_records(&locate(root, &subdirs, "train.bin")?, 1, 2, &mut train, 100)?;
    let mut test = (Vec::new(), Vec::new());
    read_cifar_records(&locate(root, &subdirs, "test.bin")?, 1, 2, &mut test, 100)?;
    Ok(DatasetHandle::from_raw("CIFAR100", 100, [3, 32, 32], train, test))
}

pub(super) fn load_svhn(root: &Path) -> Result<DatasetHandle> {
    let subdirs = ["SVHN", "svhn"];
    let split = |name: &str| -> Result<RawSplit> {
        let path = locate(root, &subdirs, name)?;
        let arrays = mat::read_arrays(&path)?;
        let x = arrays
            .iter()
            .find(|a| a.name == "X")
            .ok_or_else(|| corrupt(&path, "missing variable X"))?;
        let y = arrays
            .iter()
            .find(|a| a.name == "y")
            .ok_or_else(|| corrupt(&path, "missing variable y"))?;
        if x.dims.len() != 4 || x.dims[..3] != [32, 32, 3] {
            return Err(corrupt(&path, format!("unexpected X dims {:?}", x.dims)));
        }
        let n = x.dims[3];
        if y.data.len() != n {
            return Err(corrupt(&path, "label count differs from image count"));
        }
        // column-major [row, col, channel, n] -> row-major [n, channel, row, col]
        let mut pixels = vec![0u8; n * 3072];
        for i in 0..n {
            for c in 0..3 {
                for r in 0..32 {
                    for col in 0..32 {
                        let src = r + 32 * (col + 32 * (c + 3 * i));
                        pixels[((i * 3 + c) * 32 + r) * 32 + col] = x.data[src] as u8;
                    }
                }
            }
        }
        let labels = y
            .data
            .iter()
            .map(|&v| {
                let l = v as usize;
                if l == 10 { 0 } else { l }
            })
            .collect::<Vec<_>>();
        if labels.iter().any(|&l| l >= 10) {
            return Err(corrupt(&path, "label out of range"));
        }
        Ok((pixels, labels))
    };
    let train = split("train_32x32.mat")?;
    let test = split("test_32x32.mat")?;
    Ok(DatasetHandle::from_raw("SVHN", 10, [3, 32, 32], train, test))
}

/// Minimal MATLAB level-5 reader: numeric matrices only, little-endian,
/// optionally zlib-compressed elements.
mod mat {
    use super::*;

    const MI_INT8: u32 = 1;
    const MI_UINT8: u32 = 2;
    const MI_INT16: u32 = 3;
    const MI_UINT16: u32 = 4;
    const MI_INT32: u32 = 5;
    const MI_UINT32: u32 = 6;
    const MI_SINGLE: u32 = 7;
    const MI_DOUBLE: u32 = 9;
    const MI_MATRIX: u32 = 14;
    const MI_COMPRESSED: u32 = 15;

    pub struct MatArray {
        pub name: String,
        pub dims: Vec<usize>,
        pub data: Vec<f64>,
    }

    fn le_u32(b: &[u8], at: usize) -> Option<u32> {
        b.get(at..at + 4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
    }

    /// Splits one element off `buf`, returning (type, payload, bytes consumed).
    fn element(buf: &[u8]) -> Option<(u32, &[u8], usize)> {
        let first = le_u32(buf, 0)?;
        if first >> 16 != 0 {
            let (ty, len) = (first & 0xffff, (first >> 16) as usize);
            return Some((ty, buf.get(4..4 + len)?, 8));
        }
        let len = le_u32(buf, 4)? as usize;
        let payload = buf.get(8..8 + len)?;
        let padded = if first == MI_COMPRESSED { len } else { len.div_ceil(8) * 8 };
        Some((first, payload, 8 + padded))
    }

    fn numeric(ty: u32, p: &[u8]) -> Option<Vec<f64>> {
        Some(match ty {
            MI_INT8 => p.iter().map(|&v| v as i8 as f64).collect(),
            MI_UINT8 => p.iter().map(|&v| v as f64).collect(),
            MI_INT16 => p.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
            MI_UINT16 => p.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as f64).collect(),
            MI_INT32 => p.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            MI_UINT32 => p.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            MI_SINGLE => p.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            MI_DOUBLE => p.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            _ => return None,
        })
    }

    fn matrix(p: &[u8]) -> Option<MatArray> {
        let (_, _, used) = element(p)?; // array flags
        let mut at = used;
        let (_, dims_raw, used) = element(&p[at..])?;
        at += used;
        let dims = numeric(MI_INT32, dims_raw)?.into_iter().map(|d| d as usize).collect();
        let (_, name_raw, used) = element(&p[at..])?;
        at += used;
        let name = String::from_utf8_lossy(name_raw).into_owned();
        let (ty, real, _) = element(&p[at..])?;
        Some(MatArray {
            name,
            dims,
            data: numeric(ty, real)?,
        })
    }

    fn collect(mut buf: &[u8], out: &mut Vec<MatArray>, path: &Path) -> Result<()> {
        while buf.len() >= 8 {
            let (ty, payload, used) = element(buf).ok_or_else(|| corrupt(path, "truncated element"))?;
            match ty {
                MI_COMPRESSED => {
                    let mut inner = Vec::new();
                    ZlibDecoder::new(payload)
                        .read_to_end(&mut inner)
                        .map_err(|e| corrupt(path, format!("zlib: {e}")))?;
                    collect(&inner, out, path)?;
                }
                MI_MATRIX => {
                    if let Some(m) = matrix(payload) {
                        out.push(m);
                    }
                }
                _ => {}
            }
            buf = &buf[used.min(buf.len())..];
        }
        Ok(())
    }

    pub fn read_arrays(path: &Path) -> Result<Vec<MatArray>> {
        let bytes = fs::read(path)?;
        if bytes.len() < 128 || &bytes[126..128] != b"IM" {
            return Err(corrupt(path, "not a little-endian MAT v5 file"));
        }
        let mut out = Vec::new();
        collect(&bytes[128..], &mut out, path)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: usize, h: usize, w: usize) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [0x0803u32, n as u32, h as u32, w as u32] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * h * w).map(|i| (i % 256) as u8));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&0x0801u32.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn reads_idx_layout() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("MNIST/raw");
        fs::create_dir_all(&raw).unwrap();
        fs::write(raw.join("train-images-idx3-ubyte"), idx_images(3, 28, 28)).unwrap();
        fs::write(raw.join("train-labels-idx1-ubyte"), idx_labels(&[1, 2, 3])).unwrap();
        fs::write(raw.join("t10k-images-idx3-ubyte"), idx_images(2, 28, 28)).unwrap();
        fs::write(raw.join("t10k-labels-idx1-ubyte"), idx_labels(&[0, 9])).unwrap();
        let h = load_idx("MNIST", dir.path()).unwrap();
        assert_eq!(h.sample_shape, [1, 28, 28]);
        assert_eq!((h.train.len(), h.test.len()), (3, 2));
        let expected = (1.0 / 255.0 - 0.1307) / 0.3081;
        assert!((h.train.sample(0)[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_idx("MNIST", dir.path()), Err(Error::CorruptDataset { .. })));
        assert!(load_cifar10(dir.path()).is_err());
        assert!(load_svhn(dir.path()).is_err());
    }

    #[test]
    fn truncated_idx_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut imgs = idx_images(3, 28, 28);
        imgs.truncate(100);
        fs::write(dir.path().join("train-images-idx3-ubyte"), imgs).unwrap();
        fs::write(dir.path().join("train-labels-idx1-ubyte"), idx_labels(&[1, 2, 3])).unwrap();
        assert!(matches!(load_idx("FMNIST", dir.path()), Err(Error::CorruptDataset { .. })));
    }

    #[test]
    fn reads_cifar100_fine_labels() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("cifar-100-binary");
        fs::create_dir_all(&sub).unwrap();
        let mut rec = vec![3u8, 42u8];
        rec.extend(std::iter::repeat_n(255u8, 3072));
        fs::write(sub.join("train.bin"), rec.repeat(2)).unwrap();
        fs::write(sub.join("test.bin"), &rec).unwrap();
        let h = load_cifar100(dir.path()).unwrap();
        assert_eq!(h.num_classes, 100);
        assert_eq!(h.train.labels(), &[42, 42]);
        assert_eq!(h.sample_shape, [3, 32, 32]);
    }
}
