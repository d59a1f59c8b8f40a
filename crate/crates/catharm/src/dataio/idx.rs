//! IDX binary format (big-endian), the de-facto MNIST container.
//! Image files carry magic 0x00000803 and dims (count, rows, cols); label
//! files carry 0x00000801 and a count. Pixels are scaled to [0,1] on load.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{DataError, DataKind, Dataset};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32, DataError> {
        if self.pos + 4 > self.bytes.len() {
            return Err(DataError::Truncated {
                what: self.what,
                needed: self.pos + 4,
                had: self.bytes.len(),
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated {
                what: self.what,
                needed: self.pos + n,
                had: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses an IDX image/label file pair into a Dataset (pixels / 255).
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let img_bytes = read_file(images)?;
    let mut r = Reader {
        bytes: &img_bytes,
        pos: 0,
        what: "image file",
    };
    let magic = r.u32()?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            what: "image file",
            expected: IMAGE_MAGIC,
            got: magic,
        });
    }
    let count = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    if height == 0 || width == 0 {
        return Err(DataError::DimensionMismatch {
            message: format!("degenerate image dims {height}x{width}"),
        });
    }
    let pixels = r.take(count * height * width)?;
    if r.pos != img_bytes.len() {
        return Err(DataError::DimensionMismatch {
            message: format!(
                "image file length {} does not match header ({} expected)",
                img_bytes.len(),
                r.pos
            ),
        });
    }

    let lbl_bytes = read_file(labels)?;
    let mut r = Reader {
        bytes: &lbl_bytes,
        pos: 0,
        what: "label file",
    };
    let magic = r.u32()?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            what: "label file",
            expected: LABEL_MAGIC,
            got: magic,
        });
    }
    let lcount = r.u32()? as usize;
    if lcount != count {
        return Err(DataError::DimensionMismatch {
            message: format!("{count} images vs {lcount} labels"),
        });
    }
    let raw_labels = r.take(lcount)?;
    if r.pos != lbl_bytes.len() {
        return Err(DataError::DimensionMismatch {
            message: format!(
                "label file length {} does not match header ({} expected)",
                lbl_bytes.len(),
                r.pos
            ),
        });
    }

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let features = Tensor::from_raw(vec![count, height * width], data);
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let mut ds = Dataset::from_parts(
        DataKind::Image { height, width },
        features,
        labels,
        BTreeMap::new(),
        vec![false; height * width],
    );
    ds.n_classes = ds.n_classes.max(10).min(256);
    Ok(ds)
}

/// Writes features in [0,1] (rows are flattened height*width images) and
/// labels as an IDX pair.
pub fn write_mnist_idx(
    images: &Path,
    labels: &Path,
    features: &Tensor,
    label_values: &[usize],
    height: usize,
    width: usize,
) -> Result<(), DataError> {
    let count = features.rows();
    let io_err = |path: &Path, source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut img = Vec::with_capacity(16 + count * height * width);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(count as u32).to_be_bytes());
    img.extend_from_slice(&(height as u32).to_be_bytes());
    img.extend_from_slice(&(width as u32).to_be_bytes());
    for &v in features.data() {
        img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut f = std::fs::File::create(images).map_err(|e| io_err(images, e))?;
    f.write_all(&img).map_err(|e| io_err(images, e))?;

    let mut lbl = Vec::with_capacity(8 + count);
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(count as u32).to_be_bytes());
    for &l in label_values {
        lbl.push(l as u8);
    }
    let mut f = std::fs::File::create(labels).map_err(|e| io_err(labels, e))?;
    f.write_all(&lbl).map_err(|e| io_err(labels, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn fixture_pair(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("img.idx");
        let lbl = dir.join("lbl.idx");
        let features = Tensor::from_raw(
            vec![3, 4],
            vec![
                0.0, 0.5, 1.0, 0.25, 0.1, 0.9, 0.3, 0.7, 0.6, 0.2, 0.8, 0.4,
            ],
        );
        write_mnist_idx(&img, &lbl, &features, &[3, 1, 4], 2, 2).unwrap();
        (img, lbl)
    }

    #[test]
    fn roundtrip_small_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture_pair(dir.path());
        let ds = load_mnist_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.labels, vec![3, 1, 4]);
        assert_eq!(ds.kind, DataKind::Image { height: 2, width: 2 });
        // /255 quantization: values within half a level
        assert!((ds.features.get(0, 1) - 0.5).abs() < 1.0 / 255.0);
    }

    #[test]
    fn load_twice_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture_pair(dir.path());
        let a = load_mnist_idx(&img, &lbl).unwrap();
        let b = load_mnist_idx(&img, &lbl).unwrap();
        assert_eq!(a.provenance, b.provenance);
    }

    #[test]
    fn wrong_label_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture_pair(dir.path());
        let mut bytes = std::fs::read(&lbl).unwrap();
        bytes[3] = 0xff;
        std::fs::write(&lbl, bytes).unwrap();
        assert!(matches!(
            load_mnist_idx(&img, &lbl),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture_pair(dir.path());
        let mut bytes = std::fs::read(&lbl).unwrap();
        bytes[7] = 9; // claim 9 labels
        std::fs::write(&lbl, bytes).unwrap();
        let err = load_mnist_idx(&img, &lbl).unwrap_err();
        assert!(
            matches!(err, DataError::DimensionMismatch { .. }) ||
            matches!(err, DataError::Truncated { .. })
        );
    }

    #[test]
    fn header_corruption_fuzz_never_panics() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture_pair(dir.path());
        let clean_img = std::fs::read(&img).unwrap();
        let clean_lbl = std::fs::read(&lbl).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let mut rejected = 0;
        for _ in 0..100 {
            let mut ibytes = clean_img.clone();
            let mut lbytes = clean_lbl.clone();
            // corrupt one header byte in each file (magic or dims region)
            let ipos = rng.random_range(0..16.min(ibytes.len()));
            let new = rng.random_range(1..=255u8);
            ibytes[ipos] = ibytes[ipos].wrapping_add(new);
            let lpos = rng.random_range(0..8.min(lbytes.len()));
            let new = rng.random_range(1..=255u8);
            lbytes[lpos] = lbytes[lpos].wrapping_add(new);
            std::fs::write(&img, &ibytes).unwrap();
            std::fs::write(&lbl, &lbytes).unwrap();
            if load_mnist_idx(&img, &lbl).is_err() {
                rejected += 1;
            }
        }
        // every mutation of magic or dims must be rejected
        assert_eq!(rejected, 100);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture_pair(dir.path());
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_mnist_idx(&img, &lbl),
            Err(DataError::Truncated { .. })
        ));
    }
}
