//! Labeled image datasets: IDX files, a seeded synthetic set, and splits.
//!
//! Every dataset leaving this module has pixels in `[0, 1]`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::XorShift64Star;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Half-width of the uniform noise added to synthetic images.
pub const SYNTHETIC_NOISE: f64 = 0.1;
/// Distance of a synthetic base pattern's pixels from mid-gray.
pub const SYNTHETIC_CONTRAST: f64 = 0.06;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `[N×C×H×W]`, every value in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(
                "dataset",
                format!("images must be [N×C×H×W], got {:?}", images.shape()),
            ));
        }
        if images.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                classes,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Malformed {
                what: "dataset",
                detail: "pixel outside [0, 1]".into(),
            });
        }
        Ok(LabeledDataset {
            images,
            labels,
            classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-item shape `[C, H, W]`.
    pub fn item_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::from_vec(self.item_shape(), self.images.row(i).to_vec())
    }

    /// Items at `indices`, in that order. An empty selection yields `None`
    /// since tensors cannot have a zero-length axis.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Option<LabeledDataset> {
        if indices.is_empty() {
            return None;
        }
        Some(LabeledDataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            name: name.into(),
        })
    }

    /// SHA-256 over shape, class count, pixel bit patterns and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update((self.classes as u64).to_le_bytes());
        for v in self.images.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            what,
            needed: offset + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX image file (`0x00000803`, dims N, H, W) into `[N×1×H×W]`
/// pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let what = "IDX image file";
    let magic = read_u32_be(bytes, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what,
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_u32_be(bytes, 4, what)? as usize;
    let h = read_u32_be(bytes, 8, what)? as usize;
    let w = read_u32_be(bytes, 12, what)? as usize;
    let needed = 16 + n * h * w;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            what,
            needed,
            found: bytes.len(),
        });
    }
    let data = bytes[16..needed].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let what = "IDX label file";
    let magic = read_u32_be(bytes, 0, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what,
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_u32_be(bytes, 4, what)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            what,
            needed,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| b as usize).collect())
}

/// Loads an MNIST-layout image/label file pair. The class count is the
/// largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if images.rows() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.rows(),
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = images_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    LabeledDataset::new(images, labels, classes, name)
}

/// Encodes `[N×1×H×W]` pixels (rounded to bytes) and labels as an IDX pair.
pub fn encode_idx(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [n, c, h, w] = *ds.images.shape() else {
        unreachable!("dataset images are rank 4");
    };
    if c != 1 {
        return Err(Error::shape("encode_idx", "IDX images are single-channel"));
    }
    if let Some(&bad) = ds.labels.iter().find(|&&l| l > 255) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            classes: 256,
        });
    }
    let mut images = Vec::with_capacity(16 + n * h * w);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(ds.images.data().iter().map(|v| (v * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn save_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(ds)?;
    fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Per-class base patterns used by [`generate_synthetic`]: every pixel is
/// `0.5 ± SYNTHETIC_CONTRAST` with a seeded random sign.
pub fn synthetic_patterns(classes: usize, side: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = XorShift64Star::derived(seed, 0);
    (0..classes)
        .map(|_| {
            (0..side * side)
                .map(|_| {
                    if rng.next_u64() >> 63 == 1 {
                        0.5 + SYNTHETIC_CONTRAST
                    } else {
                        0.5 - SYNTHETIC_CONTRAST
                    }
                })
                .collect()
        })
        .collect()
}

/// `classes × per_class` single-channel `side×side` images. Item `i` of
/// class `c` is pattern `P_c` plus uniform noise in `±0.1`, clamped to
/// `[0, 1]`. Items are ordered class by class.
pub fn generate_synthetic(classes: usize, per_class: usize, side: usize, seed: u64) -> Result<LabeledDataset> {
    if classes < 6 {
        return Err(Error::TooFewClasses(classes));
    }
    if side < 8 || per_class == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs side ≥ 8 and per_class ≥ 1 (got {side}, {per_class})"
        )));
    }
    let patterns = synthetic_patterns(classes, side, seed);
    let mut rng = XorShift64Star::derived(seed, 1);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for (c, pattern) in patterns.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(
                pattern
                    .iter()
                    .map(|&p| (p + rng.uniform(-SYNTHETIC_NOISE, SYNTHETIC_NOISE)).clamp(0.0, 1.0)),
            );
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![n, 1, side, side], data)?;
    LabeledDataset::new(images, labels, classes, format!("synthetic-k{classes}-n{per_class}-s{side}-seed{seed}"))
}

/// The default synthetic set: 10 classes × 300 images of 16×16.
pub fn default_synthetic(seed: u64) -> Result<LabeledDataset> {
    generate_synthetic(10, 300, 16, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

/// Index sets of a seeded split: positions `[0, train)`, `[train, train+val)`
/// and `[train+val, train+val+test)` of one Fisher–Yates permutation.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    let requested = spec.train + spec.val + spec.test;
    if requested > n {
        return Err(Error::SplitOverflow {
            requested,
            available: n,
        });
    }
    let perm = XorShift64Star::new(spec.seed).permutation(n);
    let (train, rest) = perm.split_at(spec.train);
    let (val, rest) = rest.split_at(spec.val);
    Ok([train.to_vec(), val.to_vec(), rest[..spec.test].to_vec()])
}

/// Train/validation/test subsets. A zero count yields `None` for that part.
pub fn split(
    ds: &LabeledDataset,
    spec: &SplitSpec,
) -> Result<(Option<LabeledDataset>, Option<LabeledDataset>, Option<LabeledDataset>)> {
    let [train, val, test] = split_indices(ds.len(), spec)?;
    Ok((
        ds.subset(&train, format!("{}/train", ds.name)),
        ds.subset(&val, format!("{}/val", ds.name)),
        ds.subset(&test, format!("{}/test", ds.name)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledDataset {
        let images = Tensor::from_vec(&[2, 1, 2, 2], vec![0.0, 1.0, 0.5, 0.2, 1.0, 1.0, 0.0, 0.0]);
        LabeledDataset::new(images, vec![1, 0], 2, "tiny").unwrap()
    }

    #[test]
    fn idx_bytes_parse() {
        let mut img = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [2u32, 28, 28] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend((0..2 * 28 * 28).map(|i| (i % 256) as u8));
        let t = parse_idx_images(&img).unwrap();
        assert_eq!(t.shape(), &[2, 1, 28, 28]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[255], 1.0);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn idx_errors_are_distinct() {
        let mut img = 0x0000_0801u32.to_be_bytes().to_vec();
        img.extend_from_slice(&[0; 12]);
        assert!(matches!(parse_idx_images(&img), Err(Error::BadMagic { .. })));

        let mut img = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [3u32, 2, 2] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend_from_slice(&[7; 11]);
        assert!(matches!(parse_idx_images(&img), Err(Error::Truncated { needed: 28, .. })));
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let three = LabeledDataset::new(Tensor::zeros(&[3, 1, 2, 2]), vec![0, 1, 0], 2, "x").unwrap();
        let (img, _) = encode_idx(&three).unwrap();
        let (_, lbl) = encode_idx(&tiny()).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lbl).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn synthetic_contract() {
        let a = generate_synthetic(6, 5, 8, 1).unwrap();
        assert_eq!(a, generate_synthetic(6, 5, 8, 1).unwrap());
        assert_ne!(a, generate_synthetic(6, 5, 8, 2).unwrap());
        assert_eq!(a.images.shape(), &[30, 1, 8, 8]);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(generate_synthetic(5, 5, 8, 1), Err(Error::TooFewClasses(5))));
        assert!(generate_synthetic(6, 5, 7, 1).is_err());
    }

    #[test]
    fn split_overflow_and_disjointness() {
        let spec = SplitSpec {
            train: 5,
            val: 3,
            test: 2,
            seed: 4,
        };
        let [a, b, c] = split_indices(10, &spec).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(matches!(
            split_indices(9, &spec),
            Err(Error::SplitOverflow { requested: 10, available: 9 })
        ));
    }

    #[test]
    fn whole_test_split_is_the_shuffle() {
        let ds = generate_synthetic(6, 2, 8, 0).unwrap();
        let spec = SplitSpec {
            train: 0,
            val: 0,
            test: ds.len(),
            seed: 77,
        };
        let (train, val, test) = split(&ds, &spec).unwrap();
        assert!(train.is_none() && val.is_none());
        let perm = XorShift64Star::new(77).permutation(ds.len());
        assert_eq!(test.unwrap().images, ds.images.select_rows(&perm));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = tiny();
        let mut b = tiny();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.labels[0] = 0;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
