//! MNIST IDX ingestion and the partitioned training protocol.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IdxError, Result};
use crate::grid::RawImage;
use crate::method::DistanceMethod;
use crate::scalar::Real;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Image with its digit label and position in the source file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage<T> {
    pub image: RawImage<T>,
    pub label: u8,
    pub index: usize,
}

/// Raw IDX image payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        if self.rows * self.cols == 0 {
            0
        } else {
            self.pixels.len() / (self.rows * self.cols)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, k: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.pixels[k * sz..(k + 1) * sz]
    }
}

/// Reads a whole file, decompressing gzip when the stream starts with its
/// magic bytes.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            IdxError::Truncated {
                expected: at + 4,
                found: bytes.len(),
            }
            .into()
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found }.into());
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            found: bytes.len(),
        }
        .into());
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..expected].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            found: bytes.len(),
        }
        .into());
    }
    let labels = bytes[8..expected].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(IdxError::BadLabel(bad).into());
    }
    Ok(labels)
}

/// Converts byte intensities to `[0, 1]`.
pub fn to_raw_image<T: Real>(rows: usize, cols: usize, pixels: &[u8]) -> Result<RawImage<T>> {
    let scale = T::lit(1.0 / 255.0);
    RawImage::new(Array2::from_shape_fn((rows, cols), |(i, j)| {
        T::lit(f64::from(pixels[i * cols + j])) * scale
    }))
}

/// Loads paired image and label files (plain or gzip).
pub fn load_idx<T: Real>(images: &Path, labels: &Path) -> Result<Vec<LabeledImage<T>>> {
    let imgs = parse_idx_images(&read_maybe_gzip(images)?)?;
    let labs = parse_idx_labels(&read_maybe_gzip(labels)?)?;
    if imgs.len() != labs.len() {
        return Err(IdxError::CountMismatch {
            images: imgs.len(),
            labels: labs.len(),
        }
        .into());
    }
    labs.iter()
        .enumerate()
        .map(|(k, &label)| {
            Ok(LabeledImage {
                image: to_raw_image(imgs.rows, imgs.cols, imgs.image(k))?,
                label,
                index: k,
            })
        })
        .collect()
}

/// Sampling protocol and classifier settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub partitions: usize,
    /// Training examples of each digit in every partition.
    pub per_class: usize,
    pub test_per_class: usize,
    /// Training sizes per class, evaluated in order.
    pub schedule: Vec<usize>,
    pub method: DistanceMethod,
    pub k: usize,
    /// Intensity offset for density-based methods, on the `[0, 1]` scale.
    pub offset: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seed: 2019,
            partitions: 20,
            per_class: 50,
            test_per_class: 20,
            schedule: (1..=25).collect(),
            method: DistanceMethod::Euclidean,
            k: 1,
            offset: 1.0,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let max_s = self.schedule.iter().copied().max().unwrap_or(0);
        if self.schedule.is_empty() || self.schedule.contains(&0) {
            return Err(Error::invalid("schedule must list positive sizes"));
        }
        if max_s > self.per_class {
            return Err(Error::invalid(format!(
                "schedule size {max_s} exceeds per-class partition size {}",
                self.per_class
            )));
        }
        if self.partitions == 0 || self.test_per_class == 0 || self.k == 0 {
            return Err(Error::invalid(
                "partitions, test_per_class and k must be positive",
            ));
        }
        if self.k > max_s * 10 {
            return Err(Error::invalid("k exceeds the largest training set"));
        }
        if !(self.offset > 0.0) {
            return Err(Error::invalid("offset must be positive"));
        }
        Ok(())
    }
}

/// One training partition: indices into the training pool, grouped by
/// digit in sampled order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub by_class: Vec<Vec<usize>>,
}

impl Partition {
    /// First `s` examples of every digit; nested in `s`.
    pub fn subset(&self, s: usize) -> Vec<usize> {
        self.by_class
            .iter()
            .flat_map(|c| c.iter().take(s).copied())
            .collect()
    }

    pub fn all(&self) -> Vec<usize> {
        self.by_class.iter().flatten().copied().collect()
    }
}

/// Training partitions and the test selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partitions {
    pub training: Vec<Partition>,
    /// Indices into the test pool, grouped by digit.
    pub test_by_class: Vec<Vec<usize>>,
}

impl Partitions {
    pub fn test(&self) -> Vec<usize> {
        self.test_by_class.iter().flatten().copied().collect()
    }

    /// Writes `role,partition,class,rank,index` rows.
    pub fn write_manifest<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "role,partition,class,rank,index")?;
        for (p, part) in self.training.iter().enumerate() {
            for (c, items) in part.by_class.iter().enumerate() {
                for (r, idx) in items.iter().enumerate() {
                    writeln!(out, "train,{p},{c},{r},{idx}")?;
                }
            }
        }
        for (c, items) in self.test_by_class.iter().enumerate() {
            for (r, idx) in items.iter().enumerate() {
                writeln!(out, "test,,{c},{r},{idx}")?;
            }
        }
        Ok(())
    }
}

fn shuffled_by_class<T>(pool: &[LabeledImage<T>], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let mut by_class = vec![Vec::new(); 10];
    for k in order {
        by_class[pool[k].label as usize].push(k);
    }
    by_class
}

/// Draws disjoint, class-balanced partitions from `train_pool` and a
/// class-balanced test set from `test_pool`, deterministically from the seed.
pub fn build_partitions<T>(
    train_pool: &[LabeledImage<T>],
    test_pool: &[LabeledImage<T>],
    spec: &ExperimentSpec,
) -> Result<Partitions> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = shuffled_by_class(train_pool, &mut rng);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    test_rng.set_stream(1);
    let test = shuffled_by_class(test_pool, &mut test_rng);

    let need = spec.partitions * spec.per_class;
    for (c, items) in train.iter().enumerate() {
        if items.len() < need {
            return Err(Error::InsufficientData(format!(
                "digit {c}: {} training images, {need} required",
                items.len()
            )));
        }
    }
    for (c, items) in test.iter().enumerate() {
        if items.len() < spec.test_per_class {
            return Err(Error::InsufficientData(format!(
                "digit {c}: {} test images, {} required",
                items.len(),
                spec.test_per_class
            )));
        }
    }
    let training = (0..spec.partitions)
        .map(|p| Partition {
            by_class: train
                .iter()
                .map(|items| items[p * spec.per_class..(p + 1) * spec.per_class].to_vec())
                .collect(),
        })
        .collect();
    let test_by_class = test
        .into_iter()
        .map(|mut items| {
            items.truncate(spec.test_per_class);
            items
        })
        .collect();
    Ok(Partitions {
        training,
        test_by_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn idx_images(count: u32, rows: u32, cols: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IMAGE_MAGIC.to_be_bytes());
        b.extend(count.to_be_bytes());
        b.extend(rows.to_be_bytes());
        b.extend(cols.to_be_bytes());
        b.extend((0..(count * rows * cols) as usize).map(fill));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(LABEL_MAGIC.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    fn synthetic_pool(per_class: usize) -> Vec<LabeledImage<f64>> {
        (0..per_class * 10)
            .map(|k| LabeledImage {
                image: RawImage::new(Array2::from_elem((3, 3), 1.0 + k as f64)).unwrap(),
                label: (k % 10) as u8,
                index: k,
            })
            .collect()
    }

    #[test]
    fn parses_images_and_labels() {
        let imgs = parse_idx_images(&idx_images(2, 2, 3, |k| k as u8)).unwrap();
        assert_eq!((imgs.rows, imgs.cols, imgs.len()), (2, 3, 2));
        assert_eq!(imgs.image(1), &[6, 7, 8, 9, 10, 11]);
        assert_eq!(parse_idx_labels(&idx_labels(&[3, 9])).unwrap(), vec![3, 9]);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let mut bad = idx_images(1, 2, 2, |_| 1);
        bad[3] = 0x02;
        assert!(matches!(
            parse_idx_images(&bad),
            Err(Error::Idx(IdxError::BadMagic { found: 0x802, .. }))
        ));
        let mut short = idx_images(2, 2, 2, |_| 1);
        short.truncate(20);
        assert!(matches!(parse_idx_images(&short), Err(Error::Idx(IdxError::Truncated { .. }))));
        assert!(matches!(
            parse_idx_labels(&idx_labels(&[1, 12])),
            Err(Error::Idx(IdxError::BadLabel(12)))
        ));
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(Error::Idx(IdxError::Truncated { .. }))));
    }

    #[test]
    fn loads_plain_and_gzip_and_checks_counts() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.gz");
        let mut enc = GzEncoder::new(File::create(&ip).unwrap(), flate2::Compression::fast());
        enc.write_all(&idx_images(2, 2, 2, |k| (k * 30) as u8 + 1)).unwrap();
        enc.finish().unwrap();
        let lp = dir.path().join("lab");
        std::fs::write(&lp, idx_labels(&[4, 7])).unwrap();
        let data = load_idx::<f64>(&ip, &lp).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data[1].label, 7);
        assert_eq!(data[0].image.pixels()[[0, 0]], 1.0 / 255.0);

        std::fs::write(&lp, idx_labels(&[4])).unwrap();
        assert!(matches!(
            load_idx::<f64>(&ip, &lp),
            Err(Error::Idx(IdxError::CountMismatch { images: 2, labels: 1 }))
        ));
    }

    #[test]
    fn partitions_are_disjoint_balanced_and_nested() {
        let train = synthetic_pool(30);
        let test = synthetic_pool(5);
        let spec = ExperimentSpec {
            partitions: 6,
            per_class: 5,
            test_per_class: 3,
            schedule: vec![1, 2, 5],
            ..Default::default()
        };
        let p = build_partitions(&train, &test, &spec).unwrap();
        let mut seen = HashSet::new();
        for part in &p.training {
            for (c, items) in part.by_class.iter().enumerate() {
                assert_eq!(items.len(), 5);
                assert!(items.iter().all(|&k| train[k].label as usize == c));
            }
            for k in part.all() {
                assert!(seen.insert(k), "index {k} reused");
            }
            let s2 = part.subset(2);
            assert!(part.subset(1).iter().all(|k| s2.contains(k)));
            assert_eq!(s2.len(), 20);
        }
        assert_eq!(p.test().len(), 30);
        assert_eq!(p, build_partitions(&train, &test, &spec).unwrap());
        let other = build_partitions(&train, &test, &ExperimentSpec { seed: 7, ..spec.clone() }).unwrap();
        assert_ne!(p, other);
    }

    #[test]
    fn insufficient_data_reported() {
        let train = synthetic_pool(4);
        let spec = ExperimentSpec { partitions: 1, per_class: 5, schedule: vec![5], ..Default::default() };
        assert!(matches!(
            build_partitions(&train, &train, &spec),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn manifest_lists_every_item() {
        let pool = synthetic_pool(4);
        let spec = ExperimentSpec { partitions: 2, per_class: 2, test_per_class: 1, schedule: vec![1, 2], ..Default::default() };
        let p = build_partitions(&pool, &pool, &spec).unwrap();
        let mut buf = Vec::new();
        p.write_manifest(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 40 + 10);
    }

    #[test]
    fn spec_validation() {
        assert!(ExperimentSpec::default().validate().is_ok());
        assert!(ExperimentSpec { schedule: vec![60], ..Default::default() }.validate().is_err());
        assert!(ExperimentSpec { k: 0, ..Default::default() }.validate().is_err());
        assert!(ExperimentSpec { offset: 0.0, ..Default::default() }.validate().is_err());
    }
}
