//! Labelled image sets, the IDX reader, the four-way partition and the
//! procedural stand-in corpus.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images of shape (count, H, W, channels) with pixel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pixels: Vec<f64>,
    sample_shape: [usize; 3],
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(pixels: Vec<f64>, sample_shape: [usize; 3], labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::contract(format!(
                "{} pixels do not form {} images of shape {sample_shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::contract(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(LabeledDataset { pixels, sample_shape, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-image shape `[H, W, C]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let per = self.sample_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// New dataset holding `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let per = self.sample_len();
        let mut pixels = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            pixels.extend_from_slice(self.example(i));
        }
        LabeledDataset {
            pixels,
            sample_shape: self.sample_shape,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// First `n` examples (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Concatenate datasets with identical image shape and class count.
    pub fn concat(parts: &[LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts.first().ok_or_else(|| Error::contract("nothing to concatenate"))?;
        let mut out = first.clone();
        for p in &parts[1..] {
            if p.sample_shape != first.sample_shape {
                return Err(Error::contract("cannot concatenate datasets with different image shapes"));
            }
            out.pixels.extend_from_slice(&p.pixels);
            out.labels.extend_from_slice(&p.labels);
            out.class_count = out.class_count.max(p.class_count);
        }
        Ok(out)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn need(what: &'static str, bytes: &[u8], len: usize) -> Result<()> {
    if bytes.len() < len {
        Err(Error::IdxTruncated { what, expected: len, found: bytes.len() })
    } else {
        Ok(())
    }
}

/// Decode an IDX image file (magic 0x803, u8 pixels, big-endian header).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    need("image header", bytes, 16)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic { what: "image file", expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let (n, h, w) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let len = 16 + n * h * w;
    need("image payload", bytes, len)?;
    Ok((n, h, w, &bytes[16..len]))
}

/// Decode an IDX label file (magic 0x801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    need("label header", bytes, 8)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic { what: "label file", expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4) as usize;
    need("label payload", bytes, 8 + n)?;
    Ok(&bytes[8..8 + n])
}

pub fn dataset_from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledDataset> {
    let (n, h, w, payload) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::IdxCountMismatch { images: n, labels: labels.len() });
    }
    let pixels = payload.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    LabeledDataset::new(pixels, [h, w, 1], labels, classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    dataset_from_idx(&images, &labels)
}

/// Sizes of the validation / public / per-participant slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub validation_size: usize,
    pub public_size: usize,
    pub per_participant_train: usize,
    pub per_participant_test: usize,
    pub participant_count: usize,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn total(&self) -> usize {
        self.validation_size
            + self.public_size
            + self.participant_count * (self.per_participant_train + self.per_participant_test)
    }

    /// 28000 / 420 / 5 × (6653 + 1663) = 70000.
    pub fn mnist(seed: u64) -> Self {
        PartitionPlan {
            validation_size: 28000,
            public_size: 420,
            per_participant_train: 6653,
            per_participant_test: 1663,
            participant_count: 5,
            seed,
        }
    }

    /// 6000 / 90 / 5 × (1426 + 356) = 15000.
    pub fn lung(seed: u64) -> Self {
        PartitionPlan {
            validation_size: 6000,
            public_size: 90,
            per_participant_train: 1426,
            per_participant_test: 356,
            participant_count: 5,
            seed,
        }
    }

    pub fn check(&self, dataset_size: usize) -> Result<()> {
        if self.participant_count == 0 {
            return Err(Error::contract("partition needs at least one participant"));
        }
        let total = self.total();
        if total != dataset_size {
            let diff = dataset_size as i64 - total as i64;
            return Err(Error::contract(format!(
                "partition sizes sum to {total} but the dataset has {dataset_size} examples (deficit {diff})"
            )));
        }
        Ok(())
    }
}

/// Index lists of every slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionIndices {
    pub validation: Vec<usize>,
    pub public: Vec<usize>,
    pub participants: Vec<ParticipantIndices>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl PartitionIndices {
    /// Every index, slice after slice.
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.validation
            .iter()
            .chain(&self.public)
            .chain(self.participants.iter().flat_map(|p| p.train.iter().chain(&p.test)))
            .copied()
    }
}

/// Uniform seeded shuffle of `0..dataset_size` cut into the plan's slices.
pub fn partition_indices(dataset_size: usize, plan: &PartitionPlan) -> Result<PartitionIndices> {
    plan.check(dataset_size)?;
    let mut order: Vec<usize> = (0..dataset_size).collect();
    RngStream::new(plan.seed).shuffle(&mut order);
    let mut rest = order.as_slice();
    let mut cut = |n: usize| {
        let (head, tail) = rest.split_at(n);
        rest = tail;
        head.to_vec()
    };
    let validation = cut(plan.validation_size);
    let public = cut(plan.public_size);
    let participants = (0..plan.participant_count)
        .map(|_| {
            let train = cut(plan.per_participant_train);
            let test = cut(plan.per_participant_test);
            ParticipantIndices { train, test }
        })
        .collect();
    Ok(PartitionIndices { validation, public, participants })
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub validation: LabeledDataset,
    pub public: LabeledDataset,
    /// `(train, test)` per participant.
    pub participants: Vec<(LabeledDataset, LabeledDataset)>,
}

pub fn partition(dataset: &LabeledDataset, plan: &PartitionPlan) -> Result<Partition> {
    let idx = partition_indices(dataset.len(), plan)?;
    Ok(apply_partition(dataset, &idx))
}

pub fn apply_partition(dataset: &LabeledDataset, idx: &PartitionIndices) -> Partition {
    Partition {
        validation: dataset.subset(&idx.validation),
        public: dataset.subset(&idx.public),
        participants: idx
            .participants
            .iter()
            .map(|p| (dataset.subset(&p.train), dataset.subset(&p.test)))
            .collect(),
    }
}

/// Class-balanced procedural grayscale images.
///
/// Class `k` is a sinusoidal grating at orientation `k·π/J` with random
/// frequency, phase and contrast, overlaid with a randomly placed bright
/// blob and pixel noise. Examples are interleaved by class.
pub fn synth_dataset(seed: u64, count: usize, classes: usize, height: usize, width: usize) -> Result<LabeledDataset> {
    if classes == 0 || count == 0 || !count.is_multiple_of(classes) {
        return Err(Error::contract(format!("{count} examples cannot be split evenly over {classes} classes")));
    }
    if height == 0 || width == 0 {
        return Err(Error::contract("image dimensions must be positive"));
    }
    let mut rng = RngStream::new(seed);
    let mut pixels = Vec::with_capacity(count * height * width);
    let mut labels = Vec::with_capacity(count);
    for n in 0..count {
        let class = n % classes;
        let theta = class as f64 * PI / classes as f64 + rng.uniform(-0.25, 0.25);
        let freq = rng.uniform(0.12, 0.28);
        let phase = rng.uniform(0.0, 2.0 * PI);
        let contrast = rng.uniform(0.08, 0.3);
        let (by, bx) = (rng.uniform(0.0, height as f64), rng.uniform(0.0, width as f64));
        let blob_r = rng.uniform(2.0, 6.0);
        let blob_a = rng.uniform(0.0, 0.4);
        let (c, s) = (theta.cos(), theta.sin());
        for y in 0..height {
            for x in 0..width {
                let (fy, fx) = (y as f64, x as f64);
                let t = 2.0 * PI * freq * (fx * c + fy * s) + phase;
                let d2 = (fy - by).powi(2) + (fx - bx).powi(2);
                let v = 0.5 + contrast * t.sin() + blob_a * (-d2 / (2.0 * blob_r * blob_r)).exp() + 0.2 * rng.normal();
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    LabeledDataset::new(pixels, [height, width, 1], labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, fill: u8) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, h, w] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend(std::iter::repeat_n(fill, (n * h * w) as usize));
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_scales_pixels() {
        let ds = dataset_from_idx(&idx_images(2, 2, 3, 255), &idx_labels(&[3, 7])).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape(), &[2, 3, 1]);
        assert!(ds.pixels().iter().all(|&p| p == 1.0));
        assert_eq!(ds.labels(), &[3, 7]);
    }

    #[test]
    fn idx_wrong_magic() {
        // a label file handed over with the image magic
        let mut bad = idx_labels(&[1]);
        bad[..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        let err = dataset_from_idx(&idx_images(1, 1, 1, 0), &bad).unwrap_err();
        assert!(matches!(err, Error::IdxMagic { what: "label file", .. }));
    }

    #[test]
    fn idx_truncated_and_count_mismatch() {
        let mut imgs = idx_images(2, 2, 2, 9);
        imgs.pop();
        assert!(matches!(
            dataset_from_idx(&imgs, &idx_labels(&[0, 1])).unwrap_err(),
            Error::IdxTruncated { .. }
        ));
        assert!(matches!(
            dataset_from_idx(&idx_images(2, 2, 2, 9), &idx_labels(&[0])).unwrap_err(),
            Error::IdxCountMismatch { images: 2, labels: 1 }
        ));
    }

    #[test]
    fn plans_conserve() {
        assert!(PartitionPlan::mnist(0).check(70000).is_ok());
        assert!(PartitionPlan::lung(0).check(15000).is_ok());
        assert!(PartitionPlan::mnist(0).check(70001).is_err());
        let short = PartitionPlan { validation_size: 27999, ..PartitionPlan::mnist(0) };
        let err = short.check(70000).unwrap_err().to_string();
        assert!(err.contains("deficit 1"), "{err}");
    }

    #[test]
    fn synthetic_balanced_and_deterministic() {
        let a = synth_dataset(3, 30, 3, 8, 8).unwrap();
        let b = synth_dataset(3, 30, 3, 8, 8).unwrap();
        assert_eq!(a, b);
        for k in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&l| l == k).count(), 10);
        }
        assert!(a.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(synth_dataset(3, 31, 3, 8, 8).is_err());
    }
}
