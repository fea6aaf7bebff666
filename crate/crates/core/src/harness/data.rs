//! Dataset ingestion: big-endian IDX containers, seeded synthetic
//! template-plus-noise tasks, deterministic splits, and few-shot sampling.

use crate::error::{Error, Result};
use crate::harness::derive_seed;
use crate::tensor::Tensor;
use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Labeled image set stored flat as `[n, c, h, w]` f64 pixels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn from_parts(
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        data: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let pixels = channels * height * width;
        if labels.len() * pixels != data.len() {
            return Err(Error::InvalidInput(format!(
                "{} labels but {} pixels ({} per image)",
                labels.len(),
                data.len(),
                pixels
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            classes,
            data,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.data[i * p..(i + 1) * p]
    }

    /// Assemble a `[b,c,h,w]` batch tensor plus labels for the given rows.
    pub fn batch(&self, idxs: &[usize]) -> (Tensor, Vec<usize>) {
        let p = self.pixels();
        let mut data = Vec::with_capacity(idxs.len() * p);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(
            vec![idxs.len(), self.channels, self.height, self.width],
            data,
        )
        .expect("sized");
        (t, labels)
    }

    pub fn subset(&self, idxs: &[usize]) -> Dataset {
        let p = self.pixels();
        let mut data = Vec::with_capacity(idxs.len() * p);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            data,
            labels,
        }
    }

    fn normalize(&mut self, mean: f64, std: f64) {
        if mean == 0.0 && std == 1.0 {
            return;
        }
        for v in &mut self.data {
            *v = (*v - mean) / std;
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

// ── IDX ─────────────────────────────────────────────────────────────

/// Parse a big-endian IDX image/label file pair; pixels scale to `[0,1]`.
pub fn load_idx(image_path: &std::path::Path, label_path: &std::path::Path) -> Result<Dataset> {
    let image_bytes = std::fs::read(image_path)?;
    let label_bytes = std::fs::read(label_path)?;

    let mut cursor = &image_bytes[..];
    let magic = cursor
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated {
            needed: 4,
            got: image_bytes.len(),
        })?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = read_dim(&mut cursor, &image_bytes)?;
    let rows = read_dim(&mut cursor, &image_bytes)?;
    let cols = read_dim(&mut cursor, &image_bytes)?;
    let needed = 16 + count * rows * cols;
    if image_bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            got: image_bytes.len(),
        });
    }

    let mut lcursor = &label_bytes[..];
    let lmagic = lcursor
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated {
            needed: 4,
            got: label_bytes.len(),
        })?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABEL_MAGIC,
            found: lmagic,
        });
    }
    let lcount = read_dim(&mut lcursor, &label_bytes)?;
    if lcount != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: lcount,
        });
    }
    let lneeded = 8 + lcount;
    if label_bytes.len() < lneeded {
        return Err(Error::Truncated {
            needed: lneeded,
            got: label_bytes.len(),
        });
    }

    let data: Vec<f64> = image_bytes[16..needed]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[8..lneeded].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::from_parts(1, rows, cols, classes, data, labels)
}

fn read_dim(cursor: &mut &[u8], whole: &[u8]) -> Result<usize> {
    cursor
        .read_u32::<BigEndian>()
        .map(|v| v as usize)
        .map_err(|_| Error::Truncated {
            needed: 16,
            got: whole.len(),
        })
}

// ── synthetic ───────────────────────────────────────────────────────

/// Class templates are fixed seeded pixel patterns; each example is its
/// template plus i.i.d. Gaussian pixel noise. Splits are generated disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            per_class: 40,
            image_size: 16,
            channels: 1,
            noise_sigma: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// (train, val, test) fractions; must sum to 1 within 1e-9.
    pub split: (f64, f64, f64),
    pub normalize_mean: f64,
    pub normalize_std: f64,
    /// Shuffle seed used when splitting file-based sources.
    pub split_seed: u64,
}

impl DatasetSpec {
    pub fn synthetic(spec: SynthSpec) -> Self {
        DatasetSpec {
            source: DataSource::Synthetic(spec),
            split: (0.5, 0.25, 0.25),
            normalize_mean: 0.0,
            normalize_std: 1.0,
            split_seed: 0,
        }
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<SplitDataset> {
    let (ft, fv, fe) = spec.split;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split fractions {:?} must be non-negative and sum to 1",
            spec.split
        )));
    }
    let mut out = match &spec.source {
        DataSource::Synthetic(s) => synth_dataset(s, (ft, fv))?,
        DataSource::Idx { images, labels } => {
            let all = load_idx(images, labels)?;
            let mut idxs: Vec<usize> = (0..all.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.split_seed, &[4]));
            idxs.shuffle(&mut rng);
            let n_tr = (ft * all.len() as f64).floor() as usize;
            let n_val = (fv * all.len() as f64).floor() as usize;
            SplitDataset {
                train: all.subset(&idxs[..n_tr]),
                val: all.subset(&idxs[n_tr..n_tr + n_val]),
                test: all.subset(&idxs[n_tr + n_val..]),
            }
        }
    };
    for ds in [&mut out.train, &mut out.val, &mut out.test] {
        ds.normalize(spec.normalize_mean, spec.normalize_std);
    }
    Ok(out)
}

/// Deterministic synthetic task; identical seeds produce bit-identical
/// datasets and the three splits never share an example.
pub fn synth_dataset(spec: &SynthSpec, (ft, fv): (f64, f64)) -> Result<SplitDataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::InvalidInput(
            "synthetic spec dimensions must be positive".into(),
        ));
    }
    let pixels = spec.channels * spec.image_size * spec.image_size;
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1, c as u64]));
            (0..pixels).map(|_| rng.random_range(0.0..1.0)).collect()
        })
        .collect();

    let n_tr = (ft * spec.per_class as f64).floor() as usize;
    let n_val = (fv * spec.per_class as f64).floor() as usize;
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");

    let make = |range: std::ops::Range<usize>| -> Dataset {
        let mut data = Vec::with_capacity(spec.classes * range.len() * pixels);
        let mut labels = Vec::with_capacity(spec.classes * range.len());
        for c in 0..spec.classes {
            for i in range.clone() {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[2, c as u64, i as u64]));
                data.extend(
                    templates[c]
                        .iter()
                        .map(|&t| t + if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 }),
                );
                labels.push(c);
            }
        }
        Dataset {
            channels: spec.channels,
            height: spec.image_size,
            width: spec.image_size,
            classes: spec.classes,
            data,
            labels,
        }
    };

    Ok(SplitDataset {
        train: make(0..n_tr),
        val: make(n_tr..n_tr + n_val),
        test: make(n_tr + n_val..spec.per_class),
    })
}

// ── few-shot sampling ───────────────────────────────────────────────

/// Exactly `k` examples per class, chosen by seeded shuffle without
/// replacement; evaluation splits are untouched.
pub fn few_shot_sample(train: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    let mut picked = Vec::with_capacity(k * train.classes);
    for c in 0..train.classes {
        let mut pool: Vec<usize> = (0..train.len()).filter(|&i| train.label(i) == c).collect();
        if pool.len() < k {
            return Err(Error::InsufficientExamples {
                class: c,
                have: pool.len(),
                need: k,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, c as u64]));
        pool.shuffle(&mut rng);
        picked.extend_from_slice(&pool[..k]);
    }
    Ok(train.subset(&picked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::{BigEndian, WriteBytesExt};

    fn write_idx_pair(
        dir: &std::path::Path,
        magic_img: u32,
        magic_lbl: u32,
        count_img: u32,
        count_lbl: u32,
    ) -> (PathBuf, PathBuf) {
        let rows = 2u32;
        let cols = 3u32;
        let img_path = dir.join("images.idx");
        let lbl_path = dir.join("labels.idx");
        let mut img = Vec::new();
        img.write_u32::<BigEndian>(magic_img).unwrap();
        img.write_u32::<BigEndian>(count_img).unwrap();
        img.write_u32::<BigEndian>(rows).unwrap();
        img.write_u32::<BigEndian>(cols).unwrap();
        for i in 0..count_img * rows * cols {
            img.push((i % 251) as u8);
        }
        std::fs::write(&img_path, img).unwrap();
        let mut lbl = Vec::new();
        lbl.write_u32::<BigEndian>(magic_lbl).unwrap();
        lbl.write_u32::<BigEndian>(count_lbl).unwrap();
        for i in 0..count_lbl {
            lbl.push((i % 2) as u8);
        }
        std::fs::write(&lbl_path, lbl).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn idx_roundtrip_of_handcrafted_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) =
            write_idx_pair(dir.path(), IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, 2, 2);
        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!((ds.height, ds.width), (2, 3));
        assert_eq!(ds.label(0), 0);
        assert_eq!(ds.label(1), 1);
        assert!((ds.image(0)[1] - 1.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn idx_label_file_with_image_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) =
            write_idx_pair(dir.path(), IDX_IMAGE_MAGIC, IDX_IMAGE_MAGIC, 2, 2);
        match load_idx(&img, &lbl) {
            Err(Error::BadMagic { expected, found }) => {
                assert_eq!(expected, IDX_LABEL_MAGIC);
                assert_eq!(found, IDX_IMAGE_MAGIC);
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) =
            write_idx_pair(dir.path(), IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, 2, 3);
        assert!(matches!(
            load_idx(&img, &lbl),
            Err(Error::CountMismatch {
                images: 2,
                labels: 3
            })
        ));
    }

    #[test]
    fn idx_truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) =
            write_idx_pair(dir.path(), IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, 2, 2);
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(Error::Truncated { .. })));
    }

    #[test]
    fn noiseless_synthetic_classes_are_their_templates() {
        let spec = SynthSpec {
            classes: 4,
            per_class: 8,
            image_size: 8,
            channels: 1,
            noise_sigma: 0.0,
            seed: 9,
        };
        let split = synth_dataset(&spec, (0.5, 0.25)).unwrap();
        // every train image of a class equals every test image of the class
        for c in 0..4 {
            let train_img = (0..split.train.len())
                .find(|&i| split.train.label(i) == c)
                .map(|i| split.train.image(i).to_vec())
                .unwrap();
            for i in 0..split.test.len() {
                if split.test.label(i) == c {
                    assert_eq!(split.test.image(i), &train_img[..]);
                }
            }
        }
        // 1-NN on the noiseless task is perfect
        let mut correct = 0;
        for i in 0..split.test.len() {
            let img = split.test.image(i);
            let mut best = (f64::INFINITY, 0);
            for j in 0..split.train.len() {
                let d: f64 = split
                    .train
                    .image(j)
                    .iter()
                    .zip(img)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, split.train.label(j));
                }
            }
            if best.1 == split.test.label(i) {
                correct += 1;
            }
        }
        assert_eq!(correct, split.test.len());
    }

    #[test]
    fn same_seed_regenerates_bit_identical_dataset() {
        let spec = SynthSpec::default();
        let a = synth_dataset(&spec, (0.5, 0.25)).unwrap();
        let b = synth_dataset(&spec, (0.5, 0.25)).unwrap();
        assert_eq!(a.train.data, b.train.data);
        assert_eq!(a.test.data, b.test.data);
        assert_eq!(a.train.labels, b.train.labels);
    }

    #[test]
    fn few_shot_sampling_counts_and_determinism() {
        let spec = SynthSpec {
            classes: 10,
            per_class: 20,
            ..SynthSpec::default()
        };
        let split = synth_dataset(&spec, (0.5, 0.25)).unwrap();
        let a = few_shot_sample(&split.train, 5, 0).unwrap();
        assert_eq!(a.len(), 50);
        for c in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 5);
        }
        let b = few_shot_sample(&split.train, 5, 0).unwrap();
        assert_eq!(a.data, b.data);
        let c = few_shot_sample(&split.train, 5, 1).unwrap();
        assert_ne!(a.data, c.data, "different seeds pick different subsets");
    }

    #[test]
    fn few_shot_insufficient_examples_errors() {
        let spec = SynthSpec {
            classes: 3,
            per_class: 4,
            ..SynthSpec::default()
        };
        let split = synth_dataset(&spec, (0.5, 0.25)).unwrap();
        assert!(matches!(
            few_shot_sample(&split.train, 5, 0),
            Err(Error::InsufficientExamples { need: 5, .. })
        ));
    }

    #[test]
    fn splits_are_disjoint_for_noisy_data() {
        let spec = SynthSpec::default();
        let split = synth_dataset(&spec, (0.5, 0.25)).unwrap();
        assert_eq!(split.train.len(), 200);
        assert_eq!(split.val.len(), 100);
        assert_eq!(split.test.len(), 100);
        // with noise, identical pixel rows across splits would be a bug
        for i in 0..split.train.len().min(20) {
            for j in 0..split.test.len().min(20) {
                assert_ne!(split.train.image(i), split.test.image(j));
            }
        }
    }
}
