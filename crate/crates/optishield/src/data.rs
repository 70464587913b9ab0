//! Attribute-labeled grayscale corpora: CelebA-layout loading, preprocessing,
//! and a deterministic synthetic toy corpus for desk-scale experiments.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};

/// One grayscale image with its named binary attributes.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Stable identifier (file name for disk corpora, index tag for toys).
    pub id: String,
    /// Grayscale image in [0, 1], `input_size` resolution.
    pub image: Array2<f32>,
    pub attributes: BTreeMap<String, u8>,
}

impl Sample {
    pub fn label(&self, attribute: &str) -> Result<u8> {
        self.attributes
            .get(attribute)
            .copied()
            .ok_or_else(|| Error::Dataset(format!("attribute {attribute:?} not present on sample {}", self.id)))
    }
}

/// Desired/sensitive attribute selection for one experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributePair {
    pub desired: String,
    pub sensitive: String,
}

impl AttributePair {
    pub fn validate(&self, split: &DatasetSplit) -> Result<()> {
        if self.desired == self.sensitive {
            return Err(Error::Config(
                "desired and sensitive attributes must be distinct".into(),
            ));
        }
        for attr in [&self.desired, &self.sensitive] {
            if let Some(sample) = split.train.first() {
                sample.label(attr)?;
            }
        }
        Ok(())
    }
}

/// Disjoint train/val/test partitions.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl DatasetSplit {
    pub fn split(&self, kind: SplitKind) -> &[Sample] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Gathers the images of `samples[indices]` into an `[n, h, w]` batch.
pub fn gather_images(samples: &[Sample], indices: &[usize]) -> Array3<f32> {
    let (h, w) = samples[0].image.dim();
    let mut out = Array3::zeros((indices.len(), h, w));
    for (slot, &i) in indices.iter().enumerate() {
        out.index_axis_mut(Axis(0), slot).assign(&samples[i].image);
    }
    out
}

/// Collects one attribute's labels over a slice of samples.
pub fn gather_labels(samples: &[Sample], attribute: &str) -> Result<Vec<u8>> {
    samples.iter().map(|s| s.label(attribute)).collect()
}

/// Accuracy of the blind majority-class detector: `max(p, 1-p)`.
pub fn trivial_accuracy(labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Dataset("trivial_accuracy of an empty label list".into()));
    }
    let p = labels.iter().map(|&l| l as f64).sum::<f64>() / labels.len() as f64;
    Ok(p.max(1.0 - p))
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

const CROP: usize = 170;
const TARGET: usize = 64;

/// Bilinear resize with half-pixel sample centers and edge clamping.
pub(crate) fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let scale_r = h as f32 / out_h as f32;
    let scale_c = w as f32 / out_w as f32;
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let sr = ((r as f32 + 0.5) * scale_r - 0.5).clamp(0.0, (h - 1) as f32);
        let sc = ((c as f32 + 0.5) * scale_c - 0.5).clamp(0.0, (w - 1) as f32);
        let r0 = sr.floor() as usize;
        let c0 = sc.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        let fr = sr - r0 as f32;
        let fc = sc - c0 as f32;
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bot = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bot * fr
    })
}

/// Applies the corpus preprocessing: center-crop 170x170, bilinear resize to
/// 64x64, BT.601 grayscale, values in [0, 1].
pub fn preprocess_image(raw: &image::DynamicImage) -> Result<Array2<f32>> {
    let (w, h) = (raw.width() as usize, raw.height() as usize);
    if h < CROP || w < CROP {
        return Err(Error::Dataset(format!(
            "image {w}x{h} smaller than the {CROP}x{CROP} crop window"
        )));
    }
    let rgb = raw.to_rgb8();
    let r0 = (h - CROP) / 2;
    let c0 = (w - CROP) / 2;

    let channel = |idx: usize| -> Array2<f32> {
        Array2::from_shape_fn((CROP, CROP), |(r, c)| {
            rgb.get_pixel((c0 + c) as u32, (r0 + r) as u32).0[idx] as f32 / 255.0
        })
    };
    let red = resize_bilinear(&channel(0), TARGET, TARGET);
    let green = resize_bilinear(&channel(1), TARGET, TARGET);
    let blue = resize_bilinear(&channel(2), TARGET, TARGET);

    // BT.601 luma; coefficients sum to 1 so the output stays in [0, 1].
    let gray = Array2::from_shape_fn((TARGET, TARGET), |(r, c)| {
        0.299 * red[[r, c]] + 0.587 * green[[r, c]] + 0.114 * blue[[r, c]]
    });
    Ok(gray)
}

// ---------------------------------------------------------------------------
// CelebA-layout loader
// ---------------------------------------------------------------------------

/// Where the train/val/test assignment comes from.
#[derive(Clone, Debug)]
pub enum PartitionSource {
    /// Official partition file: one `image_id 0|1|2` row per image.
    OfficialFile(std::path::PathBuf),
    /// Deterministic ratio split of the filename-sorted corpus.
    Ratios { train: f64, val: f64, seed: u64 },
}

struct AttributeTable {
    names: Vec<String>,
    /// (filename, flags) rows sorted by filename.
    rows: Vec<(String, Vec<u8>)>,
}

fn parse_attribute_table(path: &Path) -> Result<AttributeTable> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut header = lines
        .next()
        .ok_or_else(|| Error::Dataset("attribute table is empty".into()))?;
    // CelebA prefixes the header with a row count line.
    if header.trim().parse::<usize>().is_ok() {
        header = lines
            .next()
            .ok_or_else(|| Error::Dataset("attribute table has no header row".into()))?;
    }
    let names: Vec<String> = header.split_whitespace().map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::Dataset("attribute table header has no attribute names".into()));
    }

    let mut rows = Vec::new();
    for line in lines {
        let mut fields = line.split_whitespace();
        let file = fields
            .next()
            .ok_or_else(|| Error::Dataset("attribute row without a filename".into()))?
            .to_string();
        let flags: Result<Vec<u8>> = fields
            .map(|f| match f {
                "1" | "+1" => Ok(1u8),
                "-1" => Ok(0u8),
                other => Err(Error::Dataset(format!(
                    "malformed attribute flag {other:?} for {file}"
                ))),
            })
            .collect();
        let flags = flags?;
        if flags.len() != names.len() {
            return Err(Error::Dataset(format!(
                "row for {file} has {} flags, expected {}",
                flags.len(),
                names.len()
            )));
        }
        rows.push((file, flags));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(AttributeTable { names, rows })
}

fn parse_partition_file(path: &Path) -> Result<BTreeMap<String, u8>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut fields = line.split_whitespace();
        let file = fields
            .next()
            .ok_or_else(|| Error::Dataset("partition row without a filename".into()))?;
        let part = fields
            .next()
            .ok_or_else(|| Error::Dataset(format!("partition row for {file} has no split id")))?;
        let part: u8 = part
            .parse()
            .map_err(|_| Error::Dataset(format!("bad split id {part:?} for {file}")))?;
        if part > 2 {
            return Err(Error::Dataset(format!("split id {part} out of range for {file}")));
        }
        map.insert(file.to_string(), part);
    }
    Ok(map)
}

/// Ratio split sizes: train and val round to the nearest integer, the rest is
/// the test split.
fn ratio_sizes(n: usize, train: f64, val: f64) -> (usize, usize) {
    let n_train = (n as f64 * train).round() as usize;
    let n_val = (n as f64 * val).round() as usize;
    (n_train.min(n), n_val.min(n - n_train.min(n)))
}

/// Loads a CelebA-layout corpus: an image directory plus a whitespace
/// attribute table with `±1` flags (`-1` maps to label 0).
///
/// Rows are processed in filename order; image decoding runs on worker
/// threads but the resulting order is independent of the worker count.
pub fn load_attribute_corpus(
    image_dir: &Path,
    attribute_table_path: &Path,
    partition: PartitionSource,
) -> Result<DatasetSplit> {
    load_attribute_corpus_subset(image_dir, attribute_table_path, partition, None)
}

/// Same as [`load_attribute_corpus`] but keeps only the first `limit` rows
/// (filename order) when given; used for scaled-down experiments.
pub fn load_attribute_corpus_subset(
    image_dir: &Path,
    attribute_table_path: &Path,
    partition: PartitionSource,
    limit: Option<usize>,
) -> Result<DatasetSplit> {
    let table = parse_attribute_table(attribute_table_path)?;
    let mut rows = table.rows;
    if let Some(limit) = limit {
        rows.truncate(limit);
    }

    let samples: Result<Vec<Sample>> = rows
        .par_iter()
        .map(|(file, flags)| {
            let path = image_dir.join(file);
            if !path.exists() {
                return Err(Error::Dataset(format!(
                    "image file {} listed in the attribute table is missing",
                    path.display()
                )));
            }
            let img = image::open(&path)?;
            let gray = preprocess_image(&img)?;
            let attributes = table
                .names
                .iter()
                .cloned()
                .zip(flags.iter().copied())
                .collect();
            Ok(Sample { id: file.clone(), image: gray, attributes })
        })
        .collect();
    let samples = samples?;

    match partition {
        PartitionSource::OfficialFile(path) => {
            let map = parse_partition_file(&path)?;
            let mut split = DatasetSplit::default();
            for sample in samples {
                let part = map.get(&sample.id).copied().ok_or_else(|| {
                    Error::Dataset(format!("sample {} missing from the partition file", sample.id))
                })?;
                match part {
                    0 => split.train.push(sample),
                    1 => split.val.push(sample),
                    _ => split.test.push(sample),
                }
            }
            Ok(split)
        }
        PartitionSource::Ratios { train, val, seed } => {
            if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 {
                return Err(Error::Config("split ratios must be in [0,1] and sum to <= 1".into()));
            }
            let mut order: Vec<usize> = (0..samples.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            let (n_train, n_val) = ratio_sizes(samples.len(), train, val);
            let mut indexed: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
            let mut split = DatasetSplit::default();
            for (pos, &i) in order.iter().enumerate() {
                let sample = indexed[i].take().expect("each index visited once");
                if pos < n_train {
                    split.train.push(sample);
                } else if pos < n_train + n_val {
                    split.val.push(sample);
                } else {
                    split.test.push(sample);
                }
            }
            Ok(split)
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic toy corpus
// ---------------------------------------------------------------------------

pub const TOY_DESIRED_ATTR: &str = "blob_side";
pub const TOY_SENSITIVE_ATTR: &str = "stripe_orient";
pub const TOY_SPEC_VERSION: u32 = 1;

const BLOB_SIGMA: f32 = 6.0;
const BLOB_AMPLITUDE: f32 = 0.5;
const GRATING_CYCLES: f32 = 8.0;
const GRATING_AMPLITUDE: f32 = 0.3;
const BASE_LEVEL: f32 = 0.2;
const NOISE_SIGMA: f32 = 0.02;

fn toy_image(desired: u8, sensitive: u8, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");
    let (cx, cy) = if desired == 0 { (16.0f32, 32.0f32) } else { (48.0, 32.0) };
    let mut img = Array2::zeros((TARGET, TARGET));
    for r in 0..TARGET {
        for c in 0..TARGET {
            let dy = r as f32 - cy;
            let dx = c as f32 - cx;
            let blob = BLOB_AMPLITUDE * (-(dx * dx + dy * dy) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
            // Horizontal stripes vary along rows; vertical ones along columns.
            let t = if sensitive == 0 { r as f32 } else { c as f32 };
            let grating = GRATING_AMPLITUDE
                * (2.0 * std::f32::consts::PI * GRATING_CYCLES * t / TARGET as f32).sin();
            let v = BASE_LEVEL + blob + grating + noise.sample(rng);
            img[[r, c]] = v.clamp(0.0, 1.0);
        }
    }
    img
}

/// Generates the deterministic synthetic corpus: a Gaussian blob on the left
/// or right half carries the desired attribute, a horizontal or vertical
/// sinusoidal grating carries the sensitive one. The two labels are balanced
/// and independent by construction.
pub fn synthesize_toy(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 10 {
        return Err(Error::Config(format!("toy corpus needs n >= 10, got {n}")));
    }
    // Cycle of combinations keeps both marginals balanced and the joint
    // distribution exactly independent for n divisible by 4.
    const COMBOS: [(u8, u8); 4] = [(0, 0), (1, 1), (0, 1), (1, 0)];

    let mut samples: Vec<Sample> = (0..n)
        .map(|i| {
            let (desired, sensitive) = COMBOS[i % 4];
            // Per-sample stream keeps pixel data independent of iteration order.
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
            let image = toy_image(desired, sensitive, &mut rng);
            let mut attributes = BTreeMap::new();
            attributes.insert(TOY_DESIRED_ATTR.to_string(), desired);
            attributes.insert(TOY_SENSITIVE_ATTR.to_string(), sensitive);
            Sample { id: format!("toy-{i:06}"), image, attributes }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5851_f42d_4c95_7f2d));
    samples.shuffle(&mut rng);

    let (n_train, n_val) = ratio_sizes(n, 0.8, 0.1);
    let mut split = DatasetSplit::default();
    for (pos, sample) in samples.into_iter().enumerate() {
        if pos < n_train {
            split.train.push(sample);
        } else if pos < n_train + n_val {
            split.val.push(sample);
        } else {
            split.test.push(sample);
        }
    }
    Ok(split)
}

/// Manifest stored alongside a cached toy corpus.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ToyManifest {
    pub seed: u64,
    pub n: usize,
    pub spec_version: u32,
}

/// Writes a dataset split to a single container file (images plus per-split
/// label arrays, ids in the metadata).
pub fn save_split(split: &DatasetSplit, manifest: &serde_json::Value, path: &Path) -> Result<()> {
    let mut container = Container::new(manifest.clone());
    let mut meta_ids = serde_json::Map::new();
    for (name, samples) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        if samples.is_empty() {
            continue;
        }
        let indices: Vec<usize> = (0..samples.len()).collect();
        container.insert(&format!("{name}/images"), gather_images(samples, &indices));
        let attr_names: Vec<String> = samples[0].attributes.keys().cloned().collect();
        for attr in &attr_names {
            let labels = gather_labels(samples, attr)?;
            container.insert(
                &format!("{name}/labels/{attr}"),
                ndarray::Array1::from_vec(labels.iter().map(|&l| l as f32).collect()),
            );
        }
        let ids: Vec<serde_json::Value> =
            samples.iter().map(|s| serde_json::Value::String(s.id.clone())).collect();
        meta_ids.insert(name.to_string(), serde_json::Value::Array(ids));
    }
    let mut meta = container.meta.clone();
    if let serde_json::Value::Object(map) = &mut meta {
        map.insert("ids".into(), serde_json::Value::Object(meta_ids));
    }
    container.meta = meta;
    container.save(path)
}

/// Loads a split saved by [`save_split`].
pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    let container = Container::load(path)?;
    let mut split = DatasetSplit::default();
    for name in ["train", "val", "test"] {
        let images = match container.get(&format!("{name}/images")) {
            Ok(t) => t,
            Err(_) => continue,
        };
        let images = images
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::Integrity(format!("{name}/images: {e}")))?;
        let attrs: Vec<String> = container
            .names()
            .filter_map(|t| t.strip_prefix(&format!("{name}/labels/")).map(str::to_string))
            .collect();
        let ids = container.meta["ids"][name].as_array().cloned().unwrap_or_default();
        let n = images.dim().0;
        let samples = match name {
            "train" => &mut split.train,
            "val" => &mut split.val,
            _ => &mut split.test,
        };
        for i in 0..n {
            let mut attributes = BTreeMap::new();
            for attr in &attrs {
                let labels = container.get(&format!("{name}/labels/{attr}"))?;
                attributes.insert(attr.clone(), labels[[i]] as u8);
            }
            let id = ids
                .get(i)
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .unwrap_or_else(|| format!("{name}-{i:06}"));
            samples.push(Sample {
                id,
                image: images.index_axis(Axis(0), i).to_owned(),
                attributes,
            });
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_accuracy_examples() {
        assert_eq!(trivial_accuracy(&[1, 1, 1, 0]).unwrap(), 0.75);
        // Mirrors the corpus-level gender imbalance arithmetic.
        let mut labels = vec![1u8; 613];
        labels.extend(vec![0u8; 387]);
        assert!((trivial_accuracy(&labels).unwrap() - 0.613).abs() < 1e-12);
        let balanced = vec![0u8, 1];
        assert_eq!(trivial_accuracy(&balanced).unwrap(), 0.5);
        assert!(trivial_accuracy(&[]).is_err());
    }

    #[test]
    fn trivial_accuracy_bounds() {
        for labels in [vec![0u8; 5], vec![1u8; 9], vec![0, 1, 1, 0, 1]] {
            let t = trivial_accuracy(&labels).unwrap();
            assert!((0.5..=1.0).contains(&t));
        }
    }

    #[test]
    fn resize_bilinear_hand_computed() {
        // Column ramp 0,1,2,3: output columns average adjacent pairs.
        let src = Array2::from_shape_fn((4, 4), |(_, c)| c as f32);
        let out = resize_bilinear(&src, 2, 2);
        assert_eq!(out, ndarray::array![[0.5f32, 2.5], [0.5, 2.5]]);

        // Checkerboard averages to a flat 0.5 at 2x downsampling.
        let board = Array2::from_shape_fn((4, 4), |(r, c)| ((r + c) % 2) as f32);
        let out = resize_bilinear(&board, 2, 2);
        assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn preprocess_constant_white_is_one() {
        let img = image::DynamicImage::ImageRgb8(image::RgbImage::from_pixel(
            178,
            218,
            image::Rgb([255, 255, 255]),
        ));
        let out = preprocess_image(&img).unwrap();
        assert_eq!(out.dim(), (64, 64));
        assert!(out.iter().all(|&v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn preprocess_celeba_native_size() {
        let img = image::DynamicImage::ImageRgb8(image::RgbImage::from_fn(178, 218, |x, y| {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, 64])
        }));
        let out = preprocess_image(&img).unwrap();
        assert_eq!(out.dim(), (64, 64));
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn preprocess_rejects_small_images() {
        let img = image::DynamicImage::ImageRgb8(image::RgbImage::new(100, 300));
        assert!(matches!(preprocess_image(&img), Err(Error::Dataset(_))));
    }

    #[test]
    fn toy_corpus_is_balanced_and_deterministic() {
        let a = synthesize_toy(1000, 5).unwrap();
        let b = synthesize_toy(1000, 5).unwrap();
        assert_eq!(a.sizes(), (800, 100, 100));

        let mut all: Vec<&Sample> = a.train.iter().chain(&a.val).chain(&a.test).collect();
        all.sort_by(|x, y| x.id.cmp(&y.id));
        let desired: usize = all.iter().map(|s| s.label(TOY_DESIRED_ATTR).unwrap() as usize).sum();
        let sensitive: usize =
            all.iter().map(|s| s.label(TOY_SENSITIVE_ATTR).unwrap() as usize).sum();
        assert_eq!(desired, 500);
        assert_eq!(sensitive, 500);

        // Same seed, same pixels.
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn toy_labels_independent_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let split = synthesize_toy(10_000, 9).unwrap();
        let all: Vec<&Sample> = split.train.iter().chain(&split.val).chain(&split.test).collect();
        let mut counts = [[0f64; 2]; 2];
        for s in &all {
            let d = s.label(TOY_DESIRED_ATTR).unwrap() as usize;
            let y = s.label(TOY_SENSITIVE_ATTR).unwrap() as usize;
            counts[d][y] += 1.0;
        }
        let n = all.len() as f64;
        let mut chi2 = 0.0;
        for d in 0..2 {
            for y in 0..2 {
                let row: f64 = counts[d].iter().sum();
                let col: f64 = counts[0][y] + counts[1][y];
                let expected = row * col / n;
                chi2 += (counts[d][y] - expected).powi(2) / expected;
            }
        }
        let p = 1.0 - ChiSquared::new(1.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }

    #[test]
    fn toy_rejects_tiny_n() {
        assert!(matches!(synthesize_toy(9, 1), Err(Error::Config(_))));
    }

    #[test]
    fn toy_images_in_unit_interval() {
        let split = synthesize_toy(40, 3).unwrap();
        for s in &split.train {
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.image.dim(), (64, 64));
        }
    }

    /// Independent oracle for the corpus design: plain logistic regression on
    /// raw pixels must detect both attributes almost perfectly.
    #[test]
    fn toy_attributes_linearly_detectable() {
        let split = synthesize_toy(1000, 11).unwrap();
        for attr in [TOY_DESIRED_ATTR, TOY_SENSITIVE_ATTR] {
            let acc = logistic_regression_accuracy(&split, attr);
            assert!(acc >= 0.95, "{attr}: linear probe accuracy {acc}");
        }
    }

    fn logistic_regression_accuracy(split: &DatasetSplit, attr: &str) -> f64 {
        let dim = 64 * 64;
        let mut w = vec![0f32; dim];
        let mut b = 0f32;
        let lr = 0.5f32;
        for _epoch in 0..20 {
            for s in &split.train {
                let x = s.image.as_slice().unwrap();
                let y = s.label(attr).unwrap() as f32;
                let z: f32 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f32>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                let g = p - y;
                for (wi, xi) in w.iter_mut().zip(x) {
                    *wi -= lr * g * xi / dim as f32;
                }
                b -= lr * g * 0.01;
            }
        }
        let mut correct = 0usize;
        for s in &split.test {
            let x = s.image.as_slice().unwrap();
            let z: f32 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f32>() + b;
            let pred = u8::from(z > 0.0);
            if pred == s.label(attr).unwrap() {
                correct += 1;
            }
        }
        correct as f64 / split.test.len() as f64
    }

    #[test]
    fn attribute_table_and_partition_loading() {
        let dir = tempfile::tempdir().unwrap();
        let img_dir = dir.path().join("img");
        std::fs::create_dir(&img_dir).unwrap();
        for i in 0..10 {
            let img = image::RgbImage::from_pixel(178, 218, image::Rgb([(i * 20) as u8, 128, 30]));
            img.save(img_dir.join(format!("{i:03}.jpg"))).unwrap();
        }
        let mut table = String::from("10\nSmiling Male\n");
        for i in 0..10 {
            let s = if i % 2 == 0 { "1" } else { "-1" };
            let m = if i < 4 { "1" } else { "-1" };
            table.push_str(&format!("{i:03}.jpg {s} {m}\n"));
        }
        let table_path = dir.path().join("attrs.txt");
        std::fs::write(&table_path, &table).unwrap();

        // Ratio split: 10 rows at (0.8, 0.1, 0.1) gives 8/1/1.
        let split = load_attribute_corpus(
            &img_dir,
            &table_path,
            PartitionSource::Ratios { train: 0.8, val: 0.1, seed: 3 },
        )
        .unwrap();
        assert_eq!(split.sizes(), (8, 1, 1));
        // "-1" maps to 0.
        let all: Vec<&Sample> = split.train.iter().chain(&split.val).chain(&split.test).collect();
        let smiling_sum: u8 = all.iter().map(|s| s.label("Smiling").unwrap()).sum();
        assert_eq!(smiling_sum, 5);

        // Official partition file.
        let mut part = String::new();
        for i in 0..10 {
            part.push_str(&format!("{i:03}.jpg {}\n", if i < 6 { 0 } else if i < 8 { 1 } else { 2 }));
        }
        let part_path = dir.path().join("partition.txt");
        std::fs::write(&part_path, part).unwrap();
        let split = load_attribute_corpus(
            &img_dir,
            &table_path,
            PartitionSource::OfficialFile(part_path),
        )
        .unwrap();
        assert_eq!(split.sizes(), (6, 2, 2));
        // Deterministic filename ordering within splits.
        assert_eq!(split.train[0].id, "000.jpg");
        assert_eq!(split.test[1].id, "009.jpg");
    }

    #[test]
    fn missing_image_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img_dir = dir.path().join("img");
        std::fs::create_dir(&img_dir).unwrap();
        let table_path = dir.path().join("attrs.txt");
        std::fs::write(&table_path, "Smiling\nmissing.jpg 1\n").unwrap();
        let out = load_attribute_corpus(
            &img_dir,
            &table_path,
            PartitionSource::Ratios { train: 0.8, val: 0.1, seed: 0 },
        );
        assert!(matches!(out, Err(Error::Dataset(_))));
    }

    #[test]
    fn malformed_flag_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let table_path = dir.path().join("attrs.txt");
        std::fs::write(&table_path, "Smiling\na.jpg maybe\n").unwrap();
        let out = load_attribute_corpus(
            dir.path(),
            &table_path,
            PartitionSource::Ratios { train: 0.8, val: 0.1, seed: 0 },
        );
        assert!(matches!(out, Err(Error::Dataset(_))));
    }

    #[test]
    fn split_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.tns");
        let split = synthesize_toy(40, 21).unwrap();
        let manifest = serde_json::json!({"seed": 21, "n": 40, "spec_version": TOY_SPEC_VERSION});
        save_split(&split, &manifest, &path).unwrap();
        let back = load_split(&path).unwrap();
        assert_eq!(back.sizes(), split.sizes());
        for (a, b) in split.train.iter().zip(&back.train) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.attributes, b.attributes);
            assert_eq!(a.image, b.image);
        }
    }
}
