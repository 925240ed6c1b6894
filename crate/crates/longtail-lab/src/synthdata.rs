//! Deterministic synthetic long-tail proposal features.
//!
//! Each foreground category gets a fixed prototype vector; proposals are the
//! prototype plus isotropic Gaussian noise. Prototypes share a constant
//! "objectness" offset so foreground is linearly separable from background,
//! which forms its own more diffuse cluster at the origin. Train proposals
//! are packed into pseudo-images so image-level samplers have something to
//! resample; the eval split is balanced per class.
//!
//! On disk a dataset is `manifest.json` (config echo, catalog, record table)
//! plus `features.bin` (row-major little-endian f32, one row per record in
//! record-table order, train rows first).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::gauss::standard_normal;

use crate::catalog::{bin_of, ClassCatalog, BACKGROUND};
use crate::error::{Error, Result};

/// Truncated power-law over per-class counts: class `j` (1-based) gets
/// `clamp(round(max_count * j^-zipf_exponent), min_count, max_count)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountLaw {
    pub zipf_exponent: f64,
    pub min_count: u64,
    pub max_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_foreground: usize,
    pub feature_dim: usize,
    pub count_law: CountLaw,
    /// Radius of the class-prototype cloud.
    pub prototype_scale: f64,
    /// Per-feature Gaussian noise around the prototype.
    pub noise_sigma: f64,
    pub proposals_per_image: usize,
    /// Fraction of background proposals per image, in [0, 1).
    pub bg_fraction: f64,
    /// Held-out eval records per foreground class.
    pub eval_per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// The repository's reference benchmark: 100 classes with counts
    /// spanning 5..5000 over 64-dimensional features.
    fn default() -> Self {
        SynthConfig {
            num_foreground: 100,
            feature_dim: 64,
            count_law: CountLaw { zipf_exponent: 1.5, min_count: 5, max_count: 5000 },
            prototype_scale: 8.0,
            noise_sigma: 3.2,
            proposals_per_image: 64,
            bg_fraction: 0.75,
            eval_per_class: 20,
            seed: 11,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_foreground == 0 {
            return Err(Error::config("num_foreground must be at least 1"));
        }
        if self.feature_dim < 2 {
            return Err(Error::config("feature_dim must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.bg_fraction) {
            return Err(Error::config("bg_fraction must lie in [0, 1)"));
        }
        if self.count_law.min_count < 1 || self.count_law.max_count < self.count_law.min_count {
            return Err(Error::config("count law requires 1 <= min_count <= max_count"));
        }
        if self.eval_per_class < 1 {
            return Err(Error::config("eval_per_class must be at least 1"));
        }
        if self.proposals_per_image < 2 {
            return Err(Error::config("proposals_per_image must be at least 2"));
        }
        let fg_per_image =
            self.proposals_per_image - (self.bg_fraction * self.proposals_per_image as f64).floor() as usize;
        if fg_per_image == 0 {
            return Err(Error::config("bg_fraction leaves no foreground slots per image"));
        }
        Ok(())
    }

    /// Per-class train counts under the count law, non-increasing in class id.
    pub fn class_counts(&self) -> Vec<u64> {
        (1..=self.num_foreground as u64)
            .map(|j| {
                let raw = (self.count_law.max_count as f64 * (j as f64).powf(-self.count_law.zipf_exponent)).round();
                (raw as u64).clamp(self.count_law.min_count, self.count_law.max_count)
            })
            .collect()
    }
}

/// Number of background eval records, relative to the per-class quota.
/// Background dominates proposal classification, so it gets a larger slice.
const EVAL_BG_MULTIPLIER: usize = 10;

/// How many distinct foreground categories co-occur in one pseudo-image.
const CLASSES_PER_IMAGE: usize = 3;

/// Background noise spread relative to foreground noise.
const BG_NOISE_MULTIPLIER: f64 = 2.0;

/// Every foreground prototype is shifted by this constant per-dimension
/// "objectness" offset (in units of `prototype_scale`), so foreground and
/// background are linearly separable -- but only with a learned margin.
const OBJECTNESS_OFFSET: f64 = 1.2;

/// A split of proposal records stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Records {
    pub feature_dim: usize,
    /// Row-major features, `len() * feature_dim` entries.
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
    /// Pseudo-image id per record; -1 for eval records.
    pub image_ids: Vec<i64>,
}

impl Records {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub catalog: ClassCatalog,
    pub train: Records,
    pub eval: Records,
    /// Train record indices grouped by pseudo-image, in image-id order.
    pub images: Vec<Vec<usize>>,
}

/// Generate a dataset fully determined by `config` (including its seed).
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let c = config.num_foreground;
    let d = config.feature_dim;
    let counts = config.class_counts();
    let catalog = ClassCatalog::new(counts.clone())?;

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);

    // Foreground prototypes share a constant offset per dimension -- an
    // "objectness" direction, like the one a detector's feature extractor
    // learns -- with per-class Gaussian displacement around it. Background
    // sits at the origin with a wider spread.
    let prototypes: Vec<f64> = (0..c * d)
        .map(|_| (OBJECTNESS_OFFSET + standard_normal(&mut rng)) * config.prototype_scale)
        .collect();
    let bg_sigma = config.noise_sigma * BG_NOISE_MULTIPLIER;

    // Features pass through f32 so in-memory values equal their on-disk form.
    let quantize = |v: f64| v as f32 as f64;

    let per_image = config.proposals_per_image;
    let base_bg = (config.bg_fraction * per_image as f64).floor() as usize;
    let fg_per_image = per_image - base_bg;
    let total_fg: u64 = counts.iter().sum();
    let num_images = (total_fg as usize + fg_per_image - 1) / fg_per_image;
    let deficit = num_images * fg_per_image - total_fg as usize;

    let mut remaining = counts.clone();
    let mut remaining_total = total_fg;
    let mut train = Records { feature_dim: d, features: Vec::new(), labels: Vec::new(), image_ids: Vec::new() };
    let mut images = Vec::with_capacity(num_images);

    for image_id in 0..num_images {
        // Spread the foreground deficit over the first images as one extra
        // background proposal each, keeping every image at full size.
        let extra_bg = usize::from(image_id < deficit);
        let fg_quota = fg_per_image - extra_bg;
        let bg_quota = base_bg + extra_bg;

        let start = train.labels.len();
        let mut active: Vec<usize> = Vec::new();
        let mut filled = 0usize;
        while filled < fg_quota {
            if active.iter().all(|&j| remaining[j] == 0) {
                active.push(sample_weighted_class(&remaining, &active, remaining_total, &mut rng));
            } else if active.len() < CLASSES_PER_IMAGE {
                let excluded: u64 = active.iter().map(|&j| remaining[j]).sum();
                if remaining_total > excluded {
                    active.push(sample_weighted_class(&remaining, &active, remaining_total - excluded, &mut rng));
                }
            }
            for &j in active.clone().iter() {
                if filled == fg_quota {
                    break;
                }
                if remaining[j] == 0 {
                    continue;
                }
                remaining[j] -= 1;
                remaining_total -= 1;
                train.labels.push((j + 1) as u32);
                train.image_ids.push(image_id as i64);
                let proto = &prototypes[j * d..(j + 1) * d];
                for &p in proto {
                    train.features.push(quantize(p + standard_normal(&mut rng) * config.noise_sigma));
                }
                filled += 1;
            }
        }
        for _ in 0..bg_quota {
            train.labels.push(BACKGROUND);
            train.image_ids.push(image_id as i64);
            for _ in 0..d {
                train.features.push(quantize(standard_normal(&mut rng) * bg_sigma));
            }
        }
        images.push((start..train.labels.len()).collect());
    }

    let mut eval = Records { feature_dim: d, features: Vec::new(), labels: Vec::new(), image_ids: Vec::new() };
    for j in 0..c {
        let proto = &prototypes[j * d..(j + 1) * d];
        for _ in 0..config.eval_per_class {
            eval.labels.push((j + 1) as u32);
            eval.image_ids.push(-1);
            for &p in proto {
                eval.features.push(quantize(p + standard_normal(&mut rng) * config.noise_sigma));
            }
        }
    }
    for _ in 0..config.eval_per_class * EVAL_BG_MULTIPLIER {
        eval.labels.push(BACKGROUND);
        eval.image_ids.push(-1);
        for _ in 0..d {
            eval.features.push(quantize(standard_normal(&mut rng) * bg_sigma));
        }
    }

    Ok(Dataset { config: config.clone(), catalog, train, eval, images })
}

/// Sample one class index weighted by its remaining instance budget,
/// skipping classes already active in the image. Weighted draws keep tail
/// classes concentrated in few images, mimicking object co-occurrence.
fn sample_weighted_class(remaining: &[u64], exclude: &[usize], total: u64, rng: &mut impl Rng) -> usize {
    debug_assert!(total > 0);
    let mut target = rng.gen_range(0..total);
    for (j, &r) in remaining.iter().enumerate() {
        if exclude.contains(&j) {
            continue;
        }
        if target < r {
            return j;
        }
        target -= r;
    }
    unreachable!("weights sum to total")
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: SynthConfig,
    catalog: ClassCatalog,
    /// (label, image_id, split) with split 0 = train, 1 = eval.
    records: Vec<(u32, i64, u8)>,
}

/// Write `manifest.json` and `features.bin` into `dir`.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(dataset.train.len() + dataset.eval.len());
    for i in 0..dataset.train.len() {
        records.push((dataset.train.labels[i], dataset.train.image_ids[i], 0u8));
    }
    for i in 0..dataset.eval.len() {
        records.push((dataset.eval.labels[i], dataset.eval.image_ids[i], 1u8));
    }
    let manifest = Manifest {
        config: dataset.config.clone(),
        catalog: dataset.catalog.clone(),
        records,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;

    let mut blob = Vec::with_capacity((dataset.train.features.len() + dataset.eval.features.len()) * 4);
    for &v in dataset.train.features.iter().chain(dataset.eval.features.iter()) {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(dir.join("features.bin"))?;
    file.write_all(&blob)?;
    Ok(())
}

/// Load a dataset previously written by [`save`].
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(
        &fs::read(&manifest_path).map_err(|e| Error::data(format!("{}: {e}", manifest_path.display())))?,
    )?;
    manifest.config.validate()?;
    manifest.catalog.validate()?;
    let d = manifest.config.feature_dim;
    let c = manifest.catalog.num_foreground() as u32;

    let mut blob = Vec::new();
    fs::File::open(dir.join("features.bin"))
        .map_err(|e| Error::data(format!("features.bin: {e}")))?
        .read_to_end(&mut blob)?;
    let expected = manifest.records.len() * d * 4;
    if blob.len() != expected {
        return Err(Error::data(format!(
            "feature blob holds {} bytes but the record table implies {expected} ({} records x {d} dims)",
            blob.len(),
            manifest.records.len()
        )));
    }

    let mut train = Records { feature_dim: d, features: Vec::new(), labels: Vec::new(), image_ids: Vec::new() };
    let mut eval = Records { feature_dim: d, features: Vec::new(), labels: Vec::new(), image_ids: Vec::new() };
    for (i, &(label, image_id, split)) in manifest.records.iter().enumerate() {
        if label > c {
            return Err(Error::data(format!("record {i} has label {label} outside 0..={c}")));
        }
        let records = match split {
            0 => &mut train,
            1 => &mut eval,
            s => return Err(Error::data(format!("record {i} has unknown split tag {s}"))),
        };
        records.labels.push(label);
        records.image_ids.push(image_id);
        let off = i * d * 4;
        for k in 0..d {
            let bytes: [u8; 4] = blob[off + k * 4..off + k * 4 + 4].try_into().unwrap();
            let v = f32::from_le_bytes(bytes);
            if !v.is_finite() {
                return Err(Error::data(format!("record {i} has a non-finite feature")));
            }
            records.features.push(v as f64);
        }
    }
    if train.is_empty() {
        return Err(Error::data("dataset has an empty train split"));
    }

    let mut images: Vec<Vec<usize>> = Vec::new();
    for (i, &id) in train.image_ids.iter().enumerate() {
        if id < 0 {
            return Err(Error::data(format!("train record {i} lacks an image id")));
        }
        let id = id as usize;
        if id >= images.len() {
            images.resize_with(id + 1, Vec::new);
        }
        images[id].push(i);
    }

    let dataset = Dataset { config: manifest.config, catalog: manifest.catalog, train, eval, images };
    verify_counts(&dataset)?;
    Ok(dataset)
}

fn verify_counts(dataset: &Dataset) -> Result<()> {
    let c = dataset.catalog.num_foreground();
    let mut observed = vec![0u64; c + 1];
    for &label in &dataset.train.labels {
        observed[label as usize] += 1;
    }
    if observed[1..] != dataset.catalog.counts()[..] {
        return Err(Error::data("train label counts disagree with the catalog"));
    }
    Ok(())
}

/// True when generated counts reach every evaluation bin (used by the
/// dataset-generation smoke checks).
pub fn spans_all_bins(catalog: &ClassCatalog) -> bool {
    let mut seen = [false; 5];
    for &count in catalog.counts() {
        seen[bin_of(count)] = true;
    }
    seen[1] && seen[2] && seen[3] && seen[4]
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_config() -> SynthConfig {
        SynthConfig {
            num_foreground: 12,
            feature_dim: 8,
            count_law: CountLaw { zipf_exponent: 1.5, min_count: 2, max_count: 60 },
            prototype_scale: 8.0,
            noise_sigma: 3.2,
            proposals_per_image: 8,
            bg_fraction: 0.25,
            eval_per_class: 3,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = small_config();
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);

        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        save(&a, dir_a.path()).unwrap();
        save(&b, dir_b.path()).unwrap();
        let bytes_a = std::fs::read(dir_a.path().join("features.bin")).unwrap();
        let bytes_b = std::fs::read(dir_b.path().join("features.bin")).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(
            std::fs::read(dir_a.path().join("manifest.json")).unwrap(),
            std::fs::read(dir_b.path().join("manifest.json")).unwrap()
        );
    }

    #[test]
    fn counts_follow_the_law_and_reference_config_spans_bins() {
        let config = small_config();
        let dataset = generate(&config).unwrap();
        let counts = dataset.catalog.counts();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        assert!(counts.iter().all(|&n| (2..=60).contains(&n)));

        // The default config is the reference benchmark; its counts must
        // land classes in all four bins.
        let reference = SynthConfig::default();
        let catalog = ClassCatalog::new(reference.class_counts()).unwrap();
        assert!(spans_all_bins(&catalog));
    }

    #[test]
    fn zero_noise_reproduces_prototypes() {
        let mut config = small_config();
        config.noise_sigma = 0.0;
        let dataset = generate(&config).unwrap();
        // With zero noise every record of a class is identical to the
        // others of that class.
        for j in 1..=config.num_foreground as u32 {
            let rows: Vec<usize> =
                (0..dataset.train.len()).filter(|&i| dataset.train.labels[i] == j).collect();
            for &i in &rows[1..] {
                assert_eq!(dataset.train.feature(i), dataset.train.feature(rows[0]));
            }
        }
    }

    #[test]
    fn image_structure_holds() {
        let config = small_config();
        let dataset = generate(&config).unwrap();
        let per_image = config.proposals_per_image;
        let target_bg = config.bg_fraction * per_image as f64;
        for image in &dataset.images {
            assert_eq!(image.len(), per_image);
            let bg = image.iter().filter(|&&i| dataset.train.labels[i] == BACKGROUND).count();
            assert!((bg as f64 - target_bg).abs() <= 1.0 + 1e-9);
        }
        let total: usize = dataset.images.iter().map(|img| img.len()).sum();
        assert_eq!(total, dataset.train.len());
    }

    #[test]
    fn round_trips_through_disk() {
        let dataset = generate(&small_config()).unwrap();
        let dir = tempdir().unwrap();
        save(&dataset, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(dataset, back);
    }

    #[test]
    fn load_rejects_mismatched_blob() {
        let dataset = generate(&small_config()).unwrap();
        let dir = tempdir().unwrap();
        save(&dataset, dir.path()).unwrap();
        let blob_path = dir.path().join("features.bin");
        let mut blob = std::fs::read(&blob_path).unwrap();
        blob.truncate(blob.len() - 4);
        std::fs::write(&blob_path, blob).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn load_rejects_empty_train_split() {
        let dataset = generate(&small_config()).unwrap();
        let dir = tempdir().unwrap();
        save(&dataset, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let mut manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&manifest_path).unwrap()).unwrap();
        let records = manifest["records"].as_array_mut().unwrap();
        let eval_only: Vec<_> = records.iter().filter(|r| r[2] == 1).cloned().collect();
        let n_dropped = records.len() - eval_only.len();
        *records = eval_only;
        std::fs::write(&manifest_path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        // Shrink the blob to match so the split emptiness is what fails.
        let blob_path = dir.path().join("features.bin");
        let blob = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &blob[n_dropped * 8 * 4..]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn rejects_zero_classes() {
        let mut config = small_config();
        config.num_foreground = 0;
        assert!(generate(&config).is_err());
    }
}
