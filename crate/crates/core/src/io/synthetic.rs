//! Planted-structure benchmark: labels are unit-norm prototypes written into
//! rectangular regions of a noisy feature grid.
//!
//! Labels `0..n_seen` are seen, the rest unseen. Train images carry seen
//! labels only; test images draw from all labels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ImageEntry, Region, Split, Splits};
use super::qtf::write_tensor;
use crate::error::{QksError, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    /// Feature and embedding width; raw channels equal `d`.
    pub d: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Inclusive range of labels sampled per image.
    pub labels_per_image: [usize; 2],
    /// Inclusive range of region side lengths (drawn per axis).
    pub region_size: [usize; 2],
    /// Signal gain on planted cells.
    pub alpha: f64,
    /// Feature noise standard deviation.
    pub sigma: f64,
    /// Number of templates.
    pub templates: usize,
    /// Per-template embedding noise standard deviation.
    pub tau: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            d: 32,
            n_seen: 40,
            n_unseen: 10,
            n_train: 2000,
            n_test: 400,
            labels_per_image: [1, 3],
            region_size: [2, 4],
            alpha: 1.0,
            sigma: 0.1,
            templates: 4,
            tau: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn n_labels(&self) -> usize {
        self.n_seen + self.n_unseen
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(QksError::Config(msg));
        if self.n_seen == 0 || self.n_unseen == 0 {
            return bad("n_seen and n_unseen must be at least 1".into());
        }
        if self.height == 0 || self.width == 0 || self.d == 0 || self.templates == 0 {
            return bad("height, width, d and templates must be positive".into());
        }
        if !(self.sigma >= 0.0 && self.tau >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("need sigma, tau >= 0 (got {}, {})", self.sigma, self.tau));
        }
        let [lo, hi] = self.labels_per_image;
        if lo == 0 || lo > hi || hi > self.n_seen {
            return bad(format!(
                "labels_per_image {:?} must satisfy 1 <= lo <= hi <= n_seen = {}",
                self.labels_per_image, self.n_seen
            ));
        }
        let [rlo, rhi] = self.region_size;
        if rlo == 0 || rlo > rhi {
            return bad(format!("region_size {:?} must satisfy 1 <= lo <= hi", self.region_size));
        }
        if rhi > self.height || rhi > self.width {
            return bad(format!(
                "region size up to {rhi} does not fit a {}x{} grid",
                self.height, self.width
            ));
        }
        Ok(())
    }
}

/// Everything drawn for one image, before writing.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    /// `[H·W, d]` features.
    pub features: Tensor<f32>,
    /// Label index per cell after last-writer-wins resolution, −1 for background.
    pub mask: Vec<i64>,
    /// Regions in planting order (ascending label).
    pub regions: Vec<Region>,
    /// Labels that kept at least one cell.
    pub labels: Vec<usize>,
}

/// Unit-norm prototype per label.
pub fn prototypes(cfg: &SyntheticConfig) -> Tensor<f64> {
    let mut rng = Rng::with_stream(cfg.seed, 0);
    let mut p: Tensor<f64> = rng.normal_tensor(&[cfg.n_labels(), cfg.d], 1.0);
    for i in 0..cfg.n_labels() {
        let row = p.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    p
}

/// Per-template label embeddings, prototype plus `N(0, τ²)`.
pub fn template_embeddings(cfg: &SyntheticConfig, protos: &Tensor<f64>) -> Vec<Tensor<f32>> {
    let mut rng = Rng::with_stream(cfg.seed, 1);
    (0..cfg.templates)
        .map(|_| {
            let noise: Tensor<f64> = rng.normal_tensor(protos.shape(), 1.0);
            Tensor::from_fn(protos.shape(), |i| {
                (protos.data()[i] + cfg.tau * noise.data()[i]) as f32
            })
        })
        .collect()
}

/// Draw one image. `pool` is the set of labels it may carry.
pub fn draw_image(
    cfg: &SyntheticConfig,
    protos: &Tensor<f64>,
    pool: usize,
    rng: &mut Rng,
) -> SyntheticImage {
    let (h, w, d) = (cfg.height, cfg.width, cfg.d);
    let k = rng.int_inclusive(cfg.labels_per_image[0], cfg.labels_per_image[1].min(pool));
    let mut chosen = rng.sample_distinct(pool, k);
    chosen.sort_unstable();

    let mut mask = vec![-1i64; h * w];
    let mut regions = Vec::with_capacity(k);
    for &label in &chosen {
        let rh = rng.int_inclusive(cfg.region_size[0], cfg.region_size[1]);
        let rw = rng.int_inclusive(cfg.region_size[0], cfg.region_size[1]);
        let top = rng.int_inclusive(0, h - rh);
        let left = rng.int_inclusive(0, w - rw);
        for y in top..top + rh {
            for x in left..left + rw {
                mask[y * w + x] = label as i64;
            }
        }
        regions.push(Region {
            label,
            top,
            left,
            height: rh,
            width: rw,
        });
    }

    let noise: Tensor<f64> = rng.normal_tensor(&[h * w, d], 1.0);
    let features = Tensor::from_fn(&[h * w, d], |i| {
        let (cell, c) = (i / d, i % d);
        let signal = match mask[cell] {
            l if l >= 0 => cfg.alpha * protos.get2(l as usize, c),
            _ => 0.0,
        };
        (signal + cfg.sigma * noise.data()[i]) as f32
    });
    let labels = chosen
        .into_iter()
        .filter(|&l| mask.contains(&(l as i64)))
        .collect();
    SyntheticImage {
        features,
        mask,
        regions,
        labels,
    }
}

/// Write a complete dataset under `dir` and return its manifest.
pub fn generate_synthetic(cfg: &SyntheticConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| QksError::io(p, e));
    mkdir(&dir.join("templates"))?;

    let protos = prototypes(cfg);
    let mut template_files = Vec::with_capacity(cfg.templates);
    for (k, t) in template_embeddings(cfg, &protos).iter().enumerate() {
        let rel = format!("templates/t{k}.qtf");
        write_tensor(dir.join(&rel), t)?;
        template_files.push(rel);
    }

    let mut splits = Splits::default();
    for (split, count, pool, stream) in [
        (Split::Train, cfg.n_train, cfg.n_seen, 2),
        (Split::Test, cfg.n_test, cfg.n_labels(), 3),
    ] {
        mkdir(&dir.join("features").join(split.to_string()))?;
        mkdir(&dir.join("masks").join(split.to_string()))?;
        let mut rng = Rng::with_stream(cfg.seed, stream);
        let entries = match split {
            Split::Train => &mut splits.train,
            Split::Test => &mut splits.test,
        };
        for i in 0..count {
            let img = draw_image(cfg, &protos, pool, &mut rng);
            let id = format!("{split}{i:05}");
            let features = format!("features/{split}/{id}.qtf");
            let mask = format!("masks/{split}/{id}.qtf");
            write_tensor(dir.join(&features), &img.features)?;
            let mask_t = Tensor::from_fn(&[cfg.height, cfg.width], |c| img.mask[c] as f32);
            write_tensor(dir.join(&mask), &mask_t)?;
            entries.push(ImageEntry {
                id,
                features,
                labels: img.labels,
                mask: Some(mask),
                regions: img.regions,
            });
        }
    }

    let n = cfg.n_labels();
    let manifest = DatasetManifest {
        name: format!("synthetic-seed{}", cfg.seed),
        d: cfg.d,
        channels: cfg.d,
        height: cfg.height,
        width: cfg.width,
        label_names: (0..n)
            .map(|i| {
                if i < cfg.n_seen {
                    format!("seen{i:03}")
                } else {
                    format!("unseen{:03}", i - cfg.n_seen)
                }
            })
            .collect(),
        seen: (0..cfg.n_seen).collect(),
        unseen: (cfg.n_seen..n).collect(),
        templates: (0..cfg.templates).map(|k| format!("synthetic template {k}: {{}}")).collect(),
        template_embeddings: template_files,
        splits,
        generator: Some(cfg.clone()),
        root: dir.to_path_buf(),
    };
    manifest.validate_structure()?;
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
