//! Synthetic slide datasets with a known class structure.
//!
//! Each leaf class has a centroid; a slide of class `c` mixes signal patches
//! drawn around its centroid with background patches around the origin. Every
//! slide draws from its own ChaCha stream, so its content does not depend on
//! generation order.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, Tensor};
use crate::par;
use crate::taxonomy::Taxonomy;

use super::embedding::{quantize, write_embeddings};
use super::manifest::{write_manifest, ManifestEntry, MANIFEST_FILE};

pub const PROMPTS_FILE: &str = "prompts.pte";
pub const SLIDES_DIR: &str = "slides";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Leaf classes; must match the taxonomy.
    pub leaves: usize,
    pub dim: usize,
    pub slides_per_class: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub signal_fraction: f64,
    /// Distance between centroids in units of the noise σ (= 1).
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            leaves: 3,
            dim: 16,
            slides_per_class: 20,
            patches_min: 16,
            patches_max: 48,
            signal_fraction: 0.5,
            separation: 10.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.leaves < 2 {
            return bad("synthetic data needs at least 2 leaf classes");
        }
        if self.dim == 0 || self.slides_per_class == 0 {
            return bad("dimension and slides per class must be positive");
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return bad("patch range must satisfy 0 < min <= max");
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return bad("signal fraction must lie in (0, 1]");
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad("separation must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub slide_id: String,
    pub class: usize,
    pub patches: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// One row per leaf class.
    pub centroids: Tensor,
    /// One row per node, in node-id order.
    pub prompts: Tensor,
    pub slides: Vec<SyntheticSlide>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Centroids with pairwise distance `separation` (exact when `n <= d`).
fn centroids(n: usize, d: usize, separation: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = separation / std::f64::consts::SQRT_2;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = gaussian(rng, d);
        if basis.len() < d {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let len = norm(&v);
        if len < 1e-8 {
            continue;
        }
        basis.push(v.iter().map(|x| x / len).collect());
    }
    Tensor::from_fn(n, d, |r, c| basis[r][c] * scale)
}

/// Leaf prompts are centroids, internal prompts the mean of their descendant
/// leaves' centroids (the root therefore gets the grand mean).
fn node_prompts(t: &Taxonomy, centroids: &Tensor) -> Result<Tensor> {
    let d = centroids.cols();
    let mut out = Tensor::zeros(t.node_count(), d);
    for v in 0..t.node_count() {
        let leaves = t.leaves_under(v)?;
        for &l in &leaves {
            let c = t.class_of(l)?;
            for k in 0..d {
                let cur = out.get(v, k);
                out.set(v, k, cur + centroids.get(c, k) / leaves.len() as f64);
            }
        }
    }
    Ok(out)
}

/// Generates the dataset in memory. Values are already rounded through `f32`
/// so that they equal what a reader of the written files sees.
pub fn synth_generate(cfg: &SyntheticConfig, t: &Taxonomy) -> Result<SyntheticData> {
    cfg.validate()?;
    if t.leaf_count() != cfg.leaves {
        return Err(Error::Config(format!(
            "synthetic config has {} leaves, taxonomy has {}",
            cfg.leaves,
            t.leaf_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = centroids(cfg.leaves, cfg.dim, cfg.separation, &mut rng);
    let prompts = quantize(&node_prompts(t, &centers)?);
    let total = cfg.leaves * cfg.slides_per_class;
    let slides = par::map_range(total, |idx| {
        let class = idx / cfg.slides_per_class;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(idx as u64 + 1);
        let m = rng.random_range(cfg.patches_min..=cfg.patches_max);
        let signal = ((cfg.signal_fraction * m as f64).ceil() as usize).min(m);
        let mut is_signal = vec![false; m];
        for i in sample(&mut rng, m, signal) {
            is_signal[i] = true;
        }
        let mut data = Vec::with_capacity(m * cfg.dim);
        for &s in &is_signal {
            let noise = gaussian(&mut rng, cfg.dim);
            for (k, z) in noise.into_iter().enumerate() {
                let mu = if s { centers.get(class, k) } else { 0.0 };
                data.push(mu + z);
            }
        }
        SyntheticSlide {
            slide_id: format!("slide_{idx:05}"),
            class,
            patches: quantize(&Tensor::from_vec(m, cfg.dim, data).expect("shape")),
        }
    });
    Ok(SyntheticData {
        centroids: centers,
        prompts,
        slides,
    })
}

/// Writes `manifest.tsv`, `prompts.pte` and `slides/<id>.pte` under `root`.
pub fn write_dataset(root: &Path, data: &SyntheticData) -> Result<()> {
    let slides_dir = root.join(SLIDES_DIR);
    fs::create_dir_all(&slides_dir).map_err(|e| Error::io(format!("creating {}", slides_dir.display()), e))?;
    write_embeddings(&root.join(PROMPTS_FILE), &data.prompts)?;
    let written = par::map_slice(&data.slides, |s| {
        write_embeddings(&slides_dir.join(format!("{}.pte", s.slide_id)), &s.patches)
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;
    let entries: Vec<ManifestEntry> = data
        .slides
        .iter()
        .map(|s| ManifestEntry {
            slide_id: s.slide_id.clone(),
            path: format!("{SLIDES_DIR}/{}.pte", s.slide_id),
            class: s.class,
        })
        .collect();
    write_manifest(&root.join(MANIFEST_FILE), &entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::embedding::read_embeddings;
    use crate::dataio::manifest::Dataset;
    use crate::taxonomy::{parse_taxonomy, random_taxonomy, SYSFL_TAXONOMY};

    fn nearest_centroid_accuracy(data: &SyntheticData) -> f64 {
        let correct = data
            .slides
            .iter()
            .filter(|s| {
                let mean = s.patches.mean_rows();
                let dist = |c: usize| -> f64 {
                    mean.data().iter().zip(data.centroids.row(c)).map(|(a, b)| (a - b) * (a - b)).sum()
                };
                let best = (0..data.centroids.rows()).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
                best == s.class
            })
            .count();
        correct as f64 / data.slides.len() as f64
    }

    #[test]
    fn separable_with_full_signal() {
        let t = random_taxonomy(4, 0);
        let cfg = SyntheticConfig { leaves: 4, signal_fraction: 1.0, ..Default::default() };
        let data = synth_generate(&cfg, &t).unwrap();
        assert_eq!(data.slides.len(), 80);
        assert_eq!(nearest_centroid_accuracy(&data), 1.0);
    }

    #[test]
    fn centroid_geometry_and_prompts() {
        let t = parse_taxonomy(SYSFL_TAXONOMY).unwrap();
        let cfg = SyntheticConfig { leaves: 7, ..Default::default() };
        let data = synth_generate(&cfg, &t).unwrap();
        for a in 0..7 {
            for b in (a + 1)..7 {
                let d: f64 = data
                    .centroids
                    .row(a)
                    .iter()
                    .zip(data.centroids.row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!((d - 10.0).abs() < 1e-9);
            }
        }
        for &leaf in t.leaves() {
            let c = t.class_of(leaf).unwrap();
            let want = quantize(&Tensor::row_vector(data.centroids.row(c).to_vec()));
            assert_eq!(data.prompts.row(leaf), want.data());
        }
        let root = data.prompts.row(t.root());
        let mean = data.centroids.mean_rows();
        assert!(root.iter().zip(mean.data()).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn zero_separation_is_chance() {
        let t = random_taxonomy(4, 2);
        let cfg = SyntheticConfig { leaves: 4, separation: 0.0, slides_per_class: 100, ..Default::default() };
        let data = synth_generate(&cfg, &t).unwrap();
        assert!(data.centroids.data().iter().all(|&v| v == 0.0));
        let acc = nearest_centroid_accuracy(&data);
        // All centroids coincide, so ties resolve to class 0.
        assert!((acc - 0.25).abs() < 0.1, "{acc}");
    }

    #[test]
    fn per_class_patch_means_are_near_centroids() {
        let t = random_taxonomy(3, 5);
        let cfg = SyntheticConfig { signal_fraction: 1.0, ..Default::default() };
        let data = synth_generate(&cfg, &t).unwrap();
        for c in 0..3 {
            let mut sum = vec![0.0; cfg.dim];
            let mut count = 0usize;
            for s in data.slides.iter().filter(|s| s.class == c) {
                for r in 0..s.patches.rows() {
                    sum.iter_mut().zip(s.patches.row(r)).for_each(|(a, b)| *a += b);
                    count += 1;
                }
            }
            let tol = 4.0 / (count as f64).sqrt();
            for k in 0..cfg.dim {
                assert!((sum[k] / count as f64 - data.centroids.get(c, k)).abs() < tol);
            }
        }
    }

    #[test]
    fn signal_count_and_patch_range() {
        let t = random_taxonomy(3, 1);
        let cfg = SyntheticConfig { patches_min: 5, patches_max: 9, ..Default::default() };
        let data = synth_generate(&cfg, &t).unwrap();
        for s in &data.slides {
            assert!((5..=9).contains(&s.patches.rows()));
        }
    }

    #[test]
    fn deterministic_files_that_load_back() {
        let t = random_taxonomy(3, 3);
        let cfg = SyntheticConfig { slides_per_class: 4, ..Default::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &synth_generate(&cfg, &t).unwrap()).unwrap();
        write_dataset(b.path(), &synth_generate(&cfg, &t).unwrap()).unwrap();
        for f in ["manifest.tsv", "prompts.pte", "slides/slide_00000.pte", "slides/slide_00011.pte"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let ds = Dataset::load(a.path(), 3, Some(16)).unwrap();
        let data = synth_generate(&cfg, &t).unwrap();
        assert_eq!(ds.bags.len(), 12);
        for (bag, s) in ds.bags.iter().zip(&data.slides) {
            assert_eq!(bag.patches, s.patches);
            assert_eq!(bag.class, s.class);
        }
        assert_eq!(read_embeddings(&a.path().join(PROMPTS_FILE)).unwrap(), data.prompts);
    }

    #[test]
    fn config_errors() {
        let t = random_taxonomy(3, 0);
        let bad = [
            SyntheticConfig { leaves: 4, ..Default::default() },
            SyntheticConfig { signal_fraction: 0.0, ..Default::default() },
            SyntheticConfig { patches_min: 10, patches_max: 5, ..Default::default() },
            SyntheticConfig { separation: -1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(synth_generate(&cfg, &t), Err(Error::Config(_))));
        }
    }
}
