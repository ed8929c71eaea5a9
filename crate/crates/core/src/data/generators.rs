use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{DomainDataset, DomainTag};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Two interleaved half circles; the target domain is an independent draw
/// rotated about the origin and then translated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoMoonsConfig {
    /// Samples per domain.
    pub n: usize,
    pub noise_sd: f64,
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    pub seed: u64,
}

impl Default for TwoMoonsConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            noise_sd: 0.1,
            rotation_deg: 35.0,
            translation: [0.0, 0.0],
            seed: 0,
        }
    }
}

/// Isotropic Gaussian class blobs with centers on a circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    /// Samples per domain.
    pub n: usize,
    /// Radius of the circle carrying the class centers.
    pub class_center_scale: f64,
    pub shift: [f64; 2],
    /// Target variance relative to the unit source variance.
    pub covariance_scale: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            n: 1500,
            class_center_scale: 4.0,
            shift: [1.0, 0.0],
            covariance_scale: 1.0,
            seed: 0,
        }
    }
}

fn normal(sd: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|e| Error::InvalidArgument(format!("noise sd {sd}: {e}")))
}

fn moons_draw(n: usize, noise_sd: f64, rng: &mut Rng) -> Result<(Vec<f64>, Vec<usize>)> {
    let noise = normal(noise_sd)?;
    let half = n / 2;
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2 {
        for _ in 0..half {
            let t = rng.random_range(0.0..=PI);
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            pts.push(x + noise.sample(rng));
            pts.push(y + noise.sample(rng));
            labels.push(class);
        }
    }
    Ok((pts, labels))
}

/// Rotates 2-D row points by `deg` about the origin, then translates.
pub fn rotate_translate(points: &[f64], deg: f64, translation: [f64; 2]) -> Vec<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    points
        .chunks_exact(2)
        .flat_map(|p| {
            let (x, y) = (p[0], p[1]);
            [c * x - s * y + translation[0], s * x + c * y + translation[1]]
        })
        .collect()
}

pub fn gen_two_moons_shift(cfg: &TwoMoonsConfig) -> Result<(DomainDataset, DomainDataset)> {
    if cfg.n < 2 || !cfg.n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("two moons needs an even n >= 2, got {}", cfg.n)));
    }
    if !(cfg.noise_sd >= 0.0) {
        return Err(Error::InvalidArgument("noise_sd must be >= 0".into()));
    }
    let prov = format!(
        "two_moons(n={}, noise_sd={}, rotation_deg={}, translation={:?}, seed={})",
        cfg.n, cfg.noise_sd, cfg.rotation_deg, cfg.translation, cfg.seed
    );
    let (src, ys) = moons_draw(cfg.n, cfg.noise_sd, &mut rng::seeded(cfg.seed, rng::stream::SOURCE_DATA))?;
    let (raw, yt) = moons_draw(cfg.n, cfg.noise_sd, &mut rng::seeded(cfg.seed, rng::stream::TARGET_DATA))?;
    let tgt = rotate_translate(&raw, cfg.rotation_deg, cfg.translation);
    Ok((
        DomainDataset::new(Tensor::matrix(cfg.n, 2, src)?, Some(ys), 2, DomainTag::Source, prov.clone())?,
        DomainDataset::new(Tensor::matrix(cfg.n, 2, tgt)?, Some(yt), 2, DomainTag::Target, prov)?,
    ))
}

/// Class centers used by [`gen_blobs_shift`] for the source domain.
pub fn blob_centers(classes: usize, scale: f64) -> Vec<[f64; 2]> {
    (0..classes)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / classes as f64;
            [scale * a.cos(), scale * a.sin()]
        })
        .collect()
}

pub fn gen_blobs_shift(cfg: &BlobsConfig) -> Result<(DomainDataset, DomainDataset)> {
    if cfg.classes < 2 {
        return Err(Error::InvalidArgument("blobs need at least 2 classes".into()));
    }
    if cfg.n == 0 || !cfg.n.is_multiple_of(cfg.classes) {
        return Err(Error::InvalidArgument(format!(
            "n = {} must be a positive multiple of classes = {}",
            cfg.n, cfg.classes
        )));
    }
    if !(cfg.covariance_scale > 0.0) {
        return Err(Error::InvalidArgument("covariance_scale must be > 0".into()));
    }
    let prov = format!(
        "blobs(classes={}, n={}, center_scale={}, shift={:?}, covariance_scale={}, seed={})",
        cfg.classes, cfg.n, cfg.class_center_scale, cfg.shift, cfg.covariance_scale, cfg.seed
    );
    let centers = blob_centers(cfg.classes, cfg.class_center_scale);
    let per = cfg.n / cfg.classes;
    let draw = |stream: u64, offset: [f64; 2], sd: f64| -> Result<(Vec<f64>, Vec<usize>)> {
        let mut rng = rng::seeded(cfg.seed, stream);
        let noise = normal(sd)?;
        let mut pts = Vec::with_capacity(2 * cfg.n);
        let mut labels = Vec::with_capacity(cfg.n);
        for (k, c) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(c[0] + offset[0] + noise.sample(&mut rng));
                pts.push(c[1] + offset[1] + noise.sample(&mut rng));
                labels.push(k);
            }
        }
        Ok((pts, labels))
    };
    let (src, ys) = draw(rng::stream::SOURCE_DATA, [0.0, 0.0], 1.0)?;
    let (tgt, yt) = draw(rng::stream::TARGET_DATA, cfg.shift, cfg.covariance_scale.sqrt())?;
    Ok((
        DomainDataset::new(Tensor::matrix(cfg.n, 2, src)?, Some(ys), cfg.classes, DomainTag::Source, prov.clone())?,
        DomainDataset::new(Tensor::matrix(cfg.n, 2, tgt)?, Some(yt), cfg.classes, DomainTag::Target, prov)?,
    ))
}
