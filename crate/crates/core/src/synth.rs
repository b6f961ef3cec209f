//! Procedural instance generator: pose-gridded renders of per-instance
//! glyphs (an oriented rectangle plus keypoint dots parameterised by a
//! latent vector), with optional Gaussian pixel noise and outlier injection.
//!
//! Rendering is analytic per pixel, so two views of one instance are exact
//! rotations of each other up to floating-point rounding when noise is off.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::RetrievalSplit;
use crate::seeds::derive_seed;
use crate::stream::{InstanceDataset, Sample};
use crate::tensor::Tensor;

const LATENT_DIM: usize = 6;
pub const DEFAULT_OUTLIER_MAGNITUDE: f64 = 10.0;

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_instances: usize,
    pub views_per_instance: usize,
    /// Number of equally spaced azimuth rotations.
    pub pose_grid: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Per-pixel Gaussian noise sigma.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    /// Latent spread; larger values push instances further apart.
    #[serde(default = "default_separation")]
    pub instance_separation: f64,
    /// Fraction of instances turned into outliers by the generation
    /// pipeline (latents scaled by [`DEFAULT_OUTLIER_MAGNITUDE`]).
    #[serde(default)]
    pub outlier_fraction: f64,
    #[serde(default = "default_elevations")]
    pub elevations: usize,
    /// Restrict azimuths to +/-30 degrees of frontal (surveillance-style).
    #[serde(default)]
    pub frontal_only: bool,
    pub seed: u64,
}

fn default_image_size() -> usize {
    16
}

fn default_noise_sigma() -> f64 {
    0.02
}

fn default_separation() -> f64 {
    1.0
}

fn default_elevations() -> usize {
    1
}

impl GenConfig {
    /// Toy dataset used by the default experiment configuration.
    pub fn toy_default(seed: u64) -> Self {
        GenConfig {
            num_instances: 28,
            views_per_instance: 12,
            pose_grid: 12,
            image_size: 16,
            noise_sigma: 0.02,
            instance_separation: 1.0,
            outlier_fraction: 0.0,
            elevations: 1,
            frontal_only: false,
            seed,
        }
    }

    /// Frontal-view preset emulating a surveillance-style capture setup.
    pub fn frontal_preset(seed: u64) -> Self {
        GenConfig { frontal_only: true, pose_grid: 6, views_per_instance: 6, ..Self::toy_default(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_instances == 0 {
            return Err(Error::Config("num_instances must be >= 1".into()));
        }
        if self.views_per_instance < 2 {
            return Err(Error::Config(
                "views_per_instance must be >= 2 so positive pairs exist".into(),
            ));
        }
        if self.pose_grid == 0 || self.elevations == 0 {
            return Err(Error::Config("pose_grid and elevations must be >= 1".into()));
        }
        if self.views_per_instance > self.pose_grid * self.elevations {
            return Err(Error::Config(format!(
                "views_per_instance {} exceeds pose_grid x elevations = {}",
                self.views_per_instance,
                self.pose_grid * self.elevations
            )));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be >= 4".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.instance_separation.is_finite() && self.instance_separation > 0.0) {
            return Err(Error::Config("instance_separation must be > 0".into()));
        }
        if !(self.outlier_fraction >= 0.0 && self.outlier_fraction < 0.5) {
            return Err(Error::Config(format!(
                "outlier_fraction must lie in [0, 0.5), got {}",
                self.outlier_fraction
            )));
        }
        Ok(())
    }

    /// Azimuth in degrees for grid index k.
    fn azimuth(&self, k: usize) -> f64 {
        if self.frontal_only {
            if self.pose_grid == 1 {
                0.0
            } else {
                -30.0 + 60.0 * k as f64 / (self.pose_grid - 1) as f64
            }
        } else {
            360.0 * k as f64 / self.pose_grid as f64
        }
    }
}

/// One rendered view of an instance.
#[derive(Debug, Clone)]
pub struct ViewRender {
    pub view: u32,
    pub pose_deg: f64,
    pub elevation: usize,
    pub image: Tensor,
}

/// A synthetic instance: one latent, many deterministic renders.
#[derive(Debug, Clone)]
pub struct SynthInstance {
    pub id: u32,
    pub latent: Vec<f64>,
    pub outlier: bool,
    pub renders: Vec<ViewRender>,
}

/// Generated dataset retaining the latents behind every instance.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: GenConfig,
    pub instances: Vec<SynthInstance>,
}

impl SynthDataset {
    /// Flatten into the stream module's dataset form.
    pub fn dataset(&self) -> Result<InstanceDataset> {
        let mut samples = Vec::new();
        for inst in &self.instances {
            for r in &inst.renders {
                samples.push(Sample { image: r.image.clone(), instance: inst.id, view: r.view });
            }
        }
        InstanceDataset::new(samples)
    }

    pub fn outlier_ids(&self) -> Vec<u32> {
        self.instances.iter().filter(|i| i.outlier).map(|i| i.id).collect()
    }
}

fn squash(v: f64) -> f64 {
    v.tanh()
}

struct Glyph {
    half_w: f64,
    half_h: f64,
    fill: f64,
    theta0: f64,
    dot_angle: f64,
    dot_dist: f64,
    dot_radius: f64,
    dot_intensity: f64,
}

impl Glyph {
    fn from_latent(latent: &[f64], size: usize) -> Glyph {
        let n = size as f64;
        let ext = latent[5] * latent[5]; // even "extremity" term
        let half_w = n * (0.10 + 0.05 * latent[0] + 0.08 * ext).clamp(0.04, 0.42);
        let half_h = n * (0.10 + 0.05 * latent[1] + 0.08 * ext).clamp(0.04, 0.42);
        let fill = (0.40 + 0.12 * latent[2] + 0.25 * ext).clamp(0.05, 1.0);
        Glyph {
            half_w,
            half_h,
            fill,
            theta0: 0.4 * squash(latent[3]),
            dot_angle: std::f64::consts::PI * squash(latent[4]),
            dot_dist: 0.32 * n,
            dot_radius: 0.07 * n,
            dot_intensity: (fill + 0.3).min(1.0),
        }
    }

    /// Intensity at object-frame coordinates (after pose rotation).
    fn intensity(&self, ox: f64, oy: f64) -> f64 {
        let m = (ox.abs() - self.half_w).max(oy.abs() - self.half_h);
        let mut value = self.fill * (0.5 - m).clamp(0.0, 1.0);
        for sign in [1.0, -1.0] {
            let cx = sign * self.dot_dist * self.dot_angle.cos();
            let cy = sign * self.dot_dist * self.dot_angle.sin();
            let d = ((ox - cx) * (ox - cx) + (oy - cy) * (oy - cy)).sqrt();
            value += self.dot_intensity * (self.dot_radius + 0.5 - d).clamp(0.0, 1.0);
        }
        value.min(1.0)
    }
}

/// Noise-free analytic render of a latent at the given pose.
pub fn render_glyph(latent: &[f64], pose_deg: f64, elevation_frac: f64, size: usize) -> Vec<f64> {
    let glyph = Glyph::from_latent(latent, size);
    let center = (size as f64 - 1.0) / 2.0;
    let angle = pose_deg.to_radians() + glyph.theta0;
    let (sin, cos) = angle.sin_cos();
    let elev_squash = 1.0 - 0.3 * elevation_frac;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 - center;
            let v = y as f64 - center;
            // inverse-rotate camera coords into the object frame
            let ox = cos * u + sin * v;
            let oy = (-sin * u + cos * v) / elev_squash;
            out.push(glyph.intensity(ox, oy));
        }
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1] avoids ln(0)
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const NOISE_TAG: u64 = 0x6e6f;

fn render_instance(cfg: &GenConfig, id: u32, latent: &[f64], outlier: bool) -> Result<SynthInstance> {
    let mut renders = Vec::with_capacity(cfg.views_per_instance);
    for view in 0..cfg.views_per_instance {
        let az_index = view % cfg.pose_grid;
        let elevation = view / cfg.pose_grid;
        let pose_deg = cfg.azimuth(az_index);
        let elevation_frac = if cfg.elevations > 1 {
            elevation as f64 / (cfg.elevations - 1) as f64
        } else {
            0.0
        };
        let mut pixels = render_glyph(latent, pose_deg, elevation_frac, cfg.image_size);
        if cfg.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                &[NOISE_TAG, id as u64, view as u64],
            ));
            for p in pixels.iter_mut() {
                *p = (*p + cfg.noise_sigma * gaussian(&mut rng)).clamp(0.0, 1.0);
            }
        }
        let image = Tensor::new(pixels, vec![1, cfg.image_size, cfg.image_size])?;
        renders.push(ViewRender { view: view as u32, pose_deg, elevation, image });
    }
    Ok(SynthInstance { id, latent: latent.to_vec(), outlier, renders })
}

/// Generate a dataset: one random latent per instance, deterministic renders
/// on the pose grid, plus optional noise. Pure function of the config.
pub fn generate(cfg: &GenConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut instances = Vec::with_capacity(cfg.num_instances);
    for id in 0..cfg.num_instances {
        let latent: Vec<f64> = (0..LATENT_DIM)
            .map(|_| rng.gen_range(-cfg.instance_separation..cfg.instance_separation))
            .collect();
        instances.push(render_instance(cfg, id as u32, &latent, false)?);
    }
    let ds = SynthDataset { config: cfg.clone(), instances };
    if cfg.outlier_fraction > 0.0 {
        inject_outliers(
            &ds,
            cfg.outlier_fraction,
            DEFAULT_OUTLIER_MAGNITUDE,
            derive_seed(cfg.seed, &[0x6f75_746c]),
        )
    } else {
        Ok(ds)
    }
}

/// Re-render a seeded subset of instances with latents scaled by `magnitude`,
/// producing visually extreme instances. Labels are unchanged.
pub fn inject_outliers(
    ds: &SynthDataset,
    fraction: f64,
    magnitude: f64,
    seed: u64,
) -> Result<SynthDataset> {
    if !(0.0..0.5).contains(&fraction) {
        return Err(Error::Config(format!("outlier fraction must lie in [0, 0.5), got {fraction}")));
    }
    let count = (fraction * ds.instances.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, ds.instances.len(), count);
    let flagged: std::collections::BTreeSet<usize> = picks.iter().collect();
    let mut instances = Vec::with_capacity(ds.instances.len());
    for (i, inst) in ds.instances.iter().enumerate() {
        if flagged.contains(&i) {
            let scaled: Vec<f64> = inst.latent.iter().map(|v| v * magnitude).collect();
            instances.push(render_instance(&ds.config, inst.id, &scaled, true)?);
        } else {
            instances.push(inst.clone());
        }
    }
    Ok(SynthDataset { config: ds.config.clone(), instances })
}

/// Per instance: the first `queries_per_instance` views become queries, the
/// remainder the gallery.
pub fn make_retrieval_split(ds: &InstanceDataset, queries_per_instance: usize) -> Result<RetrievalSplit> {
    if queries_per_instance == 0 {
        return Err(Error::Config("queries_per_instance must be >= 1".into()));
    }
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for &inst in ds.instance_ids() {
        let members: Vec<&Sample> = ds.samples().iter().filter(|s| s.instance == inst).collect();
        if members.len() <= queries_per_instance {
            return Err(Error::Config(format!(
                "instance {inst} has {} views; needs more than {queries_per_instance} for a split",
                members.len()
            )));
        }
        for (i, s) in members.iter().enumerate() {
            if i < queries_per_instance {
                queries.push((s.image.clone(), inst));
            } else {
                gallery.push((s.image.clone(), inst));
            }
        }
    }
    RetrievalSplit::new(queries, gallery)
}

// ── Persistence ─────────────────────────────────────────────────────────

const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ViewRecord {
    view: u32,
    pose_deg: f64,
    elevation: usize,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: u32,
    latent: Vec<f64>,
    outlier: bool,
    views: Vec<ViewRecord>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    config: GenConfig,
    instances: Vec<InstanceRecord>,
}

fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

fn blob_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

/// Write `<base>.json` (manifest) and `<base>.bin` (little-endian float64
/// pixel data in manifest order).
pub fn save_dataset(ds: &SynthDataset, base: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut records = Vec::new();
    let mut offset = 0u64;
    for inst in &ds.instances {
        let mut views = Vec::new();
        for r in &inst.renders {
            views.push(ViewRecord {
                view: r.view,
                pose_deg: r.pose_deg,
                elevation: r.elevation,
                offset,
                len: r.image.len() as u64,
            });
            for &v in r.image.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += (r.image.len() * 8) as u64;
        }
        records.push(InstanceRecord {
            id: inst.id,
            latent: inst.latent.clone(),
            outlier: inst.outlier,
            views,
        });
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        config: ds.config.clone(),
        instances: records,
    };
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(manifest_path(base), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(blob_path(base), blob)?;
    Ok(())
}

/// Load a dataset written by [`save_dataset`].
pub fn load_dataset(base: &Path) -> Result<SynthDataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path(base))?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Persistence(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    manifest.config.validate().map_err(|e| Error::Persistence(e.to_string()))?;
    let blob = std::fs::read(blob_path(base))?;
    let size = manifest.config.image_size;
    let pixels = size * size;
    let mut expected_offset = 0u64;
    let mut instances = Vec::new();
    for rec in &manifest.instances {
        let mut renders = Vec::new();
        for v in &rec.views {
            if v.len as usize != pixels || v.offset != expected_offset {
                return Err(Error::Persistence(format!(
                    "inconsistent view record for instance {} view {}",
                    rec.id, v.view
                )));
            }
            let start = v.offset as usize;
            let end = start + pixels * 8;
            if end > blob.len() {
                return Err(Error::Persistence("dataset blob truncated".into()));
            }
            let mut data = Vec::with_capacity(pixels);
            for i in 0..pixels {
                let bytes: [u8; 8] = blob[start + i * 8..start + i * 8 + 8].try_into().unwrap();
                data.push(f64::from_le_bytes(bytes));
            }
            let image =
                Tensor::new(data, vec![1, size, size]).map_err(|e| Error::Persistence(e.to_string()))?;
            renders.push(ViewRender { view: v.view, pose_deg: v.pose_deg, elevation: v.elevation, image });
            expected_offset = end as u64;
        }
        instances.push(SynthInstance {
            id: rec.id,
            latent: rec.latent.clone(),
            outlier: rec.outlier,
            renders,
        });
    }
    if expected_offset as usize != blob.len() {
        return Err(Error::Persistence(format!(
            "dataset blob holds {} bytes, manifest implies {expected_offset}",
            blob.len()
        )));
    }
    Ok(SynthDataset { config: manifest.config, instances })
}
