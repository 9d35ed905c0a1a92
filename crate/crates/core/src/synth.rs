//! Seeded generator for an ultrasound-like two-class corpus.
//!
//! Negative images are multiplicative speckle over a smooth tissue field. Positive images
//! use the same kind of texture with a number of dark filled discs (follicles) stamped in.
//!
//! Random stream order, from one ChaCha8 stream seeded with `seed`: splits in order
//! `train, test`; within a split classes in order `notinfected, infected`; within a class
//! images by index. Per image: tissue brightness, gradient angle, gradient strength,
//! the speckle cell grid in row-major order, then (infected only) the disc count and for
//! each disc its radius and centre attempts.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{DatasetManifest, ImageRecord, RecordStatus};
use crate::label::{ClassLabel, Split};

/// Name of the sidecar written at the corpus root.
pub const META_FILE: &str = "meta.json";

/// Intensity multiplier at the centre of a follicle.
const DISC_DEPTH: f64 = 0.15;
/// Gamma shape of the speckle field (mean 1, std 1/sqrt(shape)).
const SPECKLE_LOOKS: f64 = 4.0;
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("output directory is not empty: {0}")]
    NonEmptyOutput(PathBuf),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image encoding failed: {0}")]
    Encode(#[from] image::ImageError),
    #[error("sidecar serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub per_class_train: usize,
    pub per_class_test: usize,
    /// Side length of the square output images.
    pub image_size: u32,
    /// Inclusive range for the number of follicles per positive image.
    pub follicle_count_range: [u32; 2],
    /// Inclusive range of follicle radii in pixels.
    pub follicle_radius_range: [f64; 2],
    /// Speckle cell size in pixels.
    pub speckle_grain: f64,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            per_class_train: 200,
            per_class_test: 100,
            image_size: 256,
            follicle_count_range: [3, 12],
            follicle_radius_range: [6.0, 18.0],
            speckle_grain: 2.0,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        let [kmin, kmax] = self.follicle_count_range;
        let [rmin, rmax] = self.follicle_radius_range;
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        if kmin > kmax {
            return bad(format!("empty follicle_count_range [{kmin}, {kmax}]"));
        }
        if !(rmin > 0.0 && rmin <= rmax) {
            return bad(format!("empty or non-positive follicle_radius_range [{rmin}, {rmax}]"));
        }
        if rmax >= f64::from(self.image_size) / 4.0 {
            return bad(format!(
                "follicle radius max {rmax} must be below image_size/4 = {}",
                f64::from(self.image_size) / 4.0
            ));
        }
        if !(self.speckle_grain > 0.0 && self.speckle_grain.is_finite()) {
            return bad(format!("speckle_grain must be positive, got {}", self.speckle_grain));
        }
        Ok(())
    }

    fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.per_class_train,
            Split::Test => self.per_class_test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

/// Random parameters of one speckle texture.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    size: u32,
    grain: f64,
    brightness: f64,
    gradient_angle: f64,
    gradient_strength: f64,
    cells_per_row: usize,
    cells: Vec<f64>,
}

impl Texture {
    pub fn sample<R: Rng>(size: u32, grain: f64, rng: &mut R) -> Self {
        let brightness = rng.random_range(0.45..0.60);
        let gradient_angle = rng.random_range(0.0..std::f64::consts::TAU);
        let gradient_strength = rng.random_range(0.0..0.15);
        let cells_per_row = (f64::from(size) / grain).ceil() as usize + 2;
        let gamma = Gamma::new(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS).expect("valid gamma");
        let cells = (0..cells_per_row * cells_per_row)
            .map(|_| gamma.sample(rng))
            .collect();
        Texture {
            size,
            grain,
            brightness,
            gradient_angle,
            gradient_strength,
            cells_per_row,
            cells,
        }
    }

    fn speckle(&self, x: f64, y: f64) -> f64 {
        let gx = x / self.grain;
        let gy = y / self.grain;
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx - gx.floor(), gy - gy.floor());
        let at = |cx: usize, cy: usize| self.cells[cy * self.cells_per_row + cx];
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn tissue(&self, x: f64, y: f64) -> f64 {
        let c = f64::from(self.size) / 2.0;
        let along = ((x - c) * self.gradient_angle.cos() + (y - c) * self.gradient_angle.sin())
            / f64::from(self.size);
        self.brightness * (1.0 + self.gradient_strength * along)
    }

    /// Renders the texture with the given discs darkened (antialiased one-pixel edge).
    pub fn render(&self, discs: &[Disc]) -> GrayImage {
        GrayImage::from_fn(self.size, self.size, |px, py| {
            let (x, y) = (f64::from(px) + 0.5, f64::from(py) + 0.5);
            let mut v = self.tissue(x, y) * self.speckle(x, y);
            for d in discs {
                let dist = ((x - d.x).powi(2) + (y - d.y).powi(2)).sqrt();
                let coverage = (d.radius + 0.5 - dist).clamp(0.0, 1.0);
                v *= 1.0 - coverage * (1.0 - DISC_DEPTH);
            }
            Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }
}

fn sample_discs<R: Rng>(config: &SynthesisConfig, rng: &mut R) -> Vec<Disc> {
    let [kmin, kmax] = config.follicle_count_range;
    let [rmin, rmax] = config.follicle_radius_range;
    let size = f64::from(config.image_size);
    let count = rng.random_range(kmin..=kmax);
    let mut discs: Vec<Disc> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let radius = if rmin < rmax { rng.random_range(rmin..=rmax) } else { rmin };
        let mut candidate = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let lo = radius + 1.0;
            let hi = (size - radius - 1.0).max(lo);
            let disc = Disc {
                x: if lo < hi { rng.random_range(lo..hi) } else { lo },
                y: if lo < hi { rng.random_range(lo..hi) } else { lo },
                radius,
            };
            let overlaps = discs.iter().any(|o| {
                ((o.x - disc.x).powi(2) + (o.y - disc.y).powi(2)).sqrt() < o.radius + disc.radius + 2.0
            });
            candidate = Some(disc);
            if !overlaps {
                break;
            }
        }
        discs.push(candidate.expect("at least one placement attempt"));
    }
    discs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub path: String,
    pub split: Split,
    pub label: ClassLabel,
    pub discs: Vec<Disc>,
}

/// Contents of the `meta.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub config: SynthesisConfig,
    pub images: Vec<GeneratedImage>,
}

impl CorpusMeta {
    pub fn load(root: &Path) -> Result<Self, SynthError> {
        let path = root.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|source| SynthError::Io { path, source })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn ensure_empty(outdir: &Path) -> Result<(), SynthError> {
    if !outdir.exists() {
        return Ok(());
    }
    let mut entries = fs::read_dir(outdir).map_err(|source| SynthError::Io {
        path: outdir.to_path_buf(),
        source,
    })?;
    if entries.next().is_some() {
        return Err(SynthError::NonEmptyOutput(outdir.to_path_buf()));
    }
    Ok(())
}

/// Writes the corpus under `outdir` and returns its manifest.
///
/// The manifest is assembled from what was written, so zero-count configs succeed here
/// and are rejected by a later scan.
pub fn generate_corpus(config: &SynthesisConfig, outdir: &Path) -> Result<DatasetManifest, SynthError> {
    config.validate()?;
    ensure_empty(outdir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::new();
    let mut images = Vec::new();
    for split in Split::ALL {
        for label in ClassLabel::ALL {
            let dir = outdir.join(split.as_str()).join(label.as_str());
            fs::create_dir_all(&dir).map_err(|source| SynthError::Io {
                path: dir.clone(),
                source,
            })?;
            for index in 0..config.per_class(split) {
                let texture = Texture::sample(config.image_size, config.speckle_grain, &mut rng);
                let discs = match label {
                    ClassLabel::Infected => sample_discs(config, &mut rng),
                    ClassLabel::NotInfected => Vec::new(),
                };
                let relative: PathBuf = [
                    split.as_str(),
                    label.as_str(),
                    &format!("{}_{index:05}.png", label.as_str()),
                ]
                .iter()
                .collect();
                texture.render(&discs).save(outdir.join(&relative))?;
                images.push(GeneratedImage {
                    path: format!("{}/{}/{}_{index:05}.png", split, label, label),
                    split,
                    label,
                    discs,
                });
                records.push(ImageRecord {
                    path: relative,
                    label,
                    split,
                    status: RecordStatus::Valid,
                });
            }
        }
    }
    let meta = CorpusMeta {
        config: config.clone(),
        images,
    };
    let meta_path = outdir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|source| SynthError::Io {
        path: meta_path,
        source,
    })?;
    Ok(DatasetManifest::new(outdir, records))
}
