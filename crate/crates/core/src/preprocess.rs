//! Image file → normalized channel-first array.
//!
//! Steps: decode, replicate grayscale to RGB, bilinear resize to the target size,
//! scale to `[0, 1]`, then per-channel `(v - mean) / std`.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TARGET_SIZE: u32 = 224;
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("shape error: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: [usize; 3],
        actual: [usize; 3],
    },
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig<T> {
    /// `(width, height)` of the resized image.
    pub target_size: (u32, u32),
    pub channel_mean: [T; 3],
    pub channel_std: [T; 3],
}

impl<T: Float + FromPrimitive> Default for PreprocessConfig<T> {
    fn default() -> Self {
        let cast = |v: [f64; 3]| v.map(|x| T::from_f64(x).expect("representable"));
        PreprocessConfig {
            target_size: (TARGET_SIZE, TARGET_SIZE),
            channel_mean: cast(IMAGENET_MEAN),
            channel_std: cast(IMAGENET_STD),
        }
    }
}

impl<T: Float> PreprocessConfig<T> {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(PreprocessError::InvalidConfig("target size must be positive".into()));
        }
        if self.channel_std.iter().any(|s| !(*s > T::zero())) {
            return Err(PreprocessError::InvalidConfig("channel std must be positive".into()));
        }
        Ok(())
    }

    /// `[channels, height, width]` of a preprocessed image.
    pub fn output_shape(&self) -> [usize; 3] {
        [CHANNELS, self.target_size.1 as usize, self.target_size.0 as usize]
    }

    /// Range each normalized value of channel `c` must fall in: the images of 0 and 1.
    pub fn channel_bounds(&self) -> [(T, T); 3] {
        std::array::from_fn(|c| {
            let m = self.channel_mean[c];
            let s = self.channel_std[c];
            ((T::zero() - m) / s, (T::one() - m) / s)
        })
    }
}

/// Channel-first array with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitArray<T> {
    pub data: Vec<T>,
    pub shape: [usize; 3],
}

/// Normalized `channels × height × width` array, traceable to its source record.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedImage<T> {
    pub data: Vec<T>,
    pub shape: [usize; 3],
    pub source: String,
}

impl<T: Copy> PreprocessedImage<T> {
    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// Decodes `path`, converts to 8-bit RGB and resizes with bilinear filtering.
/// The image is stretched to the target size; aspect ratio is not kept.
pub fn load_and_resize<T>(path: &Path, config: &PreprocessConfig<T>) -> Result<RgbImage, PreprocessError> {
    let decoded = image::open(path).map_err(|source| PreprocessError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = config.target_size;
    if rgb.dimensions() == (w, h) {
        return Ok(rgb);
    }
    Ok(image::imageops::resize(&rgb, w, h, FilterType::Triangle))
}

/// HWC 8-bit → CHW `v / 255`.
pub fn to_unit_array<T: Float + FromPrimitive>(image: &RgbImage) -> UnitArray<T> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let plane = w * h;
    let scale = T::from_f64(255.0).expect("representable");
    let mut data = vec![T::zero(); CHANNELS * plane];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..CHANNELS {
            data[c * plane + i] = T::from_u8(px.0[c]).expect("representable") / scale;
        }
    }
    UnitArray {
        data,
        shape: [CHANNELS, h, w],
    }
}

pub fn normalize<T: Float>(
    array: &UnitArray<T>,
    config: &PreprocessConfig<T>,
    source: impl Into<String>,
) -> Result<PreprocessedImage<T>, PreprocessError> {
    let expected = config.output_shape();
    if array.shape != expected || array.data.len() != expected.iter().product::<usize>() {
        return Err(PreprocessError::Shape {
            expected,
            actual: array.shape,
        });
    }
    let plane = expected[1] * expected[2];
    let data = array
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            (v - config.channel_mean[c]) / config.channel_std[c]
        })
        .collect();
    Ok(PreprocessedImage {
        data,
        shape: expected,
        source: source.into(),
    })
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Float>(image: &PreprocessedImage<T>, config: &PreprocessConfig<T>) -> UnitArray<T> {
    let plane = image.shape[1] * image.shape[2];
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            v * config.channel_std[c] + config.channel_mean[c]
        })
        .collect();
    UnitArray {
        data,
        shape: image.shape,
    }
}

/// Runs the full pipeline on one file.
pub fn preprocess_file<T: Float + FromPrimitive>(
    path: &Path,
    config: &PreprocessConfig<T>,
    source: impl Into<String>,
) -> Result<PreprocessedImage<T>, PreprocessError> {
    let rgb = load_and_resize(path, config)?;
    normalize(&to_unit_array(&rgb), config, source)
}
