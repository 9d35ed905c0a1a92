//! Loading manifest records into one input tensor.

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use rayon::prelude::*;

use ovafuse_core::ingest::{DatasetManifest, ImageRecord};
use ovafuse_core::preprocess::{preprocess_file, PreprocessError};
use ovafuse_core::{ClassLabel, PreprocessConfig};

use crate::backbone::INPUT_SHAPE;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot preprocess {}: {source}", path.display())]
    Preprocess {
        path: PathBuf,
        #[source]
        source: PreprocessError,
    },
    #[error("preprocessing produced shape {actual:?}, models need {expected:?}")]
    Shape { expected: [usize; 3], actual: [usize; 3] },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

/// Preprocessed images stacked as `(N, 3, 224, 224)` with their labels and record ids.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Tensor,
    pub labels: Vec<ClassLabel>,
    pub ids: Vec<String>,
}

impl ImageSet {
    /// Decodes and normalizes `records` on a pool of `workers` threads; order is preserved.
    pub fn load(
        manifest: &DatasetManifest,
        records: &[ImageRecord],
        config: &PreprocessConfig,
        workers: usize,
    ) -> Result<Self, DataError> {
        if config.output_shape() != INPUT_SHAPE {
            return Err(DataError::Shape {
                expected: INPUT_SHAPE,
                actual: config.output_shape(),
            });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| DataError::Pool(e.to_string()))?;
        let processed = pool.install(|| {
            records
                .par_iter()
                .map(|r| {
                    let path = manifest.absolute_path(r);
                    preprocess_file(&path, config, r.id()).map_err(|source| DataError::Preprocess { path, source })
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        let per_image: usize = INPUT_SHAPE.iter().product();
        let mut data = Vec::with_capacity(records.len() * per_image);
        for img in &processed {
            data.extend_from_slice(&img.data);
        }
        let [c, h, w] = INPUT_SHAPE;
        Ok(ImageSet {
            images: Tensor::from_vec(data, (records.len(), c, h, w), &Device::Cpu)?,
            labels: records.iter().map(|r| r.label).collect(),
            ids: records.iter().map(ImageRecord::id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Class indices as a `u32` tensor, matching the logit column order.
    pub fn label_tensor(&self) -> candle_core::Result<Tensor> {
        let idx: Vec<u32> = self.labels.iter().map(|l| l.index() as u32).collect();
        Tensor::from_vec(idx, self.labels.len(), &Device::Cpu)
    }
}
