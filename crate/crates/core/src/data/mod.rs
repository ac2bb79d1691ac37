//! Samples, manifests, fold splitting, dataset statistics and the synthetic
//! planted-topic world.

mod folds;
mod manifest;
mod stats;
mod synth;

pub use folds::{make_folds, DatasetSplit, FoldConfig};
pub use manifest::{
    area_resize, load_image, load_manifest, load_records, read_manifest, save_png, write_manifest, ManifestRecord,
};
pub use stats::{dataset_stats, herb_frequencies, most_frequent_herbs, DatasetStats};
pub use synth::{synth_generate, write_synth_dataset, PlantedWorld, SynthConfig};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its prescription as sorted herb ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[H, W, 3]`, values in [0, 1].
    pub image: Tensor,
    pub herbs: Vec<usize>,
    /// Topic ground truth, attached after the topic model is fitted.
    pub topics: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub herb_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn refs(&self) -> Vec<&Sample> {
        self.samples.iter().collect()
    }

    /// Samples in the order of `ids`; every id must exist.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        let index: HashMap<&str, usize> = self.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| &self.samples[i])
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown sample id `{id}`")))
            })
            .collect()
    }

    pub fn prescriptions(&self) -> Vec<Vec<usize>> {
        self.samples.iter().map(|s| s.herbs.clone()).collect()
    }
}
