//! In-memory split of a dataset and patch sampling.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::CounterRng;
use crate::synth::preprocess::{augment, center_patch, extract_patch, AugmentConfig, Patch};
use crate::synth::{DatasetManifest, LabelMap, Split, Volume};

/// Network inputs and targets for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub image: Vec<f32>,
    pub organ_mask: Vec<u8>,
    pub target: Vec<u8>,
    pub task: u8,
}

#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub index: usize,
    pub class_id: u8,
    pub volume: Volume,
    pub labels: LabelMap,
}

#[derive(Debug, Clone)]
pub struct SplitData {
    pub cases: Vec<LoadedCase>,
    host: Vec<(u8, u8)>,
}

impl SplitData {
    pub fn load(manifest: &DatasetManifest, split: Split, model: &ModelConfig) -> Result<Self> {
        let mut ds_classes = manifest.class_ids();
        let mut cfg_classes = model.classes.clone();
        ds_classes.sort_unstable();
        cfg_classes.sort_unstable();
        if ds_classes != cfg_classes {
            return Err(Error::Config(format!("dataset classes {ds_classes:?} do not match model classes {cfg_classes:?}")));
        }
        let cases = manifest
            .split(split)
            .into_iter()
            .map(|e| {
                let (volume, labels) = manifest.load_case(e)?;
                Ok(LoadedCase { index: e.index, class_id: e.class_id, volume, labels })
            })
            .collect::<Result<Vec<_>>>()?;
        let host = manifest.classes.iter().map(|c| (c.class_id, c.host_organ)).collect();
        Ok(Self { cases, host })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    fn to_sample(&self, patch: &Patch, task: u8, model: &ModelConfig) -> Result<PatchSample> {
        let organ_mask = patch.labels.organ_mask(|c| self.host.iter().find(|(k, _)| *k == c).map(|(_, h)| *h))?;
        let target = patch
            .labels
            .segmentation_target()?
            .iter()
            .map(|c| model.channel_of(*c).map(|ch| ch as u8))
            .collect::<Result<Vec<_>>>()?;
        Ok(PatchSample { image: patch.volume.grid.clone(), organ_mask, target, task })
    }

    /// Randomly placed, augmented training patch.
    pub fn train_patch(&self, i: usize, model: &ModelConfig, tumor_fraction: f64, aug: &AugmentConfig, rng: &mut CounterRng) -> Result<PatchSample> {
        let c = &self.cases[i];
        let p = model.backbone.patch;
        let patch = extract_patch(&c.volume, &c.labels, [p; 3], tumor_fraction, rng)?;
        let (volume, labels) = augment(&patch.volume, &patch.labels, rng, aug)?;
        self.to_sample(&Patch { volume, labels, ..patch }, c.class_id, model)
    }

    /// Centered evaluation patch.
    pub fn eval_patch(&self, i: usize, model: &ModelConfig) -> Result<PatchSample> {
        let c = &self.cases[i];
        let p = model.backbone.patch;
        let patch = center_patch(&c.volume, &c.labels, [p; 3])?;
        self.to_sample(&patch, c.class_id, model)
    }
}
