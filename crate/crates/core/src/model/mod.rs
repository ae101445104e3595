//! Configurable tiny hierarchical mix-transformer encoder with an all-MLP
//! decoder, its parameter store, and a hand-rolled reverse-mode tape that
//! yields exact parameter gradients.

pub mod config;
pub mod network;
pub mod params;
pub mod tape;

pub use config::{MergeSpec, ModelConfig};
pub use network::{
    build_model_forward, decoder_forward, encoder_forward, model_forward,
    overlapped_patch_merge, transformer_stage, FeatureMap, ModelForward, StageFeatures,
};
pub use params::{
    init_parameters, load_checkpoint, parameter_count, parameter_specs, save_checkpoint,
    validate_against_config, CheckpointDtype, ParamEntry, ParameterSet,
};

use crate::datamodel::{Image, ProbabilityMap};
use crate::error::Result;
use crate::losses::softmax_map;
use crate::tiler::TileModel;

/// A configured model plus weights, ready for inference.
pub struct SegmentationModel {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl SegmentationModel {
    pub fn new(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        validate_against_config(&params, &config)?;
        Ok(SegmentationModel { config, params })
    }
}

impl TileModel for SegmentationModel {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict_probs(&self, tile: &Image) -> Result<ProbabilityMap> {
        let logits = model_forward(tile, &self.config, &self.params)?;
        softmax_map(&logits)
    }
}
