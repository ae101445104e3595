//! Core raster/label types, dataset indexing, class statistics, and the
//! seeded synthetic scene generator.

mod io;
mod stats;
mod synth;
mod types;

pub use io::{load_dataset, read_image_png, read_mask_png, write_image_png, write_mask_png};
pub use stats::{compute_class_frequencies, frequencies_of_masks};
pub use synth::{generate_synthetic_scene, ClassTexture, SynthSpec};
pub use types::{
    ClassDef, ClassTable, DatasetIndex, FrequencyRow, FrequencyTable, Image, LabelMask, LogitMap,
    ProbabilityMap, Split, IGNORE_ID,
};
