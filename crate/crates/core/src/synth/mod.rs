//! Synthetic pan-tumor phantoms, preprocessing and dataset I/O.

pub mod dataset;
pub mod generate;
pub mod preprocess;
pub mod recipe;
pub mod volume;

pub use dataset::{generate_dataset, CaseEntry, DatasetConfig, DatasetManifest, Split};
pub use generate::{generate_case, Case, GeneratorConfig};
pub use preprocess::{augment, extract_patch, resample_isotropic, resample_labels, AugmentConfig, Patch};
pub use recipe::{default_organs, default_recipes, OrganSpec, TumorEdge, TumorRecipe, TumorShape};
pub use volume::{LabelKind, LabelMap, Legend, Volume};
