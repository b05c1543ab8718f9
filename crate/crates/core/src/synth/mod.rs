//! Synthetic episodic scenes with two complementary feature families:
//! "SAM-like" features that are coherent within a segment of one image but
//! carry no class identity across images, and "backbone-like" features tied
//! to a global per-class embedding.

mod dataset;
pub mod io;
mod render;
mod scene;
mod stats;

pub use dataset::{make_dataset, ClassId, DatasetConfig, DatasetSpec, Phase};
pub use render::{render_features, FeatureMap};
pub use scene::{min_target_pixels, random_scene, SceneSpec, Segment};
pub use stats::{complementarity_stats, ComplementarityStats, FamilyStats};
