//! Procedural two-hand and object scenes with exact annotations.

pub mod augment;
pub mod heatmap;
pub mod io;
pub mod object;
pub mod render;
pub mod scene;
pub mod skeleton;

pub use augment::{augment, random_augment, AugmentConfig, AugmentKind};
pub use heatmap::{gaussian_heatmap, joints_at_resolution, object_segmentation_mask, sample_heatmap, DEFAULT_SIGMA};
pub use io::{read_dataset, write_dataset};
pub use object::{object_catalog, rigid, ObjectModel};
pub use render::render_image;
pub use scene::{project, default_intrinsics, rescale_intrinsics, rescale_pixel, sample_scene, HandMode, SceneConfig, SceneSample};
pub use skeleton::{Hand, HandSkeletonTemplate, NUM_ARTICULATED, NUM_BONES, NUM_JOINTS, PARENTS};
