//! Synthetic stimuli, hemodynamic simulation and voxel selection.

pub mod bold;
pub mod dataset;
pub mod hrf;
pub mod scene;
pub mod select;

pub use bold::{convolve_drive, simulate_bold, SubjectRecording};
pub use dataset::{Dataset, DatasetConfig, Split, WindowDirection};
pub use hrf::HrfModel;
pub use scene::{render_clip, SceneCatalog, SyntheticScene, VideoClip};
pub use select::{select_voxels, SelectionConfig, VoxelSelection};
