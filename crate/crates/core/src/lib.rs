//! Differentiable generic-camera geometry.
//!
//! A camera is a per-pixel field of unit rays (a *ray surface*). Points are
//! unprojected by scaling rays with depth and projected back with a
//! temperature-controlled soft-argmax over a local patch of the context
//! surface, so view synthesis stays differentiable end to end. On top of
//! that sit the usual self-supervised photometric losses and a direct
//! gradient-descent fitter that recovers depth maps, relative poses and a
//! residual ray surface from short synthetic sequences.
//!
//! Rasters share one memory order everywhere: row-major, channel-interleaved
//! (`index = (y * width + x) * channels + c`). Pixel `(u, v)` is the centre of
//! column `u`, row `v`.

pub mod camera;
pub mod fit;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod projection;
pub mod scene;
pub mod synthesis;

pub use camera::{Intrinsics, RaySurface, ResidualSurface};
pub use fit::{FitConfig, FitResult, FitState};
pub use geometry::{Pose, PoseParams};
pub use grid::{ImageGrid, SampleResult};
pub use losses::LossWeights;
pub use projection::{PatchSpec, WarpGrid};
