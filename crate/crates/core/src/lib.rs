//! Motion monitoring for acoustic-camera (forward-looking sonar) image sequences.
//!
//! Forward-looking sonar produces video-rate intensity images in zero-visibility
//! water, but the imagery is noisy, weakly textured, and viewpoint-dependent, so
//! feature-matching trackers fail on it. This crate tracks drifting targets the
//! dense way instead:
//!
//! 1. **Preprocess** – temporal-median background subtraction, hole inpainting
//!    (fast-marching or biharmonic), guided-filter smoothing.
//! 2. **Saliency** – spectral-residual saliency restricted to the sonar fan,
//!    thresholded into ROIs and connected-component blobs.
//! 3. **Flow** – dense two-frame optical flow by polynomial expansion with
//!    pyramidal coarse-to-fine refinement.
//! 4. **Tracking** – per-blob flow aggregation, crosstalk-lobe rejection,
//!    greedy nearest-neighbor association, and metric speed from the
//!    pixel-displacement × resolution × frame-rate law.
//! 5. **Synthesis & evaluation** – a scripted scene generator with exact
//!    ground truth, plus speed/trajectory error reports against it.

pub mod error;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod preprocess;
pub mod render;
pub mod saliency;
pub mod synth;
pub mod tracking;

pub use error::{Error, Result};
pub use grid::{Grid, Mask};
