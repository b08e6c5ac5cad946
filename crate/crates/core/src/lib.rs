//! View-space palette decomposition for Gaussian splat scenes.
//!
//! Gaussians splat palette weights and lightness instead of colors. A trained
//! scene can then be color graded in real time by editing the palette, shaping
//! per-palette tone curves, or pinning pixel colors, all without touching the
//! Gaussian parameters.

pub mod color;
pub mod decomposition;
pub mod editing;
pub mod formats;
pub mod image;
pub mod losses;
pub mod math;
pub mod rasterizer;
pub mod scene;
pub mod sh;
pub mod ssim;
pub mod synthetic;
pub mod trainer;
