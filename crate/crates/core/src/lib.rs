//! Crater detection on planetary mosaics with a compact U-Net.
//!
//! The crate covers the whole pipeline:
//!
//! 1. [`geo`]: cropping tiles out of a Plate Carree mosaic and reprojecting
//!    them orthographically about the tile center.
//! 2. [`catalog`]: crater catalogues, conversion to tile pixel space and
//!    rasterization of rim masks.
//! 3. [`synth`]: deterministic synthetic crater fields for two "bodies" that
//!    share the label space but differ in their image statistics.
//! 4. [`net`]: the U-Net, its loss, backpropagation, ADAM, training,
//!    fine-tuning and checkpoints.
//! 5. [`post`]: thresholding, ring template matching, duplicate removal,
//!    matching against ground truth and precision/recall/F1.
//! 6. [`pipeline`]: glue that runs a trained network over tiles and scores it.

pub mod catalog;
pub mod error;
pub mod geo;
pub mod grid;
pub mod net;
pub mod pipeline;
pub mod post;
pub mod synth;

pub use catalog::{CatalogEntry, PixelCrater};
pub use error::{Error, Result};
pub use grid::Grid;

/// SplitMix64 finalizer, used to derive independent RNG streams from a master
/// seed and a sequence of indices.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
