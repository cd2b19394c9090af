//! Synthetic phantoms, dataset directories and image-quality metrics.

pub mod io;
pub mod metrics;
pub mod phantoms;
