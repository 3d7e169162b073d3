//! Spectral analysis of transformer checkpoint series.

pub mod fits;
pub mod format;
pub mod prune;
pub mod reference;
pub mod spectra;
pub mod tensor_io;
pub mod timelapse;
pub mod twotimescale;
pub mod warmup;
