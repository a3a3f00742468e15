//! Synthetic data, netpbm image/label files, and the dataset layout.

pub mod dataset;
pub mod image;
pub mod synth;

pub use dataset::{dataset_checksum, generate_synthetic, Dataset, Meta, Sample};
pub use image::{
    colorize, read_pgm, read_ppm, write_pgm, write_ppm, Image, LabelMap, IGNORE_LABEL,
};
pub use synth::{render, SynthSpec, CLASS_NAMES, PALETTE};
