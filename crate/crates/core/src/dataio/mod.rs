//! Image files, datasets and run configuration.

pub mod config;
pub mod dataset;
pub mod pnm;
pub mod synth;

pub use config::{parse_config, parse_config_str, Provenance, RunConfig};
pub use dataset::{augment, center_resize, load_dataset, resize_bilinear, Dataset, Normalization, Sample, Split};
pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_ppm, write_pgm, write_ppm, GrayImage, RgbImage};
pub use synth::{synth_shapes, Shape, SHAPE_NAMES};
