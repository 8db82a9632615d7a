//! IO layer and experiment harness for the pose-and-deformation fitter:
//! file formats (OBJ, JSON, PGM, RLE masks, binary bases), synthetic-data
//! generation, batch benchmarking and the `ttp` command line.

pub mod bench;
pub mod formats;
pub mod jsonio;
pub mod metrics;
pub mod multistart;
pub mod synth;
