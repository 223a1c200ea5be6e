//! Scene I/O, preprocessing, sampling, and synthetic data.

mod align;
mod cube;
mod patch;
mod split;
mod synth;

pub use align::{align_bands, AlignStep, AlignmentSpec};
pub use cube::{
    read_cube, read_labels, read_raw, standardize, write_cube, write_labels, EnviHeader, HyperCube, Interleave,
    LabelRaster,
};
pub use patch::{augment4, extract_patch, reflect, Patch, PatchSet, SamplePool};
pub use split::{stratified_split, Coord, SampleSplit};
pub use synth::{synth_generate, SynthConfig, SynthScene};
