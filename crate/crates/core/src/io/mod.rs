//! Volume file formats and synthetic test data.

pub mod nifti;
pub mod raw;
pub mod synth;

pub use nifti::{
    label_nifti_bytes, nifti_bytes, parse_header, read_nifti, read_nifti_file, to_big_endian,
    write_label_nifti, write_nifti, FloatWidth, NiftiData, NiftiHeader,
};
pub use raw::{read_raw, sidecar_path, write_raw_volume, write_raw_warp, RawArray, RawSidecar};
pub use synth::{synth_pair, synth_pair_with, warp_labels_nearest, LabelPrior, SynthConfig, SynthPair};
