//! Shared fixtures for the benches in `benches/`.

use cortrack::clustering::FileAssignment;
use cortrack::synth::{generate, preset, GroundTruth, SyntheticConfig};
use cortrack::Dataset;

/// A synthetic run of `frames` frames from the named preset, seed 0.
pub fn fixture(name: &str, frames: usize) -> (Dataset, GroundTruth) {
    let cfg = SyntheticConfig {
        num_frames: frames,
        ..preset(name).expect("known preset")
    };
    generate(&cfg).expect("valid preset")
}

/// Ground-truth labels, which are consistent across frames.
pub fn truth_assignments(truth: &GroundTruth) -> Vec<FileAssignment> {
    truth.assignments()
}
