//! Shared fixtures for the pipeline benchmarks.

use pq_core::synth::{fixture_proposals, generate_scene, CorruptionSpec, SceneSpec, SyntheticScene};
use pq_core::MaskSequence;

/// The corrupted two-spheres fixture with `views` ring views and `frames`
/// frames.
pub fn fixture(views: usize, frames: usize, seed: u64) -> (SyntheticScene, Vec<MaskSequence>) {
    let spec = SceneSpec {
        frames,
        ..SceneSpec::two_spheres(views, seed)
    };
    let synth = generate_scene(&spec).expect("fixture generates");
    let props = fixture_proposals(&synth, &CorruptionSpec::standard(views, seed)).expect("corruption applies");
    (synth, props)
}
