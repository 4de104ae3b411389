//! Shared inputs for the criterion benches.

use dcfl_core::bias::{synth_scene, SceneSpec};
use dcfl_core::GtInstance;

/// The standard {4, 16, 64} px scene with `per_class` objects of each size.
pub fn standard_scene(per_class: usize) -> Vec<GtInstance> {
    synth_scene(&SceneSpec::standard(per_class, 7)).expect("standard scene fits")
}
