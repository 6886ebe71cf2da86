//! Progressive generation: a base pass at the native resolution followed by
//! one upscale, re-noise and denoise stage per scale.

mod artifacts;
mod config;
mod run;

pub use artifacts::{write_run_dir, ManifestEntry, RunManifest};
pub use config::{BackendKind, BackendSpec, EtaMode, GenerationConfig};
pub use run::{
    backend_from_config, base_noise, plan_conditioned_steps, run, stage_noise, BaseArtifacts, Pipeline,
    RunArtifacts, StageArtifacts, StageGeometry,
};
