//! Data ingestion, synthetic surfaces and configuration.

mod config;
mod hmd;
mod synth;

pub use config::{PipelineConfig, SynthConfig};
pub use hmd::{
    interpolate_log, parse_hmd, parse_hmd_str, write_hmd_string, HmdRates, Repair, MAX_MISSING_SHARE, TOP_AGE,
};
pub use synth::{synth_surface, SynthSpec, SynthSurface};
