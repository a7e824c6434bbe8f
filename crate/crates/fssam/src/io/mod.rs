//! File formats and report rendering.
//!
//! - FSSF, a little binary container for one feature map or mask
//!   ([`fssf`]); round-trips are bit-exact.
//! - Binary PGM (P5) dumps of masks for visual inspection ([`pgm`]).
//! - Strict JSON configuration loading; unknown keys are rejected by name
//!   ([`config`]).
//! - Episode-set directories ([`episodes`]) and metric report rendering
//!   ([`report`]).

pub mod config;
pub mod episodes;
pub mod fssf;
pub mod pgm;
pub mod report;

pub use config::{load_pipeline_config, load_synth_spec, save_pipeline_config, save_synth_spec};
pub use episodes::{load_episodes, save_episodes};
pub use fssf::{read_feature_file, write_feature_file, FssfValue};
pub use pgm::write_pgm;
pub use report::{
    render_ablation_table, render_calibration_table, render_metrics_table, write_json,
};
