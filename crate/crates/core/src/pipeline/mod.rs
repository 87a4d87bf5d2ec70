//! File formats, calibration, real-time replay and the command-line front end.

pub mod ablation;
pub mod calibration;
pub mod cli;
pub mod data;
pub mod files;
pub mod stream;

pub use ablation::{ablation_rows, train_all, AblationModels};
pub use calibration::{calibrate_tpose, Calibration};
pub use data::{load_dataset, save_dataset};
pub use files::{ImuSequenceFile, PoseSequenceFile};
pub use stream::{offline_reference, stream_replay, StreamConfig, StreamReport};
pub use cli::run_cli;
