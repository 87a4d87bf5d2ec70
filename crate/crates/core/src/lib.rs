pub mod checkpoint;
pub mod error;
pub mod garmentnoise;
pub mod gidnet;
pub mod kinematics;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod posenet;
pub mod rotmath;
pub mod trainer;

pub use error::{GidError, Result};
