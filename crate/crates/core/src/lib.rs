pub mod config;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod inekf;
pub mod kinematics;
pub mod lidar_odom;
pub mod lie;
pub mod observations;
pub mod runner;
pub mod sim;
pub mod smoother;
pub mod state;

pub use error::{Error, ErrorClass, Result};
