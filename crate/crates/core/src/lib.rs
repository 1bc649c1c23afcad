pub mod adam;
pub mod cli;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod gradcheck;
pub mod imls;
pub mod io;
pub mod kdtree;
pub mod loss;
mod mc_tables;
pub mod mesher;
pub mod metrics;
pub mod octree;
pub mod real;
pub mod recon;
pub mod reduce;

pub use error::{Error, Result};
pub use real::Real;
