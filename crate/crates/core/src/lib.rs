pub mod baseline;
pub mod cli;
pub mod error;
pub mod features;
pub mod io;
pub mod metrics;
pub mod mlp;
pub mod phantom;
pub mod postprocess;
pub mod signal;
pub mod sphere;
pub mod tracking;

pub use error::{Error, Result};
pub use sphere::{angle_between, karcher_mean, local_minima, SphereGrid, UnitDirection};
