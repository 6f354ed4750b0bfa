pub mod artifacts;
pub mod autonomy;
pub mod error;
pub mod expert;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod protocol;
pub mod session;
pub mod sim;
pub mod skills;
pub mod spatial;
pub mod students;
pub mod track;
pub mod trajectory;
pub mod vehicle;
pub mod zpd;

pub use error::{Error, Result};
