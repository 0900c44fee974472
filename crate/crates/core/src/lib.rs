pub mod adapt;
pub mod bench;
pub mod counter;
pub mod density;
pub mod error;
pub mod formats;
pub mod grid;
pub mod ipse;
pub mod session;
pub mod sim;

pub use error::{Error, Result};
pub use grid::{DensityGrid, LabelMap};
