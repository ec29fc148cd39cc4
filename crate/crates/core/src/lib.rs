pub mod assemble;
pub mod basis;
pub mod bench;
pub mod error;
pub mod local;
pub mod mesh;
pub mod postproc;
pub mod quadrature;

pub use error::{Error, Result};
