pub mod autodiff;
pub mod decode;
pub mod error;
pub mod harness;
pub mod losses;
pub mod params;
pub mod protogen;
pub mod pseudomask;
pub mod synth;

pub use error::{FcpError, Result};
