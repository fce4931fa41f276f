pub mod alphabet;
pub mod certify;
pub mod channel;
pub mod detection;
pub mod error;
pub mod fock;
pub mod rates;
pub mod sdp;

pub use error::{Error, Result};
