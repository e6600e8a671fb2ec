pub mod acceptance;
pub mod claims;
pub mod decompose;
pub mod dp;
pub mod error;
pub mod exec;
pub mod gpde;
pub mod hedge;
pub mod mc;
pub mod paths;
pub mod scenarios;

pub use error::{Error, Result};
