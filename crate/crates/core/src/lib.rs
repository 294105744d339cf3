//! Budget-steerable elastic compression for small feed-forward networks.

pub mod autodiff;
pub mod certificate;
pub mod controller;
pub mod cost;
pub mod elastic;
pub mod error;
pub mod export;
pub mod linalg;
pub mod network;
pub mod profile;
pub mod quant;
pub mod train;

pub use error::{Error, Result};
