//! Multilingual point-of-interest retrieval over a heterogeneous graph of
//! POIs and historical queries.

pub mod config;
pub mod datamodel;
pub mod error;
pub mod evalkit;
pub mod geocode;
pub mod graphbuild;
pub mod hgl;
pub mod numerics;
pub mod pipeline;
pub mod ranker;
pub mod textenc;
pub mod util;

pub use error::{Error, Result};
