//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

pub mod geohash_ref;
pub mod graph_ref;
