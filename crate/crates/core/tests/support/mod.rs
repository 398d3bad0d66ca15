//! Oracles shared by several test targets.
#![allow(dead_code)]

pub mod attention;
pub mod spectral;
