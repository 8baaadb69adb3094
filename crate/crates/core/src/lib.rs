//! Vehicle detection in lidar range scans with a fully convolutional network.
//!
//! The pipeline projects a scan onto a 2-channel point map, predicts
//! per-cell objectness and an anchor-relative 24-value box encoding, decodes
//! and clusters the candidates, and scores the result with AP/AOS.

pub mod boxcodec;
pub mod config;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod kittio;
pub mod pointmap;
pub mod render;
pub mod synth;
pub mod tensornet;
pub mod trainer;

pub use error::{Error, Result};
