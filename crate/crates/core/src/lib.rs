//! Link-level simulation of an indoor THz multi-user downlink with
//! array-of-subarrays hybrid beamforming and one-bit DACs.
//!
//! The crate is organised bottom-up: [`channel`] synthesizes multi-ray
//! subarray channels, [`beamforming`] selects analog beams and forms the
//! baseband channel matrix, [`precoding`] implements MRT/ZF with the one-bit
//! quantizer model, [`rate`] evaluates achievable-rate bounds and their
//! large-array limits, and [`scenario`] drives parameter sweeps from a TOML
//! scenario file.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beamforming;
pub mod channel;
pub mod error;
pub mod linalg;
pub mod precoding;
pub mod rate;
pub mod scenario;

pub use error::{Error, Result};
