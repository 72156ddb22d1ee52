//! Bit-accurate behavioral model of a hybrid digital/analog SRAM compute-in-memory
//! macro with on-the-fly saliency-driven precision configuration.
//!
//! A multi-bit dot product is split into `w x a` one-bit MACs indexed by output
//! order `k = i + j`. The few highest orders are evaluated digitally first and
//! reduced to a saliency score; the score picks a digital/analog boundary, after
//! which orders above the boundary run on the exact digital path, a window of
//! orders below it runs on the noisy analog path with a low-bit ADC, and the rest
//! is dropped.
//!
//! Module map:
//!
//! - [`quant`], [`partition`]: quantized tensors, bit planes and the grid partition
//! - [`dcim`]: exact digital partial sums and the 3-bit normalizer used by the evaluator
//! - [`acim`]: DAC, charge sharing with additive noise, SAR ADC, SNR measurement
//! - [`hmu`]: one hybrid MAC unit row: eval, digital, analog and accumulate
//! - [`ose`]: saliency accumulation and boundary selection
//! - [`scheduler`]: cycle accounting and the event-cost energy model
//! - [`cim_macro`]: one macro invocation across all HMUs
//! - [`calibration`]: threshold search against loss constraints
//! - [`harness`]: desk-scale quantized CNN inference on the simulated macro
//! - [`config`]: the JSON experiment configuration

pub mod acim;
pub mod calibration;
pub mod cim_macro;
pub mod config;
pub mod dcim;
pub mod error;
pub mod harness;
pub mod hmu;
pub mod ose;
pub mod partition;
pub mod probe;
pub mod quant;
pub mod rng;
pub mod scheduler;
pub mod stats;

pub use error::{Error, Result};
