//! Waveguide-QED photon generation and measurement pipeline.
//!
//! Qubits coupled to a bidirectional transmission line emit itinerant
//! photons into two propagating modes. This crate models the emitted
//! two-mode states, their time-domain generation, noisy heterodyne
//! detection through amplifier chains, moment reconstruction, state
//! tomography, and single-qubit elastic-scattering spectroscopy.

pub mod detection;
pub mod dynamics;
pub mod emission;
pub mod error;
pub mod fock;
pub mod moments;
pub mod scenario;
pub mod spectroscopy;
pub mod tomography;

pub use error::{Error, Result};
