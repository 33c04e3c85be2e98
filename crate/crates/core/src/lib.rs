//! Toolkit for the AX3000 channel state information (CSI) report protocol.
//!
//! - [`wire`]: bit-exact command and CSI report codec
//! - [`controller`]: drives an AP through the bring-up sequence
//! - [`collector`]: receives, windows, persists and fans out CSI reports
//! - [`capture`]: capture file format and replay
//! - [`analysis`]: spectra and running statistics
//! - [`emulator`]: protocol-faithful AP stand-in with synthetic channels

pub mod analysis;
pub mod capture;
pub mod collector;
pub mod controller;
pub mod emulator;
pub mod record;
pub mod wire;

pub use record::CsiRecord;
