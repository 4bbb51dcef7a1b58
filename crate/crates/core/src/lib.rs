//! Desk-scale simulated RC car: vehicle model, world, pilot networks, recording and drive loop.

// `!(x > 0.0)` guards deliberately reject NaN; numeric kernels index several buffers at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ctrlcli;
pub mod driveloop;
pub mod error;
mod fsutil;
pub mod pilots;
pub mod salience;
pub mod tensorkit;
pub mod tubstore;
pub mod vehiclesim;
pub mod workflows;
pub mod worldsense;

pub use error::{Error, Result};
