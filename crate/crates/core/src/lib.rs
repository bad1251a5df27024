//! Current-based model predictive pulse pattern control (MP³C) of two
//! converters sharing a three-winding transformer, with impedance
//! measurement and validation against a small-signal model.

pub mod config;
pub mod error;
pub mod exec;
pub mod frames;
pub mod harness;
pub mod mp3c;
pub mod numfmt;
pub mod opp;
pub mod plant;
pub mod smallsignal;
pub mod trajectory;

pub use error::{Error, Result};
