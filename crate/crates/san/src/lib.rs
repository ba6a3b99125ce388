//! Pose transfer with a semantic attention network.
//!
//! The crate trains a two-pathway generator that moves a person image from a
//! source pose to a target pose, guided by binary pose masks and one-hot
//! semantic parsing maps. A sequence of semantic attention blocks gates the
//! semantic code into the appearance code with sigmoid attention masks, and a
//! U-net style decoder reassembles the image from skip-connected content
//! features. Alongside the model the crate ships:
//!
//! - a deterministic synthetic person dataset so every experiment runs on a
//!   desk-class CPU ([`data`]),
//! - the adversarial / pixel / perceptual training objective ([`losses`]),
//! - an alternating GAN trainer with linear learning-rate decay and
//!   checkpointing ([`trainer`]),
//! - generative quality metrics: FID, LPIPS and mask-LPIPS ([`metrics`]),
//! - a person re-identification harness that measures how much generated
//!   pose variants help a small identity classifier ([`reid`]).
//!
//! All randomness is seeded and all file outputs are byte-deterministic, so
//! any run can be reproduced from the config echo it writes.

pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod reid;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
