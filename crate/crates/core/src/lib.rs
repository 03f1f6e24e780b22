//! Graph transfer learning under label noise.
//!
//! Trains a node classifier on a label-noisy source graph and predicts on an
//! unlabeled, domain-shifted target graph by combining
//!
//! * cross-view contrastive learning between the normalized adjacency and its
//!   randomized low-rank reconstruction ([`spectral`], [`losses`]),
//! * class-balanced, label-conditioned adversarial alignment ([`alignment`]),
//! * mutual-information-aware removal of suspected noisy labels ([`refinement`]).
//!
//! [`trainer::fit`] runs the full procedure on a [`data::DomainPair`].

pub mod alignment;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod params;
pub mod refinement;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
