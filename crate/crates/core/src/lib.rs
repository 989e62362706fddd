//! Invariant risk minimization toolkit.
//!
//! * [`diff`]: reverse-mode autodiff with double-backward.
//! * [`envgen`]: two-bit spurious-correlation environments and IDX loading.
//! * [`model`]: MLP feature extractor with shared, frozen-scalar or per-environment heads.
//! * [`methods`]: ERM, IRMv1, IRMv0, REx, Fishr, IRM-Game, BLOC-IRM and its variants.
//! * [`optim`]: SGD, Adam, LSGD, LALR and SAM.
//! * [`eval`]: accuracy over a grid of test environments.
//! * [`experiment`]: config-driven runs, comparisons and sweeps.

pub mod diff;
pub mod envgen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod methods;
pub mod optim;

pub use error::{Error, Result};
