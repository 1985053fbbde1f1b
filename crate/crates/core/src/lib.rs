//! Continual pre-training loss law.
//!
//! The crate models the validation loss of a language model during continual
//! pre-training (CPT) as a function of the learning-rate schedule. It covers
//! the whole workflow: building schedules, computing the forward and
//! annealing areas, evaluating the law and its variants, fitting the law to
//! logged loss curves, generating synthetic curves, and searching for
//! hyper-parameters (loss potential, peak LR, replay ratio, CPT length).

pub mod areas;
pub mod cli;
pub mod error;
pub mod fit;
pub mod hpopt;
pub mod io;
pub mod law;
pub mod lbfgs;
pub mod ood;
pub mod plot;
pub mod schedule;
pub mod synth;

pub use error::{Error, Result};
