//! One-shot federated fitting of random-intercept logistic regression.
//!
//! Data providers reduce each cluster to sample central moments
//! ([`moments::summarize_cluster`]); the analyst turns those summaries back
//! into moment-matched pseudo-data ([`pseudogen::generate_cluster`]) and fits
//! fixed-effects or random-intercept logistic models on it ([`glmm`]).
//! [`simlab`] runs the simulation protocol comparing fits on the original
//! data with fits on pseudo-data matched up to order 2, 3 and 4.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle_io;
pub mod cli;
pub mod error;
pub mod glmm;
pub mod ingest;
pub mod moments;
pub mod optim;
pub mod pseudogen;
pub mod seeding;
pub mod simlab;

pub use error::{Error, Result};
