//! Keystroke-dynamics embeddings and 1:N re-identification of anonymous
//! typing profiles.
//!
//! Pipeline: [`ingestion`] parses raw press/release logs, [`features`] turns
//! them into masked fixed-length timing matrices, [`model`] embeds those with
//! a recurrent network trained on sequence pairs, [`gallery`] ranks verified
//! profiles against anonymous samples and [`evaluation`] measures ranking
//! quality as cumulative match curves. [`synth`] generates synthetic typist
//! populations for desk-scale experiments.

pub mod cli;
pub mod embedding;
pub mod evaluation;
pub mod features;
pub mod gallery;
pub mod ingestion;
pub mod model;
mod seeding;
pub mod synth;
