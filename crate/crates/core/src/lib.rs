//! Seizure-onset detection from weakly labeled EEG, at desk scale.
//!
//! The crate covers the full pipeline: a seeded synthetic EEG corpus with
//! planted events and technician-style notes ([`synth`]), EDF and native-format
//! ingestion with clip segmentation and patient-stratified splits ([`data`]),
//! regex extraction of attribute labels from workflow notes ([`notes`]), a
//! stacked state-space sequence classifier trained with a tape-based autodiff
//! engine ([`tensor`], [`ssm`], [`model`], [`train`]), and evaluation with
//! subgroup-stratified AUROC, DeLong tests, and an event-based
//! false-positives-per-24-hours clinical-utility metric ([`metrics`]).

pub mod check;
pub mod data;
pub mod metrics;
pub mod model;
pub mod notes;
pub mod report;
pub mod scalar;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
