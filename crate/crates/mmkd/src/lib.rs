//! Robust multi-modal semantic segmentation via two-stage knowledge distillation.
//!
//! The crate covers the whole desk-scale workflow:
//!
//! - [`synth`] — deterministic synthetic multi-modal scenes (dense RGB/depth
//!   analogs, sparse event/LiDAR analogs) and the on-disk `RMT1` dataset format.
//! - [`model`] — a tiny modality-agnostic hierarchical encoder/decoder used for
//!   both the teacher and the student.
//! - [`autodiff`] — the reverse-mode tape every loss and the trainer run on.
//! - [`distill`] — softmax/CE/KL primitives, the base distillation objective,
//!   modality dropout and total-loss composition.
//! - [`proto`] — class-prototype compression and the hybrid prototype
//!   distillation loss.
//! - [`fisher`] — Monte-Carlo functional Fisher information of the
//!   teacher-student feature KL, inverted per modality as a regularizer.
//! - [`eval`] — mIoU plus the EMM/RMM/NM robustness metric family.
//! - [`pipeline`] — teacher/student training loops, evaluation and report
//!   comparison behind [`config::RunConfig`].

pub mod autodiff;
pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fisher;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod proto;
pub mod rmt;
pub mod rng;
pub mod synth;

pub use config::RunConfig;
pub use error::{MmkdError, Result};
