//! Expert review service: an uncertainty-ordered queue of foams, their
//! views, predictions and explanation overlays, and an append-only journal
//! of the expert's labels.
//!
//! Labels never touch the dataset: the journal (plus a snapshot derived
//! from it) is the only record, and replaying it rebuilds the review state.

pub mod error;
pub mod journal;
pub mod service;
pub mod store;

pub use error::{ReviewError, ReviewResult};
pub use journal::{Journal, LabelEvent};
pub use service::{order_queue, port_from_env, serve, QueueEntry, QueueOrder, ReviewItem, Service, ServiceConfig, Status};
pub use store::{LabelOutcome, Review, ReviewState, ReviewStore};
