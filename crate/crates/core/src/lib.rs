//! Two-sided missing-person registry.
//!
//! Families file *missing* entries into the LostPeople directory and finders
//! file *finding* entries into the FoundPeople directory. Every submission is
//! held in administrative processing (AP) until a police station approves it;
//! approved entries are checked for duplicates against their own directory and
//! then cross-matched by face embedding against the opposite directory. A match
//! links both entries and notifies the earlier uploader and their station.
//!
//! The crate is organised by concern:
//!
//! - [`embedding`]: face images, the embedding provider abstraction, the
//!   deterministic synthetic provider and the distance/threshold predicate.
//! - [`registry`]: the append-only entry log and the two directories.
//! - [`verification`]: citizen and police-station registries and the AP gate.
//! - [`notification`]: the outbox, message templates and the SMTP drain.
//! - [`matching`]: the submission pipeline that ties everything together.
//! - [`api`]: the HTTP+JSON surface.
//! - [`scenario`] and [`cli`]: end-to-end case replays and the operator tool.
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

pub mod api;
pub mod cli;
pub mod config;
pub mod embedding;
mod jsonl;
pub mod matching;
pub mod messages;
pub mod notification;
pub mod registry;
pub mod scenario;
pub mod verification;

pub use embedding::{
    distance, is_match, EmbeddingProvider, EmbeddingVector, FaceImage, ImageFormat,
    MatchThreshold, SyntheticFace, SyntheticProvider,
};
pub use matching::{
    Disposition, EntryReport, MatchResult, Pipeline, PipelineConfig, PipelineError, Submission,
    SubmissionOutcome,
};
pub use notification::{Notification, NotificationKind};
pub use registry::{Entry, EntryId, EntryStatus, EntryStore, Side, UploaderInfo};
pub use verification::{CaseId, CaseState, FixtureAuthority, VerificationCase};
