//! Fuzzing-campaign toolkit for embedded-Linux utility binaries.
//!
//! The crate is organised along the pipeline it implements:
//!
//! * [`inventory`] scans an extracted firmware tree for ELF targets and pulls
//!   embedded component versions out of them.
//! * [`seedgen`] builds initial corpora, either from a chat-completion model
//!   or from a seeded random generator, and minimizes them by coverage.
//! * [`fuzzing`] supervises batches of external fuzzer campaigns.
//! * [`crashdb`] is the content-addressed crash database.
//! * [`reuse`] replays stored crashes against a new variant of a component.
//! * [`triage`] classifies, deduplicates and minimizes crashing inputs.
//! * [`report`] renders comparison tables and overlap counts.
//!
//! [`exec`] holds the process-execution primitives shared by replay and
//! triage, and [`toy`] ships a small deterministic crash target used by the
//! tests and the end-to-end demo.

pub mod crashdb;
pub mod exec;
pub mod fuzzing;
pub mod inventory;
pub mod report;
pub mod reuse;
pub mod seedgen;
pub mod toy;
pub mod triage;
mod types;

pub use types::{sha256_hex, Arch, CrashSignal, VersionInfo, VersionParseError};
