//! Core logic for the family cybersafety proxy.
//!
//! The crate is transport-free: everything here is synchronous and can be
//! driven directly from tests or wrapped by the HTTP services in `cfas-net`.
//!
//! - [`model`]: household, visibility/cybersafety options and the consent
//!   state machine every other module consults.
//! - [`store`]: the document store behind the data access layer.
//! - [`detectors`]: rule and lexicon baselines behind one [`detectors::Detector`] trait.
//! - [`dal`]: job orchestration (ExecID/DataID, dispatch, thresholds, decisions).
//! - [`imageguard`]: watermarking and encrypt-then-embed steganography.
//! - [`notify`]: templated notifications, per-recipient push queues, flags.
//! - [`backend`]: bundle distribution, consent-gated intake, key service,
//!   fallback analysis with deletion.

pub mod backend;
pub mod bundle;
pub mod dal;
pub mod detectors;
pub mod event;
pub mod imageguard;
pub mod model;
pub mod notify;
pub mod store;

pub use event::{ChatLine, Direction, EventKind, EventPayload, Platform, TrafficEvent};
pub use model::{MechanismKind, Timestamp};
