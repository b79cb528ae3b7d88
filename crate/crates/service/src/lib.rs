//! HTTP session service for live human-bot chat and blinded side-by-side
//! annotation. State lives in an append-only JSONL log replayed on start.

pub mod api;
pub mod error;
pub mod responder;
pub mod store;

pub use api::{router, serve, Service, ServiceConfig};
pub use error::{ServiceError, ServiceResult};
pub use store::Store;
