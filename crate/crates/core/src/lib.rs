//! Replay-assisted federated training of a compact transformer classifier
//! head over frozen-encoder feature embeddings.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod client;
pub mod datastore;
pub mod nnkernel;
pub mod orchestrator;
pub mod seed;
pub mod server;

/// Identifier of a federation member.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub usize);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client {}", self.0)
    }
}
