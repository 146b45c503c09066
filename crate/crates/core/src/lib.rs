//! Policy-carrying information flow control for apps that span phones and
//! cloud services.
//!
//! Users attach sharing policies to data read from OS-protected resources
//! (camera, GPS, calendar). The policies become labels that follow the data
//! through untrusted application code, and enforcement points release the
//! data only to attested services or to devices whose logged-in user the
//! policy names.
//!
//! - [`principals`]: user service, groups, certificates
//! - [`labels`]: label algebra and the flow rule
//! - [`attestation`]: simulated TPM quotes and platform certificates
//! - [`taint_vm`]: mini language with explicit and implicit flow tracking
//! - [`agate`]: device node (login, policies, resource interposition)
//! - [`magma`]: enforcement runtime around an interpreter process
//! - [`geode`]: encrypting, rollback-detecting storage proxy
//! - [`netsim`]: deterministic network, trace and auditor
//! - [`scenario`]: scenario files and the runner

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod agate;
pub mod attestation;
pub mod geode;
pub mod labels;
pub mod magma;
pub mod netsim;
pub mod principals;
pub mod scenario;
pub mod taint_vm;

mod crypto;

/// Identifies a node (device or server) in the simulated network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}", self.0)
    }
}
