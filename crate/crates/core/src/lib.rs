//! Near-optimal set-valued policies (SVPs) for finite tabular MDPs.
//!
//! A set-valued policy maps every state to a non-empty set of actions. An SVP
//! is ζ-optimal when its worst-case value, obtained by always taking the worst
//! action in each set, stays within a factor `1 - ζ` of the optimal value.

pub mod cli;
pub mod dag;
pub mod env;
pub mod error;
pub mod experiments;
pub mod learn;
pub mod mdp;
pub mod metrics;
pub mod offline;
pub mod oracle;
pub mod policy;
pub mod service;
pub mod solve;
pub mod svp;

pub use error::{Result, SvpError};
pub use mdp::{MdpBuilder, QTable, TabularMdp, ValueTable};
pub use policy::{ActionSet, SetValuedPolicy};
