//! Shared by the integration tests of this crate and the acceptance target.

pub mod criteria;
pub mod oracle;
