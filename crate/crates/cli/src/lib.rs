//! Service runner and benchmark harness behind the `cfas` binary.

pub mod bench;
pub mod launch;
