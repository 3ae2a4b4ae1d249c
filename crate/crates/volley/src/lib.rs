//! Volunteer-computing scheduler library: job lifecycle and replication
//! validation, credit accounting, client- and server-side scheduling
//! policies, plus a deterministic discrete-event simulator that exercises
//! all of it against synthetic host populations.

pub mod cli;
pub mod client;
pub mod credit;
pub mod domain;
pub mod lifecycle;
pub mod report;
pub mod server;
pub mod sim;
pub mod trace;
pub mod validation;
