//! Experiment drivers, CSV output, and protocol endpoints for the
//! `aschpuf` command-line tool.

pub mod csvout;
pub mod experiments;
pub mod net;
