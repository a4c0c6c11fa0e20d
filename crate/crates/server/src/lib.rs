//! HTTP API and command-line front end over the switchboard core.

pub mod api;
pub mod cli;
mod http_target;

pub use http_target::HttpTarget;
