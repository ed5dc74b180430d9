//! HTTP service and command-line front end for `expert_router`.

pub mod api;
pub mod cli;
pub mod config;
