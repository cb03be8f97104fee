//! Chat service and command line around the guiderag engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod store;
