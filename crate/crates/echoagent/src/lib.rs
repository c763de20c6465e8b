//! Host-side runtime: storage, remote backends, vision adapters, parallel
//! benchmark runs, configuration and the HTTP service.

pub use echoagent_core as core;

pub mod adapter;
pub mod remote;
pub mod store;
pub mod config;
pub mod runner;
pub mod service;
