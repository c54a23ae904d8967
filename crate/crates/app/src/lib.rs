//! Command-line tools and the HTTP recommendation service.

pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod service;
