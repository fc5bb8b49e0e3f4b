//! Command line entry points and the HTTP job API.

pub mod api;
pub mod cli;
pub mod config;
pub mod jobs;
pub mod models;
pub mod run;
