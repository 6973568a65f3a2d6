pub mod commands;
pub mod error;
pub mod fixture;
pub mod manifest;
pub mod models;
pub mod pipeline;
pub mod report;
