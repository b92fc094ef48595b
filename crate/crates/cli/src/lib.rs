pub mod acceptance;
pub mod commands;
pub mod config;
