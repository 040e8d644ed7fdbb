pub mod config;
pub mod data;
pub mod metrics;
pub mod run;
