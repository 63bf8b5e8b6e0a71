pub mod config;
pub mod dispatch;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod report;
