pub mod dataset;
pub mod experiments;
pub mod report;
