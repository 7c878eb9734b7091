pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod harness;
pub mod inner;
pub mod meta;
pub mod mirror;
pub mod model;
pub mod tasks;
