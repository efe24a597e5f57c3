pub mod cli;
pub mod constraints;
pub mod contracts;
pub mod exec;
pub mod forms;
pub mod linear;
pub mod optimizer;
pub mod portfolio;
pub mod tree;
