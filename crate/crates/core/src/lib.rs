pub mod calculus;
pub mod config;
pub mod control;
pub mod exec;
pub mod geometry;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod run;
pub mod solver;
