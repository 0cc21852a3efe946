//! Rule-guided tool-calling agent over knowledge graphs.

pub mod agent;
pub mod config;
pub mod data;
pub mod env;
pub mod eval;
pub mod kg;
pub mod policy;
pub mod rules;
pub mod selflearn;
pub mod synthetic;
pub mod template;
pub mod trajectory;
