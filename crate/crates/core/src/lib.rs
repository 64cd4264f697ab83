#![cfg_attr(not(test), no_std)]
extern crate alloc;

pub mod attention;
pub mod deliberation;
pub mod graph;
pub mod kb;
pub mod matrix;
pub mod poincare;
pub mod query;
pub mod rng;
pub mod tape;
pub mod tree;
