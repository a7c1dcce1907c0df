//! Minimal dense reverse-mode automatic differentiation.

pub mod gradcheck;
mod kernels;
mod tape;

pub use tape::{BnMode, OpKind, RunningStats, Tape, Var};

#[cfg(test)]
mod tests;
