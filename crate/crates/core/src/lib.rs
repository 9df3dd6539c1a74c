//! Adversarial transfer under geometric transforms: a small CPU tensor
//! engine, a model zoo, transfer attacks and the evaluation protocols that
//! measure how transposing or rotating adversarial examples changes their
//! effect on other models.

pub mod attack;
pub mod bench;
pub mod cli;
pub mod data;
pub mod io;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod xform;
pub mod zoo;
