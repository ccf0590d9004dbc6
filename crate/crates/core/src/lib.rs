// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod nn;
pub mod optim;
pub mod seeding;
pub mod synthetic;
pub mod training;
