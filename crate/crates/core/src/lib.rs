//! Continuous-action MuZero.
//!
//! Monte Carlo tree search with progressive widening runs over a learned
//! latent model (representation, dynamics and prediction networks). The
//! policy head is a diagonal Gaussian trained to match the density implied by
//! root visit counts; value and reward heads are categorical over the integer
//! supports `-10..=10` after an invertible squashing transform.
//!
//! ```text
//! observation --represent--> s0 --predict--> (mu, sigma, v)
//!                             |
//!               action -----> dynamics --> (r, s1) --predict--> ...
//! ```
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`]: dense networks, a vector-level reverse-mode tape and Adam.
//! * [`model`]: the three learned functions plus scalar/support transforms.
//! * [`mcts`]: progressive-widening search with PUCB selection.
//! * [`replay`]: prioritized episode storage and n-step targets.
//! * [`training`]: unrolled losses and optimizer steps.
//! * [`envs`]: native cart-pole, double pendulum and a 1-D bandit.
//! * [`selfplay`]: actor loops and the weight snapshot slot.
//! * [`run`]: run configuration and train/eval orchestration.
//! * [`selftest`]: fast property suites used by `cmuzero selftest`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod envs;
pub mod error;
pub mod mcts;
pub mod model;
pub mod nn;
pub mod replay;
pub mod run;
pub mod seed;
pub mod selfplay;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
