//! Minimizing-movement solver for the gradient flow of a generalized Fisher
//! information under a nonlinear-mobility transport metric, restricted to a
//! uniform 1-D no-flux grid.
//!
//! The crate is organized around the pipeline
//!
//! 1. [`mobility`] — mobility functions, structural validation, induced maps;
//! 2. [`grid`] — discrete calculus and constraint projection;
//! 3. [`functionals`] — energy, entropy, first variation, weak-form residual;
//! 4. [`transport`] — the dynamic (space-time) distance solver;
//! 5. [`jko`] — the outer minimizing-movement time stepper;
//! 6. [`cascade`] — continuation over the regularized mobility family;
//! 7. [`oracle`] — an independent implicit integrator used for cross checks;
//! 8. [`cli`] + [`config`] + [`output`] — the config-driven experiment runner.

pub mod cascade;
pub mod cli;
pub mod config;
pub mod functionals;
pub mod grid;
pub mod jko;
pub mod mobility;
pub mod numerics;
pub mod oracle;
pub mod output;
pub mod transport;
