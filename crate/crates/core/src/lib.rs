//! Desk-scale laboratory for solving ill-posed linear inverse problems with
//! trained flow-matching priors.
//!
//! The crate trains a small velocity-field network on synthetic data,
//! integrates the learned flow with an Euler scheme (differentiating through
//! the unrolled integration), and recovers objects from degraded
//! measurements with five solvers: interleaved guidance, seed-space plug-in
//! optimization, an inverted-seed initialization with a χ² norm penalty,
//! and two warm-started variants that plug the measurement into a learnable
//! intermediate time of the flow (optionally re-projecting the seed onto the
//! Gaussian shell every step).
//!
//! Module map:
//! - [`autodiff`]: dense tensors + reverse-mode AD tape
//! - [`opt`]: Adam optimizer
//! - [`flow`]: path schedule, velocity network, flow-matching training
//! - [`ode`]: Euler generation and inversion
//! - [`degrade`]: linear forward operators and noisy observation
//! - [`solve`]: the five solvers plus Gaussianity machinery
//! - [`metrics`]: PSNR/SSIM/MSE and concentration diagnostics
//! - [`bench`]: datasets, config files, checkpoints, experiment runner

pub mod autodiff;
pub mod flow;
pub mod opt;
pub mod rng;
