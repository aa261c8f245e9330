//! Counterdiabatic Hamiltonian Monte Carlo.
//!
//! A population of particles is carried along a path of densities
//! `pi_lambda(q) ∝ exp(-V_lambda(q))`, `lambda` in `[0, 1]`, by one step of a
//! splitting integrator per schedule point. The integrator follows the driven
//! Hamiltonian `H_lambda + lambda_dot * A`, where the gauge potential `A` is refit
//! at every step by minimising the squared residual of
//! `{A, H} = d_lambda V` over the weighted population. Each step's change in
//! the undriven Hamiltonian is the work `W`, and weights are updated by
//! `exp(-W)` as in an SMC sampler, giving consistent weighted estimates and a
//! normalising-constant estimate.
//!
//! Module map:
//!
//! * [`systems`]: time-varying potentials and annealing schedules.
//! * [`gauge`]: polynomial and MLP gauge potentials, Poisson brackets, loss gradients.
//! * [`training`]: Adam fitting and the closed-form least-squares oracle.
//! * [`dynamics`]: counterdiabatic leapfrog, momentum refresh, work.
//! * [`smc`]: populations, weights, ESS, resampling and the runner.
//! * [`bench`]: quadrature oracles, error metric and the benchmark table.
//! * [`config`], [`output`], [`validate`]: the command-line front end.

pub mod bench;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod gauge;
pub mod output;
pub mod rng;
pub mod smc;
pub mod systems;
pub mod training;
pub mod validate;

pub use error::{ChmcError, Result};
