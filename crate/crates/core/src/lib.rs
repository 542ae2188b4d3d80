//! Geometry optimization of periodic crystal structures.
//!
//! The crate bundles the pieces needed to relax atomic positions inside a
//! fixed unit cell and to compare relaxation methods:
//!
//! - [`crystal`]: lattices, structures, periodic neighbor search, random structures
//! - [`potential`]: calculator trait and a force-shifted Lennard-Jones potential
//! - [`extcalc`]: client for external calculators over a JSON-lines protocol
//! - [`optimizers`]: BFGS, BFGS with line search, FIRE, MDMin, CG, FIRE+BFGSLS
//!   and the learned multi-agent optimizer behind one relaxation loop
//! - [`env`]: the per-atom multi-agent environment (observations, actions, rewards)
//! - [`sac`]: soft actor-critic with shared networks, replay buffer and checkpoints
//! - [`bench`]: test-set generation, benchmark metrics, energy traces

pub mod bench;
pub mod crystal;
pub mod env;
pub mod extcalc;
pub mod optimizers;
pub mod potential;
pub mod sac;
pub mod xyz;
