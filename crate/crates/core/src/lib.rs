//! Online certainty-equivalent control: continuous refinement of a dynamics
//! estimate by projected stochastic gradient steps, the explore-then-commit
//! baseline, and diagnostics for identifiability and regret rates.

pub mod algorithms;
pub mod analysis;
pub mod dynamics;
pub mod estimation;
pub mod policy;
pub mod seed;
pub mod simulate;
