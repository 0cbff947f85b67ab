//! Preference-tuning laboratory for factuality.

pub mod apeft;
pub mod factuality;
pub mod harness;
pub mod optim;
pub mod preflosses;
pub mod prefgen;
pub mod records;
pub mod seed;
pub mod tinylm;
pub mod tokenshift;
pub mod vocab;
pub mod world;
