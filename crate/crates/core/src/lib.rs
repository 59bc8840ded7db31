//! Dynamic offloading of a multi-robot task across edge resources.
//!
//! Robots score each resource from its CPU, memory and link quality, share
//! the scores, propose the best resource and agree on a single host by
//! plurality vote. The [`sim`] module drives all of it in a discrete-event
//! simulation.

pub mod consensus;
pub mod ids;
pub mod netsim;
pub mod profiling;
pub mod scheduler;
pub mod sim;
pub mod utility;

pub use ids::{EdgeId, RobotId};
