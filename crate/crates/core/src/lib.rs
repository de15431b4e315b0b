//! Neural task graph networks.
//!
//! One-shot imitation through conjugate task graphs: a demonstration is
//! interpreted into an action path, the path is completed into a graph of
//! permissible action-to-action transitions, and the graph is executed as a
//! reactive policy by a node localizer and an edge classifier.

pub mod ctg;
pub mod env;
pub mod executor;
pub mod flat;
pub mod gcn;
pub mod harness;
pub mod interpreter;
pub mod nn;
pub mod train;
