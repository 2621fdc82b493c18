//! Multi-turn intent identification by reinforcement-learned path walking
//! over a typed intent graph.

pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod manager;
pub mod model;
pub mod numeric;
pub mod reasoner;
pub mod trace;
pub mod training;
