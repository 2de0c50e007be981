//! Core of the quantum network control stack.
//!
//! The crate is organised bottom-up:
//!
//! * [`topology`] typed fiber fabric and its configuration format
//! * [`rwa`] shortest-path routing with first-fit wavelength assignment
//! * [`physics`] expected-value optical model (loss, Raman noise, CAR, visibility, fidelity)
//! * [`bus`] topic-addressed in-process message bus
//! * [`control`] Q-NET server, SDN agent and resource actors running the discovery and
//!   entanglement-distribution protocols
//! * [`sim`] seeded discrete-event driver with drift, servos, faults and reports

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bus;
pub mod control;
pub mod event;
pub mod ids;
pub mod physics;
pub mod rwa;
pub mod sim;
pub mod topology;

pub use ids::{ActorId, LinkId, NodeId, PortId, RequestId};
pub use rwa::{EntanglementRoute, LightPath, RouteAllocation, WeightCoefficients};
pub use topology::{Band, FiberLink, Node, NodeKind, Topology, WavelengthChannel};
