//! Runtimes that drive sans-IO agents: a discrete-event simulator on a
//! virtual clock and a threaded TCP runtime on the system clock.

pub mod net;
pub mod sim;

pub use net::{Directory, Node};
pub use sim::{Fault, FaultInjector, SimConfig, Simulation};
