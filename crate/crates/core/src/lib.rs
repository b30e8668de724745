//! Hierarchical Mobile IPv6 admission control and load balancing lab.
//!
//! The crate holds the mobility-layer algorithms (CN-count admission
//! control, replacement and MAP selection), a deterministic discrete-event
//! simulator of MAP domains that exercises them against standard HMIPv6,
//! the metrics it reports, the scenario file format and the sweep harness
//! used by the command-line front end.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod addressing;
pub mod admission;
pub mod event;
pub mod metrics;
pub mod mobile_node;
pub mod scenario;
pub mod sim;
pub mod sweep;

/// Simulation time and durations, in seconds.
pub type Seconds = f64;

pub use addressing::{
    classify_bu, make_binding_update, AckStatus, BindingAck, BindingCacheEntry, BindingUpdate,
    CareOfAddresses, MapId, MnClass, NodeAddress,
};
pub use admission::{
    admit, handle_registration, pick_replacement_victim, select_map, AdmissionDecision,
    AdmissionMode, AdmissionThresholds, MapState, SelectionParams,
};
pub use metrics::{HandoffKind, HandoffRecord, MetricsReport, Ratio};
pub use mobile_node::{MapAdvert, MobileNode, ReadyState};
pub use scenario::{Scenario, ScenarioError};
pub use sim::{run, LogRecord, Policy, RunOptions, SimError, Simulation};
pub use sweep::{run_sweep, CsvRow, SweepConfig, SweepError, SweepParam, SweepRun};
