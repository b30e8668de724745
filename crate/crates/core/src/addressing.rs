//! Addressing vocabulary shared by every other module: opaque node
//! addresses, care-of address pairs, binding cache entries and the
//! Binding Update / Binding Acknowledgement message pair.

use std::fmt;

use crate::mobile_node::{MobileNode, ReadyState};
use crate::Seconds;

/// Opaque per-interface address. Only identity matters to the mobility
/// layer, so this is a plain integer rather than an IPv6 bit string.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeAddress(pub u32);

impl fmt::Display for NodeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "addr#{}", self.0)
    }
}

/// Index of a Mobility Anchor Point within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MapId(pub u16);

/// Index of an access router within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArId(pub u16);

/// Index of a correspondent node within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CnId(pub u16);

/// Hands out addresses that are unique for the lifetime of one run.
#[derive(Debug, Default)]
pub struct AddressAllocator {
    next: u32,
}

impl AddressAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate(&mut self) -> NodeAddress {
        let addr = NodeAddress(self.next);
        self.next = self.next.checked_add(1).expect("address space exhausted");
        addr
    }

    /// Number of addresses handed out so far.
    pub fn issued(&self) -> u32 {
        self.next
    }
}

/// Regional (per MAP domain) and on-link (per access router) care-of addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CareOfAddresses {
    pub rcoa: NodeAddress,
    pub lcoa: NodeAddress,
}

/// How a MAP classifies the sender of a Binding Update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MnClass {
    /// Initial registration, e.g. a node that was just switched on.
    New,
    /// An ongoing node entering a new MAP domain.
    Handoff,
}

impl fmt::Display for MnClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MnClass::New => f.write_str("new"),
            MnClass::Handoff => f.write_str("handoff"),
        }
    }
}

/// Local Binding Update sent from a mobile node to a MAP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BindingUpdate {
    pub mn_home_address: NodeAddress,
    /// Regional address formed on the target MAP's prefix.
    pub rcoa: NodeAddress,
    pub lcoa: NodeAddress,
    /// Set iff the sender was in ready state when sending.
    pub flag_a: bool,
    /// Number of correspondent nodes the sender is talking to. Always 0 when
    /// `flag_a` is clear.
    pub con_cn: u32,
    pub timestamp: Seconds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AckStatus {
    Accepted,
    InsufficientResources,
}

impl fmt::Display for AckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AckStatus::Accepted => f.write_str("accepted"),
            AckStatus::InsufficientResources => f.write_str("insufficient-resources"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BindingAck {
    pub mn_home_address: NodeAddress,
    pub status: AckStatus,
}

/// One row of a MAP's binding cache (basic mode: RCoA -> LCoA).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BindingCacheEntry {
    pub mn_home_address: NodeAddress,
    pub rcoa: NodeAddress,
    pub lcoa: NodeAddress,
    pub con_cn: u32,
    pub registered_at: Seconds,
}

impl BindingCacheEntry {
    pub fn from_update(bu: &BindingUpdate) -> Self {
        Self {
            mn_home_address: bu.mn_home_address,
            rcoa: bu.rcoa,
            lcoa: bu.lcoa,
            con_cn: bu.con_cn,
            registered_at: bu.timestamp,
        }
    }
}

/// Builds the Binding Update `mn` would send at `now` towards a MAP where
/// it formed the regional address `rcoa`.
///
/// Flag A mirrors the ready state, and only a ready node reports its CN
/// count.
pub fn make_binding_update(mn: &MobileNode, rcoa: NodeAddress, now: Seconds) -> BindingUpdate {
    let ready = mn.state() == ReadyState::Ready;
    BindingUpdate {
        mn_home_address: mn.home_address,
        rcoa,
        lcoa: mn.lcoa,
        flag_a: ready,
        con_cn: if ready { mn.con_cn() } else { 0 },
        timestamp: now,
    }
}

pub fn classify_bu(bu: &BindingUpdate) -> MnClass {
    if bu.flag_a {
        MnClass::Handoff
    } else {
        MnClass::New
    }
}
