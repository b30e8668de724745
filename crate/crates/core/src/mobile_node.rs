//! Mobile node state: the ready/idle machine driven by the ready timer and
//! the table of MAPs learned from router advertisements.

use std::collections::BTreeSet;

use crate::addressing::{CareOfAddresses, CnId, MapId, NodeAddress};
use crate::Seconds;

/// Ready-state timer length used when a scenario does not set one.
pub const DEFAULT_READY_TIMER_S: Seconds = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReadyState {
    Idle,
    Ready,
}

/// One MAP option as carried by a router advertisement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapAdvert {
    pub map_id: MapId,
    /// Load advertised at emission time.
    pub tot_cn: u32,
    pub capacity_h_thr: u32,
    pub distance_hops: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MobileNode {
    pub home_address: NodeAddress,
    pub lcoa: NodeAddress,
    pub rcoa: Option<NodeAddress>,
    state: ReadyState,
    ready_deadline: Option<Seconds>,
    connected_cns: BTreeSet<CnId>,
    /// Meters per second, constant over a movement leg.
    pub speed: f64,
    map_table: Vec<MapAdvert>,
}

impl MobileNode {
    /// A freshly attached, idle node with no sessions and an empty MAP table.
    pub fn new(home_address: NodeAddress, lcoa: NodeAddress, speed: f64) -> Self {
        Self {
            home_address,
            lcoa,
            rcoa: None,
            state: ReadyState::Idle,
            ready_deadline: None,
            connected_cns: BTreeSet::new(),
            speed,
            map_table: Vec::new(),
        }
    }

    pub fn state(&self) -> ReadyState {
        self.state
    }

    pub fn ready_deadline(&self) -> Option<Seconds> {
        self.ready_deadline
    }

    pub fn connected_cns(&self) -> &BTreeSet<CnId> {
        &self.connected_cns
    }

    pub fn con_cn(&self) -> u32 {
        self.connected_cns.len() as u32
    }

    pub fn map_table(&self) -> &[MapAdvert] {
        &self.map_table
    }

    pub fn care_of(&self) -> Option<CareOfAddresses> {
        self.rcoa.map(|rcoa| CareOfAddresses {
            rcoa,
            lcoa: self.lcoa,
        })
    }

    /// Sending or receiving data (re)starts the ready timer.
    ///
    /// # Panics
    /// If `ready_duration` is not positive.
    pub fn on_data_activity(&mut self, now: Seconds, ready_duration: Seconds) {
        assert!(ready_duration > 0.0, "ready timer must be positive");
        self.state = ReadyState::Ready;
        self.ready_deadline = Some(now + ready_duration);
    }

    /// Handles a ready-timer expiry event. Events for a deadline that has
    /// since been pushed back are stale and change nothing. Returns whether
    /// the node went idle.
    pub fn on_timer_expiry(&mut self, now: Seconds) -> bool {
        match self.ready_deadline {
            Some(deadline) if deadline <= now => {
                self.state = ReadyState::Idle;
                self.ready_deadline = None;
                true
            }
            _ => false,
        }
    }

    /// Replaces the MAP table with the options from a new advertisement.
    /// Duplicate ids keep the position of their first occurrence and the
    /// contents of their last.
    pub fn update_map_table(&mut self, adverts: impl IntoIterator<Item = MapAdvert>) {
        let mut table: Vec<MapAdvert> = Vec::new();
        for advert in adverts {
            match table.iter_mut().find(|a| a.map_id == advert.map_id) {
                Some(slot) => *slot = advert,
                None => table.push(advert),
            }
        }
        self.map_table = table;
    }

    /// Opens a CN session; session setup is data activity.
    pub fn open_session(&mut self, cn: CnId, now: Seconds, ready_duration: Seconds) -> bool {
        self.on_data_activity(now, ready_duration);
        self.connected_cns.insert(cn)
    }

    pub fn close_session(&mut self, cn: CnId) -> bool {
        self.connected_cns.remove(&cn)
    }

    /// Closes every session, returning the CNs that were connected.
    pub fn close_all_sessions(&mut self) -> Vec<CnId> {
        std::mem::take(&mut self.connected_cns)
            .into_iter()
            .collect()
    }
}
