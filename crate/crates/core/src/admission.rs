//! CN-count based admission control, the replacement mechanism and MAP
//! selection.
//!
//! A MAP measures its load as `tot_cn`, the number of correspondent nodes
//! it currently serves through its binding cache. Two thresholds split the
//! load range into three bands:
//!
//! * `tot_cn <= n_thr`: new and handoff nodes are admitted,
//! * `n_thr < tot_cn <= h_thr`: only handoff nodes are admitted,
//! * `h_thr < tot_cn`: everybody is rejected.
//!
//! A rejected node is not turned away immediately. The MAP first looks for a
//! resident whose CN count is at least that of the incoming node, evicts it
//! with an "Insufficient resources" acknowledgement and admits the incoming
//! node in its place. The evicted node then picks another MAP with
//! [`select_map`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::addressing::{
    classify_bu, AckStatus, BindingAck, BindingCacheEntry, BindingUpdate, MapId, MnClass,
    NodeAddress,
};
use crate::mobile_node::MobileNode;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_T_MAP: f64 = 1.5;
pub const DEFAULT_S_MAX: f64 = 20.0;

#[derive(Debug, Error, PartialEq)]
pub enum AdmissionError {
    #[error("n_thr exceeds h_thr ({n_thr} > {h_thr})")]
    ThresholdOrder { n_thr: u32, h_thr: u32 },
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdmissionThresholds {
    n_thr: u32,
    h_thr: u32,
}

impl AdmissionThresholds {
    /// `h_thr` is the MAP capacity in served CNs.
    pub fn new(n_thr: u32, h_thr: u32) -> Result<Self, AdmissionError> {
        if n_thr > h_thr {
            return Err(AdmissionError::ThresholdOrder { n_thr, h_thr });
        }
        Ok(Self { n_thr, h_thr })
    }

    pub fn n_thr(&self) -> u32 {
        self.n_thr
    }

    pub fn h_thr(&self) -> u32 {
        self.h_thr
    }
}

/// A MAP's binding cache together with its thresholds and served-CN total.
#[derive(Clone, Debug, PartialEq)]
pub struct MapState {
    pub map_id: MapId,
    pub thresholds: AdmissionThresholds,
    cache: BTreeMap<NodeAddress, BindingCacheEntry>,
    tot_cn: u32,
}

impl MapState {
    pub fn new(map_id: MapId, thresholds: AdmissionThresholds) -> Self {
        Self {
            map_id,
            thresholds,
            cache: BTreeMap::new(),
            tot_cn: 0,
        }
    }

    pub fn tot_cn(&self) -> u32 {
        self.tot_cn
    }

    /// Sum of `con_cn` over the cache, computed from scratch.
    pub fn recompute_tot_cn(&self) -> u32 {
        self.cache.values().map(|e| e.con_cn).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BindingCacheEntry> {
        self.cache.values()
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    pub fn entry(&self, home: NodeAddress) -> Option<&BindingCacheEntry> {
        self.cache.get(&home)
    }

    /// Inserts a new entry or refreshes an existing one for the same node.
    pub fn upsert(&mut self, entry: BindingCacheEntry) {
        match self.cache.get_mut(&entry.mn_home_address) {
            Some(existing) => {
                self.tot_cn = self.tot_cn - existing.con_cn + entry.con_cn;
                existing.rcoa = entry.rcoa;
                existing.lcoa = entry.lcoa;
                existing.con_cn = entry.con_cn;
            }
            None => {
                self.tot_cn += entry.con_cn;
                self.cache.insert(entry.mn_home_address, entry);
            }
        }
    }

    pub fn remove(&mut self, home: NodeAddress) -> Option<BindingCacheEntry> {
        let entry = self.cache.remove(&home)?;
        self.tot_cn -= entry.con_cn;
        Some(entry)
    }

    /// Tracks a session open/close of a cached node. Returns false if the
    /// node has no entry here.
    pub fn set_con_cn(&mut self, home: NodeAddress, con_cn: u32) -> bool {
        match self.cache.get_mut(&home) {
            Some(entry) => {
                self.tot_cn = self.tot_cn - entry.con_cn + con_cn;
                entry.con_cn = con_cn;
                true
            }
            None => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdmissionDecision {
    Admit,
    Reject,
    ReplaceThenAdmit { victim: NodeAddress },
}

/// How a MAP treats registrations that need admission.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdmissionMode {
    /// Standard HMIPv6: every registration is accepted.
    Unrestricted,
    /// Threshold admission, optionally followed by replacement.
    Threshold { replacement: bool },
}

/// Threshold check against the MAP's current load. The incoming node's own
/// CN count is not added before comparing.
pub fn admit(map: &MapState, class: MnClass) -> AdmissionDecision {
    let tot = map.tot_cn();
    let limit = match class {
        MnClass::New => map.thresholds.n_thr(),
        MnClass::Handoff => map.thresholds.h_thr(),
    };
    if tot <= limit {
        AdmissionDecision::Admit
    } else {
        AdmissionDecision::Reject
    }
}

/// Picks the resident to evict for an incoming node with `incoming_con_cn`
/// CNs. Candidates have at least as many CNs as the incoming node; the one
/// with the most CNs wins, then the most recently registered, then the
/// highest home address.
pub fn pick_replacement_victim(map: &MapState, incoming_con_cn: u32) -> Option<NodeAddress> {
    map.entries()
        .filter(|e| e.con_cn >= incoming_con_cn)
        .max_by(|a, b| {
            a.con_cn
                .cmp(&b.con_cn)
                .then(a.registered_at.total_cmp(&b.registered_at))
                .then(a.mn_home_address.cmp(&b.mn_home_address))
        })
        .map(|e| e.mn_home_address)
}

/// Acknowledgement sent to a resident that was evicted to make room.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvictionNotice {
    pub evicted: BindingCacheEntry,
    pub ack: BindingAck,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegistrationOutcome {
    pub class: MnClass,
    pub decision: AdmissionDecision,
    /// `true` when the node already had an entry and this was a refresh.
    pub refreshed: bool,
    pub ack: BindingAck,
    pub eviction: Option<EvictionNotice>,
}

/// Processes a Binding Update at a MAP.
///
/// A node that already has an entry only refreshes it. Otherwise the
/// update goes through [`admit`] and, on rejection, through replacement
/// when the mode allows it.
pub fn handle_registration(
    map: &mut MapState,
    bu: &BindingUpdate,
    mode: AdmissionMode,
) -> RegistrationOutcome {
    let class = classify_bu(bu);
    let accepted = BindingAck {
        mn_home_address: bu.mn_home_address,
        status: AckStatus::Accepted,
    };

    if map.entry(bu.mn_home_address).is_some() {
        map.upsert(BindingCacheEntry::from_update(bu));
        return RegistrationOutcome {
            class,
            decision: AdmissionDecision::Admit,
            refreshed: true,
            ack: accepted,
            eviction: None,
        };
    }

    let (decision, eviction) = match mode {
        AdmissionMode::Unrestricted => (AdmissionDecision::Admit, None),
        AdmissionMode::Threshold { replacement } => match admit(map, class) {
            AdmissionDecision::Admit => (AdmissionDecision::Admit, None),
            _ if replacement => match pick_replacement_victim(map, bu.con_cn) {
                Some(victim) => {
                    let evicted = map.remove(victim).expect("victim is cached");
                    let notice = EvictionNotice {
                        evicted,
                        ack: BindingAck {
                            mn_home_address: victim,
                            status: AckStatus::InsufficientResources,
                        },
                    };
                    (AdmissionDecision::ReplaceThenAdmit { victim }, Some(notice))
                }
                None => (AdmissionDecision::Reject, None),
            },
            _ => (AdmissionDecision::Reject, None),
        },
    };

    let ack = if decision == AdmissionDecision::Reject {
        BindingAck {
            mn_home_address: bu.mn_home_address,
            status: AckStatus::InsufficientResources,
        }
    } else {
        map.upsert(BindingCacheEntry::from_update(bu));
        accepted
    };

    RegistrationOutcome {
        class,
        decision,
        refreshed: false,
        ack,
        eviction,
    }
}

/// Weights of the MAP selection measure `W = alpha * (Y + speed / s_max)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionParams {
    alpha: f64,
    t_map: f64,
    s_max: f64,
}

impl SelectionParams {
    pub fn new(alpha: f64, t_map: f64, s_max: f64) -> Result<Self, AdmissionError> {
        for (name, value) in [("alpha", alpha), ("t_map", t_map), ("s_max", s_max)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(AdmissionError::NonPositive { name, value });
            }
        }
        Ok(Self {
            alpha,
            t_map,
            s_max,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn t_map(&self) -> f64 {
        self.t_map
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            t_map: DEFAULT_T_MAP,
            s_max: DEFAULT_S_MAX,
        }
    }
}

impl fmt::Display for SelectionParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "alpha={} t_map={} s_max={}",
            self.alpha, self.t_map, self.s_max
        )
    }
}

/// Share of a candidate MAP's load the node would bring, capped at 1.
pub fn load_ratio(con_cn: u32, map_tot_cn: u32) -> f64 {
    if con_cn == 0 {
        0.0
    } else if map_tot_cn == 0 {
        1.0
    } else {
        (con_cn as f64 / map_tot_cn as f64).min(1.0)
    }
}

/// The combined measure `W` for one candidate.
pub fn selection_measure(
    params: &SelectionParams,
    con_cn: u32,
    map_tot_cn: u32,
    speed: f64,
) -> f64 {
    params.alpha * (load_ratio(con_cn, map_tot_cn) + speed / params.s_max)
}

/// Scans the node's MAP table in order and returns the first MAP outside
/// `excluded` whose measure is below `t_map`.
pub fn select_map(
    mn: &MobileNode,
    params: &SelectionParams,
    excluded: &BTreeSet<MapId>,
) -> Option<MapId> {
    let con_cn = mn.con_cn();
    mn.map_table()
        .iter()
        .filter(|advert| !excluded.contains(&advert.map_id))
        .find(|advert| selection_measure(params, con_cn, advert.tot_cn, mn.speed) < params.t_map)
        .map(|advert| advert.map_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::CnId;
    use crate::mobile_node::MapAdvert;

    fn map_with(con_cns: &[u32], n_thr: u32, h_thr: u32) -> MapState {
        let mut map = MapState::new(MapId(0), AdmissionThresholds::new(n_thr, h_thr).unwrap());
        for (i, &c) in con_cns.iter().enumerate() {
            map.upsert(BindingCacheEntry {
                mn_home_address: NodeAddress(100 + i as u32),
                rcoa: NodeAddress(200 + i as u32),
                lcoa: NodeAddress(300 + i as u32),
                con_cn: c,
                registered_at: i as f64,
            });
        }
        map
    }

    fn bu(home: u32, flag_a: bool, con_cn: u32) -> BindingUpdate {
        BindingUpdate {
            mn_home_address: NodeAddress(home),
            rcoa: NodeAddress(home + 1000),
            lcoa: NodeAddress(home + 2000),
            flag_a,
            con_cn,
            timestamp: 50.0,
        }
    }

    fn map_with_total(tot: u32, n_thr: u32, h_thr: u32) -> MapState {
        map_with(&[tot], n_thr, h_thr)
    }

    #[test]
    fn thresholds_reject_inverted_order() {
        assert_eq!(
            AdmissionThresholds::new(10, 5),
            Err(AdmissionError::ThresholdOrder {
                n_thr: 10,
                h_thr: 5
            })
        );
        assert!(AdmissionThresholds::new(5, 5).is_ok());
    }

    #[test]
    fn admit_bands() {
        assert_eq!(
            admit(&map_with_total(4, 5, 10), MnClass::New),
            AdmissionDecision::Admit
        );
        let mid = map_with_total(7, 5, 10);
        assert_eq!(admit(&mid, MnClass::New), AdmissionDecision::Reject);
        assert_eq!(admit(&mid, MnClass::Handoff), AdmissionDecision::Admit);
        let full = map_with_total(11, 5, 10);
        assert_eq!(admit(&full, MnClass::Handoff), AdmissionDecision::Reject);
        assert_eq!(admit(&full, MnClass::New), AdmissionDecision::Reject);
    }

    #[test]
    fn admit_boundaries_are_inclusive() {
        assert_eq!(
            admit(&map_with_total(5, 5, 10), MnClass::New),
            AdmissionDecision::Admit
        );
        assert_eq!(
            admit(&map_with_total(10, 5, 10), MnClass::Handoff),
            AdmissionDecision::Admit
        );
    }

    #[test]
    fn victim_is_largest_then_latest() {
        // con_cns {2, 5, 5}: the second 5 registered later (t=2).
        let map = map_with(&[2, 5, 5], 0, 0);
        assert_eq!(pick_replacement_victim(&map, 3), Some(NodeAddress(102)));
    }

    #[test]
    fn no_victim_when_all_smaller() {
        let map = map_with(&[1, 2], 0, 0);
        assert_eq!(pick_replacement_victim(&map, 3), None);
        let empty = map_with(&[], 0, 0);
        assert_eq!(pick_replacement_victim(&empty, 0), None);
    }

    #[test]
    fn registration_with_replacement() {
        let mut map = map_with(&[4, 4, 4], 5, 10);
        let before = map.tot_cn();
        let out = handle_registration(
            &mut map,
            &bu(1, true, 3),
            AdmissionMode::Threshold { replacement: true },
        );
        assert_eq!(out.ack.status, AckStatus::Accepted);
        let notice = out.eviction.expect("a resident is evicted");
        assert_eq!(notice.ack.status, AckStatus::InsufficientResources);
        assert_eq!(notice.evicted.mn_home_address, NodeAddress(102));
        assert_eq!(
            out.decision,
            AdmissionDecision::ReplaceThenAdmit {
                victim: NodeAddress(102)
            }
        );
        assert_eq!(map.tot_cn(), before - 4 + 3);
        assert!(map.entry(NodeAddress(1)).is_some());
        assert!(map.entry(NodeAddress(102)).is_none());
    }

    #[test]
    fn registration_without_victim_is_rejected() {
        let mut map = map_with(&[1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1], 5, 10);
        let before = map.clone();
        let out = handle_registration(
            &mut map,
            &bu(1, true, 3),
            AdmissionMode::Threshold { replacement: true },
        );
        assert_eq!(out.decision, AdmissionDecision::Reject);
        assert_eq!(out.ack.status, AckStatus::InsufficientResources);
        assert!(out.eviction.is_none());
        assert_eq!(map, before);
    }

    #[test]
    fn registration_under_threshold_grows_cache() {
        let mut map = map_with(&[1, 1], 5, 10);
        let out = handle_registration(
            &mut map,
            &bu(1, false, 0),
            AdmissionMode::Threshold { replacement: true },
        );
        assert_eq!(out.decision, AdmissionDecision::Admit);
        assert_eq!(out.ack.status, AckStatus::Accepted);
        assert_eq!(map.len(), 3);
    }

    #[test]
    fn refresh_is_not_double_counted() {
        let mut map = map_with(&[2], 0, 0);
        let mut refresh = bu(100, true, 3);
        refresh.lcoa = NodeAddress(999);
        let out = handle_registration(
            &mut map,
            &refresh,
            AdmissionMode::Threshold { replacement: true },
        );
        assert!(out.refreshed);
        assert_eq!(out.ack.status, AckStatus::Accepted);
        assert_eq!(map.len(), 1);
        assert_eq!(map.tot_cn(), 3);
        assert_eq!(map.entry(NodeAddress(100)).unwrap().lcoa, NodeAddress(999));
    }

    #[test]
    fn unrestricted_mode_accepts_everything() {
        let mut map = map_with(&[50], 0, 0);
        let out = handle_registration(&mut map, &bu(1, false, 0), AdmissionMode::Unrestricted);
        assert_eq!(out.ack.status, AckStatus::Accepted);
        assert!(out.eviction.is_none());
    }

    fn mover(con_cn: u16, speed: f64, table: &[(u16, u32)]) -> MobileNode {
        let mut mn = MobileNode::new(NodeAddress(1), NodeAddress(2), speed);
        for cn in 0..con_cn {
            mn.open_session(CnId(cn), 0.0, 5.0);
        }
        mn.update_map_table(table.iter().map(|&(id, tot_cn)| MapAdvert {
            map_id: MapId(id),
            tot_cn,
            capacity_h_thr: 10,
            distance_hops: 1,
        }));
        mn
    }

    #[test]
    fn selection_formula_example() {
        // Y = 2/4, S = 5/20, W = 0.75 < 1.
        let params = SelectionParams::new(1.0, 1.0, 20.0).unwrap();
        assert_eq!(selection_measure(&params, 2, 4, 5.0), 0.75);
        let mn = mover(2, 5.0, &[(7, 4)]);
        assert_eq!(select_map(&mn, &params, &BTreeSet::new()), Some(MapId(7)));
    }

    #[test]
    fn stationary_node_without_sessions_always_selects() {
        let params = SelectionParams::new(3.0, 0.01, 20.0).unwrap();
        let mn = mover(0, 0.0, &[(1, 0), (2, 9)]);
        assert_eq!(select_map(&mn, &params, &BTreeSet::new()), Some(MapId(1)));
    }

    #[test]
    fn selection_takes_first_qualifying_in_table_order() {
        // con_cn = 3, speed 0, alpha 1.2: loads 3, 4 and 9 give Y = 1, 0.75
        // and 1/3, so W = 1.2, 0.9 and 0.4. The 0.9 entry comes first.
        let params = SelectionParams::new(1.2, 1.0, 20.0).unwrap();
        let mn = mover(3, 0.0, &[(1, 3), (2, 4), (3, 9)]);
        let w: Vec<f64> = [3, 4, 9]
            .iter()
            .map(|&t| selection_measure(&params, 3, t, 0.0))
            .collect();
        assert!(
            (w[0] - 1.2).abs() < 1e-12 && (w[1] - 0.9).abs() < 1e-12 && (w[2] - 0.4).abs() < 1e-12
        );
        assert_eq!(select_map(&mn, &params, &BTreeSet::new()), Some(MapId(2)));
        let excluded = BTreeSet::from([MapId(2)]);
        assert_eq!(select_map(&mn, &params, &excluded), Some(MapId(3)));
    }

    #[test]
    fn selection_none_when_nothing_qualifies() {
        let params = SelectionParams::new(1.0, 0.5, 20.0).unwrap();
        let mn = mover(3, 20.0, &[(1, 3), (2, 6)]);
        assert_eq!(select_map(&mn, &params, &BTreeSet::new()), None);
        let empty = mover(0, 0.0, &[]);
        assert_eq!(select_map(&empty, &params, &BTreeSet::new()), None);
    }

    #[test]
    fn load_ratio_edge_cases() {
        assert_eq!(load_ratio(0, 0), 0.0);
        assert_eq!(load_ratio(0, 7), 0.0);
        assert_eq!(load_ratio(2, 0), 1.0);
        assert_eq!(load_ratio(5, 2), 1.0);
        assert_eq!(load_ratio(1, 4), 0.25);
    }

    #[test]
    fn selection_params_validate() {
        assert!(SelectionParams::new(0.0, 1.0, 1.0).is_err());
        assert!(SelectionParams::new(1.0, -1.0, 1.0).is_err());
        assert!(SelectionParams::new(1.0, 1.0, f64::NAN).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Clone, Debug)]
        enum Op {
            Register {
                home: u32,
                flag_a: bool,
                con_cn: u32,
            },
            Remove(u32),
            SetCon(u32, u32),
        }

        fn op() -> impl Strategy<Value = Op> {
            prop_oneof![
                (0u32..8, any::<bool>(), 0u32..5).prop_map(|(home, flag_a, con_cn)| Op::Register {
                    home,
                    flag_a,
                    con_cn: if flag_a { con_cn } else { 0 },
                }),
                (0u32..8).prop_map(Op::Remove),
                (0u32..8, 0u32..5).prop_map(|(h, c)| Op::SetCon(h, c)),
            ]
        }

        proptest! {
            #[test]
            fn handoff_dominates_new(cons in prop::collection::vec(0u32..6, 0..6), n in 0u32..10, extra in 0u32..10) {
                let map = map_with(&cons, n, n + extra);
                if admit(&map, MnClass::Handoff) == AdmissionDecision::Reject {
                    prop_assert_eq!(admit(&map, MnClass::New), AdmissionDecision::Reject);
                }
                if map.tot_cn() > map.thresholds.h_thr() {
                    prop_assert_eq!(admit(&map, MnClass::Handoff), AdmissionDecision::Reject);
                }
            }

            #[test]
            fn tot_cn_stays_consistent(ops in prop::collection::vec(op(), 0..60), n in 0u32..6, extra in 0u32..6, replacement: bool) {
                let mut map = MapState::new(MapId(0), AdmissionThresholds::new(n, n + extra).unwrap());
                for (t, op) in ops.into_iter().enumerate() {
                    match op {
                        Op::Register { home, flag_a, con_cn } => {
                            let len = map.len();
                            let before = map.tot_cn();
                            let mut update = bu(home, flag_a, con_cn);
                            update.timestamp = t as f64;
                            let out = handle_registration(&mut map, &update, AdmissionMode::Threshold { replacement });
                            prop_assert!(map.len() <= len + 1);
                            if let Some(notice) = out.eviction {
                                prop_assert!(notice.evicted.con_cn >= con_cn);
                                prop_assert!(map.tot_cn() <= before);
                            }
                        }
                        Op::Remove(home) => { map.remove(NodeAddress(home)); }
                        Op::SetCon(home, c) => { map.set_con_cn(NodeAddress(home), c); }
                    }
                    prop_assert_eq!(map.tot_cn(), map.recompute_tot_cn());
                    for entry in map.entries() {
                        prop_assert_eq!(map.entries().filter(|e| e.mn_home_address == entry.mn_home_address).count(), 1);
                    }
                }
            }

            #[test]
            fn joint_scaling_keeps_choice(
                con_cn in 0u16..5,
                speed in 0.0f64..20.0,
                loads in prop::collection::vec(0u32..12, 1..5),
                alpha in 0.1f64..3.0,
                t_map in 0.1f64..3.0,
                exp in -6i32..6,
            ) {
                let table: Vec<(u16, u32)> = loads.iter().enumerate().map(|(i, &l)| (i as u16, l)).collect();
                let mn = mover(con_cn, speed, &table);
                let c = 2f64.powi(exp);
                let base = SelectionParams::new(alpha, t_map, 20.0).unwrap();
                let scaled = SelectionParams::new(alpha * c, t_map * c, 20.0).unwrap();
                prop_assert_eq!(
                    select_map(&mn, &base, &BTreeSet::new()),
                    select_map(&mn, &scaled, &BTreeSet::new())
                );
            }
        }
    }
}
