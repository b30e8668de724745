//! Resolved network graph: name-to-index tables, link parameters and the
//! per-link FIFO state used for data packets.

use std::collections::HashMap;

use crate::addressing::{ArId, CnId, MapId};
use crate::scenario::{Scenario, HOME_AGENT};
use crate::Seconds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) enum NodeRef {
    Cn(u16),
    HomeAgent,
    Map(u16),
    Ar(u16),
    Mn(u32),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Link {
    pub bandwidth_bps: f64,
    pub latency_s: Seconds,
}

impl Link {
    fn transmission(&self, bits: f64) -> Seconds {
        bits / self.bandwidth_bps
    }
}

pub(crate) type Hop = (NodeRef, NodeRef);

pub(crate) struct Topology {
    pub map_names: Vec<String>,
    pub ar_names: Vec<String>,
    pub cn_names: Vec<String>,
    pub ar_parent: Vec<MapId>,
    /// MAP options advertised by each AR, in advertisement order.
    pub ar_adverts: Vec<Vec<MapId>>,
    declared: HashMap<(NodeRef, NodeRef), Link>,
    default_link: Link,
    wireless: Link,
    /// Earliest time each directed link is free again.
    busy_until: HashMap<Hop, Seconds>,
}

fn unordered(a: NodeRef, b: NodeRef) -> (NodeRef, NodeRef) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Topology {
    /// Builds the graph from a validated scenario.
    pub fn build(scenario: &Scenario) -> Self {
        let map_names: Vec<String> = scenario.maps.iter().map(|m| m.id.clone()).collect();
        let ar_names: Vec<String> = scenario.ars.iter().map(|a| a.id.clone()).collect();
        let cn_names: Vec<String> = scenario.cns().into_iter().map(String::from).collect();
        let map_index = |name: &str| {
            MapId(
                map_names
                    .iter()
                    .position(|m| m == name)
                    .expect("validated map") as u16,
            )
        };

        let ar_parent: Vec<MapId> = scenario.ars.iter().map(|a| map_index(&a.map)).collect();
        let ar_adverts = scenario
            .ars
            .iter()
            .zip(&ar_parent)
            .map(|(a, &parent)| {
                if a.advertise.is_empty() {
                    std::iter::once(parent)
                        .chain(
                            (0..map_names.len() as u16)
                                .map(MapId)
                                .filter(|&m| m != parent),
                        )
                        .collect()
                } else {
                    a.advertise.iter().map(|m| map_index(m)).collect()
                }
            })
            .collect();

        let g = &scenario.globals;
        let default_link = Link {
            bandwidth_bps: g.link_bandwidth_bps,
            latency_s: g.link_latency_s,
        };
        let resolve = |name: &str| -> NodeRef {
            if name == HOME_AGENT {
                NodeRef::HomeAgent
            } else if let Some(i) = map_names.iter().position(|m| m == name) {
                NodeRef::Map(i as u16)
            } else if let Some(i) = ar_names.iter().position(|a| a == name) {
                NodeRef::Ar(i as u16)
            } else {
                NodeRef::Cn(
                    cn_names
                        .iter()
                        .position(|c| c == name)
                        .expect("validated link") as u16,
                )
            }
        };
        let declared = scenario
            .links
            .iter()
            .map(|l| {
                (
                    unordered(resolve(&l.a), resolve(&l.b)),
                    Link {
                        bandwidth_bps: l.bandwidth_bps.unwrap_or(default_link.bandwidth_bps),
                        latency_s: l.latency_s.unwrap_or(default_link.latency_s),
                    },
                )
            })
            .collect();

        Self {
            map_names,
            ar_names,
            cn_names,
            ar_parent,
            ar_adverts,
            declared,
            default_link,
            wireless: Link {
                bandwidth_bps: g.wireless_bandwidth_bps,
                latency_s: g.wireless_latency_s,
            },
            busy_until: HashMap::new(),
        }
    }

    pub fn map_name(&self, m: MapId) -> &str {
        &self.map_names[m.0 as usize]
    }

    pub fn ar_name(&self, a: ArId) -> &str {
        &self.ar_names[a.0 as usize]
    }

    pub fn cn_index(&self, name: &str) -> CnId {
        CnId(
            self.cn_names
                .iter()
                .position(|c| c == name)
                .expect("validated cn") as u16,
        )
    }

    pub fn parent(&self, ar: ArId) -> MapId {
        self.ar_parent[ar.0 as usize]
    }

    pub fn link(&self, hop: Hop) -> Link {
        match hop {
            (NodeRef::Ar(_), NodeRef::Mn(_)) | (NodeRef::Mn(_), NodeRef::Ar(_)) => self.wireless,
            (a, b) => self
                .declared
                .get(&unordered(a, b))
                .copied()
                .unwrap_or(self.default_link),
        }
    }

    /// Wired hops from a MAP down to an AR. A MAP reaches ARs outside its
    /// domain through the AR's parent unless a direct link is declared.
    pub fn map_to_ar(&self, map: MapId, ar: ArId) -> Vec<Hop> {
        let (m, a) = (NodeRef::Map(map.0), NodeRef::Ar(ar.0));
        let parent = self.parent(ar);
        if parent == map || self.declared.contains_key(&unordered(m, a)) {
            vec![(m, a)]
        } else {
            vec![(m, NodeRef::Map(parent.0)), (NodeRef::Map(parent.0), a)]
        }
    }

    pub fn hops_between(&self, map: MapId, ar: ArId) -> u32 {
        self.map_to_ar(map, ar).len() as u32
    }

    pub fn latency(&self, hops: &[Hop]) -> Seconds {
        hops.iter().map(|&h| self.link(h).latency_s).sum()
    }

    /// Control-plane latency between a node attached at `ar` and `map`.
    pub fn mn_map_latency(&self, map: MapId, ar: ArId) -> Seconds {
        self.wireless.latency_s + self.latency(&self.map_to_ar(map, ar))
    }

    pub fn wireless_latency(&self) -> Seconds {
        self.wireless.latency_s
    }

    /// Sends `bits` over one directed hop starting at `now`, queueing behind
    /// earlier packets. Returns the arrival time at the far end.
    pub fn transmit(&mut self, hop: Hop, now: Seconds, bits: f64) -> Seconds {
        let link = self.link(hop);
        let free = self.busy_until.entry(hop).or_insert(0.0);
        let start = now.max(*free);
        let done = start + link.transmission(bits);
        *free = done;
        done + link.latency_s
    }
}
