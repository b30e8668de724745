//! Discrete-event HMIPv6 simulator.
//!
//! Mobile nodes attach to access routers, register with MAPs through local
//! Binding Updates and keep their home agent and correspondents informed of
//! their regional address. CBR flows from correspondent nodes are tunnelled
//! by the serving MAP to the node's on-link address. Under the AC policy
//! every registration that needs admission goes through the threshold
//! check, replacement and MAP reselection.

mod topology;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::addressing::{
    classify_bu, make_binding_update, AckStatus, AddressAllocator, ArId, BindingUpdate, CnId,
    MapId, MnClass, NodeAddress,
};
use crate::admission::{
    handle_registration, select_map, AdmissionDecision, AdmissionError, AdmissionMode,
    AdmissionThresholds, MapState, SelectionParams,
};
use crate::event::EventQueue;
use crate::metrics::{
    record_handoff_latency, ChainKind, ChainOutcome, ChainRecord, FlowStats, HandoffKind,
    HandoffRecord, MetricsReport, StepResult,
};
use crate::mobile_node::{MapAdvert, MobileNode, ReadyState};
use crate::scenario::{Scenario, ScenarioError};
use crate::Seconds;
use topology::{NodeRef, Topology};

/// Guard against runaway scenarios.
const EVENT_BUDGET: u64 = 50_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Policy {
    /// Admission control with replacement and MAP selection.
    AcHmipv6,
    /// Standard HMIPv6: MAPs accept every registration.
    BaselineHmipv6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub policy: Policy,
    pub seed: u64,
    /// Lets a saturated MAP evict a resident for an incoming node.
    pub replacement: bool,
    /// Lets a rejected node try other MAPs from its table.
    pub reselection: bool,
    pub record_log: bool,
}

impl RunOptions {
    pub fn new(policy: Policy, seed: u64) -> Self {
        Self {
            policy,
            seed,
            replacement: true,
            reselection: true,
            record_log: false,
        }
    }

    pub fn baseline(seed: u64) -> Self {
        Self::new(Policy::BaselineHmipv6, seed)
    }

    pub fn ac(seed: u64) -> Self {
        Self::new(Policy::AcHmipv6, seed)
    }

    /// Short name used in CSV output.
    pub fn label(&self) -> &'static str {
        match (self.policy, self.replacement, self.reselection) {
            (Policy::BaselineHmipv6, _, _) => "baseline",
            (Policy::AcHmipv6, true, true) => "ac",
            (Policy::AcHmipv6, false, true) => "ac-norepl",
            (Policy::AcHmipv6, true, false) => "ac-noresel",
            (Policy::AcHmipv6, false, false) => "ac-naive",
        }
    }

    fn admission_mode(&self, allow_replacement: bool) -> AdmissionMode {
        match self.policy {
            Policy::BaselineHmipv6 => AdmissionMode::Unrestricted,
            Policy::AcHmipv6 => AdmissionMode::Threshold {
                replacement: self.replacement && allow_replacement,
            },
        }
    }

    fn may_reselect(&self) -> bool {
        self.policy == Policy::AcHmipv6 && self.reselection
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invalid selection parameters: {0}")]
    Selection(#[from] AdmissionError),
    #[error("event budget of {budget} exhausted at t={at:.6}s")]
    EventBudget { budget: u64, at: Seconds },
    #[error("invariant violated at t={at:.6}s: {message}")]
    Invariant { at: Seconds, message: String },
}

/// Observable protocol events, recorded when `RunOptions::record_log` is set.
#[derive(Clone, Debug, PartialEq)]
pub enum LogRecord {
    Attached {
        t: Seconds,
        mn: String,
        ar: String,
    },
    Moved {
        t: Seconds,
        mn: String,
        from: String,
        to: String,
        kind: Option<HandoffKind>,
    },
    Advert {
        t: Seconds,
        ar: String,
        loads: Vec<(String, u32)>,
    },
    BindingUpdate {
        t: Seconds,
        mn: String,
        map: String,
        flag_a: bool,
        ready: bool,
        con_cn: u32,
        class: MnClass,
    },
    Registration {
        t: Seconds,
        map: String,
        mn: String,
        decision: String,
        tot_cn: u32,
    },
    BindingAck {
        t: Seconds,
        mn: String,
        map: String,
        status: AckStatus,
    },
    HomeAgentUpdate {
        t: Seconds,
        mn: String,
        map: String,
    },
    Dropped {
        t: Seconds,
        mn: String,
    },
}

impl LogRecord {
    pub fn time(&self) -> Seconds {
        match self {
            LogRecord::Attached { t, .. }
            | LogRecord::Moved { t, .. }
            | LogRecord::Advert { t, .. }
            | LogRecord::BindingUpdate { t, .. }
            | LogRecord::Registration { t, .. }
            | LogRecord::BindingAck { t, .. }
            | LogRecord::HomeAgentUpdate { t, .. }
            | LogRecord::Dropped { t, .. } => *t,
        }
    }
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} ", self.time())?;
        match self {
            LogRecord::Attached { mn, ar, .. } => write!(f, "attach {mn} {ar}"),
            LogRecord::Moved {
                mn, from, to, kind, ..
            } => {
                write!(f, "move {mn} {from}->{to}")?;
                match kind {
                    Some(k) => write!(f, " {k}"),
                    None => Ok(()),
                }
            }
            LogRecord::Advert { ar, loads, .. } => {
                write!(f, "advert {ar}")?;
                for (map, tot) in loads {
                    write!(f, " {map}={tot}")?;
                }
                Ok(())
            }
            LogRecord::BindingUpdate {
                mn,
                map,
                flag_a,
                ready,
                con_cn,
                class,
                ..
            } => write!(
                f,
                "bu {mn}->{map} a={} ready={} con_cn={con_cn} class={class}",
                u8::from(*flag_a),
                u8::from(*ready)
            ),
            LogRecord::Registration {
                map,
                mn,
                decision,
                tot_cn,
                ..
            } => write!(f, "reg {map} {mn} {decision} tot_cn={tot_cn}"),
            LogRecord::BindingAck {
                mn, map, status, ..
            } => write!(f, "ba {map}->{mn} {status}"),
            LogRecord::HomeAgentUpdate { mn, map, .. } => write!(f, "ha {mn} via {map}"),
            LogRecord::Dropped { mn, .. } => write!(f, "drop {mn}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Binding {
    map: MapId,
    rcoa: NodeAddress,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Purpose {
    Initial,
    Handoff,
    Displaced,
    /// Local update to the serving MAP; needs no admission.
    Refresh,
}

#[derive(Clone, Debug)]
struct Pending {
    purpose: Purpose,
    chain: Option<usize>,
    handoff: Option<usize>,
    target: MapId,
    rcoa: NodeAddress,
    lcoa: NodeAddress,
    excluded: BTreeSet<MapId>,
    seq: u64,
    /// Binding to release once the home agent has the new one.
    old: Option<Binding>,
    signaling: Seconds,
}

#[derive(Clone, Copy, Debug)]
struct HaPending {
    seq: u64,
    handoff: Option<usize>,
    old: Option<Binding>,
    signaling: Seconds,
}

#[derive(Clone, Copy, Debug)]
enum AttachAction {
    Nothing,
    Initial,
    Handoff(usize, HandoffKind),
}

struct MnRt {
    name: String,
    node: MobileNode,
    active: bool,
    ar: ArId,
    serving: Option<Binding>,
    pending: Option<Pending>,
    ha_pending: Option<HaPending>,
    epoch: u64,
    action: AttachAction,
    last_rx: Option<Seconds>,
    /// Handoff waiting for its first packet, with the last packet time at
    /// the old router.
    awaiting_first: Option<(usize, Option<Seconds>)>,
    timer_armed: bool,
    flows: Vec<usize>,
    legs: Vec<(Seconds, ArId, f64)>,
}

struct FlowRt {
    cn: CnId,
    mn: usize,
    interval: Seconds,
    phase: Seconds,
    bits: f64,
    size: u32,
    stop: Seconds,
    window: bool,
    open: bool,
    generation: u64,
    dest: Option<Binding>,
    /// Forwarding credit at an overloaded MAP.
    credit: f64,
    stats: FlowStats,
}

#[derive(Clone, Debug)]
enum Ev {
    Activate(usize),
    Move {
        mn: usize,
        to: ArId,
        speed: f64,
    },
    AdvertTick(ArId),
    Advert {
        mn: usize,
        epoch: u64,
        adverts: Vec<MapAdvert>,
        solicited: bool,
    },
    BuAtMap {
        mn: usize,
        map: MapId,
        bu: BindingUpdate,
        chain: Option<usize>,
        seq: u64,
        allow_replacement: bool,
    },
    BaAtMn {
        mn: usize,
        map: MapId,
        rcoa: NodeAddress,
        status: AckStatus,
        seq: u64,
        path: Seconds,
    },
    Evicted {
        mn: usize,
        map: MapId,
        rcoa: NodeAddress,
    },
    BuAtHa {
        mn: usize,
        binding: Binding,
        seq: u64,
    },
    BaFromHa {
        mn: usize,
        seq: u64,
        path: Seconds,
    },
    CnUpdate {
        flow: usize,
        dest: Binding,
    },
    Dereg {
        map: MapId,
        home: NodeAddress,
        rcoa: NodeAddress,
    },
    FlowStart(usize),
    FlowStop(usize),
    Emit {
        flow: usize,
        generation: u64,
    },
    PktAtMap {
        flow: usize,
        map: MapId,
        rcoa: NodeAddress,
    },
    /// Data packet relayed by the parent MAP of `ar`.
    PktTransit {
        flow: usize,
        via: MapId,
        ar: ArId,
        lcoa: NodeAddress,
    },
    PktAtAr {
        flow: usize,
        ar: ArId,
        lcoa: NodeAddress,
    },
    PktAtMn {
        flow: usize,
        ar: ArId,
        lcoa: NodeAddress,
    },
    ReadyExpiry(usize),
}

impl Ev {
    fn flow(&self) -> Option<usize> {
        match self {
            Ev::PktAtMap { flow, .. }
            | Ev::PktTransit { flow, .. }
            | Ev::PktAtAr { flow, .. }
            | Ev::PktAtMn { flow, .. } => Some(*flow),
            _ => None,
        }
    }
}

/// One simulation run. Drive it with [`Simulation::step`] or
/// [`Simulation::run_to_end`], then collect the report with
/// [`Simulation::finish`].
pub struct Simulation {
    opts: RunOptions,
    topo: Topology,
    params: SelectionParams,
    sim_time: Seconds,
    ready_timer: Seconds,
    advert_period: Seconds,
    now: Seconds,
    queue: EventQueue<Ev>,
    maps: Vec<MapState>,
    mns: Vec<MnRt>,
    flows: Vec<FlowRt>,
    by_home: HashMap<NodeAddress, usize>,
    lcoa_ar: HashMap<NodeAddress, ArId>,
    addresses: AddressAllocator,
    next_seq: u64,
    report: MetricsReport,
    log: Vec<LogRecord>,
}

impl Simulation {
    pub fn new(scenario: &Scenario, opts: RunOptions) -> Result<Self, SimError> {
        scenario.validate()?;
        let g = &scenario.globals;
        let params = SelectionParams::new(g.alpha, g.t_map, g.s_max)?;
        let topo = Topology::build(scenario);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

        let maps = scenario
            .maps
            .iter()
            .enumerate()
            .map(|(i, m)| {
                AdmissionThresholds::new(m.n_thr, m.h_thr)
                    .map(|t| MapState::new(MapId(i as u16), t))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let ar_index = |name: &str| {
            ArId(
                topo.ar_names
                    .iter()
                    .position(|a| a == name)
                    .expect("validated ar") as u16,
            )
        };

        let mut addresses = AddressAllocator::new();
        let mut queue = EventQueue::new();
        let mut mns = Vec::with_capacity(scenario.mns.len());
        let mut by_home = HashMap::new();
        for (i, spec) in scenario.mns.iter().enumerate() {
            let home = addresses.allocate();
            by_home.insert(home, i);
            let activation = if spec.start_jitter_s > 0.0 {
                spec.start_s + rng.random::<f64>() * spec.start_jitter_s
            } else {
                spec.start_s
            };
            let legs = scenario
                .movement_legs(spec, activation, g.sim_time_s)
                .into_iter()
                .map(|l| (l.at_time, ar_index(&l.to_ar), l.speed))
                .collect();
            mns.push(MnRt {
                name: spec.id.clone(),
                // The on-link address is replaced on attachment.
                node: MobileNode::new(home, home, spec.speed),
                active: false,
                ar: ar_index(&spec.ar),
                serving: None,
                pending: None,
                ha_pending: None,
                epoch: 0,
                action: AttachAction::Nothing,
                last_rx: None,
                awaiting_first: None,
                timer_armed: false,
                flows: Vec::new(),
                legs,
            });
            queue.push(activation, Ev::Activate(i));
        }

        let mut flows = Vec::with_capacity(scenario.flows.len());
        for (i, spec) in scenario.flows.iter().enumerate() {
            let mn = scenario
                .mns
                .iter()
                .position(|m| m.id == spec.mn)
                .expect("validated flow");
            let size = spec.packet_size.unwrap_or(g.packet_size);
            let bits = f64::from(size) * 8.0;
            let interval = bits / spec.rate_bps;
            let phase = rng.random::<f64>() * interval;
            let credit = rng.random::<f64>();
            mns[mn].flows.push(i);
            flows.push(FlowRt {
                cn: topo.cn_index(&spec.cn),
                mn,
                interval,
                phase,
                bits,
                size,
                stop: spec.stop_s.unwrap_or(g.sim_time_s).min(g.sim_time_s),
                window: false,
                open: false,
                generation: 0,
                dest: None,
                credit,
                stats: FlowStats {
                    cn: spec.cn.clone(),
                    mn: spec.mn.clone(),
                    packet_size: size,
                    ..Default::default()
                },
            });
            queue.push(spec.start_s, Ev::FlowStart(i));
            if let Some(stop) = spec.stop_s {
                queue.push(stop, Ev::FlowStop(i));
            }
        }

        for ar in 0..topo.ar_names.len() {
            queue.push(0.0, Ev::AdvertTick(ArId(ar as u16)));
        }

        Ok(Self {
            opts,
            topo,
            params,
            sim_time: g.sim_time_s,
            ready_timer: g.ready_timer_s,
            advert_period: g.advert_period_s,
            now: 0.0,
            queue,
            maps,
            mns,
            flows,
            by_home,
            lcoa_ar: HashMap::new(),
            addresses,
            next_seq: 0,
            report: MetricsReport {
                sim_time: g.sim_time_s,
                ..Default::default()
            },
            log: Vec::new(),
        })
    }

    pub fn now(&self) -> Seconds {
        self.now
    }

    pub fn options(&self) -> &RunOptions {
        &self.opts
    }

    pub fn map_states(&self) -> &[MapState] {
        &self.maps
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    /// Current handoff records; complete once the run has finished.
    pub fn handoffs(&self) -> &[HandoffRecord] {
        &self.report.handoffs
    }

    /// Executes the next event. Returns `false` once no event remains
    /// before the end of the run.
    pub fn step(&mut self) -> Result<bool, SimError> {
        match self.queue.peek_time() {
            Some(t) if t <= self.sim_time => {}
            _ => return Ok(false),
        }
        let (t, ev) = self.queue.pop().expect("peeked");
        self.now = t;
        self.report.events_processed += 1;
        if self.report.events_processed > EVENT_BUDGET {
            return Err(SimError::EventBudget {
                budget: EVENT_BUDGET,
                at: t,
            });
        }
        self.dispatch(ev);
        Ok(true)
    }

    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while self.step()? {}
        Ok(())
    }

    /// Runs to the end and returns the metrics.
    pub fn finish(mut self) -> Result<MetricsReport, SimError> {
        self.run_to_end()?;
        let mut in_flight = vec![0u64; self.flows.len()];
        for f in self.queue.iter().filter_map(Ev::flow) {
            in_flight[f] += 1;
        }
        self.report.in_flight = in_flight.iter().sum();
        self.report.flows = self.flows.into_iter().map(|f| f.stats).collect();
        Ok(self.report)
    }

    /// Packets currently travelling between nodes, per flow.
    pub fn in_flight(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.flows.len()];
        for f in self.queue.iter().filter_map(Ev::flow) {
            counts[f] += 1;
        }
        counts
    }

    /// Checks the structural invariants of the current state.
    pub fn check_invariants(&self) -> Result<(), SimError> {
        let fail = |message: String| {
            Err(SimError::Invariant {
                at: self.now,
                message,
            })
        };
        for map in &self.maps {
            if map.tot_cn() != map.recompute_tot_cn() {
                return fail(format!(
                    "{} tot_cn {} differs from entry sum {}",
                    self.topo.map_name(map.map_id),
                    map.tot_cn(),
                    map.recompute_tot_cn()
                ));
            }
            let homes: BTreeSet<_> = map.entries().map(|e| e.mn_home_address).collect();
            if homes.len() != map.len() {
                return fail(format!(
                    "{} caches a node twice",
                    self.topo.map_name(map.map_id)
                ));
            }
            for e in map.entries() {
                let Some(&i) = self.by_home.get(&e.mn_home_address) else {
                    return fail(format!("unknown home address {}", e.mn_home_address));
                };
                let live = self.mns[i].node.con_cn();
                if e.con_cn != live {
                    return fail(format!(
                        "{} caches con_cn {} for {} with {} sessions",
                        self.topo.map_name(map.map_id),
                        e.con_cn,
                        self.mns[i].name,
                        live
                    ));
                }
            }
        }
        let in_flight = self.in_flight();
        for (f, flow) in self.flows.iter().enumerate() {
            let s = &flow.stats;
            if s.sent != s.delivered + s.lost + in_flight[f] {
                return fail(format!(
                    "flow {}->{}: sent {} != delivered {} + lost {} + in flight {}",
                    s.cn, s.mn, s.sent, s.delivered, s.lost, in_flight[f]
                ));
            }
        }
        for m in &self.mns {
            if let Some(b) = m.serving {
                if m.node.rcoa != Some(b.rcoa) {
                    return fail(format!("{} serving rcoa out of sync", m.name));
                }
            }
            if m.node.con_cn() > 0 && m.serving.is_none() && m.pending.is_none() {
                return fail(format!("{} has sessions but no MAP", m.name));
            }
        }
        Ok(())
    }

    fn push(&mut self, at: Seconds, ev: Ev) {
        self.queue.push(at, ev);
    }

    fn seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    fn record(&mut self, make: impl FnOnce(&Self) -> LogRecord) {
        if self.opts.record_log {
            let rec = make(self);
            self.log.push(rec);
        }
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::Activate(i) => self.on_activate(i),
            Ev::Move { mn, to, speed } => {
                self.mns[mn].node.speed = speed;
                self.on_move(mn, to);
            }
            Ev::AdvertTick(ar) => self.on_advert_tick(ar),
            Ev::Advert {
                mn,
                epoch,
                adverts,
                solicited,
            } => self.on_advert(mn, epoch, adverts, solicited),
            Ev::BuAtMap {
                mn,
                map,
                bu,
                chain,
                seq,
                allow_replacement,
            } => self.on_bu_at_map(mn, map, bu, chain, seq, allow_replacement),
            Ev::BaAtMn {
                mn,
                map,
                rcoa,
                status,
                seq,
                path,
            } => self.on_ba(mn, map, rcoa, status, seq, path),
            Ev::Evicted { mn, map, rcoa } => self.on_evicted(mn, map, rcoa),
            Ev::BuAtHa { mn, binding, seq } => self.on_bu_at_ha(mn, binding, seq),
            Ev::BaFromHa { mn, seq, path } => self.on_ba_from_ha(mn, seq, path),
            Ev::CnUpdate { flow, dest } => {
                self.flows[flow].dest = Some(dest);
                self.try_open(flow);
            }
            Ev::Dereg { map, home, rcoa } => {
                if self.maps[map.0 as usize]
                    .entry(home)
                    .is_some_and(|e| e.rcoa == rcoa)
                {
                    self.maps[map.0 as usize].remove(home);
                }
            }
            Ev::FlowStart(f) => {
                self.flows[f].window = true;
                self.try_open(f);
            }
            Ev::FlowStop(f) => {
                self.flows[f].window = false;
                self.close_flow(f);
            }
            Ev::Emit { flow, generation } => self.on_emit(flow, generation),
            Ev::PktAtMap { flow, map, rcoa } => self.on_packet_at_map(flow, map, rcoa),
            Ev::PktTransit {
                flow,
                via,
                ar,
                lcoa,
            } => self.forward(flow, via, ar, lcoa),
            Ev::PktAtAr { flow, ar, lcoa } => self.on_packet_at_ar(flow, ar, lcoa),
            Ev::PktAtMn { flow, ar, lcoa } => self.on_packet_at_mn(flow, ar, lcoa),
            Ev::ReadyExpiry(i) => self.on_ready_expiry(i),
        }
    }

    // Attachment and movement.

    fn attach(&mut self, i: usize, ar: ArId) {
        let lcoa = self.addresses.allocate();
        self.lcoa_ar.insert(lcoa, ar);
        let now = self.now;
        let wl = self.topo.wireless_latency();
        let m = &mut self.mns[i];
        m.ar = ar;
        m.node.lcoa = lcoa;
        m.epoch += 1;
        let epoch = m.epoch;
        // Router solicitation and the solicited advertisement.
        let adverts = self.adverts_for(ar);
        self.push(
            now + 2.0 * wl,
            Ev::Advert {
                mn: i,
                epoch,
                adverts,
                solicited: true,
            },
        );
    }

    fn on_activate(&mut self, i: usize) {
        let legs = std::mem::take(&mut self.mns[i].legs);
        for &(at, to, speed) in &legs {
            self.push(at, Ev::Move { mn: i, to, speed });
        }
        let m = &mut self.mns[i];
        m.active = true;
        m.action = AttachAction::Initial;
        let ar = m.ar;
        self.record(|s| LogRecord::Attached {
            t: s.now,
            mn: s.mns[i].name.clone(),
            ar: s.topo.ar_name(ar).to_string(),
        });
        self.attach(i, ar);
    }

    fn on_move(&mut self, i: usize, to: ArId) {
        let now = self.now;
        let m = &self.mns[i];
        if !m.active || m.ar == to {
            return;
        }
        let from = m.ar;
        let action = match (m.serving, m.pending.is_some()) {
            // The registration in progress is refreshed once it completes.
            (_, true) => AttachAction::Nothing,
            (Some(b), false) => {
                let kind = if self.topo.parent(to) == b.map {
                    HandoffKind::Intra
                } else {
                    HandoffKind::Inter
                };
                self.report.handoffs.push(HandoffRecord {
                    mn: m.name.clone(),
                    kind,
                    from_ar: self.topo.ar_name(from).to_string(),
                    to_ar: self.topo.ar_name(to).to_string(),
                    start: now,
                    end: None,
                    signaling_delay: None,
                    latency: None,
                    dropped: false,
                });
                AttachAction::Handoff(self.report.handoffs.len() - 1, kind)
            }
            (None, false) => AttachAction::Initial,
        };
        let m = &mut self.mns[i];
        let last_old = m.last_rx.take();
        m.awaiting_first = match action {
            AttachAction::Handoff(idx, _) => Some((idx, last_old)),
            _ => None,
        };
        m.action = action;
        self.record(|s| LogRecord::Moved {
            t: now,
            mn: s.mns[i].name.clone(),
            from: s.topo.ar_name(from).to_string(),
            to: s.topo.ar_name(to).to_string(),
            kind: match action {
                AttachAction::Handoff(_, k) => Some(k),
                _ => None,
            },
        });
        self.attach(i, to);
    }

    fn adverts_for(&self, ar: ArId) -> Vec<MapAdvert> {
        self.topo.ar_adverts[ar.0 as usize]
            .iter()
            .map(|&m| {
                let map = &self.maps[m.0 as usize];
                MapAdvert {
                    map_id: m,
                    tot_cn: map.tot_cn(),
                    capacity_h_thr: map.thresholds.h_thr(),
                    distance_hops: self.topo.hops_between(m, ar),
                }
            })
            .collect()
    }

    fn on_advert_tick(&mut self, ar: ArId) {
        let now = self.now;
        if now >= self.sim_time {
            return;
        }
        self.report.adverts_emitted += 1;
        let adverts = self.adverts_for(ar);
        self.record(|s| LogRecord::Advert {
            t: now,
            ar: s.topo.ar_name(ar).to_string(),
            loads: adverts
                .iter()
                .map(|a| (s.topo.map_name(a.map_id).to_string(), a.tot_cn))
                .collect(),
        });
        let arrive = now + self.topo.wireless_latency();
        for i in 0..self.mns.len() {
            let m = &self.mns[i];
            if m.active && m.ar == ar {
                let epoch = m.epoch;
                self.push(
                    arrive,
                    Ev::Advert {
                        mn: i,
                        epoch,
                        adverts: adverts.clone(),
                        solicited: false,
                    },
                );
            }
        }
        self.push(now + self.advert_period, Ev::AdvertTick(ar));
    }

    fn on_advert(&mut self, i: usize, epoch: u64, adverts: Vec<MapAdvert>, solicited: bool) {
        let m = &mut self.mns[i];
        if m.epoch != epoch {
            return;
        }
        m.node.update_map_table(adverts);
        if !solicited {
            return;
        }
        let action = std::mem::replace(&mut m.action, AttachAction::Nothing);
        let (serving, pending) = (m.serving, m.pending.is_some());
        match action {
            AttachAction::Nothing => {}
            AttachAction::Initial => {
                if serving.is_none() && !pending {
                    let target = self.mns[i].node.map_table().first().map(|a| a.map_id);
                    self.start_chain(i, ChainKind::Initial, target, None, None);
                }
            }
            AttachAction::Handoff(idx, HandoffKind::Intra) => {
                if let (Some(b), false) = (serving, pending) {
                    self.send_refresh(i, b, Some(idx));
                }
            }
            AttachAction::Handoff(idx, HandoffKind::Inter) => {
                if let (Some(b), false) = (serving, pending) {
                    let target = Some(self.topo.parent(self.mns[i].ar));
                    self.start_chain(i, ChainKind::Handoff, target, Some(b), Some(idx));
                }
            }
        }
    }

    // Local registration.

    fn start_chain(
        &mut self,
        i: usize,
        kind: ChainKind,
        first: Option<MapId>,
        old: Option<Binding>,
        handoff: Option<usize>,
    ) {
        let probe = make_binding_update(&self.mns[i].node, NodeAddress(0), self.now);
        self.report.chains.push(ChainRecord {
            mn: self.mns[i].name.clone(),
            class: classify_bu(&probe),
            kind,
            started: self.now,
            steps: Vec::new(),
            outcome: ChainOutcome::Pending,
        });
        let chain = self.report.chains.len() - 1;
        let mut pending = Pending {
            purpose: match kind {
                ChainKind::Initial => Purpose::Initial,
                ChainKind::Handoff => Purpose::Handoff,
                ChainKind::Displaced => Purpose::Displaced,
            },
            chain: Some(chain),
            handoff,
            target: MapId(0),
            rcoa: NodeAddress(0),
            lcoa: self.mns[i].node.lcoa,
            excluded: BTreeSet::new(),
            seq: 0,
            old,
            signaling: 0.0,
        };
        if kind == ChainKind::Displaced {
            if let Some(b) = old {
                pending.excluded.insert(b.map);
                pending.old = None;
            }
        }
        match first {
            Some(target) => {
                pending.target = target;
                self.send_registration(i, pending);
            }
            None => self.fail_chain(i, pending),
        }
    }

    fn send_refresh(&mut self, i: usize, b: Binding, handoff: Option<usize>) {
        let pending = Pending {
            purpose: Purpose::Refresh,
            chain: None,
            handoff,
            target: b.map,
            rcoa: b.rcoa,
            lcoa: self.mns[i].node.lcoa,
            excluded: BTreeSet::new(),
            seq: 0,
            old: None,
            signaling: 0.0,
        };
        self.send_registration(i, pending);
    }

    /// Sends a Binding Update for `pending.target`; a fresh regional
    /// address is formed unless this refreshes the serving binding.
    fn send_registration(&mut self, i: usize, mut pending: Pending) {
        let now = self.now;
        if pending.purpose != Purpose::Refresh {
            pending.rcoa = self.addresses.allocate();
        }
        pending.seq = self.seq();
        pending.lcoa = self.mns[i].node.lcoa;
        let m = &self.mns[i];
        let bu = make_binding_update(&m.node, pending.rcoa, now);
        let latency = self.topo.mn_map_latency(pending.target, m.ar);
        pending.signaling += latency;
        let ev = Ev::BuAtMap {
            mn: i,
            map: pending.target,
            bu,
            chain: pending.chain,
            seq: pending.seq,
            allow_replacement: pending.purpose != Purpose::Displaced,
        };
        let target = pending.target;
        self.record(|s| LogRecord::BindingUpdate {
            t: now,
            mn: s.mns[i].name.clone(),
            map: s.topo.map_name(target).to_string(),
            flag_a: bu.flag_a,
            ready: s.mns[i].node.state() == ReadyState::Ready,
            con_cn: bu.con_cn,
            class: classify_bu(&bu),
        });
        self.mns[i].pending = Some(pending);
        self.push(now + latency, ev);
    }

    fn on_bu_at_map(
        &mut self,
        i: usize,
        map: MapId,
        bu: BindingUpdate,
        chain: Option<usize>,
        seq: u64,
        allow_replacement: bool,
    ) {
        let now = self.now;
        let mode = self.opts.admission_mode(allow_replacement);
        let outcome = handle_registration(&mut self.maps[map.0 as usize], &bu, mode);
        // The MAP tracks the live session count from tunnelled traffic.
        let live = self.mns[i].node.con_cn();
        self.maps[map.0 as usize].set_con_cn(bu.mn_home_address, live);

        if let Some(c) = chain {
            let step = match outcome.decision {
                AdmissionDecision::Admit => StepResult::Accepted,
                AdmissionDecision::ReplaceThenAdmit { .. } => StepResult::AcceptedByReplacement,
                AdmissionDecision::Reject => StepResult::Rejected,
            };
            self.report.chains[c]
                .steps
                .push((self.topo.map_name(map).to_string(), step));
        }
        self.record(|s| LogRecord::Registration {
            t: now,
            map: s.topo.map_name(map).to_string(),
            mn: s.mns[i].name.clone(),
            decision: match outcome.decision {
                _ if outcome.refreshed => "refresh".to_string(),
                AdmissionDecision::Admit => "admit".to_string(),
                AdmissionDecision::Reject => "reject".to_string(),
                AdmissionDecision::ReplaceThenAdmit { victim } => {
                    format!("replace {}", s.mns[s.by_home[&victim]].name)
                }
            },
            tot_cn: s.maps[map.0 as usize].tot_cn(),
        });

        if let Some(notice) = outcome.eviction {
            self.report.insufficient_resource_acks += 1;
            let v = self.by_home[&notice.evicted.mn_home_address];
            let at = now + self.topo.mn_map_latency(map, self.mns[v].ar);
            self.push(
                at,
                Ev::Evicted {
                    mn: v,
                    map,
                    rcoa: notice.evicted.rcoa,
                },
            );
        }
        if outcome.ack.status == AckStatus::InsufficientResources {
            self.report.insufficient_resource_acks += 1;
        }
        let path = self.topo.mn_map_latency(map, self.mns[i].ar);
        self.push(
            now + path,
            Ev::BaAtMn {
                mn: i,
                map,
                rcoa: bu.rcoa,
                status: outcome.ack.status,
                seq,
                path,
            },
        );
    }

    fn on_ba(
        &mut self,
        i: usize,
        map: MapId,
        rcoa: NodeAddress,
        status: AckStatus,
        seq: u64,
        path: Seconds,
    ) {
        let now = self.now;
        self.record(|s| LogRecord::BindingAck {
            t: now,
            mn: s.mns[i].name.clone(),
            map: s.topo.map_name(map).to_string(),
            status,
        });
        let m = &mut self.mns[i];
        let current = m.pending.as_ref().is_some_and(|p| p.seq == seq);
        if !current {
            // Nobody waits for this binding any more.
            if status == AckStatus::Accepted && m.serving != Some(Binding { map, rcoa }) {
                let home = m.node.home_address;
                self.push(now, Ev::Dereg { map, home, rcoa });
            }
            return;
        }
        let mut p = m.pending.take().expect("checked");
        p.signaling += path;
        let moved = m.node.lcoa != p.lcoa;

        match (p.purpose, status) {
            (Purpose::Refresh, AckStatus::Accepted) => {
                if let Some(h) = p.handoff {
                    let rec = &mut self.report.handoffs[h];
                    rec.end = Some(now);
                    rec.signaling_delay = Some(p.signaling);
                }
                if moved {
                    if let Some(b) = self.mns[i].serving {
                        self.send_refresh(i, b, None);
                    }
                }
            }
            // The eviction notice for the same binding starts re-homing.
            (Purpose::Refresh, AckStatus::InsufficientResources) => {}
            (_, AckStatus::Accepted) => {
                if let Some(c) = p.chain {
                    self.report.chains[c].outcome = ChainOutcome::Accepted;
                }
                let binding = Binding {
                    map: p.target,
                    rcoa: p.rcoa,
                };
                let m = &mut self.mns[i];
                m.serving = Some(binding);
                m.node.rcoa = Some(p.rcoa);
                let released = p.old;
                if let Some(prev) = m.ha_pending.take() {
                    // Superseded before the home agent answered.
                    let home = m.node.home_address;
                    if let Some(old) = prev.old {
                        self.push(
                            now,
                            Ev::Dereg {
                                map: old.map,
                                home,
                                rcoa: old.rcoa,
                            },
                        );
                    }
                }
                let ha_seq = self.seq();
                let m = &mut self.mns[i];
                m.ha_pending = Some(HaPending {
                    seq: ha_seq,
                    handoff: p.handoff,
                    old: released,
                    signaling: p.signaling,
                });
                let to_ha = self.topo.mn_map_latency(p.target, m.ar)
                    + self
                        .topo
                        .link((NodeRef::Map(p.target.0), NodeRef::HomeAgent))
                        .latency_s;
                self.push(
                    now + to_ha,
                    Ev::BuAtHa {
                        mn: i,
                        binding,
                        seq: ha_seq,
                    },
                );
                if moved {
                    self.send_refresh(i, binding, None);
                }
            }
            (_, AckStatus::InsufficientResources) => {
                p.excluded.insert(map);
                let next = if self.opts.may_reselect() {
                    select_map(&self.mns[i].node, &self.params, &p.excluded)
                } else {
                    None
                };
                match next {
                    Some(target) => {
                        p.target = target;
                        self.send_registration(i, p);
                    }
                    None => self.fail_chain(i, p),
                }
            }
        }
    }

    fn on_evicted(&mut self, i: usize, map: MapId, rcoa: NodeAddress) {
        let now = self.now;
        self.record(|s| LogRecord::BindingAck {
            t: now,
            mn: s.mns[i].name.clone(),
            map: s.topo.map_name(map).to_string(),
            status: AckStatus::InsufficientResources,
        });
        let m = &mut self.mns[i];
        let evicted = Binding { map, rcoa };
        if m.serving != Some(evicted) {
            return;
        }
        m.serving = None;
        m.node.rcoa = None;
        if m.ha_pending.is_some_and(|h| h.old == Some(evicted)) {
            if let Some(h) = m.ha_pending.as_mut() {
                h.old = None;
            }
        }
        match m.pending.as_mut() {
            Some(p) if p.purpose != Purpose::Refresh => {
                // The registration in flight decides where the node lands.
                if p.old == Some(evicted) {
                    p.old = None;
                }
            }
            _ => {
                m.pending = None;
                let excluded: BTreeSet<MapId> = [map].into();
                let first = if self.opts.may_reselect() {
                    select_map(&self.mns[i].node, &self.params, &excluded)
                } else {
                    None
                };
                self.start_chain(i, ChainKind::Displaced, first, Some(evicted), None);
            }
        }
    }

    fn fail_chain(&mut self, i: usize, p: Pending) {
        if let Some(c) = p.chain {
            self.report.chains[c].outcome = ChainOutcome::Failed;
        }
        if let Some(h) = p.handoff {
            self.report.handoffs[h].dropped = true;
        }
        if p.purpose != Purpose::Initial {
            self.drop_node(i);
        }
    }

    /// Ends every session of a node that lost its last MAP. It registers
    /// again as a new node after its next move.
    fn drop_node(&mut self, i: usize) {
        let now = self.now;
        self.record(|s| LogRecord::Dropped {
            t: now,
            mn: s.mns[i].name.clone(),
        });
        for f in self.mns[i].flows.clone() {
            self.close_flow(f);
            self.flows[f].dest = None;
        }
        let m = &mut self.mns[i];
        let home = m.node.home_address;
        let mut release = Vec::new();
        release.extend(m.serving.take());
        if let Some(h) = m.ha_pending.take() {
            release.extend(h.old);
        }
        m.node.rcoa = None;
        m.awaiting_first = None;
        for b in release {
            self.push(
                now,
                Ev::Dereg {
                    map: b.map,
                    home,
                    rcoa: b.rcoa,
                },
            );
        }
    }

    // Global registration.

    fn on_bu_at_ha(&mut self, i: usize, binding: Binding, seq: u64) {
        let now = self.now;
        let m = &self.mns[i];
        if m.serving != Some(binding) || m.ha_pending.map(|h| h.seq) != Some(seq) {
            return;
        }
        self.record(|s| LogRecord::HomeAgentUpdate {
            t: now,
            mn: s.mns[i].name.clone(),
            map: s.topo.map_name(binding.map).to_string(),
        });
        for f in self.mns[i].flows.clone() {
            let cn = self.flows[f].cn;
            let delay = self
                .topo
                .link((NodeRef::HomeAgent, NodeRef::Cn(cn.0)))
                .latency_s;
            self.push(
                now + delay,
                Ev::CnUpdate {
                    flow: f,
                    dest: binding,
                },
            );
        }
        let path = self
            .topo
            .link((NodeRef::HomeAgent, NodeRef::Map(binding.map.0)))
            .latency_s
            + self.topo.mn_map_latency(binding.map, self.mns[i].ar);
        self.push(now + path, Ev::BaFromHa { mn: i, seq, path });
    }

    fn on_ba_from_ha(&mut self, i: usize, seq: u64, path: Seconds) {
        let now = self.now;
        let m = &mut self.mns[i];
        let Some(h) = m.ha_pending.filter(|h| h.seq == seq) else {
            return;
        };
        m.ha_pending = None;
        let home = m.node.home_address;
        let serving = m.serving;
        if let Some(idx) = h.handoff {
            let rec = &mut self.report.handoffs[idx];
            rec.end = Some(now);
            // The BU to the home agent retraces the MN-MAP path.
            rec.signaling_delay = Some(h.signaling + 2.0 * path);
        }
        if let Some(old) = h.old.filter(|&o| Some(o) != serving) {
            self.push(
                now,
                Ev::Dereg {
                    map: old.map,
                    home,
                    rcoa: old.rcoa,
                },
            );
        }
    }

    // Sessions and data.

    fn try_open(&mut self, f: usize) {
        let flow = &self.flows[f];
        let m = &self.mns[flow.mn];
        if flow.open || !flow.window || flow.dest.is_none() || flow.dest != m.serving {
            return;
        }
        let now = self.now;
        let (cn, mn) = (flow.cn, flow.mn);
        let first = now + flow.phase;
        let flow = &mut self.flows[f];
        flow.open = true;
        flow.generation += 1;
        let generation = flow.generation;
        self.mns[mn].node.open_session(cn, now, self.ready_timer);
        self.sync_con_cn(mn);
        self.arm_timer(mn);
        self.push(
            first,
            Ev::Emit {
                flow: f,
                generation,
            },
        );
    }

    fn close_flow(&mut self, f: usize) {
        let flow = &mut self.flows[f];
        if !flow.open {
            return;
        }
        flow.open = false;
        flow.generation += 1;
        let (cn, mn) = (flow.cn, flow.mn);
        self.mns[mn].node.close_session(cn);
        self.sync_con_cn(mn);
    }

    fn sync_con_cn(&mut self, i: usize) {
        let m = &self.mns[i];
        let (home, live) = (m.node.home_address, m.node.con_cn());
        for map in &mut self.maps {
            map.set_con_cn(home, live);
        }
    }

    fn arm_timer(&mut self, i: usize) {
        let m = &mut self.mns[i];
        if m.timer_armed {
            return;
        }
        if let Some(deadline) = m.node.ready_deadline() {
            m.timer_armed = true;
            self.push(deadline, Ev::ReadyExpiry(i));
        }
    }

    fn on_ready_expiry(&mut self, i: usize) {
        let now = self.now;
        let m = &mut self.mns[i];
        m.timer_armed = false;
        m.node.on_timer_expiry(now);
        self.arm_timer(i);
    }

    fn on_emit(&mut self, f: usize, generation: u64) {
        let now = self.now;
        let flow = &self.flows[f];
        if flow.generation != generation || !flow.open || now >= flow.stop {
            return;
        }
        let dest = flow.dest.expect("open flow has a destination");
        let (cn, bits, interval) = (flow.cn, flow.bits, flow.interval);
        self.flows[f].stats.sent += 1;
        let at = self
            .topo
            .transmit((NodeRef::Cn(cn.0), NodeRef::Map(dest.map.0)), now, bits);
        self.push(
            at,
            Ev::PktAtMap {
                flow: f,
                map: dest.map,
                rcoa: dest.rcoa,
            },
        );
        let next = now + interval;
        if next < self.flows[f].stop {
            self.push(
                next,
                Ev::Emit {
                    flow: f,
                    generation,
                },
            );
        }
    }

    fn lose(&mut self, f: usize) {
        self.flows[f].stats.lost += 1;
    }

    fn on_packet_at_map(&mut self, f: usize, map: MapId, rcoa: NodeAddress) {
        let home = self.mns[self.flows[f].mn].node.home_address;
        let state = &self.maps[map.0 as usize];
        let Some(entry) = state.entry(home).filter(|e| e.rcoa == rcoa) else {
            return self.lose(f);
        };
        let lcoa = entry.lcoa;
        let (tot, cap) = (state.tot_cn(), state.thresholds.h_thr());
        if tot > cap {
            // An overloaded MAP forwards h_thr/tot_cn of each flow.
            let credit = &mut self.flows[f].credit;
            *credit += f64::from(cap) / f64::from(tot);
            if *credit < 1.0 {
                return self.lose(f);
            }
            *credit -= 1.0;
        }
        let Some(&ar) = self.lcoa_ar.get(&lcoa) else {
            return self.lose(f);
        };
        self.forward(f, map, ar, lcoa);
    }

    /// Sends a packet one wired hop from `map` towards `ar`. Each hop is
    /// queued when the packet reaches it, never ahead of time.
    fn forward(&mut self, f: usize, map: MapId, ar: ArId, lcoa: NodeAddress) {
        let bits = self.flows[f].bits;
        let hop = self.topo.map_to_ar(map, ar)[0];
        let at = self.topo.transmit(hop, self.now, bits);
        match hop.1 {
            NodeRef::Map(via) => self.push(
                at,
                Ev::PktTransit {
                    flow: f,
                    via: MapId(via),
                    ar,
                    lcoa,
                },
            ),
            _ => self.push(at, Ev::PktAtAr { flow: f, ar, lcoa }),
        }
    }

    fn attached_at(&self, f: usize, ar: ArId, lcoa: NodeAddress) -> bool {
        let m = &self.mns[self.flows[f].mn];
        m.active && m.ar == ar && m.node.lcoa == lcoa
    }

    fn on_packet_at_ar(&mut self, f: usize, ar: ArId, lcoa: NodeAddress) {
        if !self.attached_at(f, ar, lcoa) {
            return self.lose(f);
        }
        let mn = self.flows[f].mn as u32;
        let bits = self.flows[f].bits;
        let at = self
            .topo
            .transmit((NodeRef::Ar(ar.0), NodeRef::Mn(mn)), self.now, bits);
        self.push(at, Ev::PktAtMn { flow: f, ar, lcoa });
    }

    fn on_packet_at_mn(&mut self, f: usize, ar: ArId, lcoa: NodeAddress) {
        if !self.attached_at(f, ar, lcoa) {
            return self.lose(f);
        }
        let now = self.now;
        let flow = &mut self.flows[f];
        flow.stats.delivered += 1;
        let (mn, size) = (flow.mn, flow.size);
        self.report.deliveries.push(now);
        self.report.delivered_sizes.push(size);
        let m = &mut self.mns[mn];
        m.node.on_data_activity(now, self.ready_timer);
        m.last_rx = Some(now);
        if let Some((idx, last_old)) = m.awaiting_first.take() {
            self.report.handoffs[idx].latency = record_handoff_latency(last_old, Some(now));
        }
        self.arm_timer(mn);
    }
}

/// Runs `scenario` to completion under `opts`.
pub fn run(scenario: &Scenario, opts: RunOptions) -> Result<MetricsReport, SimError> {
    Simulation::new(scenario, opts)?.finish()
}
