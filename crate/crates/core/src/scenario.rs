//! Scenario files: a line-oriented `key = value` format with section blocks.
//!
//! ```text
//! # globals come first
//! sim_time_s = 50
//! seed = 1
//!
//! [map]
//! id = MAP1
//! n_thr = 8
//! h_thr = 12
//!
//! [ar]
//! id = AR1
//! map = MAP1
//! x = 100
//! y = 500
//! ```
//!
//! Sections are `[map]`, `[ar]`, `[link]`, `[mn]`, `[flow]` and `[leg]`.
//! Unknown sections or keys are errors. Correspondent nodes are declared
//! implicitly by the flows that name them, and `HA` names the home agent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::admission::{DEFAULT_ALPHA, DEFAULT_S_MAX, DEFAULT_T_MAP};
use crate::mobile_node::DEFAULT_READY_TIMER_S;
use crate::Seconds;

/// Name of the home agent node in link declarations.
pub const HOME_AGENT: &str = "HA";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    /// 1-based line number, or 0 when the problem is not tied to a line.
    pub line: usize,
    pub message: String,
}

impl Diagnostic {
    fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            f.write_str(&self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario:\n{}", format_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ScenarioError {
    pub fn diagnostics(&self) -> &[Diagnostic] {
        match self {
            ScenarioError::Invalid(d) => d,
            ScenarioError::Io { .. } => &[],
        }
    }
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| format!("  {d}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Globals {
    pub sim_time_s: Seconds,
    pub ready_timer_s: Seconds,
    pub advert_period_s: Seconds,
    pub alpha: f64,
    pub t_map: f64,
    pub s_max: f64,
    pub seed: u64,
    /// Default CBR packet size in bytes.
    pub packet_size: u32,
    pub link_bandwidth_bps: f64,
    pub link_latency_s: Seconds,
    pub wireless_bandwidth_bps: f64,
    pub wireless_latency_s: Seconds,
}

impl Default for Globals {
    fn default() -> Self {
        Self {
            sim_time_s: 50.0,
            ready_timer_s: DEFAULT_READY_TIMER_S,
            advert_period_s: 1.0,
            alpha: DEFAULT_ALPHA,
            t_map: DEFAULT_T_MAP,
            s_max: DEFAULT_S_MAX,
            seed: 1,
            packet_size: 512,
            link_bandwidth_bps: 2e6,
            link_latency_s: 0.01,
            wireless_bandwidth_bps: 2e6,
            wireless_latency_s: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapSpec {
    pub id: String,
    pub n_thr: u32,
    pub h_thr: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArSpec {
    pub id: String,
    /// Parent MAP.
    pub map: String,
    pub x: f64,
    pub y: f64,
    pub range: f64,
    /// MAP options put in router advertisements. Empty means every MAP,
    /// parent first.
    pub advertise: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub bandwidth_bps: Option<f64>,
    pub latency_s: Option<Seconds>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MnSpec {
    pub id: String,
    /// Access router the node attaches to when it switches on.
    pub ar: String,
    pub speed: f64,
    pub start_s: Seconds,
    /// Activation happens uniformly in `[start_s, start_s + start_jitter_s)`.
    pub start_jitter_s: Seconds,
    /// Waypoints visited after `ar`, cyclically. Leg times follow from AR
    /// distances and speed.
    pub route: Vec<String>,
}

impl MnSpec {
    pub fn is_mobile(&self, legs: &[LegSpec]) -> bool {
        !self.route.is_empty() || legs.iter().any(|l| l.mn == self.id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSpec {
    pub cn: String,
    pub mn: String,
    pub rate_bps: f64,
    pub start_s: Seconds,
    /// `None` runs until the end of the simulation.
    pub stop_s: Option<Seconds>,
    pub packet_size: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LegSpec {
    pub mn: String,
    pub from: String,
    pub to: String,
    pub at_s: Seconds,
    pub speed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MovementLeg {
    pub from_ar: String,
    pub to_ar: String,
    pub at_time: Seconds,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Scenario {
    pub globals: Globals,
    pub maps: Vec<MapSpec>,
    pub ars: Vec<ArSpec>,
    pub links: Vec<LinkSpec>,
    pub mns: Vec<MnSpec>,
    pub flows: Vec<FlowSpec>,
    pub legs: Vec<LegSpec>,
}

/// Source lines of each parsed item, used to point diagnostics at the file.
#[derive(Debug, Default)]
struct LineIndex {
    globals: BTreeMap<&'static str, usize>,
    maps: Vec<usize>,
    ars: Vec<usize>,
    links: Vec<usize>,
    mns: Vec<usize>,
    flows: Vec<usize>,
    legs: Vec<usize>,
    last_line: usize,
}

fn at(lines: &[usize], i: usize) -> usize {
    lines.get(i).copied().unwrap_or(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Section {
    Map,
    Ar,
    Link,
    Mn,
    Flow,
    Leg,
}

impl Section {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "map" => Section::Map,
            "ar" => Section::Ar,
            "link" => Section::Link,
            "mn" => Section::Mn,
            "flow" => Section::Flow,
            "leg" => Section::Leg,
            _ => return None,
        })
    }
}

struct RawBlock {
    section: Section,
    line: usize,
    fields: Vec<(String, String, usize)>,
}

/// Typed access to one block's fields, collecting diagnostics as it goes.
struct Fields<'a> {
    header_line: usize,
    what: &'static str,
    fields: &'a [(String, String, usize)],
    used: BTreeSet<&'a str>,
    diags: &'a mut Vec<Diagnostic>,
}

impl<'a> Fields<'a> {
    fn new(
        what: &'static str,
        header_line: usize,
        fields: &'a [(String, String, usize)],
        diags: &'a mut Vec<Diagnostic>,
    ) -> Self {
        let mut seen = BTreeSet::new();
        for (k, _, line) in fields {
            if !seen.insert(k.as_str()) {
                diags.push(Diagnostic::new(
                    *line,
                    format!("duplicate key `{k}` in {what}"),
                ));
            }
        }
        Self {
            header_line,
            what,
            fields,
            used: BTreeSet::new(),
            diags,
        }
    }

    fn raw(&mut self, key: &'static str) -> Option<(&'a str, usize)> {
        self.used.insert(key);
        self.fields
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, line)| (v.as_str(), *line))
    }

    fn missing(&mut self, key: &str) {
        self.diags.push(Diagnostic::new(
            self.header_line,
            format!("{} is missing required key `{key}`", self.what),
        ));
    }

    fn opt_parse<T: std::str::FromStr>(&mut self, key: &'static str, kind: &str) -> Option<T> {
        let (value, line) = self.raw(key)?;
        match value.parse::<T>() {
            Ok(v) => Some(v),
            Err(_) => {
                self.diags.push(Diagnostic::new(
                    line,
                    format!("`{key}` expects {kind}, got `{value}`"),
                ));
                None
            }
        }
    }

    fn opt_f64(&mut self, key: &'static str) -> Option<f64> {
        let v: f64 = self.opt_parse(key, "a number")?;
        if v.is_finite() {
            Some(v)
        } else {
            let line = self.raw(key).map(|(_, l)| l).unwrap_or(0);
            self.diags
                .push(Diagnostic::new(line, format!("`{key}` must be finite")));
            None
        }
    }

    fn f64(&mut self, key: &'static str) -> Option<f64> {
        if self.raw(key).is_none() {
            self.missing(key);
            return None;
        }
        self.opt_f64(key)
    }

    fn u32(&mut self, key: &'static str) -> Option<u32> {
        if self.raw(key).is_none() {
            self.missing(key);
            return None;
        }
        self.opt_parse(key, "a non-negative integer")
    }

    fn string(&mut self, key: &'static str) -> Option<String> {
        match self.raw(key) {
            Some((v, _)) if !v.is_empty() => Some(v.to_string()),
            Some((_, line)) => {
                self.diags
                    .push(Diagnostic::new(line, format!("`{key}` must not be empty")));
                None
            }
            None => {
                self.missing(key);
                None
            }
        }
    }

    fn list(&mut self, key: &'static str) -> Vec<String> {
        match self.raw(key) {
            Some((v, _)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
            None => Vec::new(),
        }
    }

    fn finish(self) {
        for (k, _, line) in self.fields {
            if !self.used.contains(k.as_str()) {
                self.diags.push(Diagnostic::new(
                    *line,
                    format!("unknown key `{k}` in {}", self.what),
                ));
            }
        }
    }
}

impl Scenario {
    /// Parses and validates scenario text.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut diags = Vec::new();
        let mut globals_raw: Vec<(String, String, usize)> = Vec::new();
        let mut blocks: Vec<RawBlock> = Vec::new();
        let mut last_line = 0;

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            last_line = line;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                match Section::parse(name.trim()) {
                    Some(section) => blocks.push(RawBlock {
                        section,
                        line,
                        fields: Vec::new(),
                    }),
                    None => {
                        diags.push(Diagnostic::new(line, format!("unknown section `[{name}]`")))
                    }
                }
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                diags.push(Diagnostic::new(
                    line,
                    format!("expected `key = value`, got `{content}`"),
                ));
                continue;
            };
            let entry = (key.trim().to_string(), value.trim().to_string(), line);
            match blocks.last_mut() {
                Some(block) => block.fields.push(entry),
                None => globals_raw.push(entry),
            }
        }

        let mut scenario = Scenario::default();
        let mut index = LineIndex {
            last_line,
            ..LineIndex::default()
        };

        {
            let mut f = Fields::new("globals", 1, &globals_raw, &mut diags);
            let g = &mut scenario.globals;
            macro_rules! global {
                ($key:literal, $field:ident) => {
                    if let Some(v) = f.opt_parse($key, "a number") {
                        g.$field = v;
                    }
                    if let Some((_, line)) = f.raw($key) {
                        index.globals.insert($key, line);
                    }
                };
            }
            global!("sim_time_s", sim_time_s);
            global!("ready_timer_s", ready_timer_s);
            global!("advert_period_s", advert_period_s);
            global!("alpha", alpha);
            global!("t_map", t_map);
            global!("s_max", s_max);
            global!("seed", seed);
            global!("packet_size", packet_size);
            global!("link_bandwidth_bps", link_bandwidth_bps);
            global!("link_latency_s", link_latency_s);
            global!("wireless_bandwidth_bps", wireless_bandwidth_bps);
            global!("wireless_latency_s", wireless_latency_s);
            f.finish();
        }

        for block in &blocks {
            let line = block.line;
            match block.section {
                Section::Map => {
                    let mut f = Fields::new("[map]", line, &block.fields, &mut diags);
                    let (id, n_thr, h_thr) = (f.string("id"), f.u32("n_thr"), f.u32("h_thr"));
                    f.finish();
                    if let (Some(id), Some(n_thr), Some(h_thr)) = (id, n_thr, h_thr) {
                        scenario.maps.push(MapSpec { id, n_thr, h_thr });
                        index.maps.push(line);
                    }
                }
                Section::Ar => {
                    let mut f = Fields::new("[ar]", line, &block.fields, &mut diags);
                    let id = f.string("id");
                    let map = f.string("map");
                    let x = f.f64("x");
                    let y = f.f64("y");
                    let range = f.opt_f64("range").unwrap_or(75.0);
                    let advertise = f.list("advertise");
                    f.finish();
                    if let (Some(id), Some(map), Some(x), Some(y)) = (id, map, x, y) {
                        scenario.ars.push(ArSpec {
                            id,
                            map,
                            x,
                            y,
                            range,
                            advertise,
                        });
                        index.ars.push(line);
                    }
                }
                Section::Link => {
                    let mut f = Fields::new("[link]", line, &block.fields, &mut diags);
                    let a = f.string("a");
                    let b = f.string("b");
                    let bandwidth_bps = f.opt_f64("bandwidth_bps");
                    let latency_s = f.opt_f64("latency_s");
                    f.finish();
                    if let (Some(a), Some(b)) = (a, b) {
                        scenario.links.push(LinkSpec {
                            a,
                            b,
                            bandwidth_bps,
                            latency_s,
                        });
                        index.links.push(line);
                    }
                }
                Section::Mn => {
                    let mut f = Fields::new("[mn]", line, &block.fields, &mut diags);
                    let id = f.string("id");
                    let ar = f.string("ar");
                    let speed = f.opt_f64("speed").unwrap_or(0.0);
                    let start_s = f.opt_f64("start_s").unwrap_or(0.0);
                    let start_jitter_s = f.opt_f64("start_jitter_s").unwrap_or(0.0);
                    let route = f.list("route");
                    f.finish();
                    if let (Some(id), Some(ar)) = (id, ar) {
                        scenario.mns.push(MnSpec {
                            id,
                            ar,
                            speed,
                            start_s,
                            start_jitter_s,
                            route,
                        });
                        index.mns.push(line);
                    }
                }
                Section::Flow => {
                    let mut f = Fields::new("[flow]", line, &block.fields, &mut diags);
                    let cn = f.string("cn");
                    let mn = f.string("mn");
                    let rate_bps = f.f64("rate_bps");
                    let start_s = f.opt_f64("start_s").unwrap_or(0.0);
                    let stop_s = f.opt_f64("stop_s");
                    let packet_size = f.opt_parse("packet_size", "a non-negative integer");
                    f.finish();
                    if let (Some(cn), Some(mn), Some(rate_bps)) = (cn, mn, rate_bps) {
                        scenario.flows.push(FlowSpec {
                            cn,
                            mn,
                            rate_bps,
                            start_s,
                            stop_s,
                            packet_size,
                        });
                        index.flows.push(line);
                    }
                }
                Section::Leg => {
                    let mut f = Fields::new("[leg]", line, &block.fields, &mut diags);
                    let mn = f.string("mn");
                    let from = f.string("from");
                    let to = f.string("to");
                    let at_s = f.f64("at_s");
                    let speed = f.opt_f64("speed");
                    f.finish();
                    if let (Some(mn), Some(from), Some(to), Some(at_s)) = (mn, from, to, at_s) {
                        scenario.legs.push(LegSpec {
                            mn,
                            from,
                            to,
                            at_s,
                            speed,
                        });
                        index.legs.push(line);
                    }
                }
            }
        }

        if diags.is_empty() {
            diags = scenario.check(&index);
        }
        if diags.is_empty() {
            Ok(scenario)
        } else {
            diags.sort_by_key(|d| d.line);
            Err(ScenarioError::Invalid(diags))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Checks cross references and value ranges of an in-memory scenario.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let diags = self.check(&LineIndex::default());
        if diags.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(diags))
        }
    }

    fn check(&self, index: &LineIndex) -> Vec<Diagnostic> {
        let mut d = Vec::new();
        let g = &self.globals;
        let gl = |key: &str| index.globals.get(key).copied().unwrap_or(0);

        for (key, value) in [
            ("sim_time_s", g.sim_time_s),
            ("ready_timer_s", g.ready_timer_s),
            ("advert_period_s", g.advert_period_s),
            ("alpha", g.alpha),
            ("t_map", g.t_map),
            ("s_max", g.s_max),
            ("link_bandwidth_bps", g.link_bandwidth_bps),
            ("wireless_bandwidth_bps", g.wireless_bandwidth_bps),
        ] {
            if !(value.is_finite() && value > 0.0) {
                d.push(Diagnostic::new(
                    gl(key),
                    format!("`{key}` must be positive"),
                ));
            }
        }
        for (key, value) in [
            ("link_latency_s", g.link_latency_s),
            ("wireless_latency_s", g.wireless_latency_s),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                d.push(Diagnostic::new(
                    gl(key),
                    format!("`{key}` must not be negative"),
                ));
            }
        }
        if g.packet_size == 0 {
            d.push(Diagnostic::new(
                gl("packet_size"),
                "`packet_size` must be positive",
            ));
        }

        let end = index.last_line;
        if self.maps.is_empty() {
            d.push(Diagnostic::new(end, "missing section [map]"));
        }
        if self.ars.is_empty() {
            d.push(Diagnostic::new(end, "missing section [ar]"));
        }
        if self.mns.is_empty() {
            d.push(Diagnostic::new(end, "missing section [mn]"));
        }

        let mut names: BTreeMap<&str, &str> = BTreeMap::new();
        names.insert(HOME_AGENT, "home agent");
        let map_ids: BTreeSet<&str> = self.maps.iter().map(|m| m.id.as_str()).collect();
        let ar_ids: BTreeSet<&str> = self.ars.iter().map(|a| a.id.as_str()).collect();
        let mn_ids: BTreeSet<&str> = self.mns.iter().map(|m| m.id.as_str()).collect();

        for (i, m) in self.maps.iter().enumerate() {
            let line = at(&index.maps, i);
            claim(&mut names, &m.id, "map", line, &mut d);
            if m.n_thr > m.h_thr {
                d.push(Diagnostic::new(
                    line,
                    format!(
                        "n_thr exceeds h_thr for {} ({} > {})",
                        m.id, m.n_thr, m.h_thr
                    ),
                ));
            }
        }
        for (i, a) in self.ars.iter().enumerate() {
            let line = at(&index.ars, i);
            claim(&mut names, &a.id, "access router", line, &mut d);
            if !map_ids.contains(a.map.as_str()) {
                d.push(Diagnostic::new(
                    line,
                    format!("{} refers to unknown map `{}`", a.id, a.map),
                ));
            }
            for m in &a.advertise {
                if !map_ids.contains(m.as_str()) {
                    d.push(Diagnostic::new(
                        line,
                        format!("{} advertises unknown map `{m}`", a.id),
                    ));
                }
            }
            if !(a.range > 0.0) {
                d.push(Diagnostic::new(
                    line,
                    format!("{} range must be positive", a.id),
                ));
            }
        }
        for (i, m) in self.mns.iter().enumerate() {
            let line = at(&index.mns, i);
            claim(&mut names, &m.id, "mobile node", line, &mut d);
            if !ar_ids.contains(m.ar.as_str()) {
                d.push(Diagnostic::new(
                    line,
                    format!("{} starts at unknown ar `{}`", m.id, m.ar),
                ));
            }
            if !(m.speed >= 0.0) {
                d.push(Diagnostic::new(
                    line,
                    format!("{} speed must not be negative", m.id),
                ));
            }
            if m.speed > g.s_max {
                d.push(Diagnostic::new(
                    line,
                    format!("{} speed {} exceeds s_max {}", m.id, m.speed, g.s_max),
                ));
            }
            if !(m.start_s >= 0.0 && m.start_jitter_s >= 0.0) {
                d.push(Diagnostic::new(
                    line,
                    format!("{} start times must not be negative", m.id),
                ));
            }
            if !m.route.is_empty() {
                if !(m.speed > 0.0) {
                    d.push(Diagnostic::new(
                        line,
                        format!("{} has a route but no speed", m.id),
                    ));
                }
                for r in &m.route {
                    if !ar_ids.contains(r.as_str()) {
                        d.push(Diagnostic::new(
                            line,
                            format!("{} route uses unknown ar `{r}`", m.id),
                        ));
                    }
                }
                if self.legs.iter().any(|l| l.mn == m.id) {
                    d.push(Diagnostic::new(
                        line,
                        format!("{} has both a route and [leg] blocks", m.id),
                    ));
                }
                let waypoints: Vec<&str> = std::iter::once(m.ar.as_str())
                    .chain(m.route.iter().map(String::as_str))
                    .collect();
                for (k, from) in waypoints.iter().enumerate() {
                    let to = waypoints[(k + 1) % waypoints.len()];
                    if let (Some(a), Some(b)) = (self.ar(from), self.ar(to)) {
                        if distance(a, b) <= 0.0 {
                            d.push(Diagnostic::new(
                                line,
                                format!("{} route step {from} -> {to} has zero length", m.id),
                            ));
                        }
                    }
                }
            }
        }

        let mut cn_ids = BTreeSet::new();
        let mut pairs = BTreeSet::new();
        for (i, f) in self.flows.iter().enumerate() {
            let line = at(&index.flows, i);
            if !mn_ids.contains(f.mn.as_str()) {
                d.push(Diagnostic::new(
                    line,
                    format!("flow refers to unknown mn `{}`", f.mn),
                ));
            }
            if cn_ids.insert(f.cn.as_str()) {
                claim(&mut names, &f.cn, "correspondent node", line, &mut d);
            }
            if !pairs.insert((f.cn.as_str(), f.mn.as_str())) {
                d.push(Diagnostic::new(
                    line,
                    format!("duplicate flow from {} to {}", f.cn, f.mn),
                ));
            }
            if !(f.rate_bps > 0.0) {
                d.push(Diagnostic::new(line, "flow rate_bps must be positive"));
            }
            if f.packet_size == Some(0) {
                d.push(Diagnostic::new(line, "flow packet_size must be positive"));
            }
            if !(f.start_s >= 0.0) {
                d.push(Diagnostic::new(line, "flow start_s must not be negative"));
            }
            if let Some(stop) = f.stop_s {
                if !(stop > f.start_s) {
                    d.push(Diagnostic::new(line, "flow stop_s must be after start_s"));
                }
            }
        }
        for f in &self.flows {
            names.insert(&f.cn, "correspondent node");
        }

        for (i, l) in self.links.iter().enumerate() {
            let line = at(&index.links, i);
            for end in [&l.a, &l.b] {
                if !names.contains_key(end.as_str()) || mn_ids.contains(end.as_str()) {
                    d.push(Diagnostic::new(
                        line,
                        format!("link endpoint `{end}` is not a known node"),
                    ));
                }
            }
            if l.a == l.b {
                d.push(Diagnostic::new(line, "link endpoints must differ"));
            }
            if let Some(bw) = l.bandwidth_bps {
                if !(bw > 0.0) {
                    d.push(Diagnostic::new(line, "link bandwidth_bps must be positive"));
                }
            }
            if let Some(lat) = l.latency_s {
                if !(lat >= 0.0) {
                    d.push(Diagnostic::new(line, "link latency_s must not be negative"));
                }
            }
        }

        let mut last_leg: BTreeMap<&str, (&str, f64)> = BTreeMap::new();
        for (i, l) in self.legs.iter().enumerate() {
            let line = at(&index.legs, i);
            let Some(mn) = self.mns.iter().find(|m| m.id == l.mn) else {
                d.push(Diagnostic::new(
                    line,
                    format!("leg refers to unknown mn `{}`", l.mn),
                ));
                continue;
            };
            for ar in [&l.from, &l.to] {
                if !ar_ids.contains(ar.as_str()) {
                    d.push(Diagnostic::new(
                        line,
                        format!("leg refers to unknown ar `{ar}`"),
                    ));
                }
            }
            let (expected_from, prev_time) = last_leg
                .get(l.mn.as_str())
                .copied()
                .unwrap_or((mn.ar.as_str(), mn.start_s + mn.start_jitter_s));
            if l.from != expected_from {
                d.push(Diagnostic::new(
                    line,
                    format!(
                        "leg for {} starts at {} but the node is at {expected_from}",
                        l.mn, l.from
                    ),
                ));
            }
            if !(l.at_s > prev_time) {
                d.push(Diagnostic::new(
                    line,
                    format!(
                        "leg for {} at {} s is not after {prev_time} s",
                        l.mn, l.at_s
                    ),
                ));
            }
            if let Some(speed) = l.speed {
                if !(speed >= 0.0 && speed <= g.s_max) {
                    d.push(Diagnostic::new(line, "leg speed must be within [0, s_max]"));
                }
            }
            last_leg.insert(&l.mn, (&l.to, l.at_s));
        }

        d
    }

    pub fn ar(&self, id: &str) -> Option<&ArSpec> {
        self.ars.iter().find(|a| a.id == id)
    }

    pub fn mn(&self, id: &str) -> Option<&MnSpec> {
        self.mns.iter().find(|m| m.id == id)
    }

    /// Correspondent node ids in order of first appearance.
    pub fn cns(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.flows
            .iter()
            .map(|f| f.cn.as_str())
            .filter(|cn| seen.insert(*cn))
            .collect()
    }

    /// Movement legs of `mn`, given its actual activation time. Route based
    /// nodes cycle through their waypoints until `until`.
    pub fn movement_legs(
        &self,
        mn: &MnSpec,
        activation: Seconds,
        until: Seconds,
    ) -> Vec<MovementLeg> {
        if mn.route.is_empty() {
            return self
                .legs
                .iter()
                .filter(|l| l.mn == mn.id)
                .map(|l| MovementLeg {
                    from_ar: l.from.clone(),
                    to_ar: l.to.clone(),
                    at_time: l.at_s,
                    speed: l.speed.unwrap_or(mn.speed),
                })
                .collect();
        }
        let waypoints: Vec<&str> = std::iter::once(mn.ar.as_str())
            .chain(mn.route.iter().map(String::as_str))
            .collect();
        let mut legs = Vec::new();
        let mut t = activation;
        for k in 0.. {
            let from = waypoints[k % waypoints.len()];
            let to = waypoints[(k + 1) % waypoints.len()];
            let (Some(a), Some(b)) = (self.ar(from), self.ar(to)) else {
                break;
            };
            let step = distance(a, b) / mn.speed;
            if !(step > 0.0) {
                break;
            }
            t += step;
            if t >= until {
                break;
            }
            legs.push(MovementLeg {
                from_ar: from.to_string(),
                to_ar: to.to_string(),
                at_time: t,
                speed: mn.speed,
            });
        }
        legs
    }

    /// Sets every flow to `rate_bps`.
    pub fn set_flow_rate(&mut self, rate_bps: f64) {
        for f in &mut self.flows {
            f.rate_bps = rate_bps;
        }
    }

    /// Sets the speed of every moving node. Stationary nodes keep speed 0.
    pub fn set_mobile_speed(&mut self, speed: f64) {
        let legs = self.legs.clone();
        for m in &mut self.mns {
            if m.is_mobile(&legs) {
                m.speed = speed;
            }
        }
        for l in &mut self.legs {
            l.speed = None;
        }
    }

    pub fn mean_flow_rate(&self) -> f64 {
        mean(self.flows.iter().map(|f| f.rate_bps))
    }

    pub fn mean_mobile_speed(&self) -> f64 {
        mean(
            self.mns
                .iter()
                .filter(|m| m.is_mobile(&self.legs))
                .map(|m| m.speed),
        )
    }
}

/// Registers a node name, reporting clashes with names already in use.
fn claim<'a>(
    names: &mut BTreeMap<&'a str, &'static str>,
    name: &'a str,
    kind: &'static str,
    line: usize,
    d: &mut Vec<Diagnostic>,
) {
    if let Some(prev) = names.insert(name, kind) {
        d.push(Diagnostic::new(
            line,
            format!("{kind} id `{name}` already names a {prev}"),
        ));
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn distance(a: &ArSpec, b: &ArSpec) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = &self.globals;
        writeln!(f, "sim_time_s = {}", g.sim_time_s)?;
        writeln!(f, "ready_timer_s = {}", g.ready_timer_s)?;
        writeln!(f, "advert_period_s = {}", g.advert_period_s)?;
        writeln!(f, "alpha = {}", g.alpha)?;
        writeln!(f, "t_map = {}", g.t_map)?;
        writeln!(f, "s_max = {}", g.s_max)?;
        writeln!(f, "seed = {}", g.seed)?;
        writeln!(f, "packet_size = {}", g.packet_size)?;
        writeln!(f, "link_bandwidth_bps = {}", g.link_bandwidth_bps)?;
        writeln!(f, "link_latency_s = {}", g.link_latency_s)?;
        writeln!(f, "wireless_bandwidth_bps = {}", g.wireless_bandwidth_bps)?;
        writeln!(f, "wireless_latency_s = {}", g.wireless_latency_s)?;

        for m in &self.maps {
            write!(
                f,
                "\n[map]\nid = {}\nn_thr = {}\nh_thr = {}\n",
                m.id, m.n_thr, m.h_thr
            )?;
        }
        for a in &self.ars {
            write!(
                f,
                "\n[ar]\nid = {}\nmap = {}\nx = {}\ny = {}\nrange = {}\n",
                a.id, a.map, a.x, a.y, a.range
            )?;
            if !a.advertise.is_empty() {
                writeln!(f, "advertise = {}", a.advertise.join(", "))?;
            }
        }
        for l in &self.links {
            write!(f, "\n[link]\na = {}\nb = {}\n", l.a, l.b)?;
            if let Some(bw) = l.bandwidth_bps {
                writeln!(f, "bandwidth_bps = {bw}")?;
            }
            if let Some(lat) = l.latency_s {
                writeln!(f, "latency_s = {lat}")?;
            }
        }
        for m in &self.mns {
            write!(
                f,
                "\n[mn]\nid = {}\nar = {}\nspeed = {}\nstart_s = {}\nstart_jitter_s = {}\n",
                m.id, m.ar, m.speed, m.start_s, m.start_jitter_s
            )?;
            if !m.route.is_empty() {
                writeln!(f, "route = {}", m.route.join(", "))?;
            }
        }
        for fl in &self.flows {
            write!(
                f,
                "\n[flow]\ncn = {}\nmn = {}\nrate_bps = {}\nstart_s = {}\n",
                fl.cn, fl.mn, fl.rate_bps, fl.start_s
            )?;
            if let Some(stop) = fl.stop_s {
                writeln!(f, "stop_s = {stop}")?;
            }
            if let Some(size) = fl.packet_size {
                writeln!(f, "packet_size = {size}")?;
            }
        }
        for l in &self.legs {
            write!(
                f,
                "\n[leg]\nmn = {}\nfrom = {}\nto = {}\nat_s = {}\n",
                l.mn, l.from, l.to, l.at_s
            )?;
            if let Some(speed) = l.speed {
                writeln!(f, "speed = {speed}")?;
            }
        }
        Ok(())
    }
}
