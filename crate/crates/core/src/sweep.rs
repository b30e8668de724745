//! Parameter sweeps over flow rate or node speed, one run per
//! (sweep value, policy, seed), with CSV rows in a fixed order.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::metrics::{probabilities, throughput, MetricsReport, Ratio};
use crate::scenario::Scenario;
use crate::sim::{run, RunOptions, SimError};

pub const CSV_HEADER: &str = "policy,seed,rate_bps,speed_mps,throughput_pkts,handoff_delay_mean_s,packet_loss,blocking_prob,dropping_prob";

pub const HANDOFF_CSV_HEADER: &str =
    "policy,seed,sweep_value,mn,kind,from_ar,to_ar,start_s,end_s,latency_s,signaling_s,dropped";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Rate of every flow, bits per second.
    Rate,
    /// Speed of every moving node, meters per second.
    Speed,
}

impl SweepParam {
    fn apply(self, scenario: &mut Scenario, value: f64) {
        match self {
            SweepParam::Rate => scenario.set_flow_rate(value),
            SweepParam::Speed => scenario.set_mobile_speed(value),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepParam::Rate => f.write_str("rate"),
            SweepParam::Speed => f.write_str("speed"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Policy variants; the seed field of each is replaced per run.
    pub variants: Vec<RunOptions>,
    pub seeds: Vec<u64>,
    pub sweep: Option<(SweepParam, Vec<f64>)>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.seeds.is_empty() {
            return Err(SweepError::NoSeeds);
        }
        if self.variants.is_empty() {
            return Err(SweepError::NoPolicies);
        }
        if let Some((param, values)) = &self.sweep {
            if values.is_empty() {
                return Err(SweepError::NoValues(*param));
            }
            if let Some(&v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(SweepError::BadValue {
                    param: *param,
                    value: v,
                });
            }
        }
        Ok(())
    }

    fn points(&self) -> Vec<Option<f64>> {
        match &self.sweep {
            Some((_, values)) => values.iter().copied().map(Some).collect(),
            None => vec![None],
        }
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("at least one seed required")]
    NoSeeds,
    #[error("at least one policy required")]
    NoPolicies,
    #[error("{0} sweep needs at least one value")]
    NoValues(SweepParam),
    #[error("{param} sweep values must be positive, got {value}")]
    BadValue { param: SweepParam, value: f64 },
    #[error("run {policy} seed {seed} failed: {source}")]
    Run {
        policy: String,
        seed: u64,
        /// Rows of the runs that did finish, in output order.
        completed: Vec<CsvRow>,
        #[source]
        source: SimError,
    },
}

/// One line of the results CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub policy: String,
    pub seed: u64,
    pub sweep_value: Option<f64>,
    pub rate_bps: f64,
    pub speed_mps: f64,
    pub throughput_pkts: u64,
    pub handoff_delay_mean_s: Option<f64>,
    pub packet_loss: Ratio,
    pub blocking_prob: Ratio,
    pub dropping_prob: Ratio,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

impl CsvRow {
    pub fn from_report(
        opts: &RunOptions,
        scenario: &Scenario,
        sweep_value: Option<f64>,
        report: &MetricsReport,
    ) -> Self {
        let (blocking, dropping) = probabilities(report);
        Self {
            policy: opts.label().to_string(),
            seed: opts.seed,
            sweep_value,
            rate_bps: scenario.mean_flow_rate(),
            speed_mps: scenario.mean_mobile_speed(),
            throughput_pkts: throughput(report, 0.0..report.sim_time).packets,
            handoff_delay_mean_s: report.mean_handoff_latency(),
            packet_loss: report.packet_loss(),
            blocking_prob: blocking,
            dropping_prob: dropping,
        }
    }

    /// Marker appended after the rows of an aborted sweep.
    pub fn partial_marker(message: &str) -> String {
        format!("# partial output: {}", message.replace(['\n', '\r'], " "))
    }
}

impl fmt::Display for CsvRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            self.policy,
            self.seed,
            self.rate_bps,
            self.speed_mps,
            self.throughput_pkts,
            opt(self.handoff_delay_mean_s),
            self.packet_loss,
            self.blocking_prob,
            self.dropping_prob
        )
    }
}

/// A finished run: its CSV row and the full report.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub row: CsvRow,
    pub report: MetricsReport,
}

impl SweepRun {
    /// Per-handoff detail lines, without header.
    pub fn handoff_lines(&self) -> Vec<String> {
        let sweep = opt(self.row.sweep_value);
        self.report
            .handoffs
            .iter()
            .map(|h| {
                format!(
                    "{},{},{},{},{},{},{},{:.6},{},{},{},{}",
                    self.row.policy,
                    self.row.seed,
                    sweep,
                    h.mn,
                    h.kind,
                    h.from_ar,
                    h.to_ar,
                    h.start,
                    opt(h.end),
                    opt(h.latency),
                    opt(h.signaling_delay),
                    h.dropped
                )
            })
            .collect()
    }
}

fn order(a: &CsvRow, b: &CsvRow) -> std::cmp::Ordering {
    let v = |r: &CsvRow| r.sweep_value.unwrap_or(0.0);
    v(a).total_cmp(&v(b))
        .then_with(|| a.policy.cmp(&b.policy))
        .then(a.seed.cmp(&b.seed))
}

/// Runs every (sweep value, policy, seed) combination in parallel and
/// returns the runs sorted by sweep value, policy label and seed.
pub fn run_sweep(scenario: &Scenario, config: &SweepConfig) -> Result<Vec<SweepRun>, SweepError> {
    config.validate()?;
    let param = config.sweep.as_ref().map(|(p, _)| *p);
    let jobs: Vec<(Option<f64>, RunOptions)> = config
        .points()
        .into_iter()
        .flat_map(|point| {
            config.variants.iter().flat_map(move |variant| {
                config.seeds.iter().map(move |&seed| {
                    let mut opts = *variant;
                    opts.seed = seed;
                    (point, opts)
                })
            })
        })
        .collect();

    let results: Vec<_> = jobs
        .into_par_iter()
        .map(|(point, opts)| {
            let mut sc = scenario.clone();
            if let (Some(p), Some(v)) = (param, point) {
                p.apply(&mut sc, v);
            }
            let outcome = run(&sc, opts).map(|report| SweepRun {
                row: CsvRow::from_report(&opts, &sc, point, &report),
                report,
            });
            (point, opts, outcome)
        })
        .collect();

    let mut runs = Vec::with_capacity(results.len());
    let mut failure = None;
    for (_, opts, outcome) in results {
        match outcome {
            Ok(r) => runs.push(r),
            Err(e) if failure.is_none() => failure = Some((opts, e)),
            Err(_) => {}
        }
    }
    runs.sort_by(|a, b| order(&a.row, &b.row));
    match failure {
        None => Ok(runs),
        Some((opts, source)) => Err(SweepError::Run {
            policy: opts.label().to_string(),
            seed: opts.seed,
            completed: runs.into_iter().map(|r| r.row).collect(),
            source,
        }),
    }
}
