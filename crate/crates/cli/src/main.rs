//! `hmip-lab`: run scenarios and parameter sweeps, write CSV results.
//!
//! Exit codes: 0 success, 2 scenario or argument error, 3 runtime failure.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use hmip_lab_core::sweep::{CSV_HEADER, HANDOFF_CSV_HEADER};
use hmip_lab_core::{
    run_sweep, CsvRow, RunOptions, Scenario, SweepConfig, SweepError, SweepParam, SweepRun,
};

const SCENARIO_DIR_VAR: &str = "HMIP_LAB_SCENARIO_DIR";

const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Ac,
    Baseline,
    Both,
}

#[derive(Debug, Parser)]
#[command(
    name = "hmip-lab",
    version,
    about = "HMIPv6 admission control simulator"
)]
struct Args {
    /// Scenario file, or the name of one in $HMIP_LAB_SCENARIO_DIR.
    #[arg(long)]
    scenario: String,

    #[arg(long, value_enum, default_value = "both")]
    policy: PolicyArg,

    /// Comma-separated seeds; `a..b` expands to an inclusive range.
    /// Defaults to the scenario's seed.
    #[arg(long)]
    seeds: Option<String>,

    /// `rate=<Mb/s,...>` or `speed=<m/s,...>`.
    #[arg(long)]
    sweep: Option<String>,

    /// Results CSV. The summary goes to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Per-handoff detail CSV.
    #[arg(long)]
    handoffs: Option<PathBuf>,

    /// Ready-state timer, seconds.
    #[arg(long)]
    ready_timer: Option<f64>,

    /// Weight of the MAP selection measure.
    #[arg(long)]
    alpha: Option<f64>,

    /// Selection threshold on the measure.
    #[arg(long)]
    t_map: Option<f64>,

    /// Speed that normalizes to 1 in the measure, m/s.
    #[arg(long)]
    s_max: Option<f64>,

    /// Disable replacement under the AC policy.
    #[arg(long)]
    no_replacement: bool,

    /// Disable MAP reselection after a rejection under the AC policy.
    #[arg(long)]
    no_reselection: bool,
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => EXIT_INVALID,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) => m,
        }
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || format!("bad seed `{part}`");
        match part.split_once("..") {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(seeds)
}

fn parse_sweep(text: &str) -> Result<(SweepParam, Vec<f64>), String> {
    let (name, values) = text
        .split_once('=')
        .ok_or_else(|| format!("sweep `{text}` is not of the form name=v1,v2,..."))?;
    let (param, scale) = match name.trim() {
        "rate" => (SweepParam::Rate, 1e6),
        "speed" => (SweepParam::Speed, 1.0),
        other => {
            return Err(format!(
                "unknown sweep parameter `{other}` (expected rate or speed)"
            ))
        }
    };
    let values = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse::<f64>()
                .map(|x| x * scale)
                .map_err(|_| format!("bad {name} value `{v}`"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((param, values))
}

fn resolve_scenario(arg: &str) -> Result<PathBuf, String> {
    let direct = PathBuf::from(arg);
    if direct.exists() {
        return Ok(direct);
    }
    if let Some(dir) = std::env::var_os(SCENARIO_DIR_VAR) {
        let dir = PathBuf::from(dir);
        for candidate in [dir.join(arg), dir.join(format!("{arg}.scn"))] {
            if candidate.exists() {
                return Ok(candidate);
            }
        }
    }
    Err(format!("scenario `{arg}` not found"))
}

fn load(args: &Args) -> Result<Scenario, Failure> {
    let path = resolve_scenario(&args.scenario).map_err(Failure::Invalid)?;
    let mut scenario = Scenario::load(&path).map_err(|e| Failure::Invalid(e.to_string()))?;
    let g = &mut scenario.globals;
    if let Some(v) = args.ready_timer {
        g.ready_timer_s = v;
    }
    if let Some(v) = args.alpha {
        g.alpha = v;
    }
    if let Some(v) = args.t_map {
        g.t_map = v;
    }
    if let Some(v) = args.s_max {
        g.s_max = v;
    }
    scenario
        .validate()
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    Ok(scenario)
}

fn config(args: &Args, scenario: &Scenario) -> Result<SweepConfig, Failure> {
    let seeds = match &args.seeds {
        Some(text) => parse_seeds(text).map_err(Failure::Invalid)?,
        None => vec![scenario.globals.seed],
    };
    let sweep = args
        .sweep
        .as_deref()
        .map(parse_sweep)
        .transpose()
        .map_err(Failure::Invalid)?;
    let tune = |mut o: RunOptions| {
        o.replacement = !args.no_replacement;
        o.reselection = !args.no_reselection;
        o
    };
    let variants = match args.policy {
        PolicyArg::Ac => vec![tune(RunOptions::ac(0))],
        PolicyArg::Baseline => vec![RunOptions::baseline(0)],
        PolicyArg::Both => vec![tune(RunOptions::ac(0)), RunOptions::baseline(0)],
    };
    let cfg = SweepConfig {
        variants,
        seeds,
        sweep,
    };
    cfg.validate()
        .map_err(|e| Failure::Invalid(e.to_string()))?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_rows(path: &Path, rows: &[CsvRow], marker: Option<&str>) -> Result<(), Failure> {
    let io_err = |e: io::Error| Failure::Runtime(format!("{}: {e}", path.display()));
    let mut w = create(path)?;
    writeln!(w, "{CSV_HEADER}").map_err(io_err)?;
    for row in rows {
        writeln!(w, "{row}").map_err(io_err)?;
    }
    if let Some(m) = marker {
        writeln!(w, "{}", CsvRow::partial_marker(m)).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn write_handoffs(path: &Path, runs: &[SweepRun]) -> Result<(), Failure> {
    let io_err = |e: io::Error| Failure::Runtime(format!("{}: {e}", path.display()));
    let mut w = create(path)?;
    writeln!(w, "{HANDOFF_CSV_HEADER}").map_err(io_err)?;
    for line in runs.iter().flat_map(SweepRun::handoff_lines) {
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn summary(runs: &[SweepRun]) -> String {
    let mut groups: BTreeMap<(u64, &str), Vec<&CsvRow>> = BTreeMap::new();
    for r in runs {
        let key = r.row.sweep_value.unwrap_or(0.0).to_bits();
        groups
            .entry((key, r.row.policy.as_str()))
            .or_default()
            .push(&r.row);
    }
    let mut ordered: Vec<_> = groups.into_iter().collect();
    ordered.sort_by(|a, b| {
        f64::from_bits(a.0 .0)
            .total_cmp(&f64::from_bits(b.0 .0))
            .then(a.0 .1.cmp(b.0 .1))
    });
    let mut out = format!(
        "{:>10} {:>9} {:>10} {:>5} {:>11} {:>9} {:>9} {:>9} {:>9}\n",
        "rate_bps",
        "speed_mps",
        "policy",
        "runs",
        "throughput",
        "delay_s",
        "loss",
        "blocking",
        "dropping"
    );
    for ((_, policy), rows) in &ordered {
        let first = rows[0];
        out.push_str(&format!(
            "{:>10} {:>9} {:>10} {:>5} {:>11} {:>9} {:>9} {:>9} {:>9}\n",
            first.rate_bps,
            first.speed_mps,
            policy,
            rows.len(),
            show(mean(rows.iter().map(|r| Some(r.throughput_pkts as f64)))),
            show(mean(rows.iter().map(|r| r.handoff_delay_mean_s))),
            show(mean(rows.iter().map(|r| r.packet_loss.value()))),
            show(mean(rows.iter().map(|r| r.blocking_prob.value()))),
            show(mean(rows.iter().map(|r| r.dropping_prob.value()))),
        ));
    }
    out
}

fn execute(args: &Args) -> Result<(), Failure> {
    let scenario = load(args)?;
    let cfg = config(args, &scenario)?;
    match run_sweep(&scenario, &cfg) {
        Ok(runs) => {
            if let Some(path) = &args.out {
                let rows: Vec<CsvRow> = runs.iter().map(|r| r.row.clone()).collect();
                write_rows(path, &rows, None)?;
            }
            if let Some(path) = &args.handoffs {
                write_handoffs(path, &runs)?;
            }
            print!("{}", summary(&runs));
            Ok(())
        }
        Err(SweepError::Run {
            policy,
            seed,
            completed,
            source,
        }) => {
            let message = format!("run {policy} seed {seed} failed: {source}");
            if let Some(path) = &args.out {
                write_rows(path, &completed, Some(&message))?;
            }
            Err(Failure::Runtime(message))
        }
        Err(e) => Err(Failure::Invalid(e.to_string())),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hmip-lab: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_lists_and_ranges() {
        assert_eq!(parse_seeds("1,2,5").unwrap(), vec![1, 2, 5]);
        assert_eq!(parse_seeds("1..3, 9").unwrap(), vec![1, 2, 3, 9]);
        assert_eq!(parse_seeds("").unwrap(), Vec::<u64>::new());
        assert!(parse_seeds("3..1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn rate_sweep_is_in_megabits() {
        let (p, v) = parse_sweep("rate=0.1,0.5").unwrap();
        assert_eq!(p, SweepParam::Rate);
        assert_eq!(v, vec![100_000.0, 500_000.0]);
        let (p, v) = parse_sweep("speed=5,10").unwrap();
        assert_eq!(p, SweepParam::Speed);
        assert_eq!(v, vec![5.0, 10.0]);
        assert!(parse_sweep("jitter=1").is_err());
        assert!(parse_sweep("rate").is_err());
    }
}
