//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hmip_lab_core::metrics::{probabilities, throughput};
use hmip_lab_core::scenario::{ArSpec, FlowSpec, Globals, MapSpec, MnSpec};
use hmip_lab_core::{
    admit, handle_registration, run, run_sweep, AckStatus, AdmissionDecision, AdmissionMode,
    AdmissionThresholds, BindingCacheEntry, BindingUpdate, HandoffKind, MapId, MapState, MnClass,
    NodeAddress, RunOptions, Scenario, Simulation, SweepConfig, SweepParam, SweepRun,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn scenario(name: &str) -> Scenario {
    let dir = std::env::var_os("HMIP_LAB_SCENARIO_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios"));
    let path = dir.join(name);
    Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Brute-force model of threshold admission plus replacement.

#[derive(Clone, Copy, Debug, PartialEq)]
struct Resident {
    home: u32,
    con_cn: u32,
    registered_at: f64,
}

#[derive(Debug, PartialEq)]
struct Expected {
    accepted: bool,
    victim: Option<u32>,
    cache: Vec<(u32, u32)>,
}

fn oracle(
    residents: &[Resident],
    n_thr: u32,
    h_thr: u32,
    flag_a: bool,
    incoming: Resident,
    replacement: bool,
) -> Expected {
    let mut cache: Vec<(u32, u32)> = residents.iter().map(|r| (r.home, r.con_cn)).collect();
    let finish = |mut cache: Vec<(u32, u32)>, accepted, victim| {
        cache.sort();
        Expected {
            accepted,
            victim,
            cache,
        }
    };
    if let Some(slot) = cache.iter_mut().find(|(h, _)| *h == incoming.home) {
        slot.1 = incoming.con_cn;
        return finish(cache, true, None);
    }
    let load: u32 = residents.iter().map(|r| r.con_cn).sum();
    let limit = if flag_a { h_thr } else { n_thr };
    if load <= limit {
        cache.push((incoming.home, incoming.con_cn));
        return finish(cache, true, None);
    }
    if !replacement {
        return finish(cache, false, None);
    }
    // Largest CN count first, then most recent, then highest address.
    let mut candidates: Vec<&Resident> = residents
        .iter()
        .filter(|r| r.con_cn >= incoming.con_cn)
        .collect();
    candidates.sort_by(|a, b| {
        b.con_cn
            .cmp(&a.con_cn)
            .then(b.registered_at.partial_cmp(&a.registered_at).unwrap())
            .then(b.home.cmp(&a.home))
    });
    match candidates.first() {
        None => finish(cache, false, None),
        Some(v) => {
            cache.retain(|(h, _)| *h != v.home);
            cache.push((incoming.home, incoming.con_cn));
            finish(cache, true, Some(v.home))
        }
    }
}

fn map_of(residents: &[Resident], n_thr: u32, h_thr: u32) -> MapState {
    let mut map = MapState::new(MapId(0), AdmissionThresholds::new(n_thr, h_thr).unwrap());
    for r in residents {
        map.upsert(BindingCacheEntry {
            mn_home_address: NodeAddress(r.home),
            rcoa: NodeAddress(1000 + r.home),
            lcoa: NodeAddress(2000 + r.home),
            con_cn: r.con_cn,
            registered_at: r.registered_at,
        });
    }
    map
}

fn update(incoming: Resident, flag_a: bool) -> BindingUpdate {
    BindingUpdate {
        mn_home_address: NodeAddress(incoming.home),
        rcoa: NodeAddress(1000 + incoming.home),
        lcoa: NodeAddress(2000 + incoming.home),
        flag_a,
        con_cn: incoming.con_cn,
        timestamp: incoming.registered_at,
    }
}

fn observed(map: &mut MapState, bu: &BindingUpdate, replacement: bool) -> Expected {
    let out = handle_registration(map, bu, AdmissionMode::Threshold { replacement });
    let mut cache: Vec<(u32, u32)> = map
        .entries()
        .map(|e| (e.mn_home_address.0, e.con_cn))
        .collect();
    cache.sort();
    let victim = match out.decision {
        AdmissionDecision::ReplaceThenAdmit { victim } => Some(victim.0),
        _ => None,
    };
    Expected {
        accepted: out.ack.status == AckStatus::Accepted,
        victim,
        cache,
    }
}

fn con_sequences(max_len: usize) -> Vec<Vec<u32>> {
    let mut all = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for c in 0..=3 {
                let mut s: Vec<u32> = seq.clone();
                s.push(c);
                next.push(s);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    all
}

fn oracle_equivalence() -> Outcome {
    let mut cases = 0u64;
    for cons in con_sequences(4) {
        // Pairs share a registration time so the address tie-break is used.
        let residents: Vec<Resident> = cons
            .iter()
            .enumerate()
            .map(|(i, &c)| Resident {
                home: 10 + i as u32,
                con_cn: c,
                registered_at: (i / 2) as f64,
            })
            .collect();
        for n_thr in 0..=6 {
            for h_thr in n_thr..=8 {
                for flag_a in [false, true] {
                    let cons_in: Vec<u32> = if flag_a { (0..=3).collect() } else { vec![0] };
                    for con_in in cons_in {
                        let mut homes = vec![99];
                        if let Some(r) = residents.first() {
                            homes.push(r.home);
                        }
                        for home in homes {
                            let incoming = Resident {
                                home,
                                con_cn: con_in,
                                registered_at: 50.0,
                            };
                            for replacement in [false, true] {
                                cases += 1;
                                let want =
                                    oracle(&residents, n_thr, h_thr, flag_a, incoming, replacement);
                                let mut map = map_of(&residents, n_thr, h_thr);
                                let got =
                                    observed(&mut map, &update(incoming, flag_a), replacement);
                                if got != want {
                                    return Err(format!(
                                        "cache {cons:?} n_thr={n_thr} h_thr={h_thr} flag_a={flag_a} \
                                         con_in={con_in} home={home} repl={replacement}: \
                                         got {got:?}, want {want:?}"
                                    ));
                                }
                                if map.tot_cn() != map.recompute_tot_cn() {
                                    return Err(format!("tot_cn drift on cache {cons:?}"));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{cases} cases match"))
}

fn threshold_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xad17);
    for case in 0..1000 {
        let n_thr = rng.random_range(0..=10);
        let h_thr = rng.random_range(n_thr..=16);
        let size = rng.random_range(0..=8);
        let residents: Vec<Resident> = (0..size)
            .map(|i| Resident {
                home: 10 + i,
                con_cn: rng.random_range(0..=6),
                registered_at: rng.random_range(0..20) as f64,
            })
            .collect();
        let map = map_of(&residents, n_thr, h_thr);
        let tot = map.tot_cn();

        let handoff = admit(&map, MnClass::Handoff);
        let new = admit(&map, MnClass::New);
        if handoff == AdmissionDecision::Reject && new != AdmissionDecision::Reject {
            return Err(format!(
                "case {case}: new admitted where handoff is rejected"
            ));
        }
        if tot > h_thr && (handoff != AdmissionDecision::Reject || new != AdmissionDecision::Reject)
        {
            return Err(format!(
                "case {case}: admitted with tot_cn {tot} > h_thr {h_thr}"
            ));
        }

        let flag_a = rng.random_bool(0.5);
        let incoming = Resident {
            home: 99,
            con_cn: if flag_a { rng.random_range(0..=6) } else { 0 },
            registered_at: 30.0,
        };
        let mut after = map.clone();
        let out = handle_registration(
            &mut after,
            &update(incoming, flag_a),
            AdmissionMode::Threshold { replacement: true },
        );
        if let Some(notice) = out.eviction {
            if notice.evicted.con_cn < incoming.con_cn {
                return Err(format!(
                    "case {case}: victim has fewer CNs than the incoming node"
                ));
            }
            if after.tot_cn() > tot {
                return Err(format!(
                    "case {case}: replacement raised tot_cn {tot} -> {}",
                    after.tot_cn()
                ));
            }
        }
    }
    Ok("1000 cases, zero violations".into())
}

// ---------------------------------------------------------------------------
// Scenario runs.

fn fig4_regression() -> Outcome {
    let sc = scenario("fig4.scn");
    let mut logs = Vec::new();
    for _ in 0..2 {
        let mut opts = RunOptions::ac(sc.globals.seed);
        opts.record_log = true;
        let mut sim = Simulation::new(&sc, opts).map_err(|e| e.to_string())?;
        sim.run_to_end().map_err(|e| e.to_string())?;
        let kinds: Vec<HandoffKind> = sim
            .handoffs()
            .iter()
            .filter(|h| h.mn == "MN19")
            .map(|h| h.kind)
            .collect();
        let want = [
            HandoffKind::Intra,
            HandoffKind::Inter,
            HandoffKind::Intra,
            HandoffKind::Inter,
        ];
        if kinds != want {
            return Err(format!("MN19 handoffs {kinds:?}"));
        }
        logs.push(
            sim.log()
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>(),
        );
    }
    if logs[0] != logs[1] {
        return Err("event logs differ between identical runs".into());
    }
    Ok(format!(
        "intra, inter, intra, inter; {} log lines identical",
        logs[0].len()
    ))
}

struct Point {
    value: f64,
    throughput: f64,
    delay: Option<f64>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per sweep value means of one policy label.
fn points(runs: &[SweepRun], label: &str) -> Vec<Point> {
    let values: Vec<f64> =
        runs.iter()
            .filter_map(|r| r.row.sweep_value)
            .fold(Vec::new(), |mut acc, v| {
                if !acc.contains(&v) {
                    acc.push(v);
                }
                acc
            });
    values
        .into_iter()
        .map(|value| {
            let rows: Vec<_> = runs
                .iter()
                .filter(|r| r.row.policy == label && r.row.sweep_value == Some(value))
                .map(|r| &r.row)
                .collect();
            Point {
                value,
                throughput: mean(rows.iter().map(|r| r.throughput_pkts as f64)).unwrap_or(0.0),
                delay: mean(rows.iter().filter_map(|r| r.handoff_delay_mean_s)),
            }
        })
        .collect()
}

fn sweep(
    name: &str,
    param: SweepParam,
    values: Vec<f64>,
    seeds: u64,
) -> Result<Vec<SweepRun>, String> {
    let cfg = SweepConfig {
        variants: vec![RunOptions::ac(0), RunOptions::baseline(0)],
        seeds: (1..=seeds).collect(),
        sweep: Some((param, values)),
    };
    run_sweep(&scenario(name), &cfg).map_err(|e| e.to_string())
}

fn rate_sweep() -> Outcome {
    let start = Instant::now();
    let runs = sweep(
        "rate_sweep.scn",
        SweepParam::Rate,
        vec![1e5, 2e5, 3e5, 4e5, 5e5],
        5,
    )?;
    let elapsed = start.elapsed();
    let (ac, base) = (points(&runs, "ac"), points(&runs, "baseline"));
    for (a, b) in ac.iter().zip(&base) {
        if a.throughput < b.throughput {
            return Err(format!(
                "rate {}: ac throughput {} < baseline {}",
                a.value, a.throughput, b.throughput
            ));
        }
        match (a.delay, b.delay) {
            (Some(da), Some(db)) if da <= db => {}
            (da, db) => {
                return Err(format!(
                    "rate {}: ac delay {da:?} vs baseline {db:?}",
                    a.value
                ));
            }
        }
    }
    for (label, pts) in [("ac", &ac), ("baseline", &base)] {
        if pts.windows(2).any(|w| w[1].throughput < w[0].throughput) {
            return Err(format!("{label} throughput decreases with rate"));
        }
    }
    if elapsed > Duration::from_secs(60) {
        return Err(format!("sweep took {elapsed:?}"));
    }
    Ok(format!(
        "at 0.5 Mb/s ac {:.0} pkts / {:.4} s vs baseline {:.0} pkts / {:.4} s",
        ac[4].throughput,
        ac[4].delay.unwrap_or(f64::NAN),
        base[4].throughput,
        base[4].delay.unwrap_or(f64::NAN),
    ))
}

fn speed_sweep() -> Outcome {
    let runs = sweep(
        "speed_sweep.scn",
        SweepParam::Speed,
        vec![5.0, 10.0, 15.0, 20.0],
        5,
    )?;
    let (ac, base) = (points(&runs, "ac"), points(&runs, "baseline"));
    for (label, pts) in [("ac", &ac), ("baseline", &base)] {
        if let Some(w) = pts.windows(2).find(|w| w[1].throughput > w[0].throughput) {
            return Err(format!(
                "{label} throughput rises from {} at {} m/s to {} at {} m/s",
                w[0].throughput, w[0].value, w[1].throughput, w[1].value
            ));
        }
    }
    if let Some((a, b)) = ac
        .iter()
        .zip(&base)
        .find(|(a, b)| a.throughput < b.throughput)
    {
        return Err(format!(
            "speed {}: ac throughput {} < baseline {}",
            a.value, a.throughput, b.throughput
        ));
    }
    Ok(format!(
        "ac {:.0} -> {:.0} pkts, baseline {:.0} -> {:.0} pkts over 5..20 m/s",
        ac[0].throughput, ac[3].throughput, base[0].throughput, base[3].throughput
    ))
}

fn replacement_efficacy() -> Outcome {
    let sc = scenario("overload.scn");
    let variant = |replacement, reselection| {
        let mut o = RunOptions::ac(0);
        o.replacement = replacement;
        o.reselection = reselection;
        o
    };
    let cfg = SweepConfig {
        variants: vec![
            variant(true, true),
            variant(false, true),
            variant(false, false),
        ],
        seeds: (1..=10).collect(),
        sweep: None,
    };
    let runs = run_sweep(&sc, &cfg).map_err(|e| e.to_string())?;
    let stat = |label: &str| {
        let rows: Vec<_> = runs.iter().filter(|r| r.row.policy == label).collect();
        let blocking = mean(rows.iter().filter_map(|r| r.row.blocking_prob.value()));
        let dropping = mean(rows.iter().filter_map(|r| r.row.dropping_prob.value()));
        (blocking.unwrap_or(0.0), dropping.unwrap_or(0.0))
    };
    let (repl, norepl, naive) = (stat("ac"), stat("ac-norepl"), stat("ac-naive"));
    let summary = format!(
        "dropping {:.3} <= {:.3} <= {:.3}, blocking {:.3} <= {:.3}",
        repl.1, norepl.1, naive.1, repl.0, norepl.0
    );
    if repl.1 <= norepl.1 && norepl.1 <= naive.1 && repl.0 <= norepl.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------------------
// Randomized scenarios.

fn random_scenario(rng: &mut ChaCha8Rng) -> Scenario {
    let globals = Globals {
        sim_time_s: rng.random_range(8..=20) as f64,
        ready_timer_s: rng.random_range(1..=6) as f64,
        advert_period_s: [0.5, 1.0, 2.0][rng.random_range(0..3)],
        seed: rng.random_range(0..1000),
        link_bandwidth_bps: [2e6, 1e7, 1e8][rng.random_range(0..3)],
        link_latency_s: [0.002, 0.01][rng.random_range(0..2)],
        wireless_bandwidth_bps: [2e6, 1.1e7][rng.random_range(0..2)],
        wireless_latency_s: [0.002, 0.005][rng.random_range(0..2)],
        ..Globals::default()
    };
    let n_maps = rng.random_range(1..=3);
    let maps: Vec<MapSpec> = (0..n_maps)
        .map(|i| {
            let n_thr = rng.random_range(0..=5);
            MapSpec {
                id: format!("MAP{}", i + 1),
                n_thr,
                h_thr: rng.random_range(n_thr..=n_thr + 4),
            }
        })
        .collect();
    let n_ars = rng.random_range(2..=5);
    let ars: Vec<ArSpec> = (0..n_ars)
        .map(|i| {
            let parent = rng.random_range(0..n_maps);
            let advertise = if rng.random_bool(0.3) {
                let mut set = BTreeSet::from([parent]);
                set.insert(rng.random_range(0..n_maps));
                set.into_iter().map(|m| format!("MAP{}", m + 1)).collect()
            } else {
                Vec::new()
            };
            ArSpec {
                id: format!("AR{}", i + 1),
                map: format!("MAP{}", parent + 1),
                x: 100.0 * i as f64,
                y: rng.random_range(0..3) as f64 * 10.0,
                range: 75.0,
                advertise,
            }
        })
        .collect();
    let n_mns = rng.random_range(1..=6);
    let mut mns = Vec::new();
    let mut flows = Vec::new();
    for i in 0..n_mns {
        let ar = rng.random_range(0..n_ars);
        let route = if rng.random_bool(0.5) {
            let mut other = rng.random_range(0..n_ars - 1);
            if other >= ar {
                other += 1;
            }
            vec![format!("AR{}", other + 1)]
        } else {
            Vec::new()
        };
        let speed = if route.is_empty() {
            0.0
        } else {
            rng.random_range(5..=20) as f64
        };
        let id = format!("N{}", i + 1);
        mns.push(MnSpec {
            id: id.clone(),
            ar: format!("AR{}", ar + 1),
            speed,
            start_s: rng.random_range(0..3) as f64,
            start_jitter_s: rng.random_range(0..2) as f64,
            route,
        });
        let cns: BTreeSet<u32> = (0..rng.random_range(0..=3))
            .map(|_| rng.random_range(1..=4))
            .collect();
        for cn in cns {
            let start_s = rng.random_range(0..4) as f64;
            flows.push(FlowSpec {
                cn: format!("CN{cn}"),
                mn: id.clone(),
                rate_bps: [5e4, 1e5, 2e5][rng.random_range(0..3)],
                start_s,
                stop_s: rng
                    .random_bool(0.3)
                    .then(|| start_s + rng.random_range(2..8) as f64),
                packet_size: rng.random_bool(0.2).then_some(256),
            });
        }
    }
    Scenario {
        globals,
        maps,
        ars,
        links: Vec::new(),
        mns,
        flows,
        legs: Vec::new(),
    }
}

fn randomized_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut steps = 0u64;
    for case in 0..100 {
        let sc = random_scenario(&mut rng);
        sc.validate()
            .map_err(|e| format!("case {case}: generated scenario invalid: {e}"))?;
        let back = Scenario::parse(&sc.to_string())
            .map_err(|e| format!("case {case}: round trip parse failed: {e}"))?;
        if back != sc {
            return Err(format!("case {case}: round trip changed the scenario"));
        }
        let opts = match case % 4 {
            0 => RunOptions::baseline(case),
            1 => RunOptions::ac(case),
            2 => RunOptions {
                replacement: false,
                ..RunOptions::ac(case)
            },
            _ => RunOptions {
                replacement: false,
                reselection: false,
                ..RunOptions::ac(case)
            },
        };
        let mut sim = Simulation::new(&sc, opts).map_err(|e| format!("case {case}: {e}"))?;
        while sim.step().map_err(|e| format!("case {case}: {e}"))? {
            steps += 1;
            sim.check_invariants()
                .map_err(|e| format!("case {case} ({}): {e}", opts.label()))?;
        }
        let report = sim.finish().map_err(|e| format!("case {case}: {e}"))?;
        if !report.conservation_holds() {
            return Err(format!(
                "case {case}: sent {} != delivered {} + lost {} + in flight {}",
                report.sent(),
                report.delivered(),
                report.lost(),
                report.in_flight
            ));
        }
    }
    Ok(format!("100 scenarios, {steps} events checked"))
}

fn baseline_sanity() -> Outcome {
    let mut runs = 0;
    for name in [
        "fig4.scn",
        "rate_sweep.scn",
        "speed_sweep.scn",
        "overload.scn",
    ] {
        let sc = scenario(name);
        for seed in 1..=3 {
            let report = run(&sc, RunOptions::baseline(seed)).map_err(|e| e.to_string())?;
            runs += 1;
            let (blocking, dropping) = probabilities(&report);
            if report.insufficient_resource_acks != 0
                || blocking.numerator != 0
                || dropping.numerator != 0
            {
                return Err(format!(
                    "{name} seed {seed}: {} rejections, blocking {blocking}, dropping {dropping}",
                    report.insufficient_resource_acks
                ));
            }
            if throughput(&report, 0.0..report.sim_time).packets == 0 {
                return Err(format!("{name} seed {seed}: no traffic delivered"));
            }
        }
    }
    Ok(format!("{runs} runs, no rejections"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("admission matches brute-force oracle", oracle_equivalence),
        ("threshold and priority properties", threshold_properties),
        ("fig4 handoff sequence and determinism", fig4_regression),
        ("rate sweep trends", rate_sweep),
        ("speed sweep trends", speed_sweep),
        ("replacement efficacy under overload", replacement_efficacy),
        (
            "randomized conservation and consistency",
            randomized_consistency,
        ),
        ("baseline never rejects", baseline_sanity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} [{took:.1?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail} [{took:.1?}]", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
