use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hmip_lab_core::addressing::CnId;
use hmip_lab_core::{
    handle_registration, select_map, AdmissionMode, AdmissionThresholds, BindingCacheEntry,
    BindingUpdate, MapAdvert, MapId, MapState, MobileNode, NodeAddress, SelectionParams,
};

fn full_map(residents: u32) -> MapState {
    let mut map = MapState::new(
        MapId(0),
        AdmissionThresholds::new(residents, residents).unwrap(),
    );
    for i in 0..residents {
        map.upsert(BindingCacheEntry {
            mn_home_address: NodeAddress(i),
            rcoa: NodeAddress(10_000 + i),
            lcoa: NodeAddress(20_000 + i),
            con_cn: 1 + i % 4,
            registered_at: f64::from(i),
        });
    }
    map
}

fn registration(c: &mut Criterion) {
    let mut group = c.benchmark_group("handle_registration");
    for residents in [8u32, 64, 512] {
        let map = full_map(residents);
        let bu = BindingUpdate {
            mn_home_address: NodeAddress(99_999),
            rcoa: NodeAddress(99_998),
            lcoa: NodeAddress(99_997),
            flag_a: true,
            con_cn: 2,
            timestamp: 1e3,
        };
        group.bench_with_input(
            BenchmarkId::new("replacement", residents),
            &map,
            |b, map| {
                b.iter_batched(
                    || map.clone(),
                    |mut m| {
                        handle_registration(
                            &mut m,
                            black_box(&bu),
                            AdmissionMode::Threshold { replacement: true },
                        )
                    },
                    criterion::BatchSize::SmallInput,
                )
            },
        );
    }
    group.finish();
}

fn selection(c: &mut Criterion) {
    let params = SelectionParams::new(1.0, 1.5, 20.0).unwrap();
    let mut mn = MobileNode::new(NodeAddress(1), NodeAddress(2), 12.0);
    for cn in 0..4 {
        mn.open_session(CnId(cn), 0.0, 5.0);
    }
    mn.update_map_table((0..16).map(|m| MapAdvert {
        map_id: MapId(m),
        tot_cn: 4 + u32::from(15 - m),
        capacity_h_thr: 20,
        distance_hops: 1,
    }));
    let excluded: BTreeSet<MapId> = (0..8).map(MapId).collect();
    c.bench_function("select_map/16_maps", |b| {
        b.iter(|| select_map(black_box(&mn), &params, black_box(&excluded)))
    });
}

criterion_group!(benches, registration, selection);
criterion_main!(benches);
