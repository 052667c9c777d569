use std::collections::BTreeMap;

use ifc_core::config::{preset, Preset, SystemConfig};
use ifc_core::engine::{
    channel_utilization, schedule, slice_read, Action, Request, Resource, ScheduleOptions, Strategy, Timeline,
};
use ifc_core::topology::{build_device, DeviceTree, FlashAddress};
use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

fn small_config() -> SystemConfig {
    let mut c = preset(Preset::S);
    c.flash.channel_num = 2;
    c.flash.chips_per_channel = 2;
    c
}

/// A random tile: channel, core mask within the channel, input and
/// per-core result bytes.
type TileSpec = (u32, u8, u64, u64);

fn tiles() -> impl proptest::strategy::Strategy<Value = Vec<TileSpec>> {
    prop::collection::vec((0u32..2, 1u8..16, 1u64..600, 1u64..300), 1..10)
}

fn reads() -> impl proptest::strategy::Strategy<Value = Vec<(u32, u32, u32)>> {
    prop::collection::vec((0u32..2, 0u32..2, 0u32..2), 0..6)
}

/// Builds requests: tiles on each core's first plane, reads anywhere
/// (`shared`) or only on second planes.
fn build(device: &DeviceTree, tiles: &[TileSpec], reads: &[(u32, u32, u32)], shared: bool) -> Vec<Request> {
    let f = &device.config.flash;
    let dies = f.dies_per_channel();
    let mut next_page: BTreeMap<(u32, u32, u32, u32), u32> = BTreeMap::new();
    let mut page = |ch: u32, chip: u32, die: u32, plane: u32| {
        let n = next_page.entry((ch, chip, die, plane)).or_insert(0);
        *n += 1;
        FlashAddress {
            channel: ch,
            chip,
            die,
            plane,
            block: 0,
            page: *n,
        }
    };
    let mut reqs = Vec::new();
    let mut id = 0;
    for &(ch, mask, input, res) in tiles {
        let targets: Vec<_> = (0..dies)
            .filter(|d| mask & (1 << d) != 0)
            .map(|d| page(ch, d / f.dies_per_chip, d % f.dies_per_chip, 0))
            .collect();
        if targets.is_empty() {
            continue;
        }
        let n = targets.len() as u64;
        reqs.push(Request::read_compute(id, targets, input, res * n, id as u64));
        id += 1;
    }
    for (i, &(ch, chip, plane)) in reads.iter().enumerate() {
        let plane = if shared { plane } else { 1 };
        let at = page(ch, chip, (i as u32) % f.dies_per_chip, plane);
        reqs.push(Request::read(id, at, u64::from(f.page_size), id as u64));
        id += 1;
    }
    // Interleave reads between tiles by issue order.
    let n = reqs.len() as u64;
    for (k, r) in reqs.iter_mut().enumerate() {
        r.order = (k as u64 * 7919) % n.max(1) * 1000 + k as u64;
    }
    reqs
}

fn run(device: &DeviceTree, reqs: &[Request], s: Strategy) -> Timeline {
    let opts = ScheduleOptions {
        record_events: true,
        ..Default::default()
    };
    schedule(reqs, device, s, &opts).unwrap()
}

fn overlapping(tl: &Timeline) -> Option<(Resource, u64, u64)> {
    let mut by: BTreeMap<Resource, Vec<(u64, u64)>> = BTreeMap::new();
    for e in &tl.events {
        if e.action == Action::RegisterMove {
            continue;
        }
        by.entry(e.resource).or_default().push((e.start, e.end));
    }
    for (r, mut v) in by {
        v.sort_unstable();
        for w in v.windows(2) {
            if w[1].0 < w[0].1 {
                return Some((r, w[0].1, w[1].0));
            }
        }
    }
    None
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn deterministic(t in tiles(), r in reads(), s in 0usize..3) {
        let d = build_device(&small_config()).unwrap();
        let reqs = build(&d, &t, &r, true);
        let st = Strategy::ALL[s];
        prop_assert_eq!(run(&d, &reqs, st), run(&d, &reqs, st));
    }

    #[test]
    fn resources_are_exclusive(t in tiles(), r in reads(), s in 0usize..3) {
        let d = build_device(&small_config()).unwrap();
        let reqs = build(&d, &t, &r, true);
        let tl = run(&d, &reqs, Strategy::ALL[s]);
        prop_assert_eq!(overlapping(&tl), None);
        for b in &tl.channel_busy {
            prop_assert!(*b <= tl.makespan);
        }
        prop_assert_eq!(tl.makespan, tl.events.iter().map(|e| e.end).max().unwrap_or(0));
    }

    #[test]
    fn bytes_are_conserved(t in tiles(), r in reads(), s in 0usize..3) {
        let d = build_device(&small_config()).unwrap();
        let reqs = build(&d, &t, &r, true);
        let st = Strategy::ALL[s];
        let tl = run(&d, &reqs, st);
        for ch in 0..2u32 {
            let on = reqs.iter().filter(|q| q.channel() == ch);
            let rc: u64 = on.clone().map(|q| q.input_bytes + q.result_bytes).sum();
            let rd: u64 = on.map(|q| q.payload_bytes).sum();
            prop_assert_eq!(tl.channel_rc_bytes[ch as usize], rc);
            let want = if st == Strategy::ComputeOnly { 0 } else { rd };
            prop_assert_eq!(tl.channel_read_bytes[ch as usize], want);
        }
    }

    #[test]
    fn slicing_never_loses(t in tiles(), r in reads()) {
        let d = build_device(&small_config()).unwrap();
        let reqs = build(&d, &t, &r, true);
        let b = run(&d, &reqs, Strategy::Unsliced).makespan;
        let c = run(&d, &reqs, Strategy::Sliced).makespan;
        prop_assert!(c <= b, "sliced {} > unsliced {}", c, b);
    }

    #[test]
    fn sliced_reads_fill_bubbles(t in tiles(), r in reads()) {
        let cfg = small_config();
        let d = build_device(&cfg).unwrap();
        let reqs = build(&d, &t, &r, false);
        let a = run(&d, &reqs, Strategy::ComputeOnly);
        let c = run(&d, &reqs, Strategy::Sliced);
        let read_bytes: u64 = reqs.iter().map(|q| q.payload_bytes).sum();
        let util = channel_utilization(&a).into_iter().fold(0.0, f64::max);
        let spare = cfg.bw_channel() * (1.0 - util) / 1000.0;
        // Reads on distinct idle planes: the extra time is bounded by what
        // the spare bandwidth needs to carry them, plus one array read when
        // the read-compute stream is shorter than the first read.
        let bound = read_bytes as f64 / spare + cfg.timing.t_read_ns() as f64;
        prop_assert!(
            (c.makespan as f64) - (a.makespan as f64) <= bound,
            "c {} a {} bound {}", c.makespan, a.makespan, bound
        );
    }
}

#[test]
fn pipelined_period_matches_slowest_stage() {
    for slow in [1.0, 1.5] {
        let mut cfg = preset(Preset::S);
        cfg.flash.channel_num = 1;
        cfg.flash.chips_per_channel = 1;
        cfg.flash.dies_per_chip = 1;
        let ops = cfg.page_ops() as f64 / cfg.timing.t_read / slow;
        cfg.host.core_ops_per_us = Some(ops);
        let d = build_device(&cfg).unwrap();
        let stream = |k: u32| {
            let reqs: Vec<_> = (0..k)
                .map(|i| {
                    let at = FlashAddress {
                        page: i,
                        ..Default::default()
                    };
                    Request::read_compute(i, vec![at], 128, 128, u64::from(i))
                })
                .collect();
            schedule(&reqs, &d, Strategy::Sliced, &ScheduleOptions::default())
                .unwrap()
                .makespan
        };
        let period = (stream(40) - stream(20)) as f64 / 20.0;
        let service = cfg.transfer_ns(256) as f64;
        let slowest = (cfg.timing.t_read_ns() as f64)
            .max(cfg.compute_ns() as f64)
            .max(service);
        assert!(
            period >= slowest && period <= slowest + service,
            "period {period} slowest {slowest}"
        );
    }
}

#[test]
fn slices_sum_to_page() {
    let r = Request::read(3, FlashAddress::default(), 16384, 0);
    let s = slice_read(&r, 512, 16384).unwrap();
    assert_eq!(s.len(), 32);
    assert_eq!(s.iter().map(|x| x.payload_bytes).sum::<u64>(), 16384);
    assert!(s.iter().all(|x| x.parent == Some(3)));
    assert_eq!(slice_read(&r, 16384, 16384).unwrap().len(), 1);
    assert!(slice_read(&r, 600, 16384).is_err());
    assert!(slice_read(&r, 0, 16384).is_err());
}

#[test]
fn empty_and_saturated() {
    let cfg = small_config();
    let d = build_device(&cfg).unwrap();
    let tl = schedule(&[], &d, Strategy::Sliced, &ScheduleOptions::default()).unwrap();
    assert_eq!(tl.makespan, 0);
    assert_eq!(channel_utilization(&tl), vec![0.0, 0.0]);
    // Reads from every plane of channel 0 keep the bus busy once started.
    let mut reqs = Vec::new();
    for i in 0..64u32 {
        let at = FlashAddress {
            chip: i % 2,
            die: (i / 2) % 2,
            plane: (i / 4) % 2,
            page: i / 8,
            ..Default::default()
        };
        reqs.push(Request::read(i, at, 16384, u64::from(i)));
    }
    let tl = schedule(&reqs, &d, Strategy::Unsliced, &ScheduleOptions::default()).unwrap();
    let busy = tl.channel_busy[0] as f64;
    let after_first = (tl.makespan - cfg.timing.t_read_ns()) as f64;
    assert!((busy / after_first - 1.0).abs() < 1e-9);
}
