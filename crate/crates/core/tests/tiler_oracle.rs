use std::collections::BTreeSet;

use ifc_core::config::{preset, Preset, SystemConfig};
use ifc_core::tiler::{
    analytic_rates, compute_alpha, core_buffer_bytes, optimal_shape_for, optimal_tile_shape, partition_matrix,
    plan_matrix, CoreGrid, PartitionInputs, ShapePolicy, SplitMode, SplitRule, TileShape, TransferScheme,
};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

/// Every integer shape with one page per core, by exhaustive search over heights.
fn brute_force(grid: CoreGrid, epp: u64) -> (u64, TileShape) {
    let total = grid.cores() * epp;
    let mut best: Option<(u64, u64, TileShape)> = None;
    for h in 1..=total {
        if !total.is_multiple_of(h) || h % grid.cores_per_channel != 0 {
            continue;
        }
        let w = total / h;
        if !w.is_multiple_of(grid.channels) {
            continue;
        }
        let trans = w + grid.channels * h;
        let key = (trans, w, TileShape::new(h, w));
        if best.is_none_or(|b| (key.0, key.1) < (b.0, b.1)) {
            best = Some(key);
        }
    }
    let (t, _, s) = best.expect("h = cores_per_channel always works");
    (t, s)
}

#[test]
fn presets_match_brute_force() {
    for p in Preset::ALL {
        let c = preset(p);
        let grid = CoreGrid::full(&c);
        let (trans, shape) = brute_force(grid, c.elements_per_page());
        assert_eq!(optimal_tile_shape(&c), shape, "{p}");
        assert_eq!(grid.trans_elements(shape, TransferScheme::Broadcast), trans);
    }
    assert_eq!(optimal_tile_shape(&preset(Preset::S)), TileShape::new(256, 2048));
}

#[test]
fn hand_evaluated_rates() {
    let c = preset(Preset::S);
    let r = analytic_rates(TileShape::new(256, 2048), &c).unwrap();
    // Per channel per tile: 256 B of input and 4 x 64 B of results at 1000 B/µs.
    let trans_time = (256.0 + 256.0) / 1000.0;
    let t_rc = 30.0 + trans_time / 2.0;
    let rate = (2048.0 / 8.0 + 256.0) / (30.0 * 1000.0);
    assert!((r.t_rc - t_rc).abs() < 1e-9);
    assert!((r.rate_rc - rate).abs() / rate < 1e-12);
    let (alpha, frac) = compute_alpha(&r);
    assert!((alpha - r.t_r / (r.t_r + r.t_rc)).abs() < 1e-12);
    assert!((frac - alpha * 4.0 / (alpha * 4.0 + 1.0 - alpha)).abs() < 1e-12);
}

#[test]
fn broadcast_beats_repeated_sends() {
    let c = preset(Preset::S);
    let grid = CoreGrid::full(&c);
    let s = optimal_tile_shape(&c);
    assert!(grid.trans_elements(s, TransferScheme::Broadcast) < grid.trans_elements(s, TransferScheme::NoBroadcast));
}

fn geometry(channels: u64, cores: u64, epp: u64) -> (CoreGrid, u64) {
    (
        CoreGrid {
            channels,
            cores_per_channel: cores,
        },
        epp,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn optimum_matches_enumeration(ch in 1u64..17, cores in 1u64..17, log_epp in 4u32..13) {
        let (grid, epp) = geometry(ch, cores, 1 << log_epp);
        let (trans, shape) = brute_force(grid, epp);
        let got = optimal_shape_for(grid, epp);
        prop_assert_eq!(got, shape);
        prop_assert_eq!(grid.trans_elements(got, TransferScheme::Broadcast), trans);
        prop_assert!(grid.fits(got, epp));
    }

    #[test]
    fn partition_conserves_bytes(h in 1u64..20_000, w in 1u64..20_000, f in 0.0f64..=1.0) {
        let c = preset(Preset::S);
        let shape = optimal_tile_shape(&c);
        let grid = CoreGrid::full(&c);
        let p = partition_matrix(h, w, &PartitionInputs { shape, grid, rule: SplitRule::Fraction(f) }, &c).unwrap();
        prop_assert_eq!(p.flash_bytes + p.npu_bytes, p.matrix_bytes);
        prop_assert_eq!(p.matrix_bytes, h * w);
        prop_assert_eq!(p.npu_pages.iter().sum::<u64>(), p.npu_bytes);
        prop_assert!(p.npu_pages.iter().all(|&b| b > 0 && b <= 16384));
        prop_assert_eq!(p.flash_tiles.len() as u64, (f * p.slots as f64 + 1e-9).floor() as u64);
        prop_assert_eq!(
            p.flash_tiles.iter().map(|t| t.rows * t.cols).sum::<u64>(),
            p.flash_bytes
        );
        prop_assert_eq!(p.padded_bytes, p.flash_tiles.len() as u64 * shape.elements() - p.flash_bytes);
        let slots: BTreeSet<_> = p.flash_tiles.iter().map(|t| (t.row, t.col)).collect();
        prop_assert_eq!(slots.len(), p.flash_tiles.len());
        // Complete slots are used before edge slots.
        let full = |t: &ifc_core::tiler::FlashTile| t.rows == shape.h_req && t.cols == shape.w_req;
        let first_edge = p.flash_tiles.iter().position(|t| !full(t)).unwrap_or(p.flash_tiles.len());
        prop_assert!(p.flash_tiles[first_edge..].iter().all(|t| !full(t)));
        for t in &p.flash_tiles {
            let cores: BTreeSet<_> = t.cores.iter().collect();
            prop_assert_eq!(cores.len() as u64, grid.cores());
        }
    }

    #[test]
    fn adaptive_plans_fit_the_hardware(h in 1u64..40_000, w in 1u64..40_000, p in 0usize..3) {
        let c = preset(Preset::ALL[p]);
        let plan = plan_matrix(h, w, ShapePolicy::Adaptive, SplitMode::Balanced, &c).unwrap();
        let pl = &plan.plan;
        prop_assert!(pl.grid.fits(pl.shape, c.elements_per_page()));
        prop_assert!(core_buffer_bytes(pl.shape, pl.grid, &c) <= c.host.input_output_buffer);
        prop_assert!(pl.grid.cores_per_channel <= CoreGrid::full(&c).cores_per_channel);
        prop_assert!(plan.estimate_ns > 0.0);
    }

    #[test]
    fn flash_only_leaves_nothing_for_the_npu(h in 1u64..20_000, w in 1u64..20_000) {
        let c = preset(Preset::S);
        let plan = plan_matrix(h, w, ShapePolicy::Adaptive, SplitMode::FlashOnly, &c).unwrap();
        prop_assert_eq!(plan.plan.npu_bytes, 0);
        prop_assert_eq!(plan.plan.flash_tiles.len() as u64, plan.plan.slots);
    }
}

#[test]
fn oversized_fixed_shape_is_rejected() {
    let mut c: SystemConfig = preset(Preset::S);
    c.host.input_output_buffer = 256;
    let r = plan_matrix(
        4096,
        4096,
        ShapePolicy::Fixed(TileShape::new(256, 2048)),
        SplitMode::Balanced,
        &c,
    );
    assert!(r.is_err());
}
