//! Per-token latency, data movement and energy of the hybrid system and of a
//! storage-offload baseline.
//!
//! Weight GeMVs run one matrix at a time. Inside a matrix the flash tiles and
//! the NPU page stream share the channels and overlap; a matrix ends when the
//! engine drains and the NPU has finished its share of the arithmetic. KV
//! cache work and special functions follow per layer on the NPU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Nanos, SystemConfig};
use crate::engine::{schedule, EngineError, Request, ScheduleOptions, Strategy, Timeline, DEFAULT_SLICE_BYTES};
use crate::par;
use crate::tiler::{plan_matrix, ChannelTraffic, MatrixPlan, ShapePolicy, SplitMode, TilerError, TilingPlan};
use crate::topology::{build_device, DeviceTree, PageAllocator, TopologyError};
use crate::workload::{build_decode_graph, ModelSpec, OpClass, WorkloadError};

#[derive(Debug, Error)]
pub enum HostError {
    #[error(transparent)]
    Tiler(#[from] TilerError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("model has no weights")]
    EmptyModel,
    #[error("baseline transfer multiplier must be at least 1, got {0}")]
    Multiplier(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpuModel {
    pub ops_per_us: f64,
    /// Systolic array shape, for reference only.
    pub systolic: (u32, u32),
}

impl NpuModel {
    pub fn of(config: &SystemConfig) -> Self {
        Self {
            ops_per_us: config.host.npu_ops_per_us,
            systolic: (16, 16),
        }
    }

    pub fn compute_ns(&self, ops: u64) -> f64 {
        ops as f64 / self.ops_per_us * 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Every tile and page of every distinct matrix goes through the engine.
    Simulate,
    /// Two short engine windows per matrix, extrapolated linearly.
    Analytic,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "simulate" | "sim" => Ok(Mode::Simulate),
            "analytic" => Ok(Mode::Analytic),
            _ => Err(format!("unknown mode `{s}` (expected simulate or analytic)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlphaMode {
    /// Whole tiles up to the analytic flash byte fraction.
    Formula,
    /// Tile count balancing the estimated flash and NPU stream times.
    Balanced,
    /// Best simulated tile count near the balanced estimate.
    Autotune,
}

impl std::str::FromStr for AlphaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "formula" => Ok(AlphaMode::Formula),
            "balanced" => Ok(AlphaMode::Balanced),
            "autotune" => Ok(AlphaMode::Autotune),
            _ => Err(format!(
                "unknown alpha mode `{s}` (expected formula, balanced or autotune)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub strategy: Strategy,
    pub mode: Mode,
    pub alpha: AlphaMode,
    pub shape: ShapePolicy,
    pub slice_bytes: u64,
    pub seq_len: u64,
}

pub const DEFAULT_SEQ_LEN: u64 = 512;

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::Sliced,
            mode: Mode::Simulate,
            alpha: AlphaMode::Balanced,
            shape: ShapePolicy::Adaptive,
            slice_bytes: DEFAULT_SLICE_BYTES,
            seq_len: DEFAULT_SEQ_LEN,
        }
    }
}

impl RunOptions {
    fn split_mode(&self) -> SplitMode {
        match (self.strategy, self.alpha) {
            (Strategy::ComputeOnly, _) => SplitMode::FlashOnly,
            (_, AlphaMode::Formula) => SplitMode::Formula,
            _ => SplitMode::Balanced,
        }
    }
}

/// Engine result for one distinct matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub h: u64,
    pub w: u64,
    pub shape: String,
    pub cores_per_channel: u64,
    pub flash_tiles: u64,
    pub slots: u64,
    pub flash_bytes: u64,
    pub npu_bytes: u64,
    pub makespan_ns: f64,
    pub time_ns: f64,
    pub npu_compute_ns: f64,
    pub flash_bound_ns: f64,
    pub npu_bound_ns: f64,
    pub channel_busy_ns: f64,
    pub rc_bytes: f64,
    pub read_bytes: f64,
}

/// Engine requests of one matrix: per tile one read-compute request per
/// channel, then the NPU pages issued in proportion to the tiles so far.
pub fn matrix_requests(plan: &TilingPlan, device: &DeviceTree) -> Result<Vec<Request>, HostError> {
    let cfg = &device.config;
    let traffic = ChannelTraffic::of(plan.shape, plan.grid, cfg);
    let mut alloc = PageAllocator::new(device);
    let mut reqs = Vec::new();
    let mut id = 0u32;
    let mut order = 0u64;
    let k = plan.flash_tiles.len();
    let total_reads = plan.npu_pages.len();
    let mut issued = 0usize;
    let per = plan.grid.cores_per_channel as usize;
    let mut issue_reads = |upto: usize,
                           reqs: &mut Vec<Request>,
                           id: &mut u32,
                           order: &mut u64,
                           alloc: &mut PageAllocator|
     -> Result<(), HostError> {
        while issued < upto {
            let addr = alloc.npu_page()?;
            reqs.push(Request::read(*id, addr, plan.npu_pages[issued], *order));
            *id += 1;
            *order += 1;
            issued += 1;
        }
        Ok(())
    };
    for (t, tile) in plan.flash_tiles.iter().enumerate() {
        for group in tile.cores.chunks(per) {
            let targets = group
                .iter()
                .map(|&c| alloc.atomic_tile(c))
                .collect::<Result<Vec<_>, _>>()?;
            reqs.push(Request::read_compute(
                id,
                targets,
                traffic.input_bytes,
                traffic.result_bytes_per_core * group.len() as u64,
                order,
            ));
            id += 1;
            order += 1;
        }
        let upto = ((t + 1) * total_reads) / k;
        issue_reads(upto, &mut reqs, &mut id, &mut order, &mut alloc)?;
    }
    issue_reads(total_reads, &mut reqs, &mut id, &mut order, &mut alloc)?;
    Ok(reqs)
}

fn bounds(plan: &TilingPlan, cfg: &SystemConfig) -> (f64, f64) {
    let cores = plan.grid.cores() as f64;
    let page = f64::from(cfg.flash.page_size);
    let per_core_bw = page / cfg.timing.t_read.max(cfg.compute_ns() as f64 / 1000.0);
    let flash = if plan.flash_tiles.is_empty() {
        0.0
    } else {
        plan.flash_tiles.len() as f64 * cores * page / (cores * per_core_bw) * 1000.0
    };
    let npu = plan.npu_bytes as f64 / (f64::from(cfg.flash.channel_num) * cfg.bw_channel()) * 1000.0;
    (flash, npu)
}

struct SimOutcome {
    makespan: f64,
    busy: f64,
    rc: f64,
    read: f64,
}

fn run_plan(plan: &TilingPlan, device: &DeviceTree, opts: &RunOptions) -> Result<SimOutcome, HostError> {
    let reqs = matrix_requests(plan, device)?;
    let so = ScheduleOptions {
        slice_bytes: opts.slice_bytes,
        record_events: false,
    };
    let tl = schedule(&reqs, device, opts.strategy, &so)?;
    Ok(SimOutcome {
        makespan: tl.makespan as f64,
        busy: tl.channel_busy.iter().sum::<Nanos>() as f64,
        rc: tl.channel_rc_bytes.iter().sum::<u64>() as f64,
        read: tl.channel_read_bytes.iter().sum::<u64>() as f64,
    })
}

/// A prefix of `plan` with `tiles` flash tiles and the matching share of NPU pages.
fn window(plan: &TilingPlan, tiles: usize, reads: usize) -> TilingPlan {
    let mut w = plan.clone();
    w.flash_tiles.truncate(tiles);
    w.npu_pages.truncate(reads);
    w
}

/// Tiles in the shorter calibration window of analytic mode.
const WINDOW_TILES: usize = 16;
/// Pages per channel in the shorter window of an NPU-only matrix.
const WINDOW_PAGES: usize = 32;

fn simulate_plan(plan: &TilingPlan, device: &DeviceTree, opts: &RunOptions) -> Result<SimOutcome, HostError> {
    let k = plan.flash_tiles.len();
    let r = plan.npu_pages.len();
    let channels = device.config.flash.channel_num as usize;
    let small = if k > 0 {
        k <= 3 * WINDOW_TILES
    } else {
        r <= 6 * WINDOW_PAGES * channels
    };
    if opts.mode == Mode::Simulate || small {
        return run_plan(plan, device, opts);
    }
    // Two windows give a per-unit slope and a fill/drain intercept.
    let (units, n1, n2) = if k > 0 {
        (k, WINDOW_TILES, 2 * WINDOW_TILES)
    } else {
        (r, WINDOW_PAGES * channels, 2 * WINDOW_PAGES * channels)
    };
    let reads_for = |n: usize| (n * r).checked_div(k).unwrap_or(n);
    let tiles_for = |n: usize| if k > 0 { n } else { 0 };
    let a = run_plan(&window(plan, tiles_for(n1), reads_for(n1)), device, opts)?;
    let b = run_plan(&window(plan, tiles_for(n2), reads_for(n2)), device, opts)?;
    let scale = |x1: f64, x2: f64| x2 + (x2 - x1) * (units - n2) as f64 / (n2 - n1) as f64;
    Ok(SimOutcome {
        makespan: scale(a.makespan, b.makespan),
        busy: scale(a.busy, b.busy),
        rc: scale(a.rc, b.rc),
        read: scale(a.read, b.read),
    })
}

fn matrix_result(
    h: u64,
    w: u64,
    plan: &MatrixPlan,
    device: &DeviceTree,
    opts: &RunOptions,
) -> Result<MatrixResult, HostError> {
    let cfg = &device.config;
    let p = &plan.plan;
    let sim = simulate_plan(p, device, opts)?;
    let npu = NpuModel::of(cfg);
    let npu_elems = p.npu_bytes * 8 / u64::from(cfg.quant.weight_bits);
    let npu_compute_ns = npu.compute_ns(2 * npu_elems);
    let (flash_bound_ns, npu_bound_ns) = bounds(p, cfg);
    Ok(MatrixResult {
        h,
        w,
        shape: p.shape.to_string(),
        cores_per_channel: p.grid.cores_per_channel,
        flash_tiles: p.flash_tiles.len() as u64,
        slots: p.slots,
        flash_bytes: p.flash_bytes,
        npu_bytes: p.npu_bytes,
        makespan_ns: sim.makespan,
        time_ns: sim.makespan.max(npu_compute_ns),
        npu_compute_ns,
        flash_bound_ns,
        npu_bound_ns,
        channel_busy_ns: sim.busy,
        rc_bytes: sim.rc,
        read_bytes: sim.read,
    })
}

fn tiles_plan(h: u64, w: u64, k: u64, base: &MatrixPlan, cfg: &SystemConfig) -> Result<MatrixPlan, HostError> {
    let plan = crate::tiler::partition_matrix(
        h,
        w,
        &crate::tiler::PartitionInputs {
            shape: base.plan.shape,
            grid: base.plan.grid,
            rule: crate::tiler::SplitRule::Tiles(k),
        },
        cfg,
    )?;
    Ok(MatrixPlan {
        plan,
        estimate_ns: base.estimate_ns,
    })
}

/// Plans and simulates one distinct matrix shape.
pub fn simulate_matrix(h: u64, w: u64, device: &DeviceTree, opts: &RunOptions) -> Result<MatrixResult, HostError> {
    let cfg = &device.config;
    let base = plan_matrix(h, w, opts.shape, opts.split_mode(), cfg)?;
    if opts.alpha != AlphaMode::Autotune || opts.strategy == Strategy::ComputeOnly {
        return matrix_result(h, w, &base, device, opts);
    }
    let k0 = base.plan.flash_tiles.len() as i64;
    let slots = base.plan.slots as i64;
    let step = (slots / 50).max(1);
    let mut best: Option<MatrixResult> = None;
    for d in -3..=3 {
        let k = k0 + d * step;
        if k < 0 || k > slots {
            continue;
        }
        let p = tiles_plan(h, w, k as u64, &base, cfg)?;
        let r = matrix_result(h, w, &p, device, opts)?;
        if best.as_ref().is_none_or(|b| r.time_ns < b.time_ns) {
            best = Some(r);
        }
    }
    Ok(best.expect("k0 itself is always a candidate"))
}

/// Full event timeline of one matrix under `opts`, without extrapolation.
pub fn trace_matrix(h: u64, w: u64, config: &SystemConfig, opts: &RunOptions) -> Result<Timeline, HostError> {
    let device = build_device(config)?;
    let plan = plan_matrix(h, w, opts.shape, opts.split_mode(), config)?;
    let reqs = matrix_requests(&plan.plan, &device)?;
    let so = ScheduleOptions {
        slice_bytes: opts.slice_bytes,
        record_events: true,
    };
    Ok(schedule(&reqs, &device, opts.strategy, &so)?)
}

/// Plans of every weight matrix in execution order.
pub fn plan_model(config: &SystemConfig, model: &ModelSpec, opts: &RunOptions) -> Result<Vec<MatrixPlan>, HostError> {
    model
        .matrices()
        .iter()
        .map(|m| Ok(plan_matrix(m.h, m.w, opts.shape, opts.split_mode(), config)?))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BytesMoved {
    /// Read-compute inputs and results crossing the flash channels.
    pub flash_channel_rc: f64,
    /// Weight pages streamed over the flash channels to the NPU.
    pub flash_channel_weights: f64,
    /// Everything crossing the die-to-die link.
    pub d2d: f64,
    pub dram: f64,
    pub baseline_interconnect: f64,
}

impl BytesMoved {
    /// Bytes moved between components, each transfer counted once.
    pub fn total(&self) -> f64 {
        self.flash_channel_rc + self.flash_channel_weights + self.dram + self.baseline_interconnect
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub flash_channel_pj: f64,
    pub d2d_pj: f64,
    pub dram_pj: f64,
    pub baseline_interconnect_pj: f64,
    pub compute_pj: f64,
    pub total_pj: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub system: String,
    pub model: String,
    pub seq_len: u64,
    pub strategy: String,
    pub latency_us: f64,
    pub tokens_per_s: f64,
    pub gemv_us: f64,
    pub flash_pipeline_us: f64,
    pub npu_stream_us: f64,
    pub npu_compute_us: f64,
    pub kv_us: f64,
    pub sfu_us: f64,
    pub channel_utilization: f64,
    pub flash_byte_fraction: f64,
    pub weight_bytes: u64,
    pub ops: u64,
    pub bytes: BytesMoved,
    pub energy: EnergyReport,
    pub matrices: Vec<MatrixResult>,
}

impl TokenReport {
    fn finish(&mut self) {
        self.tokens_per_s = if self.latency_us > 0.0 {
            1e6 / self.latency_us
        } else {
            0.0
        };
    }
}

/// Energy per path from a report's byte and op counts.
pub fn energy_report(report: &TokenReport, k: &crate::config::EnergyCoefficients) -> EnergyReport {
    let b = &report.bytes;
    let flash_channel_pj = (b.flash_channel_rc + b.flash_channel_weights) * k.flash_channel;
    let d2d_pj = b.d2d * k.d2d;
    let dram_pj = b.dram * k.dram;
    let baseline_interconnect_pj = b.baseline_interconnect * k.baseline_interconnect;
    let compute_pj = report.ops as f64 * k.compute;
    EnergyReport {
        flash_channel_pj,
        d2d_pj,
        dram_pj,
        baseline_interconnect_pj,
        compute_pj,
        total_pj: flash_channel_pj + d2d_pj + dram_pj + baseline_interconnect_pj + compute_pj,
    }
}

struct LayerExtras {
    kv_ns: f64,
    sfu_ns: f64,
    kv_bytes: u64,
    ops: u64,
}

fn layer_extras(config: &SystemConfig, model: &ModelSpec, seq_len: u64) -> Result<LayerExtras, HostError> {
    let graph = build_decode_graph(model, seq_len, config.quant)?;
    let npu = NpuModel::of(config);
    let mut kv_ns = 0.0;
    let layers: Vec<Option<u32>> = {
        let mut v: Vec<Option<u32>> = graph.ops.iter().map(|o| o.layer).collect();
        v.dedup();
        v
    };
    for l in &layers {
        let ops: u64 = graph
            .ops
            .iter()
            .filter(|o| o.layer == *l && o.class == OpClass::KvMatrix)
            .map(|o| o.ops)
            .sum();
        let bytes: u64 = graph
            .ops
            .iter()
            .filter(|o| o.layer == *l && o.class == OpClass::KvLoad)
            .map(|o| o.dram_bytes)
            .sum();
        kv_ns += (bytes as f64 / config.host.dram_bw * 1000.0).max(npu.compute_ns(ops));
    }
    let sfu_ops = graph.total_ops(OpClass::Sfu);
    Ok(LayerExtras {
        kv_ns,
        sfu_ns: npu.compute_ns(sfu_ops),
        kv_bytes: graph.kv_bytes(),
        ops: graph.ops.iter().map(|o| o.ops).sum(),
    })
}

/// Latency of one decode token.
pub fn token_latency(config: &SystemConfig, model: &ModelSpec, opts: &RunOptions) -> Result<TokenReport, HostError> {
    config.validate()?;
    model.validate()?;
    let device = build_device(config)?;
    let mats = model.matrices();
    let mut unique: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    for m in &mats {
        let n = unique.len();
        unique.entry((m.h, m.w)).or_insert(n);
    }
    let mut keys: Vec<(u64, u64)> = vec![(0, 0); unique.len()];
    for (&k, &i) in &unique {
        keys[i] = k;
    }
    let results: Vec<MatrixResult> = par::map(&keys, |&(h, w)| simulate_matrix(h, w, &device, opts))
        .into_iter()
        .collect::<Result<_, _>>()?;

    let mut r = TokenReport {
        system: format!(
            "{}ch x {}chip",
            config.flash.channel_num, config.flash.chips_per_channel
        ),
        model: model.name.clone(),
        seq_len: opts.seq_len,
        strategy: opts.strategy.to_string(),
        ..Default::default()
    };
    let mut busy = 0.0;
    let mut span = 0.0;
    let mut flash_bytes = 0u64;
    for m in &mats {
        let res = &results[unique[&(m.h, m.w)]];
        r.gemv_us += res.time_ns / 1000.0;
        r.flash_pipeline_us += res.flash_bound_ns / 1000.0;
        r.npu_stream_us += res.npu_bound_ns / 1000.0;
        r.npu_compute_us += res.npu_compute_ns / 1000.0;
        r.bytes.flash_channel_rc += res.rc_bytes;
        r.bytes.flash_channel_weights += res.read_bytes;
        busy += res.channel_busy_ns;
        span += res.makespan_ns;
        flash_bytes += res.flash_bytes;
        r.weight_bytes += res.flash_bytes + res.npu_bytes;
    }
    if r.weight_bytes == 0 {
        return Err(HostError::EmptyModel);
    }
    r.channel_utilization = if span > 0.0 {
        busy / (span * f64::from(config.flash.channel_num))
    } else {
        0.0
    };
    r.flash_byte_fraction = flash_bytes as f64 / r.weight_bytes as f64;
    let extras = layer_extras(config, model, opts.seq_len)?;
    r.kv_us = extras.kv_ns / 1000.0;
    r.sfu_us = extras.sfu_ns / 1000.0;
    r.ops = extras.ops;
    r.bytes.dram = extras.kv_bytes as f64;
    r.bytes.d2d = r.bytes.flash_channel_rc + r.bytes.flash_channel_weights;
    r.latency_us = r.gemv_us + r.kv_us + r.sfu_us;
    r.matrices = results;
    r.energy = energy_report(&r, &config.energy);
    r.finish();
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    /// Storage interface bandwidth, bytes per µs.
    pub interface_bw: f64,
    pub dram_staging: bool,
    /// Total bytes moved per weight byte across all staging hops.
    pub transfer_multiplier: f64,
}

impl Default for BaselineModel {
    fn default() -> Self {
        Self {
            interface_bw: 4000.0,
            dram_staging: true,
            transfer_multiplier: 3.0,
        }
    }
}

/// Offload baseline: every weight byte crosses the storage interface once
/// per token (the bottleneck hop), and is staged through DRAM.
pub fn baseline_token_latency(
    config: &SystemConfig,
    model: &ModelSpec,
    baseline: &BaselineModel,
    seq_len: u64,
) -> Result<TokenReport, HostError> {
    if baseline.transfer_multiplier < 1.0 {
        return Err(HostError::Multiplier(baseline.transfer_multiplier));
    }
    model.validate()?;
    let w = model.weight_bytes_total(config.quant);
    if w == 0 {
        return Err(HostError::EmptyModel);
    }
    let extras = layer_extras(config, model, seq_len)?;
    let wf = w as f64;
    let stream_us = wf / baseline.interface_bw;
    let mut r = TokenReport {
        system: "offload baseline".into(),
        model: model.name.clone(),
        seq_len,
        strategy: "-".into(),
        latency_us: stream_us,
        gemv_us: stream_us,
        npu_stream_us: stream_us,
        weight_bytes: w,
        ops: extras.ops,
        ..Default::default()
    };
    let staged = if baseline.dram_staging {
        (baseline.transfer_multiplier - 1.0) * wf
    } else {
        0.0
    };
    r.bytes.baseline_interconnect = wf;
    r.bytes.dram = staged + extras.kv_bytes as f64;
    r.energy = energy_report(&r, &config.energy);
    r.finish();
    Ok(r)
}

/// Lower bound on latency from aggregate core bandwidth and channel bandwidth
/// alone, with the weights split at the analytic flash byte fraction.
pub fn analytic_ceiling_us(config: &SystemConfig, model: &ModelSpec) -> Result<f64, HostError> {
    let shape = crate::tiler::optimal_tile_shape(config);
    let rates = crate::tiler::analytic_rates(shape, config)?;
    let (_, frac) = crate::tiler::compute_alpha(&rates);
    let w = model.weight_bytes_total(config.quant) as f64;
    let flash = frac * w / config.aggregate_core_bandwidth();
    let stream = (1.0 - frac) * w / (f64::from(config.flash.channel_num) * config.bw_channel() * (1.0 - rates.rate_rc));
    Ok(flash.max(stream))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    Channels,
    Chips,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "channels" | "channel" => Ok(SweepAxis::Channels),
            "chips" | "chip" => Ok(SweepAxis::Chips),
            _ => Err(format!("unknown sweep axis `{s}` (expected channels or chips)")),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Channels => "channels",
            SweepAxis::Chips => "chips",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: u32,
    pub tokens_per_s: f64,
    pub latency_us: f64,
    pub channel_utilization: f64,
    pub flash_byte_fraction: f64,
}

/// Powers of two from `lo` to `hi` inclusive.
pub fn doubling_range(lo: u32, hi: u32) -> Vec<u32> {
    std::iter::successors(Some(lo.max(1)), |&v| v.checked_mul(2))
        .take_while(|&v| v <= hi)
        .collect()
}

/// Runs one token per axis value, in parallel; points come back in input
/// order and a failing point does not stop the others.
pub fn sweep(
    config: &SystemConfig,
    model: &ModelSpec,
    opts: &RunOptions,
    axis: SweepAxis,
    values: &[u32],
) -> Vec<Result<SweepPoint, HostError>> {
    par::map(values, |&v| {
        let mut c = config.clone();
        match axis {
            SweepAxis::Channels => c.flash.channel_num = v,
            SweepAxis::Chips => c.flash.chips_per_channel = v,
        }
        let r = token_latency(&c, model, opts)?;
        Ok(SweepPoint {
            value: v,
            tokens_per_s: r.tokens_per_s,
            latency_us: r.latency_us,
            channel_utilization: r.channel_utilization,
            flash_byte_fraction: r.flash_byte_fraction,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, EnergyCoefficients, Preset};
    use crate::workload::model_preset;

    #[test]
    fn aggregate_core_bandwidth() {
        let s = preset(Preset::S);
        assert!((s.aggregate_core_bandwidth() - 32.0 * 16384.0 / 30.0).abs() < 1e-9);
    }

    #[test]
    fn baseline_70b() {
        let (m, _) = model_preset("llama2-70b").unwrap();
        let mut m = m;
        // 70 GB exactly.
        let c = preset(Preset::L);
        let r = baseline_token_latency(&c, &m, &BaselineModel::default(), 1).unwrap();
        assert!((r.tokens_per_s - 4000.0e6 / m.weight_bytes_total(c.quant) as f64).abs() < 1e-9);
        assert!(r.tokens_per_s > 0.05 && r.tokens_per_s < 0.065);
        m.layer_count = 0;
        assert!(baseline_token_latency(&c, &m, &BaselineModel::default(), 1).is_err());
    }

    #[test]
    fn energy_linearity() {
        let c = preset(Preset::S);
        let (m, _) = model_preset("opt-6.7b").unwrap();
        let r = baseline_token_latency(&c, &m, &BaselineModel::default(), 16).unwrap();
        let k = EnergyCoefficients::default();
        let e1 = energy_report(&r, &k);
        let e2 = energy_report(&r, &k.scaled(2.0));
        assert!((e2.total_pj - 2.0 * e1.total_pj).abs() < 1e-6 * e1.total_pj);
        assert_eq!(energy_report(&r, &k.scaled(0.0)).total_pj, 0.0);
    }

    #[test]
    fn doubling() {
        assert_eq!(doubling_range(1, 128), vec![1, 2, 4, 8, 16, 32, 64, 128]);
        assert_eq!(doubling_range(3, 20), vec![3, 6, 12]);
    }

    #[test]
    fn requests_cover_plan() {
        let c = preset(Preset::S);
        let d = build_device(&c).unwrap();
        let p = plan_matrix(4096, 4096, ShapePolicy::Adaptive, SplitMode::Balanced, &c).unwrap();
        let reqs = matrix_requests(&p.plan, &d).unwrap();
        let rc = reqs
            .iter()
            .filter(|r| r.kind == crate::engine::RequestKind::ReadCompute)
            .count();
        assert_eq!(rc, p.plan.flash_tiles.len() * 8);
        assert_eq!(reqs.len() - rc, p.plan.npu_pages.len());
    }
}
