//! Hardware-aware tiling of weight GeMVs between the in-flash compute cores
//! and the NPU.
//!
//! A tile of `h_req x w_req` weights is one read-compute round: it is split
//! column-wise across channels and row-wise across the compute cores of each
//! channel so every core receives exactly one page (an *atomic tile*). The
//! input segment of a channel is broadcast once to all of its cores, so the
//! channel traffic per tile is `w_req + channel_num * h_req` elements.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Nanos, SystemConfig};

#[derive(Debug, Error, PartialEq)]
pub enum TilerError {
    #[error("tile {h}x{w} is not page-aligned for {channels} channels x {cores} cores")]
    InvalidShape { h: u64, w: u64, channels: u64, cores: u64 },
    #[error("read-compute traffic alone saturates the channel (rate_rc = {0:.4})")]
    Infeasible(f64),
    #[error("matrix {0}x{1} is empty")]
    EmptyMatrix(u64, u64),
    #[error("atomic tile needs {need} B of core buffer, only {have} B available")]
    Buffer { need: u64, have: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileShape {
    pub h_req: u64,
    pub w_req: u64,
}

impl TileShape {
    pub fn new(h_req: u64, w_req: u64) -> Self {
        Self { h_req, w_req }
    }

    pub fn elements(&self) -> u64 {
        self.h_req * self.w_req
    }
}

impl std::fmt::Display for TileShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.h_req, self.w_req)
    }
}

impl std::str::FromStr for TileShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
        let h = h.trim().parse().map_err(|e| format!("bad height: {e}"))?;
        let w = w.trim().parse().map_err(|e| format!("bad width: {e}"))?;
        Ok(TileShape::new(h, w))
    }
}

/// The set of compute cores a tile is spread over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoreGrid {
    pub channels: u64,
    pub cores_per_channel: u64,
}

impl CoreGrid {
    pub fn full(config: &SystemConfig) -> Self {
        Self {
            channels: u64::from(config.flash.channel_num),
            cores_per_channel: u64::from(config.flash.ccore_num()),
        }
    }

    pub fn cores(&self) -> u64 {
        self.channels * self.cores_per_channel
    }

    /// Whether `shape` gives every core exactly one page of `elements_per_page`.
    pub fn fits(&self, shape: TileShape, elements_per_page: u64) -> bool {
        shape.h_req > 0
            && shape.w_req > 0
            && shape.h_req.is_multiple_of(self.cores_per_channel)
            && shape.w_req.is_multiple_of(self.channels)
            && (shape.h_req / self.cores_per_channel) * (shape.w_req / self.channels) == elements_per_page
    }

    /// All page-aligned shapes, ordered by increasing height.
    pub fn feasible_shapes(&self, elements_per_page: u64) -> Vec<TileShape> {
        divisors(elements_per_page)
            .into_iter()
            .map(|rows| {
                TileShape::new(
                    rows * self.cores_per_channel,
                    (elements_per_page / rows) * self.channels,
                )
            })
            .collect()
    }

    /// Channel traffic per tile in elements, with or without the per-channel
    /// input broadcast.
    pub fn trans_elements(&self, shape: TileShape, scheme: TransferScheme) -> u64 {
        let inputs = match scheme {
            TransferScheme::Broadcast => shape.w_req,
            TransferScheme::NoBroadcast => self.cores_per_channel * shape.w_req,
        };
        inputs + self.channels * shape.h_req
    }
}

fn divisors(n: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferScheme {
    Broadcast,
    NoBroadcast,
}

/// Shape minimizing broadcast channel traffic; ties go to the narrower tile.
pub fn optimal_tile_shape(config: &SystemConfig) -> TileShape {
    optimal_shape_for(CoreGrid::full(config), config.elements_per_page())
}

pub fn optimal_shape_for(grid: CoreGrid, elements_per_page: u64) -> TileShape {
    grid.feasible_shapes(elements_per_page)
        .into_iter()
        .min_by_key(|s| (grid.trans_elements(*s, TransferScheme::Broadcast), s.w_req))
        .expect("h = cores_per_channel is always feasible")
}

pub fn validate_shape(shape: TileShape, config: &SystemConfig) -> Result<(), TilerError> {
    let grid = CoreGrid::full(config);
    if grid.fits(shape, config.elements_per_page()) {
        Ok(())
    } else {
        Err(TilerError::InvalidShape {
            h: shape.h_req,
            w: shape.w_req,
            channels: grid.channels,
            cores: grid.cores_per_channel,
        })
    }
}

/// Core buffer bytes one atomic tile needs: its input segment plus its result.
pub fn core_buffer_bytes(shape: TileShape, grid: CoreGrid, config: &SystemConfig) -> u64 {
    (shape.w_req / grid.channels + shape.h_req / grid.cores_per_channel) * config.quant.activation_bytes()
}

fn check_buffer(shape: TileShape, grid: CoreGrid, config: &SystemConfig) -> Result<(), TilerError> {
    let need = core_buffer_bytes(shape, grid, config);
    let have = config.host.input_output_buffer;
    if need <= have {
        Ok(())
    } else {
        Err(TilerError::Buffer { need, have })
    }
}

/// Channel bytes moved per tile: inputs at activation width, one result per
/// row per channel at activation width.
pub fn trans_volume(shape: TileShape, config: &SystemConfig, scheme: TransferScheme) -> u64 {
    let grid = CoreGrid::full(config);
    grid.trans_elements(shape, scheme) * config.quant.activation_bytes()
}

/// Per-channel bytes of one tile: broadcast input segment and result vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelTraffic {
    pub input_bytes: u64,
    /// Result bytes returned by a single core.
    pub result_bytes_per_core: u64,
    pub cores: u64,
}

impl ChannelTraffic {
    pub fn of(shape: TileShape, grid: CoreGrid, config: &SystemConfig) -> Self {
        let act = config.quant.activation_bytes();
        Self {
            input_bytes: shape.w_req / grid.channels * act,
            result_bytes_per_core: shape.h_req / grid.cores_per_channel * act,
            cores: grid.cores_per_channel,
        }
    }

    pub fn total(&self) -> u64 {
        self.input_bytes + self.result_bytes_per_core * self.cores
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRates {
    /// Read-compute request time, µs.
    pub t_rc: f64,
    /// Plain page read time on the leftover bandwidth, µs.
    pub t_r: f64,
    /// Channel utilization of read-compute traffic.
    pub rate_rc: f64,
    /// Broadcast traffic per tile, bytes.
    pub trans: u64,
    /// Traffic without broadcast, bytes.
    pub trans_alt: u64,
    pub cores_per_channel: u64,
}

pub fn analytic_rates(shape: TileShape, config: &SystemConfig) -> Result<AnalyticRates, TilerError> {
    validate_shape(shape, config)?;
    analytic_rates_for(shape, CoreGrid::full(config), config)
}

pub fn analytic_rates_for(
    shape: TileShape,
    grid: CoreGrid,
    config: &SystemConfig,
) -> Result<AnalyticRates, TilerError> {
    let bw = config.bw_channel();
    let t_read = config.timing.t_read;
    let act = config.quant.activation_bytes() as f64;
    let ch = grid.channels as f64;
    let w = shape.w_req as f64 * act;
    let h = shape.h_req as f64 * act;
    let t_rc = t_read + w / (ch * bw);
    let rate_rc = (h + w / ch) / (t_read * bw);
    if rate_rc >= 1.0 {
        return Err(TilerError::Infeasible(rate_rc));
    }
    let t_r = f64::from(config.flash.page_size) / ((1.0 - rate_rc) * bw);
    let a = config.quant.activation_bytes();
    Ok(AnalyticRates {
        t_rc,
        t_r,
        rate_rc,
        trans: grid.trans_elements(shape, TransferScheme::Broadcast) * a,
        trans_alt: grid.trans_elements(shape, TransferScheme::NoBroadcast) * a,
        cores_per_channel: grid.cores_per_channel,
    })
}

/// Returns `(alpha, flash_byte_fraction)`.
///
/// `alpha` balances read-compute and read request times. One read-compute
/// round moves `cores_per_channel` pages per channel into the cores while one
/// read round moves a single page per channel to the NPU, which gives the
/// byte-level split.
pub fn compute_alpha(rates: &AnalyticRates) -> (f64, f64) {
    let alpha = rates.t_r / (rates.t_r + rates.t_rc);
    let c = rates.cores_per_channel as f64;
    let frac = alpha * c / (alpha * c + (1.0 - alpha));
    (alpha, frac)
}

/// How many tile slots of a matrix go to flash.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SplitRule {
    /// `floor(fraction * slots)` whole tiles.
    Fraction(f64),
    /// An explicit tile count (clamped to the slot count).
    Tiles(u64),
    /// Every slot to flash.
    FlashOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionInputs {
    pub shape: TileShape,
    pub grid: CoreGrid,
    pub rule: SplitRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlashTile {
    pub index: u64,
    pub row: u64,
    pub col: u64,
    /// Real (unpadded) rows and columns covered.
    pub rows: u64,
    pub cols: u64,
    /// Global core id of each atomic tile, row-block major within a channel
    /// column: entry `c * cores_per_channel + r`.
    pub cores: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub h_weight: u64,
    pub w_weight: u64,
    pub shape: TileShape,
    pub grid: CoreGrid,
    pub alpha: f64,
    pub flash_byte_fraction: f64,
    pub slots: u64,
    pub flash_tiles: Vec<FlashTile>,
    /// Byte size of every NPU-streamed page (the last may be partial).
    pub npu_pages: Vec<u64>,
    pub matrix_bytes: u64,
    pub flash_bytes: u64,
    pub npu_bytes: u64,
    /// Zero padding carried by flash tiles.
    pub padded_bytes: u64,
}

impl TilingPlan {
    pub fn achieved_fraction(&self) -> f64 {
        if self.matrix_bytes == 0 {
            0.0
        } else {
            self.flash_bytes as f64 / self.matrix_bytes as f64
        }
    }

    /// Broadcast groups of one tile: per channel, the cores that latch its input.
    pub fn broadcast_groups(&self, tile: &FlashTile) -> Vec<Vec<u32>> {
        tile.cores
            .chunks(self.grid.cores_per_channel as usize)
            .map(<[u32]>::to_vec)
            .collect()
    }

    pub fn export_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "matrix = {}x{}", self.h_weight, self.w_weight);
        let _ = writeln!(s, "shape = {}", self.shape);
        let _ = writeln!(s, "grid = {}x{}", self.grid.channels, self.grid.cores_per_channel);
        let _ = writeln!(s, "alpha = {:.6}", self.alpha);
        let _ = writeln!(s, "flash_byte_fraction = {:.6}", self.flash_byte_fraction);
        let _ = writeln!(s, "achieved_fraction = {:.6}", self.achieved_fraction());
        let _ = writeln!(s, "slots = {}", self.slots);
        let _ = writeln!(s, "flash_tiles = {}", self.flash_tiles.len());
        let _ = writeln!(s, "npu_pages = {}", self.npu_pages.len());
        let _ = writeln!(s, "padded_bytes = {}", self.padded_bytes);
        for t in &self.flash_tiles {
            let groups: Vec<String> = self
                .broadcast_groups(t)
                .iter()
                .map(|g| g.iter().map(u32::to_string).collect::<Vec<_>>().join(","))
                .collect();
            let _ = writeln!(
                s,
                "tile {} row {} col {} real {}x{} groups [{}]",
                t.index,
                t.row,
                t.col,
                t.rows,
                t.cols,
                groups.join("] [")
            );
        }
        s
    }
}

/// Maps a local core slot of a channel onto a core id, spreading a partial
/// grid evenly over the channel's cores.
fn core_id(config: &SystemConfig, grid: CoreGrid, channel: u64, local: u64) -> u32 {
    let ccore = u64::from(config.flash.ccore_num());
    let stride = if ccore % grid.cores_per_channel == 0 {
        ccore / grid.cores_per_channel
    } else {
        1
    };
    (channel * ccore + local * stride) as u32
}

/// Splits an `h_weight x w_weight` matrix into tile slots and assigns whole
/// tiles to flash, row-major with complete slots before edge slots. Edge
/// slots are zero-padded when placed in flash.
pub fn partition_matrix(
    h_weight: u64,
    w_weight: u64,
    inputs: &PartitionInputs,
    config: &SystemConfig,
) -> Result<TilingPlan, TilerError> {
    if h_weight == 0 || w_weight == 0 {
        return Err(TilerError::EmptyMatrix(h_weight, w_weight));
    }
    let shape = inputs.shape;
    let grid = inputs.grid;
    let epp = config.elements_per_page();
    if !grid.fits(shape, epp) {
        return Err(TilerError::InvalidShape {
            h: shape.h_req,
            w: shape.w_req,
            channels: grid.channels,
            cores: grid.cores_per_channel,
        });
    }
    let (alpha, frac) = match analytic_rates_for(shape, grid, config) {
        Ok(r) => compute_alpha(&r),
        Err(_) => (0.0, 0.0),
    };
    let rows = h_weight.div_ceil(shape.h_req);
    let cols = w_weight.div_ceil(shape.w_req);
    let slots = rows * cols;
    let k = match inputs.rule {
        SplitRule::Fraction(f) => ((f.clamp(0.0, 1.0) * slots as f64 + 1e-9).floor()) as u64,
        SplitRule::Tiles(n) => n,
        SplitRule::FlashOnly => slots,
    }
    .min(slots);

    let mut order: Vec<(u64, u64)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    let is_full = |&(r, c): &(u64, u64)| (r + 1) * shape.h_req <= h_weight && (c + 1) * shape.w_req <= w_weight;
    order.sort_by_key(|rc| !is_full(rc));

    let q = config.quant;
    let matrix_bytes = q.weight_bytes(h_weight * w_weight);
    let tile_bytes = q.weight_bytes(shape.elements());
    let mut flash_tiles = Vec::with_capacity(k as usize);
    let mut flash_elems = 0;
    for (index, &(r, c)) in order.iter().take(k as usize).enumerate() {
        let real_rows = shape.h_req.min(h_weight - r * shape.h_req);
        let real_cols = shape.w_req.min(w_weight - c * shape.w_req);
        flash_elems += real_rows * real_cols;
        let mut cores = Vec::with_capacity(grid.cores() as usize);
        for ch in 0..grid.channels {
            for local in 0..grid.cores_per_channel {
                cores.push(core_id(config, grid, ch, local));
            }
        }
        flash_tiles.push(FlashTile {
            index: index as u64,
            row: r,
            col: c,
            rows: real_rows,
            cols: real_cols,
            cores,
        });
    }
    let flash_bytes = q.weight_bytes(flash_elems);
    let npu_bytes = matrix_bytes - flash_bytes;
    let page = u64::from(config.flash.page_size);
    let full = npu_bytes / page;
    let mut npu_pages = vec![page; full as usize];
    if !npu_bytes.is_multiple_of(page) {
        npu_pages.push(npu_bytes % page);
    }
    Ok(TilingPlan {
        h_weight,
        w_weight,
        shape,
        grid,
        alpha,
        flash_byte_fraction: frac,
        slots,
        padded_bytes: tile_bytes * k - flash_bytes,
        flash_tiles,
        npu_pages,
        matrix_bytes,
        flash_bytes,
        npu_bytes,
    })
}

/// How the matrix planner picks the tile shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShapePolicy {
    /// One shape for every matrix, spread over all cores (padding as needed).
    Fixed(TileShape),
    /// Per matrix, the shape and active core grid with the lowest estimated
    /// latency; the global optimum is used whenever it tiles the matrix exactly.
    Adaptive,
}

/// How the matrix planner picks the flash tile count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    /// `floor(flash_byte_fraction * slots)`.
    Formula,
    /// The tile count minimizing the estimated max(flash, NPU stream) time.
    Balanced,
    /// All tiles on flash, nothing streamed to the NPU.
    FlashOnly,
}

/// Steady-state estimates used for planning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamEstimate {
    /// Time between consecutive tiles on one channel, ns.
    pub tile_period_ns: f64,
    /// NPU page stream over all channels while tiles run, bytes/ns.
    pub npu_bytes_per_ns: f64,
    /// NPU page stream with no read-compute traffic, bytes/ns.
    pub npu_idle_bytes_per_ns: f64,
}

impl StreamEstimate {
    pub fn of(shape: TileShape, grid: CoreGrid, config: &SystemConfig) -> Self {
        let traffic = ChannelTraffic::of(shape, grid, config);
        let busy = traffic.total() as f64 / config.bw_channel() * 1000.0;
        let core = config.timing.t_read_ns().max(config.compute_ns()) as f64;
        // A core's input slot frees at compute end, so the next input and the
        // results serialize behind the computation.
        let period = core + busy;
        let bw_ns = config.bw_channel() / 1000.0;
        let channels = config.flash.channel_num as f64;
        let spare = (1.0 - busy / period).max(0.0);
        Self {
            tile_period_ns: period,
            npu_bytes_per_ns: spare * bw_ns * channels,
            npu_idle_bytes_per_ns: bw_ns * channels,
        }
    }

    /// Estimated matrix time for `k` flash tiles and `npu_bytes` streamed.
    pub fn time_ns(&self, k: u64, npu_bytes: u64, fill_ns: f64) -> f64 {
        let flash = if k == 0 {
            0.0
        } else {
            fill_ns + k as f64 * self.tile_period_ns
        };
        let rate = if k == 0 {
            self.npu_idle_bytes_per_ns
        } else {
            self.npu_bytes_per_ns
        };
        let npu = if npu_bytes == 0 {
            0.0
        } else if rate <= 0.0 {
            f64::INFINITY
        } else {
            fill_ns + npu_bytes as f64 / rate
        };
        flash.max(npu)
    }
}

/// NPU bytes left when `k` slots go to flash, complete slots first.
fn npu_bytes_for(h: u64, w: u64, shape: TileShape, k: u64, config: &SystemConfig) -> u64 {
    let q = config.quant;
    let total = q.weight_bytes(h * w);
    let full = (h / shape.h_req) * (w / shape.w_req);
    if k <= full {
        return total - q.weight_bytes(k * shape.elements());
    }
    let rows = h.div_ceil(shape.h_req);
    let cols = w.div_ceil(shape.w_req);
    let mut partial: Vec<u64> = (0..rows)
        .flat_map(|r| {
            (0..cols).map(move |c| shape.h_req.min(h - r * shape.h_req) * shape.w_req.min(w - c * shape.w_req))
        })
        .filter(|&e| e != shape.elements())
        .collect();
    // partition_matrix keeps row-major order among edge slots.
    partial.truncate((k - full) as usize);
    total - q.weight_bytes(full * shape.elements() + partial.iter().sum::<u64>())
}

/// Result of planning one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPlan {
    pub plan: TilingPlan,
    pub estimate_ns: f64,
}

fn choose_k(h: u64, w: u64, shape: TileShape, grid: CoreGrid, mode: SplitMode, config: &SystemConfig) -> (u64, f64) {
    let slots = h.div_ceil(shape.h_req) * w.div_ceil(shape.w_req);
    let est = StreamEstimate::of(shape, grid, config);
    let fill = config.timing.t_read_ns() as f64;
    let eval = |k: u64| est.time_ns(k, npu_bytes_for(h, w, shape, k, config), fill);
    match mode {
        SplitMode::FlashOnly => (slots, eval(slots)),
        SplitMode::Formula => {
            let frac = analytic_rates_for(shape, grid, config)
                .map(|r| compute_alpha(&r).1)
                .unwrap_or(0.0);
            let k = ((frac * slots as f64 + 1e-9).floor() as u64).min(slots);
            (k, eval(k))
        }
        SplitMode::Balanced => {
            let tile_bytes = config.quant.weight_bytes(shape.elements()) as f64;
            let npu_tile = tile_bytes / est.npu_bytes_per_ns.max(1e-12);
            let guess = slots as f64 * npu_tile / (npu_tile + est.tile_period_ns);
            let g = guess.round() as i64;
            let mut cands: Vec<u64> = (g - 2..=g + 2)
                .filter(|&k| k >= 0 && (k as u64) <= slots)
                .map(|k| k as u64)
                .collect();
            cands.push(0);
            cands.push(slots);
            cands.sort_unstable();
            cands.dedup();
            cands
                .into_iter()
                .map(|k| (k, eval(k)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty")
        }
    }
}

/// Plans one weight matrix: picks the tile shape (and, in adaptive mode, how
/// many cores per channel take part) and the flash tile count.
pub fn plan_matrix(
    h: u64,
    w: u64,
    policy: ShapePolicy,
    mode: SplitMode,
    config: &SystemConfig,
) -> Result<MatrixPlan, TilerError> {
    if h == 0 || w == 0 {
        return Err(TilerError::EmptyMatrix(h, w));
    }
    let full = CoreGrid::full(config);
    let epp = config.elements_per_page();
    let (shape, grid, k, estimate_ns) = match policy {
        ShapePolicy::Fixed(shape) => {
            validate_shape(shape, config)?;
            check_buffer(shape, full, config)?;
            let (k, t) = choose_k(h, w, shape, full, mode, config);
            (shape, full, k, t)
        }
        ShapePolicy::Adaptive => {
            let global = optimal_tile_shape(config);
            if h.is_multiple_of(global.h_req)
                && w.is_multiple_of(global.w_req)
                && check_buffer(global, full, config).is_ok()
            {
                let (k, t) = choose_k(h, w, global, full, mode, config);
                (global, full, k, t)
            } else {
                let mut best: Option<(f64, u64, u64, TileShape, CoreGrid, u64)> = None;
                for cores in divisors(full.cores_per_channel).into_iter().rev() {
                    let grid = CoreGrid {
                        channels: full.channels,
                        cores_per_channel: cores,
                    };
                    for shape in grid.feasible_shapes(epp) {
                        if check_buffer(shape, grid, config).is_err() {
                            continue;
                        }
                        let (k, t) = choose_k(h, w, shape, grid, mode, config);
                        let padded = h.div_ceil(shape.h_req) * shape.h_req * w.div_ceil(shape.w_req) * shape.w_req;
                        let trans = grid.trans_elements(shape, TransferScheme::Broadcast);
                        let key = (t, padded, trans);
                        let better = match &best {
                            None => true,
                            Some((bt, bp, btr, ..)) => {
                                key.0 < *bt - 1e-6 || ((key.0 - *bt).abs() <= 1e-6 && (key.1, key.2) < (*bp, *btr))
                            }
                        };
                        if better {
                            best = Some((t, padded, trans, shape, grid, k));
                        }
                    }
                }
                let (t, _, _, shape, grid, k) = best.expect("at least one feasible shape");
                (shape, grid, k, t)
            }
        }
    };
    let plan = partition_matrix(
        h,
        w,
        &PartitionInputs {
            shape,
            grid,
            rule: SplitRule::Tiles(k),
        },
        config,
    )?;
    Ok(MatrixPlan { plan, estimate_ns })
}

/// Lower bound on broadcast traffic from the continuous relaxation:
/// `2 * channels * sqrt(cores_per_channel * elements_per_page)` elements.
pub fn continuous_trans_bound(config: &SystemConfig) -> f64 {
    let grid = CoreGrid::full(config);
    2.0 * grid.channels as f64 * ((grid.cores_per_channel * config.elements_per_page()) as f64).sqrt()
}

/// Time to stream `bytes` over all channels with no competing traffic.
pub fn npu_stream_ns(bytes: u64, config: &SystemConfig) -> Nanos {
    let per_channel = bytes.div_ceil(u64::from(config.flash.channel_num));
    config.transfer_ns(per_channel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, Preset, QuantizationSpec};

    #[test]
    fn optimal_shapes() {
        assert_eq!(optimal_tile_shape(&preset(Preset::S)), TileShape::new(256, 2048));
        assert_eq!(optimal_tile_shape(&preset(Preset::M)), TileShape::new(512, 4096));
        let l = preset(Preset::L);
        let s = optimal_tile_shape(&l);
        assert_eq!(s, TileShape::new(512, 16384));
        assert_eq!(CoreGrid::full(&l).trans_elements(s, TransferScheme::Broadcast), 32768);
    }

    #[test]
    fn degenerate_single_core() {
        let mut c = preset(Preset::S);
        c.flash.channel_num = 1;
        c.flash.chips_per_channel = 1;
        c.flash.dies_per_chip = 1;
        assert_eq!(optimal_tile_shape(&c), TileShape::new(128, 128));
    }

    #[test]
    fn trans_volumes() {
        let c = preset(Preset::S);
        let s = TileShape::new(256, 2048);
        assert_eq!(trans_volume(s, &c, TransferScheme::Broadcast), 4096);
        assert_eq!(trans_volume(s, &c, TransferScheme::NoBroadcast), 10240);
    }

    #[test]
    fn invalid_shape_rejected() {
        let c = preset(Preset::S);
        assert!(analytic_rates(TileShape::new(256, 1000), &c).is_err());
        assert!(analytic_rates(TileShape::new(0, 2048), &c).is_err());
    }

    #[test]
    fn infeasible_rates() {
        let mut c = preset(Preset::S);
        c.timing.t_read = 0.1;
        let s = optimal_tile_shape(&c);
        assert!(matches!(analytic_rates(s, &c), Err(TilerError::Infeasible(_))));
    }

    #[test]
    fn alpha_symmetry() {
        let r = AnalyticRates {
            t_rc: 20.0,
            t_r: 20.0,
            rate_rc: 0.1,
            trans: 0,
            trans_alt: 0,
            cores_per_channel: 4,
        };
        let (a, f) = compute_alpha(&r);
        assert_eq!(a, 0.5);
        assert!((f - 0.8).abs() < 1e-12);
    }

    #[test]
    fn partition_4096_square_on_s() {
        let c = preset(Preset::S);
        let shape = optimal_tile_shape(&c);
        let p = partition_matrix(
            4096,
            4096,
            &PartitionInputs {
                shape,
                grid: CoreGrid::full(&c),
                rule: SplitRule::Fraction(0.6878),
            },
            &c,
        )
        .unwrap();
        assert_eq!(p.slots, 32);
        assert_eq!(p.flash_tiles.len(), 22);
        assert!((p.achieved_fraction() - 0.6875).abs() < 1e-12);
        assert_eq!(p.flash_bytes + p.npu_bytes, p.matrix_bytes);
        assert_eq!(p.npu_pages.len(), 10 * 32);
        // Every tile covers 32 distinct cores, 4 per channel.
        for t in &p.flash_tiles {
            let mut cs = t.cores.clone();
            cs.sort_unstable();
            cs.dedup();
            assert_eq!(cs.len(), 32);
            assert_eq!(p.broadcast_groups(t).len(), 8);
        }
    }

    #[test]
    fn partition_extremes() {
        let c = preset(Preset::S);
        let shape = optimal_tile_shape(&c);
        let inputs = |rule| PartitionInputs {
            shape,
            grid: CoreGrid::full(&c),
            rule,
        };
        let p = partition_matrix(4096, 4096, &inputs(SplitRule::Fraction(0.0)), &c).unwrap();
        assert!(p.flash_tiles.is_empty());
        assert_eq!(p.npu_bytes, 4096 * 4096);
        let p = partition_matrix(256, 2048, &inputs(SplitRule::Fraction(1.0)), &c).unwrap();
        assert_eq!(p.flash_tiles.len(), 1);
        assert!(p.npu_pages.is_empty());
        assert_eq!(p.padded_bytes, 0);
    }

    #[test]
    fn padded_small_matrix() {
        let c = preset(Preset::S);
        let shape = optimal_tile_shape(&c);
        let p = partition_matrix(
            100,
            1000,
            &PartitionInputs {
                shape,
                grid: CoreGrid::full(&c),
                rule: SplitRule::FlashOnly,
            },
            &c,
        )
        .unwrap();
        assert_eq!(p.slots, 1);
        assert_eq!(p.flash_bytes, 100_000);
        assert_eq!(p.padded_bytes, 256 * 2048 - 100_000);
    }

    #[test]
    fn adaptive_keeps_global_shape_when_it_tiles() {
        let c = preset(Preset::S);
        let m = plan_matrix(4096, 4096, ShapePolicy::Adaptive, SplitMode::Balanced, &c).unwrap();
        assert_eq!(m.plan.shape, TileShape::new(256, 2048));
        assert_eq!(m.plan.flash_tiles.len(), 22);
    }

    #[test]
    fn adaptive_folds_narrow_matrices() {
        let c = preset(Preset::L);
        let m = plan_matrix(4096, 4096, ShapePolicy::Adaptive, SplitMode::Balanced, &c).unwrap();
        assert_eq!(m.plan.padded_bytes, 0);
        assert!(m.plan.shape.w_req <= 4096);
        assert!(m.plan.achieved_fraction() > 0.9);
    }

    #[test]
    fn w4_shape_tie_break() {
        let c = preset(Preset::S).with_quant(QuantizationSpec::W4A16);
        assert_eq!(optimal_tile_shape(&c), TileShape::new(512, 2048));
    }

    #[test]
    fn parse_shape() {
        assert_eq!("128x4096".parse::<TileShape>().unwrap(), TileShape::new(128, 4096));
        assert!("128".parse::<TileShape>().is_err());
    }
}
