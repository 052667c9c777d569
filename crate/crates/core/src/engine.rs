//! Discrete-event execution of read, read-compute and sliced-read requests.
//!
//! Resources and their rules:
//!
//! * **Plane.** An array read occupies the data register for `t_read`. The
//!   page then moves (instantly) into the cache register as soon as it is
//!   free, which frees the data register for the next array read. A
//!   read-compute page holds the cache register until its computation ends;
//!   a plain read holds it until its last byte has crossed the channel.
//!   Pages are read in issue order per plane.
//! * **Core.** One computation at a time. The core has a single input slot
//!   that is occupied from the moment its input is scheduled on the channel
//!   until the computation using it ends, and an output area that holds
//!   results until they have been sent.
//! * **Channel.** One transfer at a time, never interrupted. The input of a
//!   read-compute request is broadcast once to all of its cores on that
//!   channel, once each core's input slot is free and that request is the
//!   core's next.
//!
//! Channel arbitration depends on the strategy:
//!
//! * `a`: read-compute traffic only; plain reads are dropped.
//! * `b`: plain reads move a whole page per transfer, and the channel serves
//!   every transfer strictly in issue order, waiting for the head of the line
//!   even when later transfers are ready (a conventional in-order controller).
//! * `c`: plain reads are cut into slices; ready read-compute transfers win
//!   at every transfer boundary, and each class is served in issue order.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Nanos, SystemConfig};
use crate::topology::{DeviceTree, FlashAddress, TopologyError};

pub const DEFAULT_SLICE_BYTES: u64 = 512;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Address(#[from] TopologyError),
    #[error("request {id}: input {input} B plus result {result} B exceed the {buffer} B core buffer")]
    BufferOverflow {
        id: u32,
        input: u64,
        result: u64,
        buffer: u64,
    },
    #[error("slice size {slice} must divide the {page} B page")]
    BadSlice { slice: u64, page: u64 },
    #[error("request {0} is malformed: {1}")]
    Malformed(u32, &'static str),
    #[error("no progress at {time} ns with {pending} pages outstanding")]
    Deadlock { time: Nanos, pending: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestKind {
    Read,
    ReadCompute,
    ReadSlice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u32,
    pub kind: RequestKind,
    /// One page per participating core for read-compute, one page otherwise.
    pub targets: Vec<FlashAddress>,
    /// Broadcast input bytes on the request's channel.
    pub input_bytes: u64,
    /// Result bytes returned over the channel, summed over cores.
    pub result_bytes: u64,
    pub payload_bytes: u64,
    pub parent: Option<u32>,
    pub slice_index: u32,
    pub order: u64,
}

impl Request {
    pub fn read(id: u32, target: FlashAddress, payload_bytes: u64, order: u64) -> Self {
        Self {
            id,
            kind: RequestKind::Read,
            targets: vec![target],
            input_bytes: 0,
            result_bytes: 0,
            payload_bytes,
            parent: None,
            slice_index: 0,
            order,
        }
    }

    pub fn read_compute(id: u32, targets: Vec<FlashAddress>, input_bytes: u64, result_bytes: u64, order: u64) -> Self {
        Self {
            id,
            kind: RequestKind::ReadCompute,
            targets,
            input_bytes,
            result_bytes,
            payload_bytes: 0,
            parent: None,
            slice_index: 0,
            order,
        }
    }

    pub fn channel(&self) -> u32 {
        self.targets.first().map_or(0, |a| a.channel)
    }
}

/// Splits a page read into `ceil(payload / slice_bytes)` slices.
pub fn slice_read(request: &Request, slice_bytes: u64, page_size: u64) -> Result<Vec<Request>, EngineError> {
    if slice_bytes == 0 || slice_bytes > page_size || !page_size.is_multiple_of(slice_bytes) {
        return Err(EngineError::BadSlice {
            slice: slice_bytes,
            page: page_size,
        });
    }
    if request.kind != RequestKind::Read {
        return Err(EngineError::Malformed(request.id, "only plain reads can be sliced"));
    }
    let n = request.payload_bytes.div_ceil(slice_bytes).max(1);
    Ok((0..n)
        .map(|i| Request {
            kind: RequestKind::ReadSlice,
            payload_bytes: slice_bytes.min(request.payload_bytes - i * slice_bytes),
            parent: Some(request.id),
            slice_index: i as u32,
            ..request.clone()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Read-compute requests only.
    ComputeOnly,
    /// Read-compute plus unsliced page reads, served strictly in issue order.
    Unsliced,
    /// Read-compute plus sliced reads with read-compute priority.
    Sliced,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::ComputeOnly, Strategy::Unsliced, Strategy::Sliced];

    pub fn letter(self) -> char {
        match self {
            Strategy::ComputeOnly => 'a',
            Strategy::Unsliced => 'b',
            Strategy::Sliced => 'c',
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "compute-only" => Ok(Strategy::ComputeOnly),
            "b" | "unsliced" => Ok(Strategy::Unsliced),
            "c" | "sliced" => Ok(Strategy::Sliced),
            _ => Err(format!("unknown strategy `{s}` (expected a, b or c)")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleOptions {
    pub slice_bytes: u64,
    pub record_events: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            slice_bytes: DEFAULT_SLICE_BYTES,
            record_events: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Resource {
    Channel(u32),
    Plane(u32),
    Core(u32),
}

impl std::fmt::Display for Resource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Resource::Channel(i) => write!(f, "channel{i}"),
            Resource::Plane(i) => write!(f, "plane{i}"),
            Resource::Core(i) => write!(f, "core{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    TransferIn,
    ArrayRead,
    RegisterMove,
    Compute,
    TransferOut,
}

impl Action {
    pub fn name(self) -> &'static str {
        match self {
            Action::TransferIn => "transfer-in",
            Action::ArrayRead => "array-read",
            Action::RegisterMove => "register-move",
            Action::Compute => "compute",
            Action::TransferOut => "transfer-out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub start: Nanos,
    pub end: Nanos,
    pub resource: Resource,
    pub action: Action,
    pub request: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<Event>,
    pub makespan: Nanos,
    pub channel_busy: Vec<Nanos>,
    /// Read-compute bytes (inputs and results) per channel.
    pub channel_rc_bytes: Vec<u64>,
    /// Plain read payload bytes per channel.
    pub channel_read_bytes: Vec<u64>,
    pub computes: u64,
}

impl Timeline {
    pub fn channel_bytes(&self, ch: usize) -> u64 {
        self.channel_rc_bytes[ch] + self.channel_read_bytes[ch]
    }

    /// Tab-separated trace: start_ns, resource, action, request_id, duration_ns.
    pub fn trace_tsv(&self) -> String {
        let mut s = String::from("timestamp_ns\tresource\taction\trequest_id\tduration_ns\n");
        for e in &self.events {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                e.start,
                e.resource,
                e.action.name(),
                e.request,
                e.end - e.start
            );
        }
        s
    }
}

/// Busy fraction of every channel.
pub fn channel_utilization(timeline: &Timeline) -> Vec<f64> {
    timeline
        .channel_busy
        .iter()
        .map(|&b| {
            if timeline.makespan == 0 {
                0.0
            } else {
                b as f64 / timeline.makespan as f64
            }
        })
        .collect()
}

pub fn mean_utilization(timeline: &Timeline) -> f64 {
    let u = channel_utilization(timeline);
    if u.is_empty() {
        0.0
    } else {
        u.iter().sum::<f64>() / u.len() as f64
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum PageOwner {
    Rc { unit: usize, slot: usize },
    Read { unit: usize },
}

struct PageJob {
    plane: usize,
    owner: PageOwner,
    cached: bool,
}

struct RcUnit {
    id: u32,
    order: u64,
    channel: usize,
    pages: Vec<usize>,
    cores: Vec<usize>,
    input_bytes: u64,
    result_per_core: u64,
    input_arrived: bool,
}

struct ReadUnit {
    id: u32,
    order: u64,
    channel: usize,
    page: usize,
    slices: Vec<u64>,
    sent: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum DataReg {
    Free,
    Reading(usize),
    Holding(usize),
}

struct PlaneSim {
    queue: VecDeque<usize>,
    data: DataReg,
    cache: Option<usize>,
}

struct CoreSim {
    queue: VecDeque<usize>,
    input: Option<usize>,
    computing: bool,
    out_reserved: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Xfer {
    Input(usize),
    Result(usize, usize),
    Slice(usize, usize),
}

/// Ready transfer ordered by issue order, then unit, then phase.
type XferKey = (u64, usize, u8, usize, Xfer);

struct ChannelSim {
    busy: Option<Xfer>,
    rc_ready: BTreeSet<XferKey>,
    read_ready: BTreeSet<XferKey>,
    /// Strict service order of an in-order controller (unsliced strategy).
    in_order: VecDeque<XferKey>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Array(usize),
    Compute(usize),
    Xfer(usize),
}

struct Sim<'a> {
    cfg: &'a SystemConfig,
    strategy: Strategy,
    now: Nanos,
    seq: u64,
    heap: BinaryHeap<Reverse<(Nanos, u64, Ev)>>,
    pages: Vec<PageJob>,
    rcs: Vec<RcUnit>,
    reads: Vec<ReadUnit>,
    planes: Vec<PlaneSim>,
    cores: Vec<CoreSim>,
    channels: Vec<ChannelSim>,
    dirty_planes: Vec<usize>,
    dirty_cores: Vec<usize>,
    dirty_channels: Vec<usize>,
    pending: usize,
    tl: Timeline,
    record: bool,
}

impl Sim<'_> {
    fn push(&mut self, at: Nanos, ev: Ev) {
        self.seq += 1;
        self.heap.push(Reverse((at, self.seq, ev)));
    }

    fn log(&mut self, start: Nanos, end: Nanos, resource: Resource, action: Action, request: u32) {
        self.tl.makespan = self.tl.makespan.max(end);
        if self.record {
            self.tl.events.push(Event {
                start,
                end,
                resource,
                action,
                request,
            });
        }
    }

    fn request_of(&self, page: usize) -> u32 {
        match self.pages[page].owner {
            PageOwner::Rc { unit, .. } => self.rcs[unit].id,
            PageOwner::Read { unit } => self.reads[unit].id,
        }
    }

    fn run(&mut self) -> Result<(), EngineError> {
        self.dirty_planes = (0..self.planes.len()).collect();
        self.dirty_cores = (0..self.cores.len()).collect();
        self.dispatch();
        while let Some(Reverse((t, _, ev))) = self.heap.pop() {
            self.now = t;
            match ev {
                Ev::Array(p) => self.array_done(p),
                Ev::Compute(c) => self.compute_done(c),
                Ev::Xfer(ch) => self.xfer_done(ch),
            }
            self.dispatch();
        }
        if self.pending > 0 {
            return Err(EngineError::Deadlock {
                time: self.now,
                pending: self.pending,
            });
        }
        Ok(())
    }

    fn dispatch(&mut self) {
        loop {
            if let Some(p) = self.dirty_planes.pop() {
                self.try_plane(p);
            } else if let Some(c) = self.dirty_cores.pop() {
                self.try_core(c);
            } else if let Some(ch) = self.dirty_channels.pop() {
                self.try_channel(ch);
            } else {
                break;
            }
        }
    }

    fn try_plane(&mut self, p: usize) {
        loop {
            let plane = &mut self.planes[p];
            if let (DataReg::Holding(j), None) = (plane.data, plane.cache) {
                plane.cache = Some(j);
                plane.data = DataReg::Free;
                self.pages[j].cached = true;
                let req = self.request_of(j);
                self.log(self.now, self.now, Resource::Plane(p as u32), Action::RegisterMove, req);
                match self.pages[j].owner {
                    PageOwner::Rc { unit, slot } => {
                        let core = self.rcs[unit].cores[slot];
                        self.dirty_cores.push(core);
                    }
                    PageOwner::Read { unit } => {
                        let r = &self.reads[unit];
                        let ch = r.channel;
                        for s in 0..r.slices.len() {
                            let key = (r.order, unit, 0, s, Xfer::Slice(unit, s));
                            self.channels[ch].read_ready.insert(key);
                        }
                        self.dirty_channels.push(ch);
                    }
                }
                continue;
            }
            let plane = &mut self.planes[p];
            if plane.data == DataReg::Free {
                if let Some(j) = plane.queue.pop_front() {
                    plane.data = DataReg::Reading(j);
                    let end = self.now + self.cfg.timing.t_read_ns();
                    let req = self.request_of(j);
                    self.log(self.now, end, Resource::Plane(p as u32), Action::ArrayRead, req);
                    self.push(end, Ev::Array(p));
                }
            }
            break;
        }
    }

    fn try_core(&mut self, c: usize) {
        let Some(&page) = self.cores[c].queue.front() else {
            return;
        };
        let PageOwner::Rc { unit, .. } = self.pages[page].owner else {
            unreachable!("core queues hold read-compute pages only");
        };
        let core = &self.cores[c];
        if !core.computing && core.input == Some(unit) && self.rcs[unit].input_arrived && self.pages[page].cached {
            self.cores[c].computing = true;
            let end = self.now + self.cfg.compute_ns();
            let id = self.rcs[unit].id;
            self.log(self.now, end, Resource::Core(c as u32), Action::Compute, id);
            self.push(end, Ev::Compute(c));
            return;
        }
        if core.input.is_none() {
            self.try_admit_input(unit);
        }
    }

    fn try_admit_input(&mut self, unit: usize) {
        let buffer = self.cfg.host.input_output_buffer;
        let u = &self.rcs[unit];
        let ok = u.pages.iter().zip(&u.cores).all(|(&pg, &c)| {
            let core = &self.cores[c];
            core.input.is_none()
                && core.queue.front() == Some(&pg)
                && core.out_reserved + u.input_bytes + u.result_per_core <= buffer
        });
        if !ok {
            return;
        }
        let (order, ch, res) = (u.order, u.channel, u.result_per_core);
        for i in 0..self.rcs[unit].cores.len() {
            let c = self.rcs[unit].cores[i];
            self.cores[c].input = Some(unit);
            self.cores[c].out_reserved += res;
        }
        if self.rcs[unit].input_bytes == 0 {
            self.rcs[unit].input_arrived = true;
            let cores = self.rcs[unit].cores.clone();
            self.dirty_cores.extend(cores);
        } else {
            self.channels[ch]
                .rc_ready
                .insert((order, unit, 0, 0, Xfer::Input(unit)));
            self.dirty_channels.push(ch);
        }
    }

    fn try_channel(&mut self, ch: usize) {
        let chan = &mut self.channels[ch];
        if chan.busy.is_some() {
            return;
        }
        let pick = match self.strategy {
            Strategy::Unsliced => chan.in_order.front().and_then(|k| {
                if chan.rc_ready.contains(k) {
                    Some((*k, true))
                } else if chan.read_ready.contains(k) {
                    Some((*k, false))
                } else {
                    None
                }
            }),
            _ => chan
                .rc_ready
                .first()
                .map(|&k| (k, true))
                .or_else(|| chan.read_ready.first().map(|&k| (k, false))),
        };
        let Some((key, rc)) = pick else {
            return;
        };
        if self.strategy == Strategy::Unsliced {
            chan.in_order.pop_front();
        }
        if rc {
            chan.rc_ready.remove(&key);
        } else {
            chan.read_ready.remove(&key);
        }
        let xfer = key.4;
        chan.busy = Some(xfer);
        let (bytes, action, id) = match xfer {
            Xfer::Input(u) => (self.rcs[u].input_bytes, Action::TransferIn, self.rcs[u].id),
            Xfer::Result(u, _) => (self.rcs[u].result_per_core, Action::TransferOut, self.rcs[u].id),
            Xfer::Slice(r, s) => (self.reads[r].slices[s], Action::TransferOut, self.reads[r].id),
        };
        if rc {
            self.tl.channel_rc_bytes[ch] += bytes;
        } else {
            self.tl.channel_read_bytes[ch] += bytes;
        }
        let dur = self.cfg.transfer_ns(bytes);
        self.tl.channel_busy[ch] += dur;
        let end = self.now + dur;
        self.log(self.now, end, Resource::Channel(ch as u32), action, id);
        self.push(end, Ev::Xfer(ch));
    }

    fn array_done(&mut self, p: usize) {
        let DataReg::Reading(j) = self.planes[p].data else {
            unreachable!("array read completion without a read in flight");
        };
        self.planes[p].data = DataReg::Holding(j);
        self.dirty_planes.push(p);
    }

    fn compute_done(&mut self, c: usize) {
        let core = &mut self.cores[c];
        core.computing = false;
        let page = core.queue.pop_front().expect("computing core has a page");
        let unit = core.input.take().expect("computing core holds an input");
        self.tl.computes += 1;
        let plane = self.pages[page].plane;
        self.planes[plane].cache = None;
        self.dirty_planes.push(plane);
        let PageOwner::Rc { slot, .. } = self.pages[page].owner else {
            unreachable!();
        };
        let u = &self.rcs[unit];
        let ch = u.channel;
        if u.result_per_core == 0 {
            self.pending -= 1;
        } else {
            self.channels[ch]
                .rc_ready
                .insert((u.order, unit, 1, slot, Xfer::Result(unit, slot)));
            self.dirty_channels.push(ch);
        }
        self.dirty_cores.push(c);
    }

    fn xfer_done(&mut self, ch: usize) {
        let xfer = self.channels[ch].busy.take().expect("busy channel");
        match xfer {
            Xfer::Input(u) => {
                self.rcs[u].input_arrived = true;
                let cores = self.rcs[u].cores.clone();
                self.dirty_cores.extend(cores);
            }
            Xfer::Result(u, slot) => {
                let c = self.rcs[u].cores[slot];
                self.cores[c].out_reserved -= self.rcs[u].result_per_core;
                self.pending -= 1;
                self.dirty_cores.push(c);
                // The freed output room may unblock the next input of this core.
                if let Some(&pg) = self.cores[c].queue.front() {
                    if let PageOwner::Rc { unit, .. } = self.pages[pg].owner {
                        if self.cores[c].input.is_none() {
                            self.try_admit_input(unit);
                        }
                    }
                }
            }
            Xfer::Slice(r, _) => {
                let read = &mut self.reads[r];
                read.sent += 1;
                if read.sent == read.slices.len() {
                    let plane = self.pages[read.page].plane;
                    self.planes[plane].cache = None;
                    self.pending -= 1;
                    self.dirty_planes.push(plane);
                }
            }
        }
        self.dirty_channels.push(ch);
    }
}

/// Executes `requests` on `device` under `strategy` and returns the timeline.
pub fn schedule(
    requests: &[Request],
    device: &DeviceTree,
    strategy: Strategy,
    options: &ScheduleOptions,
) -> Result<Timeline, EngineError> {
    let cfg = &device.config;
    let page_size = u64::from(cfg.flash.page_size);
    let channels = cfg.flash.channel_num as usize;
    let buffer = cfg.host.input_output_buffer;
    if strategy == Strategy::Sliced {
        // Validates the slice size even when no read is present.
        slice_read(
            &Request::read(0, FlashAddress::default(), page_size, 0),
            options.slice_bytes,
            page_size,
        )?;
    }

    let mut order: Vec<usize> = (0..requests.len()).collect();
    order.sort_by_key(|&i| (requests[i].order, requests[i].id, requests[i].slice_index));

    let mut sim = Sim {
        cfg,
        strategy,
        now: 0,
        seq: 0,
        heap: BinaryHeap::new(),
        pages: Vec::new(),
        rcs: Vec::new(),
        reads: Vec::new(),
        planes: (0..device.planes.len())
            .map(|_| PlaneSim {
                queue: VecDeque::new(),
                data: DataReg::Free,
                cache: None,
            })
            .collect(),
        cores: (0..device.cores.len())
            .map(|_| CoreSim {
                queue: VecDeque::new(),
                input: None,
                computing: false,
                out_reserved: 0,
            })
            .collect(),
        channels: (0..channels)
            .map(|_| ChannelSim {
                busy: None,
                rc_ready: BTreeSet::new(),
                read_ready: BTreeSet::new(),
                in_order: VecDeque::new(),
            })
            .collect(),
        dirty_planes: Vec::new(),
        dirty_cores: Vec::new(),
        dirty_channels: Vec::new(),
        pending: 0,
        tl: Timeline {
            channel_busy: vec![0; channels],
            channel_rc_bytes: vec![0; channels],
            channel_read_bytes: vec![0; channels],
            ..Default::default()
        },
        record: options.record_events,
    };

    // Pre-sliced reads are grouped by parent into one unit.
    let mut slice_groups: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();

    for &i in &order {
        let r = &requests[i];
        if r.targets.is_empty() {
            return Err(EngineError::Malformed(r.id, "no target page"));
        }
        for a in &r.targets {
            device.check(a)?;
        }
        let ch = r.channel() as usize;
        match r.kind {
            RequestKind::ReadCompute => {
                if r.targets.iter().any(|a| a.channel as usize != ch) {
                    return Err(EngineError::Malformed(r.id, "read-compute targets span channels"));
                }
                let n = r.targets.len() as u64;
                let per_core = r.result_bytes.div_ceil(n);
                if r.input_bytes + per_core > buffer {
                    return Err(EngineError::BufferOverflow {
                        id: r.id,
                        input: r.input_bytes,
                        result: per_core,
                        buffer,
                    });
                }
                let mut cores: Vec<usize> = r.targets.iter().map(|a| device.core_of(a) as usize).collect();
                let mut sorted = cores.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != cores.len() {
                    return Err(EngineError::Malformed(r.id, "two pages on one core"));
                }
                let unit = sim.rcs.len();
                let mut pages = Vec::with_capacity(r.targets.len());
                for (slot, a) in r.targets.iter().enumerate() {
                    let plane = device.plane_index(a);
                    let pg = sim.pages.len();
                    sim.pages.push(PageJob {
                        plane,
                        owner: PageOwner::Rc { unit, slot },
                        cached: false,
                    });
                    sim.planes[plane].queue.push_back(pg);
                    sim.cores[cores[slot]].queue.push_back(pg);
                    pages.push(pg);
                }
                sim.pending += pages.len();
                sim.rcs.push(RcUnit {
                    id: r.id,
                    order: r.order,
                    channel: ch,
                    pages,
                    cores: std::mem::take(&mut cores),
                    input_bytes: r.input_bytes,
                    result_per_core: per_core,
                    input_arrived: false,
                });
            }
            RequestKind::Read | RequestKind::ReadSlice => {
                if strategy == Strategy::ComputeOnly {
                    continue;
                }
                if r.kind == RequestKind::ReadSlice {
                    let parent = r.parent.unwrap_or(r.id);
                    if let Some(&u) = slice_groups.get(&parent) {
                        sim.reads[u].slices.push(r.payload_bytes);
                        continue;
                    }
                }
                let slices = match (strategy, r.kind) {
                    (Strategy::Sliced, RequestKind::Read) => slice_read(r, options.slice_bytes, page_size)?
                        .iter()
                        .map(|s| s.payload_bytes)
                        .collect(),
                    _ => vec![r.payload_bytes],
                };
                let unit = sim.reads.len();
                let plane = device.plane_index(&r.targets[0]);
                let pg = sim.pages.len();
                sim.pages.push(PageJob {
                    plane,
                    owner: PageOwner::Read { unit },
                    cached: false,
                });
                sim.planes[plane].queue.push_back(pg);
                if r.kind == RequestKind::ReadSlice {
                    slice_groups.insert(r.parent.unwrap_or(r.id), unit);
                }
                sim.pending += 1;
                sim.reads.push(ReadUnit {
                    id: r.parent.unwrap_or(r.id),
                    order: r.order,
                    channel: ch,
                    page: pg,
                    slices,
                    sent: 0,
                });
            }
        }
    }
    if strategy == Strategy::Unsliced {
        let mut keys: Vec<(usize, XferKey)> = Vec::new();
        for (u, r) in sim.rcs.iter().enumerate() {
            if r.input_bytes > 0 {
                keys.push((r.channel, (r.order, u, 0, 0, Xfer::Input(u))));
            }
            if r.result_per_core > 0 {
                for slot in 0..r.cores.len() {
                    keys.push((r.channel, (r.order, u, 1, slot, Xfer::Result(u, slot))));
                }
            }
        }
        for (u, r) in sim.reads.iter().enumerate() {
            for s in 0..r.slices.len() {
                keys.push((r.channel, (r.order, u, 0, s, Xfer::Slice(u, s))));
            }
        }
        // Issue order, then read-compute units before reads of equal order.
        keys.sort_by_key(|(_, k)| (k.0, matches!(k.4, Xfer::Slice(..)), k.1, k.2, k.3));
        for (ch, k) in keys {
            sim.channels[ch].in_order.push_back(k);
        }
    }
    sim.run()?;
    Ok(sim.tl)
}

/// Builds the read-compute request of one tile on one channel.
pub fn tile_request(id: u32, targets: Vec<FlashAddress>, input_bytes: u64, result_bytes: u64, order: u64) -> Request {
    Request::read_compute(id, targets, input_bytes, result_bytes, order)
}
