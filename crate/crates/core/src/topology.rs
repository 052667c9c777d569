//! Flash device tree and the placement of weight pages onto it.
//!
//! Cores are numbered `channel * ccore_num + local`, with `local` running over
//! chips, then dies, then the cores of a die; this matches the numbering used
//! by the tiler.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Nanos, SystemConfig};
use crate::tiler::TilingPlan;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("address {0:?} is outside the device")]
    OutOfRange(FlashAddress),
    #[error("plane {plane} is full ({pages} pages)")]
    CapacityExceeded { plane: usize, pages: u64 },
    #[error("core {0} does not exist")]
    NoSuchCore(u32),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlashAddress {
    pub channel: u32,
    pub chip: u32,
    pub die: u32,
    pub plane: u32,
    pub block: u32,
    pub page: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterState {
    pub busy: bool,
    pub until: Nanos,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaneState {
    pub data_register: RegisterState,
    pub cache_register: RegisterState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeCoreState {
    pub die: u32,
    pub input_occupancy: u64,
    pub output_occupancy: u64,
    pub busy_until: Nanos,
}

#[derive(Debug, Clone)]
pub struct DeviceTree {
    pub config: SystemConfig,
    pub planes: Vec<PlaneState>,
    pub cores: Vec<ComputeCoreState>,
}

impl DeviceTree {
    pub fn channels(&self) -> u32 {
        self.config.flash.channel_num
    }

    pub fn dies(&self) -> u32 {
        self.config.flash.total_dies()
    }

    pub fn die_index(&self, a: &FlashAddress) -> usize {
        let f = &self.config.flash;
        ((a.channel * f.chips_per_channel + a.chip) * f.dies_per_chip + a.die) as usize
    }

    pub fn plane_index(&self, a: &FlashAddress) -> usize {
        self.die_index(a) * self.config.flash.planes_per_die as usize + a.plane as usize
    }

    /// Core attached to the plane holding `a`.
    pub fn core_of(&self, a: &FlashAddress) -> u32 {
        let f = &self.config.flash;
        let local = a.plane * f.ccores_per_die / f.planes_per_die;
        self.die_index(a) as u32 * f.ccores_per_die + local
    }

    pub fn check(&self, a: &FlashAddress) -> Result<(), TopologyError> {
        let f = &self.config.flash;
        let ok = a.channel < f.channel_num
            && a.chip < f.chips_per_channel
            && a.die < f.dies_per_chip
            && a.plane < f.planes_per_die
            && a.block < f.blocks_per_plane
            && a.page < f.block_pages;
        if ok {
            Ok(())
        } else {
            Err(TopologyError::OutOfRange(*a))
        }
    }

    /// Address of page `index` (counted across blocks) on a plane.
    pub fn plane_address(&self, plane: usize, index: u64) -> FlashAddress {
        let f = &self.config.flash;
        let p = plane as u32;
        let planes = f.planes_per_die;
        let die_global = p / planes;
        let die = die_global % f.dies_per_chip;
        let chip = (die_global / f.dies_per_chip) % f.chips_per_channel;
        let channel = die_global / (f.dies_per_chip * f.chips_per_channel);
        FlashAddress {
            channel,
            chip,
            die,
            plane: p % planes,
            block: (index / u64::from(f.block_pages)) as u32,
            page: (index % u64::from(f.block_pages)) as u32,
        }
    }

    /// Global plane indices served by `core`.
    pub fn core_planes(&self, core: u32) -> Result<Vec<usize>, TopologyError> {
        let f = &self.config.flash;
        if core >= f.total_cores() {
            return Err(TopologyError::NoSuchCore(core));
        }
        let die = core / f.ccores_per_die;
        let local = core % f.ccores_per_die;
        Ok((0..f.planes_per_die)
            .filter(|p| p * f.ccores_per_die / f.planes_per_die == local)
            .map(|p| (die * f.planes_per_die + p) as usize)
            .collect())
    }
}

pub fn build_device(config: &SystemConfig) -> Result<DeviceTree, crate::config::ConfigError> {
    config.validate()?;
    let f = &config.flash;
    let cores = (0..f.total_cores())
        .map(|c| ComputeCoreState {
            die: c / f.ccores_per_die,
            input_occupancy: 0,
            output_occupancy: 0,
            busy_until: 0,
        })
        .collect();
    Ok(DeviceTree {
        config: config.clone(),
        planes: vec![PlaneState::default(); f.total_planes() as usize],
        cores,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlacement {
    pub matrix: u32,
    pub tile: u32,
    pub atomic: u32,
    pub core: u32,
    pub address: FlashAddress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NpuPlacement {
    pub matrix: u32,
    pub page: u32,
    pub bytes: u64,
    pub address: FlashAddress,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightLayout {
    pub tiles: Vec<TilePlacement>,
    pub npu_pages: Vec<NpuPlacement>,
}

impl WeightLayout {
    pub fn used_pages(&self) -> usize {
        self.tiles.len() + self.npu_pages.len()
    }

    pub fn dump_text(&self) -> String {
        let mut s = String::from("matrix\tkind\tindex\tcore\tchannel\tchip\tdie\tplane\tblock\tpage\n");
        let addr = |a: &FlashAddress| {
            format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                a.channel, a.chip, a.die, a.plane, a.block, a.page
            )
        };
        for t in &self.tiles {
            let _ = writeln!(
                s,
                "{}\ttile\t{}.{}\t{}\t{}",
                t.matrix,
                t.tile,
                t.atomic,
                t.core,
                addr(&t.address)
            );
        }
        for p in &self.npu_pages {
            let _ = writeln!(s, "{}\tnpu\t{}\t-\t{}", p.matrix, p.page, addr(&p.address));
        }
        s
    }
}

/// Places page-granular data onto planes with one cursor per plane.
pub struct PageAllocator<'a> {
    device: &'a DeviceTree,
    cursors: Vec<u64>,
    core_counters: Vec<u64>,
    stripe: u64,
}

impl<'a> PageAllocator<'a> {
    pub fn new(device: &'a DeviceTree) -> Self {
        Self {
            device,
            cursors: vec![0; device.planes.len()],
            core_counters: vec![0; device.cores.len()],
            stripe: 0,
        }
    }

    fn take(&mut self, plane: usize) -> Result<FlashAddress, TopologyError> {
        let pages = self.device.config.flash.pages_per_plane();
        let idx = self.cursors[plane];
        if idx >= pages {
            return Err(TopologyError::CapacityExceeded { plane, pages });
        }
        self.cursors[plane] += 1;
        Ok(self.device.plane_address(plane, idx))
    }

    /// Next page for an atomic tile on `core`. Tiles stay on the core's first
    /// plane, which pipelines through its own data and cache registers; the
    /// core's other planes take over only when it is full.
    pub fn atomic_tile(&mut self, core: u32) -> Result<FlashAddress, TopologyError> {
        let planes = self.device.core_planes(core)?;
        self.core_counters[core as usize] += 1;
        let mut last = None;
        for &p in &planes {
            match self.take(p) {
                Ok(a) => return Ok(a),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("every core owns at least one plane"))
    }

    /// Whether `plane` is the one feeding its core's read-compute pipeline.
    fn is_compute_plane(&self, plane: usize) -> bool {
        let f = &self.device.config.flash;
        let die = plane as u32 / f.planes_per_die;
        let local = plane as u32 % f.planes_per_die;
        let core = die * f.ccores_per_die + local * f.ccores_per_die / f.planes_per_die;
        let planes = self.device.core_planes(core).expect("plane maps to a core");
        planes.len() > 1 && planes[0] == plane
    }

    /// Next NPU page, striped channel first, then chip, then die, then plane.
    /// Planes feeding a compute core are skipped when the die has others, so
    /// plain reads never queue behind read-compute pages.
    pub fn npu_page(&mut self) -> Result<FlashAddress, TopologyError> {
        let f = &self.device.config.flash;
        let ch = u64::from(f.channel_num);
        let chips = u64::from(f.chips_per_channel);
        let dies = u64::from(f.dies_per_chip);
        let planes = u64::from(f.planes_per_die);
        let period = ch * chips * dies * planes;
        let mut last = None;
        for _ in 0..period {
            let s = self.stripe;
            self.stripe += 1;
            let channel = s % ch;
            let chip = (s / ch) % chips;
            let die = (s / (ch * chips)) % dies;
            let plane = (s / (ch * chips * dies)) % planes;
            let die_global = (channel * chips + chip) * dies + die;
            let idx = (die_global * planes + plane) as usize;
            if self.is_compute_plane(idx) {
                continue;
            }
            match self.take(idx) {
                Ok(a) => return Ok(a),
                Err(e) => last = Some(e),
            }
        }
        // Every read plane is full: fall back to any plane with room.
        for p in 0..self.device.planes.len() {
            if let Ok(a) = self.take(p) {
                return Ok(a);
            }
        }
        Err(last.unwrap_or(TopologyError::CapacityExceeded {
            plane: 0,
            pages: f.pages_per_plane(),
        }))
    }
}

/// Lays out the tiling plans of a model's matrices, one plan per matrix in
/// execution order.
pub fn layout_weights(plans: &[TilingPlan], device: &DeviceTree) -> Result<WeightLayout, TopologyError> {
    let mut alloc = PageAllocator::new(device);
    let mut layout = WeightLayout::default();
    for (m, plan) in plans.iter().enumerate() {
        for tile in &plan.flash_tiles {
            for (j, &core) in tile.cores.iter().enumerate() {
                layout.tiles.push(TilePlacement {
                    matrix: m as u32,
                    tile: tile.index as u32,
                    atomic: j as u32,
                    core,
                    address: alloc.atomic_tile(core)?,
                });
            }
        }
        for (p, &bytes) in plan.npu_pages.iter().enumerate() {
            layout.npu_pages.push(NpuPlacement {
                matrix: m as u32,
                page: p as u32,
                bytes,
                address: alloc.npu_page()?,
            });
        }
    }
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, Preset};
    use crate::tiler::{optimal_tile_shape, partition_matrix, CoreGrid, PartitionInputs, SplitRule};

    #[test]
    fn preset_counts() {
        let d = build_device(&preset(Preset::S)).unwrap();
        assert_eq!(d.dies(), 32);
        assert_eq!(d.cores.len(), 32);
        assert_eq!(d.planes.len(), 64);
        let l = build_device(&preset(Preset::L)).unwrap();
        assert_eq!(l.cores.len(), 512);
    }

    #[test]
    fn minimal_device() {
        let mut c = preset(Preset::S);
        c.flash.channel_num = 1;
        c.flash.chips_per_channel = 1;
        c.flash.dies_per_chip = 1;
        let d = build_device(&c).unwrap();
        assert_eq!((d.cores.len(), d.planes.len()), (1, 2));
    }

    #[test]
    fn plane_address_roundtrip() {
        let d = build_device(&preset(Preset::M)).unwrap();
        for p in 0..d.planes.len() {
            let a = d.plane_address(p, 300);
            assert_eq!(d.plane_index(&a), p);
            assert!(d.check(&a).is_ok());
            assert_eq!((a.block, a.page), (1, 44));
        }
    }

    #[test]
    fn one_tile_spreads_over_all_cores() {
        let c = preset(Preset::S);
        let d = build_device(&c).unwrap();
        let plan = partition_matrix(
            256,
            2048,
            &PartitionInputs {
                shape: optimal_tile_shape(&c),
                grid: CoreGrid::full(&c),
                rule: SplitRule::FlashOnly,
            },
            &c,
        )
        .unwrap();
        let layout = layout_weights(&[plan], &d).unwrap();
        assert_eq!(layout.tiles.len(), 32);
        let mut cores: Vec<u32> = layout.tiles.iter().map(|t| d.core_of(&t.address)).collect();
        cores.sort_unstable();
        cores.dedup();
        assert_eq!(cores.len(), 32);
        for t in &layout.tiles {
            assert_eq!(d.core_of(&t.address), t.core);
        }
    }

    #[test]
    fn npu_only_matrix() {
        let c = preset(Preset::S);
        let d = build_device(&c).unwrap();
        let plan = partition_matrix(
            4096,
            4096,
            &PartitionInputs {
                shape: optimal_tile_shape(&c),
                grid: CoreGrid::full(&c),
                rule: SplitRule::Tiles(0),
            },
            &c,
        )
        .unwrap();
        let layout = layout_weights(&[plan], &d).unwrap();
        assert!(layout.tiles.is_empty());
        assert_eq!(layout.npu_pages.len(), 1024);
        assert_eq!(layout.npu_pages[1].address.channel, 1);
        assert_eq!(layout.npu_pages[8].address.chip, 1);
    }

    #[test]
    fn capacity_error() {
        let mut c = preset(Preset::S);
        c.flash.channel_num = 1;
        c.flash.chips_per_channel = 1;
        c.flash.dies_per_chip = 1;
        c.flash.blocks_per_plane = 1;
        c.flash.block_pages = 4;
        let d = build_device(&c).unwrap();
        // 16 pages onto 2 planes of 4 pages each.
        let plan = partition_matrix(
            2048,
            128,
            &PartitionInputs {
                shape: optimal_tile_shape(&c),
                grid: CoreGrid::full(&c),
                rule: SplitRule::Tiles(0),
            },
            &c,
        )
        .unwrap();
        assert!(matches!(
            layout_weights(&[plan], &d),
            Err(TopologyError::CapacityExceeded { .. })
        ));
    }
}
