//! Hardware and quantization parameters.
//!
//! A [`SystemConfig`] is loaded from a sectioned key/value document
//! (`[flash]`, `[timing]`, `[host]`, `[quant]`, `[energy]`) or taken from one
//! of the built-in presets. It is immutable after validation and every other
//! module derives its quantities from it.
//!
//! Units are decimal throughout: 1 GB/s = 1000 bytes/µs. The simulator clock
//! is integer nanoseconds, see [`Nanos`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulator time in integer nanoseconds.
pub type Nanos = u64;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error("unknown preset `{0}` (expected S, M or L)")]
    UnknownPreset(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        reason: reason.into(),
    }
}

/// Flash device tree dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlashGeometry {
    pub channel_num: u32,
    pub chips_per_channel: u32,
    pub dies_per_chip: u32,
    pub planes_per_die: u32,
    pub ccores_per_die: u32,
    /// Data area of one page, bytes.
    pub page_size: u32,
    /// Spare (out-of-band) area of one page, bytes.
    pub spare_size: u32,
    pub block_pages: u32,
    #[serde(default = "default_blocks_per_plane")]
    pub blocks_per_plane: u32,
}

fn default_blocks_per_plane() -> u32 {
    2048
}

impl FlashGeometry {
    /// Compute cores attached to one channel.
    pub fn ccore_num(&self) -> u32 {
        self.chips_per_channel * self.dies_per_chip * self.ccores_per_die
    }

    pub fn dies_per_channel(&self) -> u32 {
        self.chips_per_channel * self.dies_per_chip
    }

    pub fn total_cores(&self) -> u32 {
        self.channel_num * self.ccore_num()
    }

    pub fn total_dies(&self) -> u32 {
        self.channel_num * self.dies_per_channel()
    }

    pub fn total_planes(&self) -> u32 {
        self.total_dies() * self.planes_per_die
    }

    pub fn pages_per_plane(&self) -> u64 {
        u64::from(self.blocks_per_plane) * u64::from(self.block_pages)
    }

    pub fn capacity_bytes(&self) -> u64 {
        u64::from(self.total_planes()) * self.pages_per_plane() * u64::from(self.page_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlashTiming {
    /// Array read latency tR, µs.
    pub t_read: f64,
    /// Channel transfers per second.
    pub channel_rate: f64,
    /// Channel bus width, bits.
    pub bus_width: u32,
}

impl FlashTiming {
    /// Channel bandwidth in bytes/µs.
    pub fn bw_channel(&self) -> f64 {
        self.channel_rate * f64::from(self.bus_width) / 8.0 / 1e6
    }

    pub fn t_read_ns(&self) -> Nanos {
        (self.t_read * 1000.0).round() as Nanos
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostConfig {
    /// NPU throughput, operations per µs (2 TOPS = 2e6).
    pub npu_ops_per_us: f64,
    /// DRAM bandwidth, bytes/µs.
    pub dram_bw: f64,
    /// Combined input + output buffer of one compute core, bytes.
    #[serde(default = "default_io_buffer")]
    pub input_output_buffer: u64,
    /// In-die compute core throughput, operations per µs. When absent the
    /// core is sized to finish one page of work in exactly tR.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub core_ops_per_us: Option<f64>,
}

fn default_io_buffer() -> u64 {
    2048
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationSpec {
    pub weight_bits: u32,
    pub activation_bits: u32,
}

impl Default for QuantizationSpec {
    fn default() -> Self {
        Self::W8A8
    }
}

impl QuantizationSpec {
    pub const W8A8: Self = Self {
        weight_bits: 8,
        activation_bits: 8,
    };
    pub const W4A16: Self = Self {
        weight_bits: 4,
        activation_bits: 16,
    };

    pub fn activation_bytes(&self) -> u64 {
        u64::from(self.activation_bits / 8)
    }

    /// Bytes for `elements` weights, rounded up to whole bytes.
    pub fn weight_bytes(&self, elements: u64) -> u64 {
        (elements * u64::from(self.weight_bits)).div_ceil(8)
    }
}

impl std::str::FromStr for QuantizationSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "w8a8" | "int8" => Ok(Self::W8A8),
            "w4a16" => Ok(Self::W4A16),
            _ => Err(format!("unknown quantization `{s}` (expected w8a8 or w4a16)")),
        }
    }
}

impl std::fmt::Display for QuantizationSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "W{}A{}", self.weight_bits, self.activation_bits)
    }
}

/// Per-path energy coefficients. Only ratios between configurations are
/// meaningful; the defaults are placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyCoefficients {
    /// pJ per byte moved over a flash channel.
    #[serde(default = "one")]
    pub flash_channel: f64,
    /// pJ per byte over the on-package die-to-die link.
    #[serde(default = "one")]
    pub d2d: f64,
    /// pJ per byte of DRAM traffic.
    #[serde(default = "four")]
    pub dram: f64,
    /// pJ per byte over an off-package storage interconnect (offload baseline).
    #[serde(default = "ten")]
    pub baseline_interconnect: f64,
    /// pJ per arithmetic operation.
    #[serde(default = "tenth")]
    pub compute: f64,
}

fn one() -> f64 {
    1.0
}
fn four() -> f64 {
    4.0
}
fn ten() -> f64 {
    10.0
}
fn tenth() -> f64 {
    0.1
}

impl Default for EnergyCoefficients {
    fn default() -> Self {
        Self {
            flash_channel: one(),
            d2d: one(),
            dram: four(),
            baseline_interconnect: ten(),
            compute: tenth(),
        }
    }
}

impl EnergyCoefficients {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            flash_channel: self.flash_channel * factor,
            d2d: self.d2d * factor,
            dram: self.dram * factor,
            baseline_interconnect: self.baseline_interconnect * factor,
            compute: self.compute * factor,
        }
    }
}

/// Complete, validated hardware description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub flash: FlashGeometry,
    pub timing: FlashTiming,
    pub host: HostConfig,
    #[serde(default)]
    pub quant: QuantizationSpec,
    #[serde(default)]
    pub energy: EnergyCoefficients,
}

/// Built-in hardware presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    S,
    M,
    L,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::S, Preset::M, Preset::L];
}

impl std::str::FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S" => Ok(Preset::S),
            "M" => Ok(Preset::M),
            "L" => Ok(Preset::L),
            _ => Err(ConfigError::UnknownPreset(s.to_string())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Preset::S => "S",
            Preset::M => "M",
            Preset::L => "L",
        };
        f.write_str(s)
    }
}

/// Returns a preset configuration.
pub fn preset(p: Preset) -> SystemConfig {
    let (channels, chips) = match p {
        Preset::S => (8, 2),
        Preset::M => (16, 4),
        Preset::L => (32, 8),
    };
    SystemConfig {
        flash: FlashGeometry {
            channel_num: channels,
            chips_per_channel: chips,
            dies_per_chip: 2,
            planes_per_die: 2,
            ccores_per_die: 1,
            page_size: 16384,
            spare_size: 1664,
            block_pages: 256,
            blocks_per_plane: default_blocks_per_plane(),
        },
        timing: FlashTiming {
            t_read: 30.0,
            channel_rate: 1e9,
            bus_width: 8,
        },
        host: HostConfig {
            npu_ops_per_us: 2e6,
            dram_bw: 40_000.0,
            input_output_buffer: default_io_buffer(),
            core_ops_per_us: None,
        },
        quant: QuantizationSpec::W8A8,
        energy: EnergyCoefficients::default(),
    }
}

/// Looks up a preset by name.
pub fn preset_by_name(name: &str) -> Result<SystemConfig, ConfigError> {
    Ok(preset(name.parse()?))
}

/// Parses and validates a configuration document.
pub fn load_config(text: &str) -> Result<SystemConfig, ConfigError> {
    let cfg: SystemConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file(path: &Path) -> Result<SystemConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_config(&text)
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = &self.flash;
        let counts: [(&'static str, u32); 7] = [
            ("flash.channel_num", f.channel_num),
            ("flash.chips_per_channel", f.chips_per_channel),
            ("flash.dies_per_chip", f.dies_per_chip),
            ("flash.planes_per_die", f.planes_per_die),
            ("flash.ccores_per_die", f.ccores_per_die),
            ("flash.block_pages", f.block_pages),
            ("flash.blocks_per_plane", f.blocks_per_plane),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        if f.ccores_per_die > f.planes_per_die {
            return Err(invalid(
                "flash.ccores_per_die",
                "cannot exceed planes_per_die (each core is fed by its own planes)",
            ));
        }
        if !f.page_size.is_power_of_two() || f.page_size < 4096 {
            return Err(invalid(
                "flash.page_size",
                format!("{} is not a power of two >= 4096", f.page_size),
            ));
        }
        let t = &self.timing;
        if !(t.t_read.is_finite() && t.t_read > 0.0) {
            return Err(invalid("timing.t_read", "must be > 0"));
        }
        if t.t_read_ns() == 0 {
            return Err(invalid("timing.t_read", "rounds to 0 ns"));
        }
        if !(t.channel_rate.is_finite() && t.channel_rate > 0.0) {
            return Err(invalid("timing.channel_rate", "must be > 0"));
        }
        if t.bus_width == 0 {
            return Err(invalid("timing.bus_width", "must be > 0"));
        }
        let h = &self.host;
        if !(h.npu_ops_per_us.is_finite() && h.npu_ops_per_us > 0.0) {
            return Err(invalid("host.npu_ops_per_us", "must be > 0"));
        }
        if !(h.dram_bw.is_finite() && h.dram_bw > 0.0) {
            return Err(invalid("host.dram_bw", "must be > 0"));
        }
        if h.input_output_buffer == 0 {
            return Err(invalid("host.input_output_buffer", "must be > 0"));
        }
        if let Some(c) = h.core_ops_per_us {
            if !(c.is_finite() && c > 0.0) {
                return Err(invalid("host.core_ops_per_us", "must be > 0"));
            }
        }
        let q = &self.quant;
        if q.weight_bits != 4 && q.weight_bits != 8 {
            return Err(invalid("quant.weight_bits", "must be 4 or 8"));
        }
        if q.activation_bits != 8 && q.activation_bits != 16 {
            return Err(invalid("quant.activation_bits", "must be 8 or 16"));
        }
        let e = &self.energy;
        let energies: [(&'static str, f64); 5] = [
            ("energy.flash_channel", e.flash_channel),
            ("energy.d2d", e.d2d),
            ("energy.dram", e.dram),
            ("energy.baseline_interconnect", e.baseline_interconnect),
            ("energy.compute", e.compute),
        ];
        for (key, v) in energies {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(key, "must be a finite value >= 0"));
            }
        }
        Ok(())
    }

    /// Serializes to the same document format [`load_config`] accepts.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn bw_channel(&self) -> f64 {
        self.timing.bw_channel()
    }

    pub fn elements_per_page(&self) -> u64 {
        u64::from(self.flash.page_size) * 8 / u64::from(self.quant.weight_bits)
    }

    /// Operations for one page-sized GeMV (one multiply and one add per weight).
    pub fn page_ops(&self) -> u64 {
        2 * self.elements_per_page()
    }

    pub fn core_ops_per_us(&self) -> f64 {
        self.host
            .core_ops_per_us
            .unwrap_or_else(|| self.page_ops() as f64 / self.timing.t_read)
    }

    pub fn compute_ns(&self) -> Nanos {
        let us = self.page_ops() as f64 / self.core_ops_per_us();
        ceil_ns(us)
    }

    /// Channel occupancy for `bytes`, rounded up to whole nanoseconds.
    pub fn transfer_ns(&self, bytes: u64) -> Nanos {
        ceil_ns(bytes as f64 / self.bw_channel())
    }

    /// Aggregate rate at which all compute cores consume weight bytes, bytes/µs.
    pub fn aggregate_core_bandwidth(&self) -> f64 {
        f64::from(self.flash.total_cores()) * f64::from(self.flash.page_size) / self.timing.t_read
    }

    pub fn with_quant(mut self, quant: QuantizationSpec) -> Self {
        self.quant = quant;
        self
    }
}

/// Converts µs to ns, rounding up; values within 1e-6 ns of an integer are
/// snapped so exact decimal inputs do not round up spuriously.
pub fn ceil_ns(us: f64) -> Nanos {
    let ns = us * 1000.0;
    let r = ns.round();
    if (ns - r).abs() < 1e-6 {
        r as Nanos
    } else {
        ns.ceil() as Nanos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_s_derived_quantities() {
        let c = preset(Preset::S);
        c.validate().unwrap();
        assert_eq!(c.flash.ccore_num(), 4);
        assert_eq!(c.bw_channel(), 1000.0);
        assert_eq!(c.flash.total_cores(), 32);
        assert_eq!(c.timing.t_read_ns(), 30_000);
        assert_eq!(c.compute_ns(), 30_000);
        assert_eq!(c.elements_per_page(), 16384);
        assert_eq!(c.page_ops(), 32768);
    }

    #[test]
    fn preset_counts() {
        let m = preset(Preset::M);
        assert_eq!((m.flash.channel_num, m.flash.chips_per_channel), (16, 4));
        let l = preset(Preset::L);
        assert_eq!((l.flash.channel_num, l.flash.chips_per_channel), (32, 8));
        assert_eq!(l.flash.ccore_num(), 16);
        assert_eq!(l.flash.total_cores(), 512);
    }

    #[test]
    fn zero_channels_rejected() {
        let mut c = preset(Preset::S);
        c.flash.channel_num = 0;
        let err = load_config(&c.to_text()).unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Invalid {
                key: "flash.channel_num",
                ..
            }
        ));
    }

    #[test]
    fn unknown_key_rejected() {
        let text = preset(Preset::S).to_text().replace("[timing]", "[timing]\nfoo = 3");
        assert!(matches!(load_config(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn malformed_document() {
        assert!(matches!(load_config("[flash\nx="), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn bad_page_size_and_bits() {
        let mut c = preset(Preset::S);
        c.flash.page_size = 12000;
        assert!(c.validate().is_err());
        let mut c = preset(Preset::S);
        c.quant.weight_bits = 2;
        assert!(matches!(
            c.validate(),
            Err(ConfigError::Invalid {
                key: "quant.weight_bits",
                ..
            })
        ));
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(preset_by_name("XL"), Err(ConfigError::UnknownPreset(_))));
        assert_eq!(preset_by_name("m").unwrap(), preset(Preset::M));
    }

    #[test]
    fn transfer_time_is_exact_for_integral_rates() {
        let c = preset(Preset::S);
        assert_eq!(c.transfer_ns(256), 256);
        assert_eq!(c.transfer_ns(16384), 16384);
        assert_eq!(ceil_ns(30.256), 30_256);
    }

    #[test]
    fn w4a16_elements() {
        let c = preset(Preset::S).with_quant(QuantizationSpec::W4A16);
        assert_eq!(c.elements_per_page(), 32768);
        assert_eq!(c.compute_ns(), 30_000);
    }
}
