//! `ifc`: single runs, ablations and scalability sweeps of the hybrid
//! NPU + in-flash-computing decode model.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ifc_core::config::{load_config_file, preset, Preset, QuantizationSpec, SystemConfig};
use ifc_core::engine::{Strategy, DEFAULT_SLICE_BYTES};
use ifc_core::hostmodel::{
    doubling_range, plan_model, sweep, token_latency, trace_matrix, AlphaMode, Mode, RunOptions, SweepAxis,
    TokenReport, DEFAULT_SEQ_LEN,
};
use ifc_core::tiler::{ShapePolicy, TileShape};
use ifc_core::topology::{build_device, layout_weights};
use ifc_core::workload::{load_model_file, model_preset, ModelSpec};
use serde_json::{json, Value};

/// Environment variable naming the directory for output files when `--out`
/// is not given.
const OUT_DIR_ENV: &str = "IFC_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "ifc",
    version,
    about = "Hybrid NPU + in-flash-computing LLM decode simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one decode token.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write the event trace of the model's first weight matrix (TSV).
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        /// Write the page layout of every weight tile and NPU page (TSV).
        #[arg(long, value_name = "PATH")]
        layout: Option<PathBuf>,
        /// Write the tiling plan of every distinct weight matrix.
        #[arg(long, value_name = "PATH")]
        plan: Option<PathBuf>,
    },
    /// Vary the channel or chip count and report tokens/s per point.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        /// `LO..HI` (doubling steps) or a comma list such as `1,2,4`.
        #[arg(long, default_value = "1..128")]
        range: String,
        /// CSV output; defaults to the JSON path with a `.csv` extension.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Strategy b (unsliced reads) against strategy c (sliced reads).
    AblateSlicing {
        #[command(flatten)]
        common: Common,
    },
    /// Hybrid GeMV split against flash-only GeMV.
    AblateTiling {
        #[command(flatten)]
        common: Common,
    },
    /// The default tile shape against alternatives.
    AblateTileSize {
        #[command(flatten)]
        common: Common,
        /// Shapes to compare; the first is the reference.
        #[arg(long, value_delimiter = ',', default_value = "256x2048,128x4096,4096x128")]
        tiles: Vec<TileShape>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Hardware preset.
    #[arg(long, value_parser = parse_preset, conflicts_with = "config")]
    preset: Option<Preset>,
    /// Hardware config file (TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Model preset name or model file (TOML).
    #[arg(long, default_value = "opt-6.7b", value_name = "NAME|PATH")]
    model: String,
    #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
    seq_len: u64,
    #[arg(long, default_value = "simulate", value_parser = parse_mode)]
    mode: Mode,
    #[arg(long, default_value = "c", value_parser = parse_strategy)]
    strategy: Strategy,
    /// Fixed tile shape for every matrix instead of per-matrix planning.
    #[arg(long, value_name = "HxW")]
    tile: Option<TileShape>,
    /// Flash tile count rule: formula, balanced or autotune.
    #[arg(long, default_value = "balanced", value_parser = parse_alpha)]
    alpha: AlphaMode,
    /// Channel count; overrides the config.
    #[arg(long)]
    channels: Option<u32>,
    /// Chips per channel; overrides the config.
    #[arg(long)]
    chips: Option<u32>,
    /// Weight/activation quantization; overrides the config.
    #[arg(long, value_parser = parse_quant)]
    quant: Option<QuantizationSpec>,
    #[arg(long, default_value_t = DEFAULT_SLICE_BYTES)]
    slice_bytes: u64,
    /// Recorded in the output; every model in this tool is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON output path; stdout when absent and the output directory
    /// variable is unset.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse::<Preset>().map_err(|e| e.to_string())
}
fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}
fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}
fn parse_alpha(s: &str) -> Result<AlphaMode, String> {
    s.parse()
}
fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse()
}
fn parse_quant(s: &str) -> Result<QuantizationSpec, String> {
    s.parse()
}

struct Resolved {
    config: SystemConfig,
    source: String,
    model: ModelSpec,
    opts: RunOptions,
    seed: u64,
}

impl Common {
    fn resolve(&self) -> Result<Resolved> {
        let (mut config, source) = match &self.config {
            Some(p) => (
                load_config_file(p).with_context(|| format!("loading config {}", p.display()))?,
                p.display().to_string(),
            ),
            None => {
                let p = self.preset.unwrap_or(Preset::S);
                (preset(p), format!("preset {p}"))
            }
        };
        if let Some(q) = self.quant {
            config.quant = q;
        }
        if let Some(c) = self.channels {
            config.flash.channel_num = c;
        }
        if let Some(c) = self.chips {
            config.flash.chips_per_channel = c;
        }
        config.validate()?;
        let path = Path::new(&self.model);
        let model = if path.is_file() {
            load_model_file(path).with_context(|| format!("loading model {}", path.display()))?
        } else {
            model_preset(&self.model)?.0
        };
        let opts = RunOptions {
            strategy: self.strategy,
            mode: self.mode,
            alpha: self.alpha,
            shape: self.tile.map_or(ShapePolicy::Adaptive, ShapePolicy::Fixed),
            slice_bytes: self.slice_bytes,
            seq_len: self.seq_len,
        };
        Ok(Resolved {
            config,
            source,
            model,
            opts,
            seed: self.seed,
        })
    }

    fn out_path(&self, command: &str, r: &Resolved) -> Option<PathBuf> {
        self.out.clone().or_else(|| {
            std::env::var_os(OUT_DIR_ENV).map(|dir| {
                let src = r.source.replace([' ', '/', '\\'], "_");
                PathBuf::from(dir).join(format!("{command}-{src}-{}.json", r.model.name))
            })
        })
    }
}

fn header(command: &str, r: &Resolved) -> Value {
    json!({
        "command": command,
        "seed": r.seed,
        "config_source": r.source,
        "config": r.config,
        "model": r.model,
        "options": r.opts,
    })
}

fn emit(value: &Value, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => write_file(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn summary(label: &str, r: &TokenReport) -> Value {
    json!({
        "label": label,
        "tokens_per_s": r.tokens_per_s,
        "latency_us": r.latency_us,
        "channel_utilization": r.channel_utilization,
        "flash_byte_fraction": r.flash_byte_fraction,
    })
}

fn parse_range(s: &str) -> Result<Vec<u32>> {
    let values = if let Some((lo, hi)) = s.split_once("..") {
        let lo: u32 = lo.trim().parse().context("range start")?;
        let hi: u32 = hi.trim().parse().context("range end")?;
        doubling_range(lo, hi)
    } else {
        s.split(',')
            .map(|v| v.trim().parse::<u32>().context("range value"))
            .collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() || values.contains(&0) {
        bail!("empty or zero-valued range `{s}`");
    }
    Ok(values)
}

fn run(common: &Common, trace: Option<&Path>, layout: Option<&Path>, plan: Option<&Path>) -> Result<()> {
    let r = common.resolve()?;
    let report = token_latency(&r.config, &r.model, &r.opts)?;
    if let Some(p) = trace {
        let m = &r.model.matrices()[0];
        let tl = trace_matrix(m.h, m.w, &r.config, &r.opts)?;
        write_file(p, &tl.trace_tsv())?;
    }
    if layout.is_some() || plan.is_some() {
        let plans = plan_model(&r.config, &r.model, &r.opts)?;
        if let Some(p) = plan {
            let mut text = String::new();
            let mut seen = std::collections::BTreeSet::new();
            for (m, mp) in r.model.matrices().iter().zip(&plans) {
                if seen.insert((m.h, m.w)) {
                    let _ = writeln!(text, "# {}", m.name);
                    text += &mp.plan.export_text();
                    text.push('\n');
                }
            }
            write_file(p, &text)?;
        }
        if let Some(p) = layout {
            let device = build_device(&r.config)?;
            let tiling: Vec<_> = plans.into_iter().map(|m| m.plan).collect();
            write_file(p, &layout_weights(&tiling, &device)?.dump_text())?;
        }
    }
    let mut out = header("run", &r);
    out["report"] = serde_json::to_value(&report)?;
    emit(&out, common.out_path("run", &r).as_deref())
}

fn run_sweep(common: &Common, axis: SweepAxis, range: &str, csv: Option<&Path>) -> Result<()> {
    let r = common.resolve()?;
    let values = parse_range(range)?;
    let points = sweep(&r.config, &r.model, &r.opts, axis, &values);
    let mut rows = Vec::new();
    let mut text = format!("{axis},tokens_per_s,mean_utilization\n");
    for (v, p) in values.iter().zip(&points) {
        match p {
            Ok(p) => {
                let _ = writeln!(text, "{v},{},{}", p.tokens_per_s, p.channel_utilization);
                rows.push(serde_json::to_value(p)?);
            }
            Err(e) => {
                let _ = writeln!(text, "{v},,");
                rows.push(json!({ "value": v, "error": e.to_string() }));
            }
        }
    }
    let mut out = header("sweep", &r);
    out["axis"] = json!(axis);
    out["points"] = Value::Array(rows);
    let path = common.out_path("sweep", &r);
    let csv_path = csv
        .map(Path::to_path_buf)
        .or_else(|| path.as_ref().map(|p| p.with_extension("csv")));
    if let Some(c) = csv_path {
        write_file(&c, &text)?;
    }
    emit(&out, path.as_deref())?;
    if points.iter().all(Result::is_err) {
        bail!("every sweep point failed");
    }
    Ok(())
}

fn ablate_slicing(common: &Common) -> Result<()> {
    let r = common.resolve()?;
    let with = |s| RunOptions { strategy: s, ..r.opts };
    let b = token_latency(&r.config, &r.model, &with(Strategy::Unsliced))?;
    let c = token_latency(&r.config, &r.model, &with(Strategy::Sliced))?;
    let mut out = header("ablate-slicing", &r);
    out["variants"] = json!([summary("b", &b), summary("c", &c)]);
    out["speedup"] = json!(c.tokens_per_s / b.tokens_per_s);
    out["utilization_gain"] = json!(c.channel_utilization / b.channel_utilization - 1.0);
    emit(&out, common.out_path("ablate-slicing", &r).as_deref())
}

fn ablate_tiling(common: &Common) -> Result<()> {
    let r = common.resolve()?;
    let full = token_latency(&r.config, &r.model, &r.opts)?;
    let flash = token_latency(
        &r.config,
        &r.model,
        &RunOptions {
            strategy: Strategy::ComputeOnly,
            ..r.opts
        },
    )?;
    let mut out = header("ablate-tiling", &r);
    out["variants"] = json!([summary("hybrid", &full), summary("flash-only", &flash)]);
    out["speedup"] = json!(full.tokens_per_s / flash.tokens_per_s);
    emit(&out, common.out_path("ablate-tiling", &r).as_deref())
}

fn ablate_tile_size(common: &Common, tiles: &[TileShape]) -> Result<()> {
    let r = common.resolve()?;
    if tiles.is_empty() {
        bail!("no tile shapes given");
    }
    let reports: Vec<_> = tiles
        .iter()
        .map(|&t| {
            token_latency(
                &r.config,
                &r.model,
                &RunOptions {
                    shape: ShapePolicy::Fixed(t),
                    ..r.opts
                },
            )
        })
        .collect();
    let reference = reports[0]
        .as_ref()
        .map_err(|e| anyhow::anyhow!("reference tile {}: {e}", tiles[0]))?;
    let rows: Vec<Value> = tiles
        .iter()
        .zip(&reports)
        .map(|(t, rep)| match rep {
            Ok(rep) => {
                let mut v = summary(&t.to_string(), rep);
                v["reference_margin"] = json!(reference.tokens_per_s / rep.tokens_per_s - 1.0);
                v
            }
            Err(e) => json!({ "label": t.to_string(), "error": e.to_string() }),
        })
        .collect();
    let mut out = header("ablate-tile-size", &r);
    out["variants"] = Value::Array(rows);
    emit(&out, common.out_path("ablate-tile-size", &r).as_deref())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run {
            common,
            trace,
            layout,
            plan,
        } => run(common, trace.as_deref(), layout.as_deref(), plan.as_deref()),
        Command::Sweep {
            common,
            axis,
            range,
            csv,
        } => run_sweep(common, *axis, range, csv.as_deref()),
        Command::AblateSlicing { common } => ablate_slicing(common),
        Command::AblateTiling { common } => ablate_tiling(common),
        Command::AblateTileSize { common, tiles } => ablate_tile_size(common, tiles),
    }
}
