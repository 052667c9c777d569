//! Decoder-only LLM descriptions and the per-token decode operation graph.
//!
//! Matrices are `h x w` with `h` output rows and `w` input columns, so a GeMV
//! reads a `w`-element vector and produces `h` results.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::QuantizationSpec;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("model `{0}` has no weight matrices")]
    EmptyModel(String),
    #[error("model field `{0}` must be positive")]
    ZeroDim(&'static str),
    #[error("head count {heads} is not a multiple of kv heads {kv_heads}")]
    Heads { heads: u32, kv_heads: u32 },
    #[error("d_model {d_model} is not divisible by {heads} heads")]
    HeadDim { d_model: u64, heads: u32 },
    #[error("seq_len must be at least 1")]
    SeqLen,
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("model file: {0}")]
    Parse(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    /// `fc1` then `fc2` with a pointwise activation in between.
    Plain,
    /// `gate` and `up` projections multiplied elementwise, then `down`.
    Gated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub layer_count: u32,
    pub d_model: u64,
    pub ffn_dim: u64,
    pub head_count: u32,
    pub kv_head_count: u32,
    pub vocab_size: u64,
    pub ffn: FfnKind,
    /// Whether the LM head shares its weights with the token embedding.
    pub tied_embedding: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatrixSpec {
    pub name: String,
    pub layer: Option<u32>,
    pub h: u64,
    pub w: u64,
}

impl MatrixSpec {
    pub fn elements(&self) -> u64 {
        self.h * self.w
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    model: ModelSpec,
}

impl ModelSpec {
    pub fn head_dim(&self) -> u64 {
        self.d_model / u64::from(self.head_count.max(1))
    }

    pub fn kv_dim(&self) -> u64 {
        self.head_dim() * u64::from(self.kv_head_count)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.layer_count == 0 {
            return Err(WorkloadError::EmptyModel(self.name.clone()));
        }
        for (key, v) in [
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("head_count", u64::from(self.head_count)),
            ("kv_head_count", u64::from(self.kv_head_count)),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(WorkloadError::ZeroDim(key));
            }
        }
        if !self.head_count.is_multiple_of(self.kv_head_count) {
            return Err(WorkloadError::Heads {
                heads: self.head_count,
                kv_heads: self.kv_head_count,
            });
        }
        if !self.d_model.is_multiple_of(u64::from(self.head_count)) {
            return Err(WorkloadError::HeadDim {
                d_model: self.d_model,
                heads: self.head_count,
            });
        }
        Ok(())
    }

    /// Weight matrices of one transformer layer in execution order.
    pub fn layer_matrices(&self, layer: u32) -> Vec<MatrixSpec> {
        let d = self.d_model;
        let kv = self.kv_dim();
        let f = self.ffn_dim;
        let m = |name: &str, h, w| MatrixSpec {
            name: name.to_string(),
            layer: Some(layer),
            h,
            w,
        };
        let mut v = vec![
            m("q_proj", d, d),
            m("k_proj", kv, d),
            m("v_proj", kv, d),
            m("o_proj", d, d),
        ];
        match self.ffn {
            FfnKind::Plain => {
                v.push(m("fc1", f, d));
                v.push(m("fc2", d, f));
            }
            FfnKind::Gated => {
                v.push(m("gate_proj", f, d));
                v.push(m("up_proj", f, d));
                v.push(m("down_proj", d, f));
            }
        }
        v
    }

    pub fn lm_head(&self) -> MatrixSpec {
        MatrixSpec {
            name: "lm_head".into(),
            layer: None,
            h: self.vocab_size,
            w: self.d_model,
        }
    }

    /// Every weight GeMV of one decode step, LM head last.
    pub fn matrices(&self) -> Vec<MatrixSpec> {
        let mut v: Vec<MatrixSpec> = (0..self.layer_count).flat_map(|l| self.layer_matrices(l)).collect();
        v.push(self.lm_head());
        v
    }

    pub fn gemv_elements(&self) -> u64 {
        self.matrices().iter().map(MatrixSpec::elements).sum()
    }

    /// Parameters excluding biases and norms, counting an untied embedding table.
    pub fn param_count(&self) -> u64 {
        let embed = if self.tied_embedding {
            0
        } else {
            self.vocab_size * self.d_model
        };
        self.gemv_elements() + embed
    }

    pub fn weight_bytes_total(&self, quant: QuantizationSpec) -> u64 {
        quant.weight_bytes(self.gemv_elements())
    }

    /// KV cache bytes for `seq_len` tokens.
    pub fn kv_cache_bytes(&self, seq_len: u64, quant: QuantizationSpec) -> u64 {
        2 * u64::from(self.layer_count) * self.kv_dim() * seq_len * quant.activation_bytes()
    }
}

pub const MODEL_NAMES: [&str; 7] = [
    "opt-6.7b",
    "opt-13b",
    "opt-30b",
    "opt-66b",
    "llama2-7b",
    "llama2-13b",
    "llama2-70b",
];

/// Built-in model by name (case-insensitive), with the advertised size in
/// billions of parameters.
pub fn model_preset(name: &str) -> Result<(ModelSpec, f64), WorkloadError> {
    let opt = |name: &str, layers, d, heads, size| {
        (
            ModelSpec {
                name: name.into(),
                layer_count: layers,
                d_model: d,
                ffn_dim: 4 * d,
                head_count: heads,
                kv_head_count: heads,
                vocab_size: 50272,
                ffn: FfnKind::Plain,
                tied_embedding: true,
            },
            size,
        )
    };
    let llama = |name: &str, layers, d, ffn, heads, kv, size| {
        (
            ModelSpec {
                name: name.into(),
                layer_count: layers,
                d_model: d,
                ffn_dim: ffn,
                head_count: heads,
                kv_head_count: kv,
                vocab_size: 32000,
                ffn: FfnKind::Gated,
                tied_embedding: false,
            },
            size,
        )
    };
    Ok(match name.to_ascii_lowercase().as_str() {
        "opt-6.7b" => opt("OPT-6.7B", 32, 4096, 32, 6.7),
        "opt-13b" => opt("OPT-13B", 40, 5120, 40, 13.0),
        "opt-30b" => opt("OPT-30B", 48, 7168, 56, 30.0),
        "opt-66b" => opt("OPT-66B", 64, 9216, 72, 66.0),
        "llama2-7b" => llama("Llama2-7B", 32, 4096, 11008, 32, 32, 7.0),
        "llama2-13b" => llama("Llama2-13B", 40, 5120, 13824, 40, 40, 13.0),
        "llama2-70b" => llama("Llama2-70B", 80, 8192, 28672, 64, 8, 70.0),
        _ => return Err(WorkloadError::UnknownModel(name.to_string())),
    })
}

/// Parses a `[model]` document.
pub fn load_model(text: &str) -> Result<ModelSpec, WorkloadError> {
    let f: ModelFile = toml::from_str(text).map_err(|e| WorkloadError::Parse(e.to_string()))?;
    f.model.validate()?;
    Ok(f.model)
}

pub fn load_model_file(path: &Path) -> Result<ModelSpec, WorkloadError> {
    load_model(&std::fs::read_to_string(path)?)
}

pub fn model_to_text(model: &ModelSpec) -> String {
    #[derive(Serialize)]
    struct Out<'a> {
        model: &'a ModelSpec,
    }
    toml::to_string(&Out { model }).expect("model serializes")
}

/// Hardware class of a decode operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpClass {
    /// Weight GeMV split between flash cores and the NPU.
    WeightGemv,
    /// Attention score or weighted sum over the KV cache, on the NPU.
    KvMatrix,
    /// KV cache load from DRAM.
    KvLoad,
    /// Softmax, normalization, rotary and activation functions.
    Sfu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Op {
    pub id: usize,
    pub name: String,
    pub layer: Option<u32>,
    pub class: OpClass,
    /// Present for weight GeMVs.
    pub matrix: Option<MatrixSpec>,
    pub weight_bytes: u64,
    /// Bytes read from DRAM.
    pub dram_bytes: u64,
    pub ops: u64,
    pub deps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeGraph {
    pub model: String,
    pub seq_len: u64,
    pub ops: Vec<Op>,
}

impl DecodeGraph {
    pub fn of_class(&self, class: OpClass) -> impl Iterator<Item = &Op> {
        self.ops.iter().filter(move |o| o.class == class)
    }

    pub fn total_ops(&self, class: OpClass) -> u64 {
        self.of_class(class).map(|o| o.ops).sum()
    }

    pub fn kv_bytes(&self) -> u64 {
        self.of_class(OpClass::KvLoad).map(|o| o.dram_bytes).sum()
    }

    pub fn weight_bytes(&self) -> u64 {
        self.of_class(OpClass::WeightGemv).map(|o| o.weight_bytes).sum()
    }

    /// Dependencies always point to earlier ops, so list order is a
    /// topological order.
    pub fn is_topologically_ordered(&self) -> bool {
        self.ops
            .iter()
            .enumerate()
            .all(|(i, o)| o.id == i && o.deps.iter().all(|&d| d < i))
    }
}

struct GraphBuilder {
    ops: Vec<Op>,
}

impl GraphBuilder {
    fn push(&mut self, name: &str, layer: Option<u32>, class: OpClass, deps: &[usize]) -> usize {
        let id = self.ops.len();
        self.ops.push(Op {
            id,
            name: name.to_string(),
            layer,
            class,
            matrix: None,
            weight_bytes: 0,
            dram_bytes: 0,
            ops: 0,
            deps: deps.to_vec(),
        });
        id
    }

    fn gemv(&mut self, m: MatrixSpec, quant: QuantizationSpec, deps: &[usize]) -> usize {
        let id = self.push(&m.name.clone(), m.layer, OpClass::WeightGemv, deps);
        let op = &mut self.ops[id];
        op.weight_bytes = quant.weight_bytes(m.elements());
        op.ops = 2 * m.elements();
        op.matrix = Some(m);
        id
    }

    fn sfu(&mut self, name: &str, layer: Option<u32>, ops: u64, deps: &[usize]) -> usize {
        let id = self.push(name, layer, OpClass::Sfu, deps);
        self.ops[id].ops = ops;
        id
    }
}

/// Approximate SFU cost per element of a normalization, softmax, rotary or
/// activation function.
const SFU_OPS_PER_ELEMENT: u64 = 5;

/// Builds the operation graph of one decode step attending over `seq_len`
/// cached tokens.
pub fn build_decode_graph(
    model: &ModelSpec,
    seq_len: u64,
    quant: QuantizationSpec,
) -> Result<DecodeGraph, WorkloadError> {
    model.validate()?;
    if seq_len == 0 {
        return Err(WorkloadError::SeqLen);
    }
    let mut g = GraphBuilder { ops: Vec::new() };
    let d = model.d_model;
    let heads = u64::from(model.head_count);
    let head_dim = model.head_dim();
    let act = quant.activation_bytes();
    let mut prev: Option<usize> = None;
    for l in 0..model.layer_count {
        let mats = model.layer_matrices(l);
        let layer = Some(l);
        let norm = g.sfu(
            "attn_norm",
            layer,
            SFU_OPS_PER_ELEMENT * d,
            &prev.into_iter().collect::<Vec<_>>(),
        );
        let q = g.gemv(mats[0].clone(), quant, &[norm]);
        let k = g.gemv(mats[1].clone(), quant, &[norm]);
        let v = g.gemv(mats[2].clone(), quant, &[norm]);
        let qk_in = match model.ffn {
            FfnKind::Gated => {
                let rope = g.sfu("rotary", layer, SFU_OPS_PER_ELEMENT * (d + model.kv_dim()), &[q, k]);
                vec![rope]
            }
            FfnKind::Plain => vec![q, k],
        };
        let load = g.push("kv_load", layer, OpClass::KvLoad, &[]);
        g.ops[load].dram_bytes = 2 * seq_len * model.kv_dim() * act;
        let mut deps = qk_in.clone();
        deps.push(load);
        let score = g.push("attn_score", layer, OpClass::KvMatrix, &deps);
        g.ops[score].ops = 2 * heads * head_dim * seq_len;
        let softmax = g.sfu("softmax", layer, SFU_OPS_PER_ELEMENT * heads * seq_len, &[score]);
        let wsum = g.push("attn_value", layer, OpClass::KvMatrix, &[softmax, v, load]);
        g.ops[wsum].ops = 2 * heads * head_dim * seq_len;
        let o = g.gemv(mats[3].clone(), quant, &[wsum]);
        let norm2 = g.sfu("ffn_norm", layer, SFU_OPS_PER_ELEMENT * d, &[o]);
        let out = match model.ffn {
            FfnKind::Plain => {
                let fc1 = g.gemv(mats[4].clone(), quant, &[norm2]);
                let relu = g.sfu("relu", layer, model.ffn_dim, &[fc1]);
                g.gemv(mats[5].clone(), quant, &[relu])
            }
            FfnKind::Gated => {
                let gate = g.gemv(mats[4].clone(), quant, &[norm2]);
                let up = g.gemv(mats[5].clone(), quant, &[norm2]);
                let act_op = g.sfu("silu_mul", layer, SFU_OPS_PER_ELEMENT * model.ffn_dim, &[gate, up]);
                g.gemv(mats[6].clone(), quant, &[act_op])
            }
        };
        prev = Some(out);
    }
    let fin = g.sfu(
        "final_norm",
        None,
        SFU_OPS_PER_ELEMENT * d,
        &prev.into_iter().collect::<Vec<_>>(),
    );
    g.gemv(model.lm_head(), quant, &[fin]);
    Ok(DecodeGraph {
        model: model.name.clone(),
        seq_len,
        ops: g.ops,
    })
}

/// Weight-GeMV ops per weight byte for one decode step.
pub fn arithmetic_intensity(model: &ModelSpec, quant: QuantizationSpec) -> Result<f64, WorkloadError> {
    model.validate()?;
    let elems = model.gemv_elements();
    let bytes = quant.weight_bytes(elems);
    if bytes == 0 {
        return Err(WorkloadError::EmptyModel(model.name.clone()));
    }
    Ok((2 * elems) as f64 / bytes as f64)
}

/// Input bytes (weights plus input vector) over output bytes of an INT8 GeMV.
pub fn reduction_ratio(h: u64, w: u64) -> f64 {
    reduction_ratio_with(h, w, QuantizationSpec::W8A8)
}

pub fn reduction_ratio_with(h: u64, w: u64, quant: QuantizationSpec) -> f64 {
    let act = quant.activation_bytes();
    let input = quant.weight_bytes(h * w) + w * act;
    input as f64 / (h * act) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    const Q: QuantizationSpec = QuantizationSpec::W8A8;

    #[test]
    fn presets_match_advertised_sizes() {
        for name in MODEL_NAMES {
            let (m, size) = model_preset(name).unwrap();
            let b = m.param_count() as f64 / 1e9;
            assert!((b / size - 1.0).abs() < 0.05, "{name}: {b}");
        }
    }

    #[test]
    fn smallest_llama_matrix_is_16mb() {
        let (m, _) = model_preset("llama2-7b").unwrap();
        let smallest = m.matrices().iter().map(MatrixSpec::elements).min().unwrap();
        assert_eq!(smallest, 4096 * 4096);
        assert_eq!(Q.weight_bytes(smallest), 16 << 20);
    }

    #[test]
    fn weight_bytes_sum() {
        for name in MODEL_NAMES {
            let (m, _) = model_preset(name).unwrap();
            let g = build_decode_graph(&m, 64, Q).unwrap();
            assert_eq!(g.weight_bytes(), m.weight_bytes_total(Q));
            assert_eq!(g.of_class(OpClass::WeightGemv).count(), m.matrices().len());
            assert!(g.is_topologically_ordered());
        }
    }

    #[test]
    fn kv_is_linear_and_bounded() {
        let (m, _) = model_preset("llama2-70b").unwrap();
        let a = build_decode_graph(&m, 100, Q).unwrap().kv_bytes();
        let b = build_decode_graph(&m, 300, Q).unwrap().kv_bytes();
        assert_eq!(b, 3 * a);
        assert!(m.kv_cache_bytes(1000, Q) < 700_000_000);
        let one = build_decode_graph(&m, 1, Q).unwrap();
        assert_eq!(one.kv_bytes(), m.kv_cache_bytes(1, Q));
    }

    #[test]
    fn intensity() {
        let (m, _) = model_preset("opt-6.7b").unwrap();
        assert_eq!(arithmetic_intensity(&m, Q).unwrap(), 2.0);
        assert_eq!(arithmetic_intensity(&m, QuantizationSpec::W4A16).unwrap(), 4.0);
        let mut empty = m.clone();
        empty.layer_count = 0;
        assert!(arithmetic_intensity(&empty, Q).is_err());
    }

    #[test]
    fn reduction() {
        assert!((reduction_ratio(4096, 4096) - 4097.0).abs() < 1e-9);
        assert_eq!(reduction_ratio(1, 1), 2.0);
        let r = reduction_ratio(4096, 11008);
        assert!((r - (4096.0 * 11008.0 + 11008.0) / 4096.0).abs() < 1e-9);
    }

    #[test]
    fn model_file_roundtrip() {
        let (m, _) = model_preset("llama2-13b").unwrap();
        let text = model_to_text(&m);
        assert_eq!(load_model(&text).unwrap(), m);
        assert!(load_model("[model]\nname = \"x\"").is_err());
    }
}
