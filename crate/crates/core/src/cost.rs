//! Parameter and multiply-accumulate accounting.
//!
//! One FLOP here is one multiply-accumulate. Element-wise work (activations,
//! softmax, normalisation, bias adds, pooling) is not counted. The counts
//! mirror exactly what the tape records through [`crate::flops`], which the
//! tests use as an independent check.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laconv::Generation;
use crate::net::{block_name, HeadKind, NetConfig, ANSWERS};
use crate::text::TextConfig;

/// A layer description. Deserialising an unknown `kind` is an error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    /// Per-position affine map.
    Linear { d_in: usize, d_out: usize, bias: bool },
    StandardConv { kernel: usize, d_in: usize, d_out: usize },
    /// Static depth-wise convolution (one `k x k` filter per channel).
    DepthwiseConv { kernel: usize, d: usize },
    /// Dynamic depth-wise convolution; its kernels are generated, not stored.
    DynamicConv { kernel: usize, d: usize, groups: usize },
    /// The LaConv kernel generator for `text_len` words of width `d_text`.
    Generator {
        d: usize,
        d_text: usize,
        kernel: usize,
        groups: usize,
        packing: usize,
        text_len: usize,
        generation: Generation,
    },
    /// `BN(relu(BN(x W_in)) W_out)` with 4x expansion.
    Mlp { d: usize },
    BatchNorm { d: usize },
    MaxPool,
    /// Softmax-weighted sum over positions.
    AttentivePool { d: usize },
}

impl Layer {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::config(format!("bad layer description: {e}")))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "linear",
            Layer::StandardConv { .. } => "standard_conv",
            Layer::DepthwiseConv { .. } => "depthwise_conv",
            Layer::DynamicConv { .. } => "dynamic_conv",
            Layer::Generator { .. } => "generator",
            Layer::Mlp { .. } => "mlp",
            Layer::BatchNorm { .. } => "batch_norm",
            Layer::MaxPool => "max_pool",
            Layer::AttentivePool { .. } => "attentive_pool",
        }
    }
}

/// Trainable parameter count; independent of resolution.
pub fn params_of(layer: &Layer) -> u64 {
    let p = match *layer {
        Layer::Linear { d_in, d_out, bias } => d_in * d_out + if bias { d_out } else { 0 },
        Layer::StandardConv { kernel: k, d_in, d_out } => k * k * d_in * d_out,
        Layer::DepthwiseConv { kernel: k, d } => k * k * d,
        Layer::DynamicConv { .. } | Layer::MaxPool | Layer::AttentivePool { .. } => 0,
        Layer::Generator { d, d_text, kernel: k, groups: g, packing: s, generation, .. } => {
            let head = d * k * k * g + k * k * g;
            let cond = d_text * d + d * d;
            match generation {
                Generation::Conditioned => s * s * d * d + d_text * d + cond + head,
                Generation::LanguageOnly => cond + head,
            }
        }
        Layer::Mlp { d } => 8 * d * d + 10 * d,
        Layer::BatchNorm { d } => 2 * d,
    };
    p as u64
}

/// Multiply-accumulates for one example at resolution `h x w`.
pub fn flops_of(layer: &Layer, h: usize, w: usize) -> u64 {
    let hw = h * w;
    let f = match *layer {
        Layer::Linear { d_in, d_out, .. } => hw * d_in * d_out,
        Layer::StandardConv { kernel: k, d_in, d_out } => hw * k * k * d_in * d_out,
        Layer::DepthwiseConv { kernel: k, d } | Layer::DynamicConv { kernel: k, d, .. } => hw * k * k * d,
        Layer::Generator { d, d_text, kernel: k, groups: g, packing: s, text_len: l, generation } => {
            let head = k * k * g * d;
            match generation {
                Generation::Conditioned => {
                    let n = hw / (s * s);
                    // X W_X, Y W_Y, Q K^T, Y W_A, A V, (.) W_C, C W_1
                    n * s * s * d * d + 2 * l * d_text * d + 2 * n * l * d + n * d * d + hw * head
                }
                Generation::LanguageOnly => d_text * d + d * d + head,
            }
        }
        Layer::Mlp { d } => 8 * hw * d * d,
        Layer::AttentivePool { d } => hw * d,
        Layer::BatchNorm { .. } | Layer::MaxPool => 0,
    };
    f as u64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
    /// Resolution the layer runs at.
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub config: String,
    pub text_len: usize,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    /// Rows of the visual backbone: stem, pools, projections and blocks.
    pub fn backbone(&self) -> impl Iterator<Item = &CostRow> {
        self.rows.iter().filter(|r| r.name.starts_with("stem") || r.name.starts_with("stage"))
    }

    pub fn backbone_params(&self) -> u64 {
        self.backbone().map(|r| r.params).sum()
    }

    pub fn backbone_flops(&self) -> u64 {
        self.backbone().map(|r| r.flops).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,params,flops\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.name, r.kind, r.params, r.flops);
        }
        let _ = writeln!(s, "total,,{},{}", self.total_params(), self.total_flops());
        s
    }

    pub fn to_table(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let mut s = format!("{} (text length {})\n", self.config, self.text_len);
        let _ = writeln!(s, "{:<name_w$}  {:<14}  {:>6}  {:>14}  {:>16}", "layer", "kind", "res", "params", "flops");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<name_w$}  {:<14}  {:>6}  {:>14}  {:>16}",
                r.name,
                r.kind,
                format!("{0}x{0}", r.resolution),
                r.params,
                r.flops
            );
        }
        let _ = writeln!(s, "{:<name_w$}  {:<14}  {:>6}  {:>14}  {:>16}", "backbone", "", "", self.backbone_params(), self.backbone_flops());
        let _ = writeln!(s, "{:<name_w$}  {:<14}  {:>6}  {:>14}  {:>16}", "total", "", "", self.total_params(), self.total_flops());
        s
    }
}

/// Per-layer costs of the backbone and head of `cfg` for one example with
/// `text_len` words. The text encoder is reported separately by [`text_encoder`].
pub fn report(cfg: &NetConfig, text_len: usize) -> Result<CostReport> {
    let shapes = cfg.audit()?;
    let mut rows = Vec::new();
    let row = |name: String, layer: Layer, res: usize| CostRow {
        name,
        kind: layer.kind(),
        params: params_of(&layer),
        flops: flops_of(&layer, res, res),
        resolution: res,
    };
    let mut push = |name: String, layer: Layer, res: usize| rows.push(row(name, layer, res));
    push("stem".into(), Layer::Linear { d_in: cfg.in_channels, d_out: cfg.stem_dim, bias: true }, cfg.resolution);
    for (i, (st, shape)) in cfg.stages.iter().zip(&shapes).enumerate() {
        let (res, d) = (shape.resolution, st.channels);
        push(format!("stage{}.pool", i + 1), Layer::MaxPool, res);
        let din = cfg.stage_input(i);
        if din != d {
            push(format!("stage{}.proj", i + 1), Layer::Linear { d_in: din, d_out: d, bias: true }, res);
        }
        for j in 0..st.blocks {
            let b = block_name(i + 1, j + 1);
            let generator = Layer::Generator {
                d,
                d_text: cfg.text.hidden,
                kernel: st.kernel,
                groups: st.groups,
                packing: st.packing,
                text_len,
                generation: cfg.generation,
            };
            push(format!("{b}.generator"), generator, res);
            push(format!("{b}.dyconv"), Layer::DynamicConv { kernel: st.kernel, d, groups: st.groups }, res);
            push(format!("{b}.bn"), Layer::BatchNorm { d }, res);
            push(format!("{b}.mlp"), Layer::Mlp { d }, res);
        }
    }
    let (res, d, dt) = (cfg.final_resolution(), cfg.final_channels(), cfg.text.hidden);
    match cfg.head {
        HeadKind::Locate => push("head.locate".into(), Layer::Linear { d_in: d, d_out: 1, bias: true }, res),
        HeadKind::Answer => {
            push("head.answer.score".into(), Layer::Linear { d_in: d, d_out: 1, bias: true }, res);
            push("head.answer.pool".into(), Layer::AttentivePool { d }, res);
            push("head.answer.proj".into(), Layer::Linear { d_in: d, d_out: dt, bias: true }, 1);
            push("head.answer.fc1".into(), Layer::Linear { d_in: dt, d_out: dt, bias: true }, 1);
            push("head.answer.fc2".into(), Layer::Linear { d_in: dt, d_out: ANSWERS, bias: true }, 1);
        }
    }
    Ok(CostReport { config: cfg.name.clone(), text_len, rows })
}

/// Cost of the text encoder over `text_len` words with a `vocab`-entry embedding table.
pub fn text_encoder(cfg: &TextConfig, vocab: usize, text_len: usize) -> CostRow {
    let (e, d, l) = (cfg.embed_dim, cfg.hidden, text_len);
    let params = vocab * e + 3 * (e * d + d * d + 2 * d) + 4 * d * d;
    let flops = l * 3 * (e * d + d * d) + 4 * l * d * d + 2 * l * l * d;
    CostRow { name: "text".into(), kind: "text_encoder", params: params as u64, flops: flops as u64, resolution: 1 }
}
