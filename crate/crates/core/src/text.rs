//! Word-level language encoder: embeddings, a left-to-right GRU and one
//! multi-head self-attention layer with a residual connection.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init, ParamKind, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Dense token ids; 0 is `<pad>` and 1 is `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, usize>", into = "BTreeMap<String, usize>")]
pub struct Vocabulary {
    ids: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Specials first, then the distinct words in sorted order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut sorted: Vec<String> = words.into_iter().map(str::to_lowercase).collect();
        sorted.sort();
        sorted.dedup();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(sorted.into_iter().filter(|w| w != PAD_TOKEN && w != UNK_TOKEN));
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { ids, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lowercases, splits on whitespace and maps out-of-vocabulary words to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(UNK))
            .collect();
        if ids.is_empty() {
            return Err(Error::Input("empty expression".into()));
        }
        Ok(ids)
    }
}

impl TryFrom<BTreeMap<String, usize>> for Vocabulary {
    type Error = String;

    fn try_from(ids: BTreeMap<String, usize>) -> std::result::Result<Self, String> {
        let mut tokens = vec![None; ids.len()];
        for (t, &i) in &ids {
            match tokens.get_mut(i) {
                Some(slot @ None) => *slot = Some(t.clone()),
                _ => return Err(format!("vocabulary ids are not dense: {t} -> {i}")),
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(Option::unwrap).collect();
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN) {
            return Err("ids 0 and 1 must be <pad> and <unk>".into());
        }
        Ok(Self { ids, tokens })
    }
}

impl From<Vocabulary> for BTreeMap<String, usize> {
    fn from(v: Vocabulary) -> Self {
        v.ids
    }
}

/// A right-padded batch of token id sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    /// `[batch, len]`, padded with [`PAD`].
    pub ids: Vec<usize>,
    /// `[batch, len]`, true on real tokens.
    pub mask: Vec<bool>,
    /// Indices of sequences that were cut to `max_len`.
    pub truncated: Vec<usize>,
}

impl TokenBatch {
    pub fn new(seqs: &[Vec<usize>], max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty token batch".into()));
        }
        if let Some(i) = seqs.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!("sequence {i} is empty")));
        }
        let mut truncated = Vec::new();
        for (i, s) in seqs.iter().enumerate() {
            if s.len() > max_len {
                log::warn!("expression {i} has {} tokens; truncating to {max_len}", s.len());
                truncated.push(i);
            }
        }
        let len = seqs.iter().map(|s| s.len().min(max_len)).max().unwrap_or(1);
        let mut ids = vec![PAD; seqs.len() * len];
        let mut mask = vec![false; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &id) in s.iter().take(len).enumerate() {
                ids[b * len + t] = id;
                mask[b * len + t] = true;
            }
        }
        Ok(Self { batch: seqs.len(), len, ids, mask, truncated })
    }

    /// Appends `extra` pad positions to every sequence.
    pub fn padded(&self, extra: usize) -> Self {
        let len = self.len + extra;
        let mut ids = vec![PAD; self.batch * len];
        let mut mask = vec![false; self.batch * len];
        for b in 0..self.batch {
            ids[b * len..b * len + self.len].copy_from_slice(&self.ids[b * self.len..(b + 1) * self.len]);
            mask[b * len..b * len + self.len].copy_from_slice(&self.mask[b * self.len..(b + 1) * self.len]);
        }
        Self { batch: self.batch, len, ids, mask, truncated: self.truncated.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { embed_dim: 64, hidden: 64, heads: 2, max_len: 16 }
    }
}

/// Encoded text on a tape: `features` is `[B, l, d]` with zero pad rows,
/// `pooled` the masked mean `[B, d]`.
#[derive(Clone, Debug)]
pub struct TextVars {
    pub features: Var,
    pub pooled: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
}

impl TextVars {
    /// Wraps externally supplied features `[B, l, d]`, bypassing the encoder.
    pub fn from_features<T: Scalar>(g: &mut Graph<T>, features: Var, mask: &[bool]) -> Result<Self> {
        let s = g.shape(features).to_vec();
        if s.len() != 3 || s[0] * s[1] != mask.len() {
            return Err(Error::shape(format!("text features {s:?} vs mask of {}", mask.len())));
        }
        let features = g.mask_rows(features, mask)?;
        let pooled = g.masked_mean(features, mask)?;
        Ok(Self { features, pooled, mask: mask.to_vec(), batch: s[0], len: s[1], dim: s[2] })
    }

    pub fn to_features<T: Scalar>(&self, g: &Graph<T>) -> Vec<TextFeatures<T>> {
        let all = g.value(self.features);
        let pooled = g.value(self.pooled);
        let (l, d) = (self.len, self.dim);
        (0..self.batch)
            .map(|b| TextFeatures {
                features: Tensor::new([l, d], all[b * l * d..(b + 1) * l * d].to_vec()).expect("shape"),
                mask: self.mask[b * l..(b + 1) * l].to_vec(),
                pooled: Tensor::new([d], pooled[b * d..(b + 1) * d].to_vec()).expect("shape"),
            })
            .collect()
    }
}

/// Plain-value encoder output for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures<T> {
    pub features: Tensor<T>,
    pub mask: Vec<bool>,
    pub pooled: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: TextConfig,
    pub vocab_size: usize,
    prefix: String,
}

const GATES: [&str; 3] = ["z", "r", "n"];

impl TextEncoder {
    pub fn new(cfg: TextConfig, vocab_size: usize) -> Result<Self> {
        if cfg.hidden % cfg.heads != 0 {
            return Err(Error::config(format!(
                "text hidden size {} not divisible by {} heads",
                cfg.hidden, cfg.heads
            )));
        }
        Ok(Self { cfg, vocab_size, prefix: "text".into() })
    }

    fn name(&self, t: &str) -> String {
        format!("{}.{t}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let (e, d) = (self.cfg.embed_dim, self.cfg.hidden);
        store.insert(self.name("embedding"), ParamKind::Trainable, init::uniform(&[self.vocab_size, e], 1.0, rng))?;
        for gate in GATES {
            store.insert(self.name(&format!("gru.w_x{gate}")), ParamKind::Trainable, init::fan_in(&[e, d], d, rng))?;
            store.insert(self.name(&format!("gru.w_h{gate}")), ParamKind::Trainable, init::fan_in(&[d, d], d, rng))?;
            store.insert(self.name(&format!("gru.b_x{gate}")), ParamKind::Trainable, Tensor::zeros([d]))?;
            store.insert(self.name(&format!("gru.b_h{gate}")), ParamKind::Trainable, Tensor::zeros([d]))?;
        }
        for p in ["q", "k", "v", "o"] {
            store.insert(self.name(&format!("attn.w_{p}")), ParamKind::Trainable, init::fan_in(&[d, d], d, rng))?;
        }
        Ok(())
    }

    fn affine<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = s.param(&self.name(w))?;
        let b = s.param(&self.name(b))?;
        let y = s.graph.matmul(x, w)?;
        s.graph.add_bias(y, b)
    }

    /// Encodes a batch into `[B, l, d]` features, masked rows exactly zero.
    pub fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, tokens: &TokenBatch) -> Result<TextVars> {
        let (bsz, l, d) = (tokens.batch, tokens.len, self.cfg.hidden);
        let table = s.param(&self.name("embedding"))?;
        let mut h = s.graph.constant(Tensor::zeros([bsz, d]));
        let mut steps = Vec::with_capacity(l);
        for t in 0..l {
            let ids: Vec<usize> = (0..bsz).map(|b| tokens.ids[b * l + t]).collect();
            let x = s.graph.embedding(table, &ids)?;
            let xz = self.affine(s, x, "gru.w_xz", "gru.b_xz")?;
            let hz = self.affine(s, h, "gru.w_hz", "gru.b_hz")?;
            let z = s.graph.add(xz, hz)?;
            let z = s.graph.sigmoid(z);
            let xr = self.affine(s, x, "gru.w_xr", "gru.b_xr")?;
            let hr = self.affine(s, h, "gru.w_hr", "gru.b_hr")?;
            let r = s.graph.add(xr, hr)?;
            let r = s.graph.sigmoid(r);
            let xn = self.affine(s, x, "gru.w_xn", "gru.b_xn")?;
            let hn = self.affine(s, h, "gru.w_hn", "gru.b_hn")?;
            let rhn = s.graph.mul(r, hn)?;
            let n = s.graph.add(xn, rhn)?;
            let n = s.graph.tanh(n);
            // h' = (1 - z) n + z h = n + z (h - n)
            let diff = s.graph.sub(h, n)?;
            let zd = s.graph.mul(z, diff)?;
            h = s.graph.add(n, zd)?;
            steps.push(h);
        }
        let seq = s.graph.stack(&steps)?;

        let heads = self.cfg.heads;
        let wq = s.param(&self.name("attn.w_q"))?;
        let wk = s.param(&self.name("attn.w_k"))?;
        let wv = s.param(&self.name("attn.w_v"))?;
        let wo = s.param(&self.name("attn.w_o"))?;
        let q = s.graph.matmul(seq, wq)?;
        let k = s.graph.matmul(seq, wk)?;
        let v = s.graph.matmul(seq, wv)?;
        let q = split_heads(&mut s.graph, q, heads)?;
        let k = split_heads(&mut s.graph, k, heads)?;
        let v = split_heads(&mut s.graph, v, heads)?;
        let logits = s.graph.bmm(q, k, false, true)?;
        let logits = s.graph.scale(logits, 1.0 / ((d / heads) as f64).sqrt());
        let attn = s.graph.softmax(logits, Some(&tokens.mask))?;
        let ctx = s.graph.bmm(attn, v, false, false)?;
        let ctx = merge_heads(&mut s.graph, ctx, bsz, heads)?;
        let out = s.graph.matmul(ctx, wo)?;
        let y = s.graph.add(seq, out)?;
        s.capture(&self.prefix, "self_attention", attn);
        TextVars::from_features(&mut s.graph, y, &tokens.mask)
    }
}

/// `[B, n, d] -> [B*H, n, d/H]`.
pub fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] % heads != 0 {
        return Err(Error::shape(format!("cannot split {s:?} into {heads} heads")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, n, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, n, d / heads])
}

/// `[B*H, n, d/H] -> [B, n, d]`.
pub fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, n, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch, n, heads * dh])
}
