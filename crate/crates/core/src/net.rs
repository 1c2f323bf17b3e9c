//! LaConvNet: a linear stem followed by pool-separated stages of LaConv blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::laconv::{Generation, LaConvBlock, LaConvSpec};
use crate::params::{init, ParamKind, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};
use crate::text::{TextConfig, TextEncoder, TextVars, TokenBatch};

/// One stage: a 2x2 max pool, an optional channel projection, then `blocks` LaConv blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub kernel: usize,
    pub groups: usize,
    pub packing: usize,
    pub blocks: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Grid-cell classification over the final feature map.
    #[default]
    Locate,
    /// Attentive pooling plus an MLP over a fixed answer set.
    Answer,
}

/// Number of classes of the answer head: yes, no, 0..=5.
pub const ANSWERS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub name: String,
    pub resolution: usize,
    pub in_channels: usize,
    pub stem_dim: usize,
    /// Attention heads of every LaConv affinity.
    pub heads: usize,
    #[serde(default)]
    pub generation: Generation,
    pub text: TextConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub head: HeadKind,
}

/// Resolution and width of one stage after its pool, as derived by [`NetConfig::audit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub resolution: usize,
    pub channels: usize,
}

pub const CONFIG_NAMES: [&str; 3] = ["paper-S", "paper-B", "toy"];

/// Named configurations. The paper variants keep the published stage table;
/// group counts are `d / 16`, which the table leaves open.
pub fn build(name: &str) -> Result<NetConfig> {
    let paper = |blocks: [usize; 5]| {
        let channels = [16, 64, 128, 256, 512];
        let packing = [8, 4, 2, 1, 1];
        let kernels = [3, 7, 7, 7, 7];
        let stages = (0..5)
            .map(|i| StageConfig {
                channels: channels[i],
                kernel: kernels[i],
                groups: channels[i] / 16,
                packing: packing[i],
                blocks: blocks[i],
            })
            .collect();
        NetConfig {
            name: name.to_string(),
            resolution: 224,
            in_channels: 3,
            stem_dim: 16,
            heads: 2,
            generation: Generation::Conditioned,
            text: TextConfig { embed_dim: 300, hidden: 512, heads: 2, max_len: 16 },
            stages,
            head: HeadKind::Locate,
        }
    };
    match name {
        "paper-S" => Ok(paper([2, 1, 2, 4, 1])),
        "paper-B" => Ok(paper([3, 3, 4, 6, 3])),
        "toy" => Ok(NetConfig {
            name: name.to_string(),
            resolution: 64,
            in_channels: 3,
            stem_dim: 16,
            heads: 2,
            generation: Generation::Conditioned,
            text: TextConfig::default(),
            stages: vec![
                StageConfig { channels: 16, kernel: 3, groups: 4, packing: 4, blocks: 1 },
                StageConfig { channels: 32, kernel: 5, groups: 8, packing: 2, blocks: 2 },
                StageConfig { channels: 64, kernel: 5, groups: 16, packing: 1, blocks: 2 },
            ],
            head: HeadKind::Locate,
        }),
        other => Err(Error::config(format!(
            "unknown config {other:?}; expected one of {}",
            CONFIG_NAMES.join(", ")
        ))),
    }
}

impl NetConfig {
    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.channels).collect()
    }

    pub fn packing(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.packing).collect()
    }

    /// The "no pixel packing" ablation.
    pub fn without_packing(mut self) -> Self {
        self.stages.iter_mut().for_each(|s| s.packing = 1);
        self
    }

    pub fn with_generation(mut self, generation: Generation) -> Self {
        self.generation = generation;
        self
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    pub(crate) fn spec(&self, stage: usize) -> LaConvSpec {
        let st = &self.stages[stage];
        LaConvSpec {
            dim: st.channels,
            text_dim: self.text.hidden,
            kernel: st.kernel,
            groups: st.groups,
            packing: st.packing,
            heads: self.heads,
            generation: self.generation,
        }
    }

    /// Input width of stage `i` (the previous stage's channels, or the stem).
    pub fn stage_input(&self, i: usize) -> usize {
        if i == 0 {
            self.stem_dim
        } else {
            self.stages[i - 1].channels
        }
    }

    /// Dry-run shape check: every pool halves exactly, every packing size
    /// divides its stage resolution and never grows, and every layer spec is
    /// valid. Allocates nothing.
    pub fn audit(&self) -> Result<Vec<StageShape>> {
        if self.resolution == 0 || self.in_channels == 0 || self.stem_dim == 0 {
            return Err(Error::config("resolution, input channels and stem width must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("a network needs at least one stage"));
        }
        if self.text.hidden % self.text.heads != 0 {
            return Err(Error::config("text hidden size not divisible by text heads"));
        }
        let mut res = self.resolution;
        let mut prev_packing = usize::MAX;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            if res % 2 != 0 {
                return Err(Error::config(format!(
                    "stage {}: cannot halve odd resolution {res}",
                    i + 1
                )));
            }
            res /= 2;
            if st.blocks == 0 {
                return Err(Error::config(format!("stage {}: no blocks", i + 1)));
            }
            if st.packing == 0 || res % st.packing != 0 {
                return Err(Error::config(format!(
                    "stage {}: packing {} does not divide resolution {res}",
                    i + 1,
                    st.packing
                )));
            }
            if st.packing > prev_packing {
                return Err(Error::config(format!("stage {}: packing sizes must not increase", i + 1)));
            }
            prev_packing = st.packing;
            self.spec(i)
                .validate()
                .map_err(|e| Error::config(format!("stage {}: {e}", i + 1)))?;
            out.push(StageShape { resolution: res, channels: st.channels });
        }
        Ok(out)
    }

    /// Side of the final feature map.
    pub fn final_resolution(&self) -> usize {
        self.resolution >> self.stages.len()
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_dim, |s| s.channels)
    }
}

/// Parameter name of block `j` in stage `i` (both 1-based).
pub fn block_name(stage: usize, block: usize) -> String {
    format!("stage{stage}.block{block}")
}

/// The full model: text encoder, backbone and one task head.
#[derive(Clone, Debug)]
pub struct LaConvNet {
    pub cfg: NetConfig,
    pub text: TextEncoder,
    blocks: Vec<Vec<LaConvBlock>>,
}

impl LaConvNet {
    pub fn new(cfg: NetConfig, vocab_size: usize) -> Result<Self> {
        cfg.audit()?;
        let text = TextEncoder::new(cfg.text.clone(), vocab_size)?;
        let blocks = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(i, st)| {
                (0..st.blocks)
                    .map(|j| LaConvBlock::new(block_name(i + 1, j + 1), cfg.spec(i)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, text, blocks })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &LaConvBlock> {
        self.blocks.iter().flatten()
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.text.init(&mut store, &mut rng)?;
        let c = &self.cfg;
        linear(&mut store, "stem", c.in_channels, c.stem_dim, &mut rng)?;
        for (i, st) in c.stages.iter().enumerate() {
            let din = c.stage_input(i);
            if din != st.channels {
                linear(&mut store, &format!("stage{}.proj", i + 1), din, st.channels, &mut rng)?;
            }
            for b in &self.blocks[i] {
                b.init(&mut store, &mut rng)?;
            }
        }
        let d = c.final_channels();
        match c.head {
            HeadKind::Locate => linear(&mut store, "head.locate", d, 1, &mut rng)?,
            HeadKind::Answer => {
                let dt = c.text.hidden;
                linear(&mut store, "head.answer.score", d, 1, &mut rng)?;
                linear(&mut store, "head.answer.proj", d, dt, &mut rng)?;
                linear(&mut store, "head.answer.fc1", dt, dt, &mut rng)?;
                linear(&mut store, "head.answer.fc2", dt, ANSWERS, &mut rng)?;
            }
        }
        Ok(store)
    }

    pub fn encode_text<T: Scalar>(&self, s: &mut Session<'_, T>, tokens: &TokenBatch) -> Result<TextVars> {
        self.text.encode(s, tokens)
    }

    /// Per-stage feature maps for `images: [B, H, W, C]`. Every block sees the same text.
    pub fn forward_backbone<T: Scalar>(&self, s: &mut Session<'_, T>, images: Var, text: &TextVars) -> Result<Vec<Var>> {
        let c = &self.cfg;
        let want = [c.resolution, c.resolution, c.in_channels];
        let shape = s.graph.shape(images);
        if shape.len() != 4 || shape[1..] != want || shape[0] != text.batch {
            return Err(Error::shape(format!(
                "{} expects images [{}, {}, {}, {}], got {shape:?}",
                c.name, text.batch, want[0], want[1], want[2]
            )));
        }
        let mut x = s.linear(images, "stem", true)?;
        let mut outs = Vec::with_capacity(c.stages.len());
        for (i, st) in c.stages.iter().enumerate() {
            x = s.graph.maxpool2(x)?;
            if c.stage_input(i) != st.channels {
                x = s.linear(x, &format!("stage{}.proj", i + 1), true)?;
            }
            for b in &self.blocks[i] {
                x = b.forward(s, x, text)?;
            }
            outs.push(x);
        }
        Ok(outs)
    }

    /// Cell logits `[B, hf * wf]` from a per-position `d -> 1` projection.
    pub fn locate_head<T: Scalar>(&self, s: &mut Session<'_, T>, last: Var) -> Result<Var> {
        let shape = s.graph.shape(last).to_vec();
        let logits = s.linear(last, "head.locate", true)?;
        s.graph.reshape(logits, &[shape[0], shape[1] * shape[2]])
    }

    /// Answer logits `[B, ANSWERS]`: attention-pooled vision, projected to the
    /// text width, added to the pooled text, then a two-layer MLP.
    pub fn answer_head<T: Scalar>(&self, s: &mut Session<'_, T>, last: Var, text: &TextVars) -> Result<Var> {
        let shape = s.graph.shape(last).to_vec();
        let (b, n, d) = (shape[0], shape[1] * shape[2], shape[3]);
        let scores = s.linear(last, "head.answer.score", true)?;
        let scores = s.graph.reshape(scores, &[b, n])?;
        let weights = s.graph.softmax(scores, None)?;
        s.capture("head.answer", "weights", weights);
        let weights = s.graph.reshape(weights, &[b, 1, n])?;
        let flat = s.graph.reshape(last, &[b, n, d])?;
        let pooled = s.graph.bmm(weights, flat, false, false)?;
        let pooled = s.graph.reshape(pooled, &[b, d])?;
        let v = s.linear(pooled, "head.answer.proj", true)?;
        let fused = s.graph.add(v, text.pooled)?;
        let h = s.linear(fused, "head.answer.fc1", true)?;
        let h = s.graph.relu(h);
        s.linear(h, "head.answer.fc2", true)
    }

    /// Text encoding, backbone and the configured head in one pass.
    pub fn logits<T: Scalar>(&self, s: &mut Session<'_, T>, images: Var, tokens: &TokenBatch) -> Result<Var> {
        let text = self.encode_text(s, tokens)?;
        let stages = self.forward_backbone(s, images, &text)?;
        let last = *stages.last().ok_or_else(|| Error::config("network has no stages"))?;
        match self.cfg.head {
            HeadKind::Locate => self.locate_head(s, last),
            HeadKind::Answer => self.answer_head(s, last, &text),
        }
    }
}

fn linear<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.insert(format!("{prefix}.weight"), ParamKind::Trainable, init::fan_in(&[din, dout], din, rng))?;
    store.insert(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros([dout]))?;
    Ok(())
}
