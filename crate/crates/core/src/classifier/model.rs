//! Image classifiers built from Co4 layers or ViT blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::co4::{Co4Config, Co4Diagnostics, Co4Layer, Readout};
use crate::nn::{LayerNorm, Linear, ParamId, ParamSet, Params};
use crate::tensor::Tensor;
use crate::vit::{VitBlock, VitConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Co4,
    Vit,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "co4" => Ok(ModelKind::Co4),
            "vit" | "transformer" => Ok(ModelKind::Vit),
            other => Err(Error::config(format!("unknown model {other:?}; expected co4 or vit"))),
        }
    }
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Co4 => "co4",
            ModelKind::Vit => "vit",
        }
    }
}

/// Architecture of a classifier. Token count and embedding width in the
/// nested configs are overwritten from `embed_dim` and the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub layers: usize,
    pub co4: Co4Config,
    pub vit: VitConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: ModelKind::Co4,
            embed_dim: 128,
            layers: 1,
            co4: Co4Config::default(),
            vit: VitConfig::default(),
        }
    }
}

enum Block {
    Co4(Co4Layer),
    Vit(VitBlock),
}

/// Patch embedding, learned positions, a stack of blocks, mean pooling
/// and a linear head.
pub struct Classifier {
    cfg: ClassifierConfig,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
    num_tokens: usize,
    patch_dim: usize,
}

impl Classifier {
    /// Builds the model and its parameters from `seed`.
    pub fn new(cfg: &ClassifierConfig, patch_dim: usize, num_tokens: usize, num_classes: usize, seed: u64) -> Result<(Self, ParamSet)> {
        let e = cfg.embed_dim;
        if e == 0 || cfg.layers == 0 || patch_dim == 0 || num_tokens == 0 || num_classes < 2 {
            return Err(Error::config("classifier dimensions must be positive with >= 2 classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let embed = Linear::new(&mut ps, "embed", patch_dim, e, true, &mut rng);
        let pos = ps.add("pos", Tensor::randn(&[num_tokens, e], 0.02, &mut rng), false);
        let mut blocks = Vec::with_capacity(cfg.layers);
        let mut tokens = num_tokens;
        for i in 0..cfg.layers {
            let name = format!("block{i}");
            match cfg.kind {
                ModelKind::Co4 => {
                    let mut c = cfg.co4.clone();
                    c.embed_dim = e;
                    c.num_tokens = tokens;
                    c.k = c.k.min(tokens);
                    if let Some(l) = c.num_latents {
                        c.num_latents = Some(l.min(tokens));
                    }
                    if c.readout == Readout::TopkAttn {
                        tokens = c.k;
                    }
                    blocks.push(Block::Co4(Co4Layer::new(&mut ps, &name, c, &mut rng)?));
                }
                ModelKind::Vit => {
                    let v = VitConfig {
                        embed_dim: e,
                        num_tokens: tokens,
                        layers: 1,
                        ..cfg.vit.clone()
                    };
                    blocks.push(Block::Vit(VitBlock::new(&mut ps, &name, &v, &mut rng)?));
                }
            }
        }
        let norm = LayerNorm::new(&mut ps, "norm", e);
        let head = Linear::new(&mut ps, "head", e, num_classes, true, &mut rng);
        let model = Classifier {
            cfg: cfg.clone(),
            embed,
            pos,
            blocks,
            norm,
            head,
            num_tokens,
            patch_dim,
        };
        Ok((model, ps))
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    /// Logits `(B, classes)` for tokens `(B, N, patch_dim)`, with one
    /// diagnostic record per Co4 layer.
    pub fn forward<'t>(&self, p: &Params<'t>, tokens: &Var<'t>) -> Result<(Var<'t>, Vec<Co4Diagnostics>)> {
        let s = tokens.shape();
        if s.len() != 3 || s[1] != self.num_tokens || s[2] != self.patch_dim {
            return Err(Error::shape(format!(
                "classifier expects (B, {}, {}), got {s:?}",
                self.num_tokens, self.patch_dim
            )));
        }
        let mut x = self.embed.forward(p, tokens)?.add(p.get(self.pos))?;
        let mut diags = Vec::new();
        for block in &self.blocks {
            x = match block {
                Block::Co4(layer) => {
                    let out = layer.forward(p, &x)?;
                    diags.push(out.diag);
                    out.features
                }
                Block::Vit(b) => b.forward(p, &x)?,
            };
        }
        let pooled = self.norm.forward(p, &x.mean_axis(1)?)?;
        let b = s[0];
        let pooled = pooled.reshape(&[b, self.cfg.embed_dim])?;
        Ok((self.head.forward(p, &pooled)?, diags))
    }
}
