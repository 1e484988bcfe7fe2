//! Vision Transformer encoder.
//!
//! An image is cut into non-overlapping p×p patches (row-major over the
//! patch grid), each flattened channel-major and projected to D dimensions.
//! A learned class token is prepended, learned positional embeddings are
//! added, and the sequence passes through L pre-norm Transformer blocks:
//!
//! ```text
//! u = x + MHA(LN1(x))
//! y = u + MLP(LN2(u))      MLP = Linear(D→mlp) · GELU · Linear(mlp→D)
//! ```
//!
//! followed by a final layer norm. Weights of linear maps are stored as
//! (out × in), so a projection of row vectors is `x·Wᵀ + b`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::{Bindings, ShapeManifest};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.patch == 0 {
            return Err(Error::invalid(format!("degenerate patch config {self:?}")));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Length of one flattened patch, p²·c.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch: PatchConfig,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

impl EncoderConfig {
    /// ViT-Large/16 backbone on 3×224×224 input.
    pub fn large() -> Self {
        EncoderConfig {
            patch: PatchConfig {
                channels: 3,
                height: 224,
                width: 224,
                patch: 16,
            },
            depth: 24,
            dim: 1024,
            heads: 16,
            mlp_dim: 4096,
        }
    }

    /// Desk-scale configuration used for tests and phantom experiments.
    pub fn tiny() -> Self {
        EncoderConfig {
            patch: PatchConfig {
                channels: 3,
                height: 32,
                width: 32,
                patch: 8,
            },
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.dim == 0 || self.heads == 0 || self.mlp_dim == 0 {
            return Err(Error::invalid(format!("degenerate encoder config {self:?}")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "embedding dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.patch.num_patches() + 1
    }

    /// Parameter names and shapes of the encoder, in canonical order.
    pub fn manifest(&self) -> ShapeManifest {
        let d = self.dim;
        let mut m: ShapeManifest = vec![
            ("patch_embed.weight".into(), vec![d, self.patch.patch_dim()]),
            ("patch_embed.bias".into(), vec![d]),
            ("cls_token".into(), vec![d]),
            ("pos_embed".into(), vec![self.seq_len(), d]),
        ];
        for i in 0..self.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            m.push((p("norm1.weight"), vec![d]));
            m.push((p("norm1.bias"), vec![d]));
            for proj in ["q", "k", "v", "o"] {
                m.push((p(&format!("attn.w{proj}")), vec![d, d]));
                m.push((p(&format!("attn.b{proj}")), vec![d]));
            }
            m.push((p("norm2.weight"), vec![d]));
            m.push((p("norm2.bias"), vec![d]));
            m.push((p("mlp.fc1.weight"), vec![self.mlp_dim, d]));
            m.push((p("mlp.fc1.bias"), vec![self.mlp_dim]));
            m.push((p("mlp.fc2.weight"), vec![d, self.mlp_dim]));
            m.push((p("mlp.fc2.bias"), vec![d]));
        }
        m.push(("norm.weight".into(), vec![d]));
        m.push(("norm.bias".into(), vec![d]));
        m
    }
}

/// Classification heads attached to the encoder when counting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSpec {
    None,
    /// Single linear classifier over the class token (ImageNet-style head).
    Linear { classes: usize },
    /// Presence (2-way) and location (3-way) MLP heads with a shared hidden width.
    Dual { hidden: usize },
}

/// Closed-form trainable parameter count.
pub fn count_params(cfg: &EncoderConfig, head: HeadSpec) -> u64 {
    let d = cfg.dim as u64;
    let m = cfg.mlp_dim as u64;
    let patch_dim = cfg.patch.patch_dim() as u64;
    let tokens = cfg.seq_len() as u64;

    let embed = d * patch_dim + d;
    let cls = d;
    let pos = tokens * d;
    let block = 2 * 2 * d + 3 * (d * d + d) + (d * d + d) + (d * m + m) + (m * d + d);
    let final_norm = 2 * d;
    let heads = match head {
        HeadSpec::None => 0,
        HeadSpec::Linear { classes } => {
            let k = classes as u64;
            d * k + k
        }
        HeadSpec::Dual { hidden } => {
            let h = hidden as u64;
            let mlp = |k: u64| (d * h + h) + (h * k + k);
            mlp(2) + mlp(3)
        }
    };
    embed + cls + pos + cfg.depth as u64 * block + final_norm + heads
}

/// Splits an image into flattened patches, one row per patch.
pub fn patchify<T: Real>(image: &ImageTensor, cfg: &PatchConfig) -> Result<Tensor<T>> {
    if image.channels() != cfg.channels || image.height() != cfg.height || image.width() != cfg.width {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![image.channels(), image.height(), image.width()],
            rhs: vec![cfg.channels, cfg.height, cfg.width],
        });
    }
    cfg.validate()?;
    let p = cfg.patch;
    let (gh, gw) = (cfg.height / p, cfg.width / p);
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..cfg.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        data.push(T::of(f64::from(image.get(c, py * p + dy, px * p + dx))));
                    }
                }
            }
        }
    }
    Tensor::new(&[cfg.num_patches(), cfg.patch_dim()], data)
}

/// `x·Wᵀ + b` for row vectors `x`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul_t(x, w)?;
    g.add_bias(xw, b)
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedVars {
    pub weight: Var,
    pub bias: Var,
    pub cls: Var,
    pub pos: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub norm1: (Var, Var),
    pub attn: AttentionVars,
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub embed: EmbedVars,
    pub blocks: Vec<BlockVars>,
    pub norm: (Var, Var),
}

impl EncoderVars {
    pub fn from_bindings(b: &Bindings, cfg: &EncoderConfig) -> Result<Self> {
        let embed = EmbedVars {
            weight: b.var("patch_embed.weight")?,
            bias: b.var("patch_embed.bias")?,
            cls: b.var("cls_token")?,
            pos: b.var("pos_embed")?,
        };
        let blocks = (0..cfg.depth)
            .map(|i| {
                let v = |s: &str| b.var(&format!("blocks.{i}.{s}"));
                Ok(BlockVars {
                    norm1: (v("norm1.weight")?, v("norm1.bias")?),
                    attn: AttentionVars {
                        wq: v("attn.wq")?,
                        bq: v("attn.bq")?,
                        wk: v("attn.wk")?,
                        bk: v("attn.bk")?,
                        wv: v("attn.wv")?,
                        bv: v("attn.bv")?,
                        wo: v("attn.wo")?,
                        bo: v("attn.bo")?,
                        heads: cfg.heads,
                    },
                    norm2: (v("norm2.weight")?, v("norm2.bias")?),
                    fc1: (v("mlp.fc1.weight")?, v("mlp.fc1.bias")?),
                    fc2: (v("mlp.fc2.weight")?, v("mlp.fc2.bias")?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderVars {
            embed,
            blocks,
            norm: (b.var("norm.weight")?, b.var("norm.bias")?),
        })
    }
}

/// Projects patches and assembles `[z_class; W·x_i + b] + pos`.
pub fn embed_and_assemble<T: Real>(g: &mut Graph<T>, patches: Var, e: &EmbedVars) -> Result<Var> {
    let z = linear(g, patches, e.weight, e.bias)?;
    let dim = g.shape(e.cls)[0];
    if g.shape(z)[1] != dim {
        return Err(Error::Shape {
            op: "embed_and_assemble",
            lhs: g.shape(z).to_vec(),
            rhs: g.shape(e.cls).to_vec(),
        });
    }
    let cls = g.reshape(e.cls, &[1, dim])?;
    let seq = g.concat(&[cls, z], 0)?;
    g.add(seq, e.pos)
}

/// Multi-head self-attention; also returns each head's attention weights.
pub fn mha_traced<T: Real>(g: &mut Graph<T>, x: Var, a: &AttentionVars) -> Result<(Var, Vec<Var>)> {
    let dim = g.shape(x)[1];
    if a.heads == 0 || !dim.is_multiple_of(a.heads) {
        return Err(Error::invalid(format!(
            "embedding dim {dim} is not divisible by {} heads",
            a.heads
        )));
    }
    let hd = dim / a.heads;
    let q = linear(g, x, a.wq, a.bq)?;
    let k = linear(g, x, a.wk, a.bk)?;
    let v = linear(g, x, a.wv, a.bv)?;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut outs = Vec::with_capacity(a.heads);
    let mut weights = Vec::with_capacity(a.heads);
    for h in 0..a.heads {
        let qh = g.slice(q, 1, h * hd, hd)?;
        let kh = g.slice(k, 1, h * hd, hd)?;
        let vh = g.slice(v, 1, h * hd, hd)?;
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, 1)?;
        weights.push(attn);
        outs.push(g.matmul(attn, vh)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let y = linear(g, cat, a.wo, a.bo)?;
    Ok((y, weights))
}

pub fn mha<T: Real>(g: &mut Graph<T>, x: Var, a: &AttentionVars) -> Result<Var> {
    mha_traced(g, x, a).map(|(y, _)| y)
}

pub fn encoder_block<T: Real>(g: &mut Graph<T>, x: Var, b: &BlockVars) -> Result<Var> {
    let h = g.layernorm(x, b.norm1.0, b.norm1.1, LN_EPS)?;
    let h = mha(g, h, &b.attn)?;
    let u = g.add(x, h)?;
    let h = g.layernorm(u, b.norm2.0, b.norm2.1, LN_EPS)?;
    let h = linear(g, h, b.fc1.0, b.fc1.1)?;
    let h = g.gelu(h)?;
    let h = linear(g, h, b.fc2.0, b.fc2.1)?;
    g.add(u, h)
}

/// Full encoder pass; returns the (N+1)×D feature sequence.
pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    image: &ImageTensor,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let patches = g.constant(patchify(image, &cfg.patch)?);
    let mut x = embed_and_assemble(g, patches, &vars.embed)?;
    for block in &vars.blocks {
        x = encoder_block(g, x, block)?;
    }
    g.layernorm(x, vars.norm.0, vars.norm.1, LN_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table2_parameter_count() {
        let cfg = EncoderConfig::large();
        assert_eq!(count_params(&cfg, HeadSpec::Linear { classes: 1000 }), 304_326_632);
    }

    #[test]
    fn hand_counted_minimal_encoder() {
        let cfg = EncoderConfig {
            patch: PatchConfig {
                channels: 1,
                height: 1,
                width: 1,
                patch: 1,
            },
            depth: 0,
            dim: 1,
            heads: 1,
            mlp_dim: 1,
        };
        // embed 1·1+1, class token 1, two position rows 2·1, final norm 2
        assert_eq!(count_params(&cfg, HeadSpec::None), (1 + 1) + 1 + 2 + 2);
    }

    #[test]
    fn large_term_decomposition() {
        // Each term recomputed separately: 224²/16² = 196 patches.
        let embed = 1024 * 768 + 1024;
        let cls = 1024;
        let pos = 197 * 1024;
        let block = 4 * 1024 + 3 * (1024 * 1024 + 1024) + (1024 * 1024 + 1024) + (1024 * 4096 + 4096) + (4096 * 1024 + 1024);
        let head = 1024 * 1000 + 1000;
        let total: u64 = embed + cls + pos + 24 * block + 2048 + head;
        assert_eq!(total, 304_326_632);
    }

    #[test]
    fn manifest_matches_closed_form() {
        for cfg in [EncoderConfig::tiny(), EncoderConfig::large()] {
            let n = crate::params::manifest_numel(&cfg.manifest());
            assert_eq!(n, count_params(&cfg, HeadSpec::None));
        }
    }

    #[test]
    fn patchify_shapes() {
        let cfg = PatchConfig {
            channels: 3,
            height: 224,
            width: 224,
            patch: 16,
        };
        let img = ImageTensor::zeros(3, 224, 224);
        let p = patchify::<f32>(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[196, 768]);

        let data: Vec<f32> = (0..256).map(|v| v as f32).collect();
        let img = ImageTensor::new(1, 16, 16, data.clone(), (0.0, 255.0)).unwrap();
        let cfg = PatchConfig {
            channels: 1,
            height: 16,
            width: 16,
            patch: 16,
        };
        let p = patchify::<f32>(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 256]);
        assert_eq!(p.data(), &data[..]);

        let img = ImageTensor::zeros(1, 20, 20);
        let cfg = PatchConfig {
            channels: 1,
            height: 20,
            width: 20,
            patch: 16,
        };
        assert!(patchify::<f32>(&img, &cfg).is_err());
    }

    #[test]
    fn patch_rows_follow_grid_order() {
        // 1×4×4 image, p=2: patch 1 is the top-right 2×2 block.
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let img = ImageTensor::new(1, 4, 4, data, (0.0, 15.0)).unwrap();
        let cfg = PatchConfig {
            channels: 1,
            height: 4,
            width: 4,
            patch: 2,
        };
        let p = patchify::<f64>(&img, &cfg).unwrap();
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }
}
