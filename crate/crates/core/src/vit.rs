//! Patch embedding, learned positional tables, and pre-norm transformer
//! blocks with configurable tap layers.

use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Init, LayerNorm, Linear, ParamId};
use crate::tensor::{Element, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub token_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// 1-based, strictly ascending.
    pub tap_layers: Vec<usize>,
    pub in_channels: usize,
}

impl EncoderConfig {
    /// ViT-Base geometry.
    pub fn paper(in_channels: usize) -> Self {
        EncoderConfig {
            patch_size: 16,
            token_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_ratio: 4,
            tap_layers: vec![3, 6, 9, 12],
            in_channels,
        }
    }

    pub fn toy(in_channels: usize) -> Self {
        EncoderConfig {
            patch_size: 8,
            token_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            tap_layers: vec![1, 2, 3, 4],
            in_channels,
        }
    }

    pub fn with_in_channels(&self, in_channels: usize) -> Self {
        EncoderConfig {
            in_channels,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.token_dim == 0 || self.num_heads == 0 || self.in_channels == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !self.token_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "token_dim {} is not divisible by num_heads {}",
                self.token_dim, self.num_heads
            )));
        }
        if self.tap_layers.is_empty()
            || self.tap_layers.iter().any(|&l| l == 0 || l > self.num_layers)
            || self.tap_layers.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "tap layers {:?} must be ascending within 1..={}",
                self.tap_layers, self.num_layers
            )));
        }
        Ok(())
    }

    /// Patch grid `(H/p, W/p)`; errors unless `p` divides both sides.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if h == 0 || w == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by patch size {p}; pad or crop to a multiple of {p}"
            )));
        }
        Ok((h / p, w / p))
    }
}

/// `N_p × D` tokens with their patch-grid provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattens non-overlapping `p×p×C` patches (row-major over the grid) and
/// maps each with one shared linear layer to `D`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch_size: usize,
    pub in_channels: usize,
}

impl PatchEmbed {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        let p = cfg.patch_size;
        Ok(PatchEmbed {
            proj: Linear::new(b, "patch_embed", p * p * cfg.in_channels, cfg.token_dim, 0.02)?,
            patch_size: p,
            in_channels: cfg.in_channels,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<TokenSequence> {
        let s = ctx.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.in_channels {
            return Err(Error::Config(format!(
                "patch_embed expects [H, W, {}], got {s:?}",
                self.in_channels
            )));
        }
        let p = self.patch_size;
        if !s[0].is_multiple_of(p) || !s[1].is_multiple_of(p) {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by patch size {p}; pad or crop to a multiple of {p}",
                s[0], s[1]
            )));
        }
        let (gh, gw, c) = (s[0] / p, s[1] / p, s[2]);
        let t = &mut ctx.tape;
        let r = t.reshape(x, &[gh, p, gw, p, c])?;
        let r = t.permute(r, &[0, 2, 1, 3, 4])?;
        let patches = t.reshape(r, &[gh * gw, p * p * c])?;
        let tokens = self.proj.forward(ctx, patches)?;
        Ok(TokenSequence { tokens, grid: (gh, gw) })
    }
}

/// Learned `N_p × D` table added to the tokens.
#[derive(Clone, Debug)]
pub struct PositionalEmbedding {
    pub table: ParamId,
    pub grid: (usize, usize),
}

impl PositionalEmbedding {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, grid: (usize, usize), dim: usize) -> Result<Self> {
        Ok(PositionalEmbedding {
            table: b.param("pos_embed", &[grid.0 * grid.1, dim], Init::TruncNormal(0.02))?,
            grid,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, tok: TokenSequence) -> Result<TokenSequence> {
        if tok.grid != self.grid {
            return Err(Error::Config(format!(
                "positional table is for grid {:?}, tokens have grid {:?}",
                self.grid, tok.grid
            )));
        }
        let e = ctx.param(self.table);
        let tokens = ctx.tape.add(tok.tokens, e)?;
        Ok(TokenSequence { tokens, ..tok })
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    /// Returns the block output and the `[h, N, N]` attention weights.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let (n, d) = (ctx.shape(x)[0], ctx.shape(x)[1]);
        let (h, dh) = (self.heads, d / self.heads);
        let split = |ctx: &mut Ctx<'_, T>, lin: &Linear| -> Result<Var> {
            let y = lin.forward(ctx, x)?;
            let y = ctx.tape.reshape(y, &[n, h, dh])?;
            ctx.tape.permute(y, &[1, 0, 2])
        };
        let q = split(ctx, &self.q)?;
        let k = split(ctx, &self.k)?;
        let v = split(ctx, &self.v)?;
        let t = &mut ctx.tape;
        let kt = t.transpose(k)?;
        let scores = t.matmul(q, kt)?;
        let scores = t.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = t.softmax(scores)?;
        let ctxv = t.matmul(attn, v)?;
        let merged = t.permute(ctxv, &[1, 0, 2])?;
        let merged = t.reshape(merged, &[n, d])?;
        Ok((self.out.forward(ctx, merged)?, attn))
    }
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.token_dim;
        let hidden = cfg.mlp_ratio * d;
        let mut a = b.scope("attn");
        let attn = Attention {
            q: Linear::new(&mut a, "q", d, d, 0.02)?,
            k: Linear::new(&mut a, "k", d, d, 0.02)?,
            v: Linear::new(&mut a, "v", d, d, 0.02)?,
            out: Linear::new(&mut a, "out", d, d, 0.02)?,
            heads: cfg.num_heads,
        };
        Ok(TransformerBlock {
            ln1: LayerNorm::new(b, "ln1", d)?,
            attn,
            ln2: LayerNorm::new(b, "ln2", d)?,
            fc1: Linear::new(b, "fc1", d, hidden, 0.02)?,
            fc2: Linear::new(b, "fc2", hidden, d, 0.02)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, tok: TokenSequence) -> Result<TokenSequence> {
        self.forward_traced(ctx, tok).map(|(t, _)| t)
    }

    pub fn forward_traced<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        tok: TokenSequence,
    ) -> Result<(TokenSequence, Var)> {
        let x = tok.tokens;
        let n1 = self.ln1.forward(ctx, x)?;
        let (a, attn) = self.attn.forward(ctx, n1)?;
        let x = ctx.tape.add(x, a)?;
        let n2 = self.ln2.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, n2)?;
        let h = ctx.tape.gelu(h)?;
        let m = self.fc2.forward(ctx, h)?;
        let tokens = ctx.tape.add(x, m)?;
        Ok((TokenSequence { tokens, ..tok }, attn))
    }
}

/// Patch embedding, positional table, and `L` blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch: PatchEmbed,
    pub pos: PositionalEmbedding,
    pub blocks: Vec<TransformerBlock>,
}

impl Encoder {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, cfg: &EncoderConfig, grid: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let patch = PatchEmbed::new(b, cfg)?;
        let pos = PositionalEmbedding::new(b, grid, cfg.token_dim)?;
        // Layers past the last tap never reach the decoder.
        let depth = *cfg.tap_layers.last().unwrap();
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(&mut b.scope(&format!("blocks.{i}")), cfg))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            cfg: cfg.clone(),
            patch,
            pos,
            blocks,
        })
    }

    pub fn embed<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<TokenSequence> {
        let tok = self.patch.forward(ctx, x)?;
        self.pos.forward(ctx, tok)
    }

    /// Tokens after each tap layer, ascending.
    pub fn encode_with_taps<T: Element>(&self, ctx: &mut Ctx<'_, T>, tok: TokenSequence) -> Result<Vec<TokenSequence>> {
        let mut taps = Vec::with_capacity(self.cfg.tap_layers.len());
        let mut cur = tok;
        for (i, block) in self.blocks.iter().enumerate() {
            cur = block.forward(ctx, cur)?;
            if self.cfg.tap_layers.contains(&(i + 1)) {
                taps.push(cur);
            }
        }
        Ok(taps)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<TokenSequence>> {
        let tok = self.embed(ctx, x)?;
        self.encode_with_taps(ctx, tok)
    }
}
