//! Convolutional fusion decoder and depth head.

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Ctx, Init};
use crate::tensor::{Element, Var};
use crate::DEPTH_CAP;

/// `x + conv(relu(conv(relu(x))))` with 3×3 convs and no normalisation.
#[derive(Clone, Debug)]
pub struct ResidualConvUnit {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualConvUnit {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(ResidualConvUnit {
            conv1: Conv2d::new(&mut s, "conv1", dim, dim, 3, 1, 1)?,
            conv2: Conv2d::new(&mut s, "conv2", dim, dim, 3, 1, 1)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = ctx.tape.relu(x)?;
        let h = self.conv1.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}

/// `upsample(RCU₂(RCU₁(deep + skip)))`.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub rcu1: ResidualConvUnit,
    pub rcu2: ResidualConvUnit,
}

impl FusionBlock {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(FusionBlock {
            rcu1: ResidualConvUnit::new(b, "rcu1", dim)?,
            rcu2: ResidualConvUnit::new(b, "rcu2", dim)?,
        })
    }

    /// Output is exactly twice the input size.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, deep: Var, skip: Option<Var>) -> Result<Var> {
        let s = ctx.shape(deep).to_vec();
        if s.len() != 3 {
            return Err(Error::arg("fusion_block", format!("expected [h,w,D], got {s:?}")));
        }
        self.forward_to(ctx, deep, skip, (2 * s[0], 2 * s[1]))
    }

    /// As [`FusionBlock::forward`] but resizes to `size`, which lets the
    /// cascade follow pyramids whose coarse levels were rounded up.
    pub fn forward_to<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        deep: Var,
        skip: Option<Var>,
        size: (usize, usize),
    ) -> Result<Var> {
        let x = match skip {
            Some(s) => {
                if ctx.shape(s) != ctx.shape(deep) {
                    return Err(Error::shape("fusion_block", ctx.shape(deep), ctx.shape(s)));
                }
                ctx.tape.add(deep, s)?
            }
            None => deep,
        };
        let x = self.rcu1.forward(ctx, x)?;
        let x = self.rcu2.forward(ctx, x)?;
        ctx.tape.resize_bilinear(x, size.0, size.1)
    }
}

/// Cascade of fusion blocks, deepest first; ends at half input resolution.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<FusionBlock>,
}

impl Decoder {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, dim: usize, stages: usize) -> Result<Self> {
        let blocks = (0..stages)
            .map(|i| FusionBlock::new(&mut b.scope(&format!("blocks.{i}")), dim))
            .collect::<Result<_>>()?;
        Ok(Decoder { blocks })
    }

    /// `pyramid` is fine-to-coarse; block `i` merges level `i`.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, pyramid: &[Var], out: (usize, usize)) -> Result<Var> {
        let n = pyramid.len();
        if n == 0 || n != self.blocks.len() {
            return Err(Error::Config(format!(
                "decoder has {} blocks but got {n} pyramid levels",
                self.blocks.len()
            )));
        }
        let size_of = |ctx: &Ctx<'_, T>, i: usize| {
            let s = ctx.shape(pyramid[i]);
            (s[0], s[1])
        };
        let target = |ctx: &Ctx<'_, T>, i: usize| if i == 0 { out } else { size_of(ctx, i - 1) };
        let t = target(ctx, n - 1);
        let mut x = self.blocks[n - 1].forward_to(ctx, pyramid[n - 1], None, t)?;
        for i in (0..n - 1).rev() {
            let t = target(ctx, i);
            x = self.blocks[i].forward_to(ctx, x, Some(pyramid[i]), t)?;
        }
        Ok(x)
    }
}

/// 3×3 conv to `D̂/2`, bilinear ×2, 3×3 conv to 32, ReLU, 1×1 conv to 1,
/// scaled by the depth cap, ReLU.
#[derive(Clone, Debug)]
pub struct DepthHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

impl DepthHead {
    pub const HIDDEN: usize = 32;
    /// Depth in metres predicted everywhere at initialisation.
    pub const INITIAL_DEPTH: f64 = 20.0;

    pub fn new<T: Element>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        let half = (dim / 2).max(1);
        let mut s = b.scope("head");
        Ok(DepthHead {
            conv1: Conv2d::new(&mut s, "conv1", dim, half, 3, 1, 1)?,
            conv2: Conv2d::new(&mut s, "conv2", half, Self::HIDDEN, 3, 1, 1)?,
            // zero weights: training starts from a flat prediction at
            // INITIAL_DEPTH and the trunk gets gradient once they move
            conv3: Conv2d::with_init(
                &mut s,
                "conv3",
                Self::HIDDEN,
                1,
                1,
                1,
                0,
                Init::Zeros,
                Init::Const(Self::INITIAL_DEPTH / DEPTH_CAP),
            )?,
        })
    }

    /// Input is `[H/2, W/2, D̂]`; output is `[H, W, 1]`, non-negative.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, feat: Var, out: (usize, usize)) -> Result<Var> {
        let x = self.conv1.forward(ctx, feat)?;
        let x = ctx.tape.resize_bilinear(x, out.0, out.1)?;
        let x = self.conv2.forward(ctx, x)?;
        let x = ctx.tape.relu(x)?;
        let x = self.conv3.forward(ctx, x)?;
        // the last conv predicts depth as a fraction of the cap
        let x = ctx.tape.scale(x, DEPTH_CAP)?;
        ctx.tape.relu(x)
    }
}
