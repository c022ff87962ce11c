//! Reassemble stages that turn tap-layer tokens into an image-like pyramid,
//! optionally fusing radar tokens in place of a readout token.
//!
//! One stage is `Resample_s ∘ Concatenate ∘ Read`:
//! * `Read` projects `cat(t_I, t_R)` (`N_p × 2D`) back to `N_p × D` with a
//!   linear layer and GELU. Without radar tokens the same projection runs on
//!   `t_I` alone (`D → D`), so zeroing the radar rows of the fused weight
//!   reproduces the image-only stage exactly.
//! * `Concatenate` reshapes `N_p × D` to `H/p × W/p × D`.
//! * `Resample_s` applies a 1×1 conv to `D̂` channels, then a transposed conv
//!   (stride `p/s`) when `s < p` or a 3×3 strided conv (stride `s/p`) when
//!   `s > p`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvTranspose2d, Ctx, Linear};
use crate::tensor::{Element, Var};
use crate::vit::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    ImageOnly,
    Early,
    Late,
    RcdptReassemble,
}

impl FusionMode {
    /// Comparison-table order: baseline first, then early, late, reassemble.
    pub const ALL: [FusionMode; 4] = [
        FusionMode::ImageOnly,
        FusionMode::Early,
        FusionMode::Late,
        FusionMode::RcdptReassemble,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::ImageOnly => "image-only",
            FusionMode::Early => "early",
            FusionMode::Late => "late",
            FusionMode::RcdptReassemble => "rcdpt-reassemble",
        }
    }

    pub fn uses_radar(self) -> bool {
        self != FusionMode::ImageOnly
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "image-only" | "imageonly" | "image" => Ok(FusionMode::ImageOnly),
            "early" => Ok(FusionMode::Early),
            "late" => Ok(FusionMode::Late),
            "rcdpt-reassemble" | "rcdpt" | "reassemble" | "rcdptreassemble" => Ok(FusionMode::RcdptReassemble),
            other => Err(Error::Config(format!(
                "unknown fusion mode `{other}` (expected image-only, early, late or rcdpt-reassemble)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReadKind {
    /// One linear layer followed by GELU.
    #[default]
    Linear,
    /// Linear, GELU, linear, GELU.
    Mlp2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReassembleConfig {
    /// Output size ratio per tap stage, aligned with the tap layers.
    pub scales: Vec<usize>,
    pub out_dim: usize,
    pub patch_size: usize,
    pub input: (usize, usize),
    pub read: ReadKind,
}

impl ReassembleConfig {
    pub fn paper() -> Self {
        ReassembleConfig {
            scales: vec![4, 8, 16, 32],
            out_dim: 256,
            patch_size: 16,
            input: (384, 384),
            read: ReadKind::Linear,
        }
    }

    pub fn toy() -> Self {
        ReassembleConfig {
            scales: vec![4, 8, 16, 32],
            out_dim: 32,
            patch_size: 8,
            input: (48, 48),
            read: ReadKind::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 {
            return Err(Error::Config("output dim must be positive".into()));
        }
        if self.patch_size == 0 || !self.patch_size.is_power_of_two() {
            return Err(Error::Config(format!("patch size {} must be a power of two", self.patch_size)));
        }
        if let Some(s) = self.scales.iter().find(|s| !s.is_power_of_two()) {
            return Err(Error::Config(format!("scale ratio {s} is not a positive power of two")));
        }
        let (h, w) = self.input;
        if h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input.0 / self.patch_size, self.input.1 / self.patch_size)
    }

    /// Spatial size produced for ratio `s`: `H/s × W/s` when `s` divides the
    /// input, rounded up otherwise (strided 3×3 conv with padding 1).
    pub fn stage_size(&self, s: usize) -> (usize, usize) {
        let (gh, gw) = self.grid();
        let p = self.patch_size;
        if s <= p {
            (gh * (p / s), gw * (p / s))
        } else {
            let st = s / p;
            ((gh - 1) / st + 1, (gw - 1) / st + 1)
        }
    }
}

/// Token projection ahead of the reshape: `N_p × (k·D) → N_p × D`.
#[derive(Clone, Debug)]
pub struct ReadProj {
    pub fc1: Linear,
    pub fc2: Option<Linear>,
    pub fused: bool,
}

impl ReadProj {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, dim: usize, fused: bool, kind: ReadKind) -> Result<Self> {
        let mut s = b.scope("read");
        let in_dim = if fused { 2 * dim } else { dim };
        Ok(ReadProj {
            fc1: Linear::new(&mut s, "fc1", in_dim, dim, 0.02)?,
            fc2: match kind {
                ReadKind::Linear => None,
                ReadKind::Mlp2 => Some(Linear::new(&mut s, "fc2", dim, dim, 0.02)?),
            },
            fused,
        })
    }

    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        image: TokenSequence,
        radar: Option<TokenSequence>,
    ) -> Result<Var> {
        let x = match (self.fused, radar) {
            (true, Some(r)) => {
                if r.grid != image.grid || ctx.shape(r.tokens) != ctx.shape(image.tokens) {
                    return Err(Error::GridMismatch {
                        image: image.grid,
                        radar: r.grid,
                    });
                }
                ctx.tape.concat(&[image.tokens, r.tokens], 1)?
            }
            (false, None) => image.tokens,
            (true, None) => return Err(Error::Config("fused read projection needs radar tokens".into())),
            (false, Some(_)) => return Err(Error::Config("image-only read projection got radar tokens".into())),
        };
        let y = self.fc1.forward(ctx, x)?;
        let mut y = ctx.tape.gelu(y)?;
        if let Some(fc2) = &self.fc2 {
            let z = fc2.forward(ctx, y)?;
            y = ctx.tape.gelu(z)?;
        }
        Ok(y)
    }
}

/// Places token `k` at grid cell `(k / gw, k % gw)`.
pub fn spatial_concatenate<T: Element>(ctx: &mut Ctx<'_, T>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
    let s = ctx.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != grid.0 * grid.1 {
        return Err(Error::Config(format!(
            "{s:?} tokens do not fill a {}x{} grid",
            grid.0, grid.1
        )));
    }
    ctx.tape.reshape(tokens, &[grid.0, grid.1, s[1]])
}

/// Inverse of [`spatial_concatenate`].
pub fn spatial_flatten<T: Element>(ctx: &mut Ctx<'_, T>, map: Var) -> Result<Var> {
    let s = ctx.shape(map).to_vec();
    if s.len() != 3 {
        return Err(Error::arg("spatial_flatten", format!("expected [h,w,D], got {s:?}")));
    }
    ctx.tape.reshape(map, &[s[0] * s[1], s[2]])
}

#[derive(Clone, Debug)]
pub enum SpatialResample {
    Identity,
    Up(ConvTranspose2d),
    Down(Conv2d),
}

#[derive(Clone, Debug)]
pub struct Resample {
    pub proj: Conv2d,
    pub spatial: SpatialResample,
    pub scale: usize,
}

impl Resample {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, dim: usize, out_dim: usize, patch: usize, scale: usize) -> Result<Self> {
        if !scale.is_power_of_two() || !patch.is_power_of_two() {
            return Err(Error::Config(format!(
                "scale {scale} and patch {patch} must be powers of two"
            )));
        }
        let mut s = b.scope("resample");
        let proj = Conv2d::new(&mut s, "proj", dim, out_dim, 1, 1, 0)?;
        let spatial = if scale < patch {
            SpatialResample::Up(ConvTranspose2d::new(&mut s, "up", out_dim, out_dim, patch / scale)?)
        } else if scale > patch {
            SpatialResample::Down(Conv2d::new(&mut s, "down", out_dim, out_dim, 3, scale / patch, 1)?)
        } else {
            SpatialResample::Identity
        };
        Ok(Resample { proj, spatial, scale })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, map: Var) -> Result<Var> {
        let y = self.proj.forward(ctx, map)?;
        match &self.spatial {
            SpatialResample::Identity => Ok(y),
            SpatialResample::Up(c) => c.forward(ctx, y),
            SpatialResample::Down(c) => c.forward(ctx, y),
        }
    }
}

/// One tap stage of the reassemble pyramid.
#[derive(Clone, Debug)]
pub struct ReassembleStage {
    pub read: ReadProj,
    pub resample: Resample,
}

impl ReassembleStage {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        token_dim: usize,
        cfg: &ReassembleConfig,
        scale: usize,
        fused: bool,
    ) -> Result<Self> {
        Ok(ReassembleStage {
            read: ReadProj::new(b, token_dim, fused, cfg.read)?,
            resample: Resample::new(b, token_dim, cfg.out_dim, cfg.patch_size, scale)?,
        })
    }

    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        image: TokenSequence,
        radar: Option<TokenSequence>,
    ) -> Result<Var> {
        let tokens = self.read.forward(ctx, image, radar)?;
        let map = spatial_concatenate(ctx, tokens, image.grid)?;
        self.resample.forward(ctx, map)
    }
}

/// Per-tap stages producing the pyramid (fine to coarse).
#[derive(Clone, Debug)]
pub struct Reassemble {
    pub stages: Vec<ReassembleStage>,
}

impl Reassemble {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, token_dim: usize, cfg: &ReassembleConfig, fused: bool) -> Result<Self> {
        cfg.validate()?;
        let stages = cfg
            .scales
            .iter()
            .enumerate()
            .map(|(i, &s)| ReassembleStage::new(&mut b.scope(&i.to_string()), token_dim, cfg, s, fused))
            .collect::<Result<_>>()?;
        Ok(Reassemble { stages })
    }

    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        image: &[TokenSequence],
        radar: Option<&[TokenSequence]>,
    ) -> Result<Vec<Var>> {
        if image.len() != self.stages.len() || radar.is_some_and(|r| r.len() != image.len()) {
            return Err(Error::Config(format!(
                "{} reassemble stages but {} image taps",
                self.stages.len(),
                image.len()
            )));
        }
        self.stages
            .iter()
            .enumerate()
            .map(|(i, st)| st.forward(ctx, image[i], radar.map(|r| r[i])))
            .collect()
    }
}
