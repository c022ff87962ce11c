//! Full depth models for the four fusion topologies, plus checkpoints.

use std::path::Path;

use crate::decoder::{Decoder, DepthHead};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, ReadKind, Reassemble, ReassembleConfig};
use crate::kv::{join_list, KeyValues};
use crate::nn::{Builder, Conv2d, Ctx, ParamStore};
use crate::tensor::{Element, Tensor, Var};
use crate::vit::{Encoder, EncoderConfig};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
/// Radar depth enters the network in units of this many metres, so returns
/// are of the same order as the normalised image.
pub const RADAR_UNIT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub mode: FusionMode,
    /// Image-branch encoder (3 input channels).
    pub encoder: EncoderConfig,
    pub radar_channels: usize,
    pub reassemble: ReassembleConfig,
}

impl ModelConfig {
    pub fn toy(mode: FusionMode) -> Self {
        ModelConfig {
            mode,
            encoder: EncoderConfig::toy(3),
            radar_channels: 3,
            reassemble: ReassembleConfig::toy(),
        }
    }

    pub fn paper(mode: FusionMode) -> Self {
        ModelConfig {
            mode,
            encoder: EncoderConfig::paper(3),
            radar_channels: 3,
            reassemble: ReassembleConfig::paper(),
        }
    }

    pub fn with_mode(&self, mode: FusionMode) -> Self {
        ModelConfig { mode, ..self.clone() }
    }

    pub fn with_input(&self, h: usize, w: usize) -> Self {
        let mut c = self.clone();
        c.reassemble.input = (h, w);
        c
    }

    pub fn input(&self) -> (usize, usize) {
        self.reassemble.input
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.reassemble.validate()?;
        if self.encoder.in_channels != 3 {
            return Err(Error::Config("image encoder must take 3 channels".into()));
        }
        if self.radar_channels == 0 {
            return Err(Error::Config("radar_channels must be positive".into()));
        }
        if self.encoder.patch_size != self.reassemble.patch_size {
            return Err(Error::Config(format!(
                "encoder patch size {} differs from reassemble patch size {}",
                self.encoder.patch_size, self.reassemble.patch_size
            )));
        }
        if self.encoder.tap_layers.len() != self.reassemble.scales.len() {
            return Err(Error::Config(format!(
                "{} tap layers but {} scale ratios",
                self.encoder.tap_layers.len(),
                self.reassemble.scales.len()
            )));
        }
        let (h, w) = self.input();
        self.encoder.grid(h, w)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("input {h}x{w} must be even")));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let (e, r) = (&self.encoder, &self.reassemble);
        kv.set("format", "rcdpt-checkpoint-1")
            .set("mode", self.mode)
            .set("patch_size", e.patch_size)
            .set("token_dim", e.token_dim)
            .set("num_layers", e.num_layers)
            .set("num_heads", e.num_heads)
            .set("mlp_ratio", e.mlp_ratio)
            .set("tap_layers", join_list(&e.tap_layers))
            .set("radar_channels", self.radar_channels)
            .set("scales", join_list(&r.scales))
            .set("decoder_dim", r.out_dim)
            .set("input_h", r.input.0)
            .set("input_w", r.input.1)
            .set(
                "read",
                match r.read {
                    ReadKind::Linear => "linear",
                    ReadKind::Mlp2 => "mlp2",
                },
            );
        kv
    }

    /// Starts from `base` and overrides every key present in `kv`.
    pub fn from_kv(kv: &KeyValues, base: &ModelConfig) -> Result<Self> {
        let mut c = base.clone();
        if let Some(m) = kv.get("mode") {
            c.mode = m.parse()?;
        }
        let e = &mut c.encoder;
        e.patch_size = kv.parse_opt("patch_size")?.unwrap_or(e.patch_size);
        e.token_dim = kv.parse_opt("token_dim")?.unwrap_or(e.token_dim);
        e.num_layers = kv.parse_opt("num_layers")?.unwrap_or(e.num_layers);
        e.num_heads = kv.parse_opt("num_heads")?.unwrap_or(e.num_heads);
        e.mlp_ratio = kv.parse_opt("mlp_ratio")?.unwrap_or(e.mlp_ratio);
        if let Some(t) = kv.list_opt("tap_layers")? {
            e.tap_layers = t;
        }
        c.radar_channels = kv.parse_opt("radar_channels")?.unwrap_or(c.radar_channels);
        let r = &mut c.reassemble;
        r.patch_size = c.encoder.patch_size;
        if let Some(s) = kv.list_opt("scales")? {
            r.scales = s;
        }
        r.out_dim = kv.parse_opt("decoder_dim")?.unwrap_or(r.out_dim);
        r.input.0 = kv.parse_opt("input_h")?.unwrap_or(r.input.0);
        r.input.1 = kv.parse_opt("input_w")?.unwrap_or(r.input.1);
        r.read = match kv.get("read") {
            None => r.read,
            Some("linear") => ReadKind::Linear,
            Some("mlp2") => ReadKind::Mlp2,
            Some(o) => return Err(Error::Config(format!("unknown read kind `{o}`"))),
        };
        c.validate()?;
        Ok(c)
    }
}

/// One encoder → reassemble → decoder pipeline.
#[derive(Clone, Debug)]
struct Branch {
    encoder: Encoder,
    reassemble: Reassemble,
    decoder: Decoder,
}

#[derive(Clone, Debug)]
enum Topology {
    /// Also used for early fusion, with a wider patch embedding.
    Single { branch: Branch },
    Late { image: Branch, radar: Branch, reduce: Conv2d },
    Reassemble {
        image: Encoder,
        radar: Encoder,
        reassemble: Reassemble,
        decoder: Decoder,
    },
}

/// A depth model: parameters plus the structure that reads them.
#[derive(Clone, Debug)]
pub struct DepthModel<T: Element = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    topology: Topology,
    head: DepthHead,
}

fn branch<T: Element>(
    b: &mut Builder<'_, T>,
    prefix: &str,
    enc_cfg: &EncoderConfig,
    cfg: &ModelConfig,
) -> Result<Branch> {
    let grid = cfg.reassemble.grid();
    let d = enc_cfg.token_dim;
    let dh = cfg.reassemble.out_dim;
    let (enc, re, dec) = match prefix {
        "" => ("image_encoder", "reassemble", "decoder"),
        _ => ("radar_encoder", "radar_reassemble", "radar_decoder"),
    };
    Ok(Branch {
        encoder: Encoder::new(&mut b.scope(enc), enc_cfg, grid)?,
        reassemble: Reassemble::new(&mut b.scope(re), d, &cfg.reassemble, false)?,
        decoder: Decoder::new(&mut b.scope(dec), dh, cfg.reassemble.scales.len())?,
    })
}

impl<T: Element> DepthModel<T> {
    /// Builds a model with name-seeded initial weights: parameters with the
    /// same name and shape start identical across modes for a given seed.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder::new(&mut params, seed);
        let cr = cfg.radar_channels;
        let img_cfg = cfg.encoder.clone();
        let radar_cfg = cfg.encoder.with_in_channels(cr);
        let grid = cfg.reassemble.grid();
        let (d, dh, n) = (cfg.encoder.token_dim, cfg.reassemble.out_dim, cfg.reassemble.scales.len());
        let topology = match cfg.mode {
            FusionMode::ImageOnly => Topology::Single {
                branch: branch(&mut b, "", &img_cfg, cfg)?,
            },
            FusionMode::Early => Topology::Single {
                branch: branch(&mut b, "", &cfg.encoder.with_in_channels(3 + cr), cfg)?,
            },
            FusionMode::Late => Topology::Late {
                image: branch(&mut b, "", &img_cfg, cfg)?,
                radar: branch(&mut b, "radar", &radar_cfg, cfg)?,
                reduce: Conv2d::new(&mut b, "late_reduce", 2 * dh, dh, 1, 1, 0)?,
            },
            FusionMode::RcdptReassemble => Topology::Reassemble {
                image: Encoder::new(&mut b.scope("image_encoder"), &img_cfg, grid)?,
                radar: Encoder::new(&mut b.scope("radar_encoder"), &radar_cfg, grid)?,
                reassemble: Reassemble::new(&mut b.scope("reassemble"), d, &cfg.reassemble, true)?,
                decoder: Decoder::new(&mut b.scope("decoder"), dh, n)?,
            },
        };
        let head = DepthHead::new(&mut b, dh)?;
        Ok(DepthModel {
            cfg: cfg.clone(),
            params,
            topology,
            head,
        })
    }

    pub fn mode(&self) -> FusionMode {
        self.cfg.mode
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same structure and values in another element type.
    pub fn cast<U: Element>(&self) -> DepthModel<U> {
        DepthModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            topology: self.topology.clone(),
            head: self.head.clone(),
        }
    }

    /// Network inputs: ImageNet-normalised image and radar depth in
    /// [`RADAR_UNIT`]s.
    pub fn prepare_inputs(&self, image: &Tensor<T>, radar: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, w) = self.cfg.input();
        if image.shape() != [h, w, 3] {
            return Err(Error::Config(format!("image shape {:?}, model expects [{h}, {w}, 3]", image.shape())));
        }
        let cr = self.cfg.radar_channels;
        if radar.shape() != [h, w, cr] {
            return Err(Error::Config(format!("radar shape {:?}, model expects [{h}, {w}, {cr}]", radar.shape())));
        }
        let img = Tensor::from_fn(image.shape(), |i| {
            let c = i % 3;
            T::of((image.data()[i].as_f64() - IMAGENET_MEAN[c]) / IMAGENET_STD[c])
        });
        let scale = T::of(1.0 / RADAR_UNIT);
        let rad = Tensor::from_fn(radar.shape(), |i| radar.data()[i] * scale);
        Ok((img, rad))
    }

    /// Predicted depth `[H, W, 1]` on the context's tape.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, image: &Tensor<T>, radar: &Tensor<T>) -> Result<Var> {
        let (img, rad) = self.prepare_inputs(image, radar)?;
        let out = self.cfg.input();
        let half = (out.0 / 2, out.1 / 2);
        let img = ctx.input(img);
        let rad = ctx.input(rad);
        let feat = match &self.topology {
            Topology::Single { branch } => {
                let x = if self.cfg.mode == FusionMode::Early {
                    ctx.tape.concat(&[img, rad], 2)?
                } else {
                    img
                };
                run_branch(ctx, branch, x, half)?
            }
            Topology::Late { image, radar, reduce } => {
                let fi = run_branch(ctx, image, img, half)?;
                let fr = run_branch(ctx, radar, rad, half)?;
                let cat = ctx.tape.concat(&[fi, fr], 2)?;
                reduce.forward(ctx, cat)?
            }
            Topology::Reassemble {
                image,
                radar,
                reassemble,
                decoder,
            } => {
                let ti = image.forward(ctx, img)?;
                let tr = radar.forward(ctx, rad)?;
                let pyr = reassemble.forward(ctx, &ti, Some(&tr))?;
                decoder.forward(ctx, &pyr, half)?
            }
        };
        self.head.forward(ctx, feat, out)
    }

    /// Evaluation forward pass returning depth `[H, W]`.
    pub fn predict(&self, image: &Tensor<T>, radar: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(&self.params);
        let y = self.forward(&mut ctx, image, radar)?;
        let (h, w) = self.cfg.input();
        ctx.value(y).reshaped(&[h, w])
    }
}

fn run_branch<T: Element>(ctx: &mut Ctx<'_, T>, b: &Branch, x: Var, half: (usize, usize)) -> Result<Var> {
    let taps = b.encoder.forward(ctx, x)?;
    let pyr = b.reassemble.forward(ctx, &taps, None)?;
    b.decoder.forward(ctx, &pyr, half)
}

impl DepthModel<f32> {
    /// Writes `manifest.txt` and one RTEN file per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save_dir(dir)?;
        self.cfg.to_kv().write(&dir.join("manifest.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::read(&dir.join("manifest.txt"))?;
        let mode: FusionMode = kv.require::<String>("mode")?.parse()?;
        let cfg = ModelConfig::from_kv(&kv, &ModelConfig::toy(mode))?;
        let mut m = DepthModel::new(&cfg, 0)?;
        m.params.load_dir(dir)?;
        Ok(m)
    }
}
