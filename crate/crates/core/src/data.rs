//! Procedural multi-sensor scenes, photometric/flip augmentation, and the
//! on-disk dataset layout.
//!
//! A scene is a ground plane under a sky band with 2–6 fronto-parallel
//! objects at random depths. Object colours are random, so the image alone
//! cannot tell an object's depth; radar returns on the objects can.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::tensor::{rten, Tensor};
use crate::DEPTH_CAP;

pub const GENERATOR_VERSION: u32 = 1;
/// Generated sizes must be multiples of this.
pub const SIZE_ALIGN: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[H, W, C_R]` metres, 0 = no return. Channel 0 holds the raw hits;
    /// channel `c` also fills `c·ext` rows above each hit.
    pub radar: Tensor<f32>,
    /// `[H, W]` sparse supervision, 0 = no return.
    pub lidar: Tensor<f32>,
    /// `[H, W]` full ground truth, analysis only.
    pub depth: Tensor<f32>,
}

impl SceneSample {
    pub fn size(&self) -> (usize, usize) {
        (self.depth.shape()[0], self.depth.shape()[1])
    }

    /// Mirrors every map left-right.
    pub fn flipped(&self) -> SceneSample {
        SceneSample {
            image: flip_horizontal(&self.image),
            radar: flip_horizontal(&self.radar),
            lidar: flip_horizontal(&self.lidar),
            depth: flip_horizontal(&self.depth),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub radar_channels: usize,
    /// Gaussian σ of radar depth noise, metres.
    pub radar_noise: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            radar_channels: 3,
            radar_noise: 0.5,
            min_objects: 2,
            max_objects: 6,
        }
    }
}

/// Seed of sample `index` in a dataset generated from `global`.
pub fn sample_seed(global: u64, index: usize) -> u64 {
    global
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ 0x5851_F42D_4C95_7F2D
}

struct Object {
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
    ellipse: bool,
    depth: f64,
    color: [f64; 3],
}

impl Object {
    fn covers(&self, y: usize, x: usize) -> bool {
        if y < self.top || y >= self.bottom || x < self.left || x >= self.right {
            return false;
        }
        if !self.ellipse {
            return true;
        }
        let cy = (self.top + self.bottom) as f64 / 2.0;
        let cx = (self.left + self.right) as f64 / 2.0;
        let ry = (self.bottom - self.top) as f64 / 2.0;
        let rx = (self.right - self.left) as f64 / 2.0;
        let dy = (y as f64 + 0.5 - cy) / ry;
        let dx = (x as f64 + 0.5 - cx) / rx;
        dx * dx + dy * dy <= 1.0
    }
}

/// Haze transmission: farther surfaces fade towards the horizon colour.
fn transmission(depth: f64) -> f64 {
    1.0 - 0.85 * depth / DEPTH_CAP
}

/// Deterministic scene for `seed` at `h × w`.
pub fn gen_scene(seed: u64, h: usize, w: usize, cfg: &SceneConfig) -> Result<SceneSample> {
    if h == 0 || w == 0 || !h.is_multiple_of(SIZE_ALIGN) || !w.is_multiple_of(SIZE_ALIGN) {
        return Err(Error::Config(format!(
            "scene size {h}x{w} must be a positive multiple of {SIZE_ALIGN}"
        )));
    }
    if cfg.radar_channels == 0 || cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return Err(Error::Config("invalid scene configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = h * w;

    // ground plane below the horizon, sky at the depth cap above it
    let horizon = ((h as f64) * rng.random_range(0.28..0.38)).round() as usize;
    let bottom_depth = rng.random_range(3.0..6.0);
    let k = bottom_depth * (h - horizon) as f64;
    let mut depth = vec![DEPTH_CAP; hw];
    let mut id = vec![0u8; hw]; // 0 sky, 1 ground, 2.. objects
    for y in horizon..h {
        let d = (k / (y - horizon + 1) as f64).min(DEPTH_CAP);
        for x in 0..w {
            depth[y * w + x] = d;
            id[y * w + x] = 1;
        }
    }

    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<Object> = (0..n_obj)
        .map(|_| {
            let oh = ((h as f64) * rng.random_range(0.18..0.42)).round().max(3.0) as usize;
            let ow = ((w as f64) * rng.random_range(0.14..0.34)).round().max(3.0) as usize;
            let bottom = rng.random_range((horizon + oh / 2).min(h - 1)..h) + 1;
            let top = bottom.saturating_sub(oh);
            let left = rng.random_range(0..=w - ow);
            Object {
                top,
                bottom,
                left,
                right: left + ow,
                ellipse: rng.random_bool(0.4),
                depth: rng.random_range(2.0..60.0),
                color: [0.0; 3],
            }
        })
        .collect();
    // painter's order: far first
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for (oi, o) in objects.iter().enumerate() {
        for y in o.top..o.bottom {
            for x in o.left..o.right {
                if o.covers(y, x) {
                    depth[y * w + x] = o.depth;
                    id[y * w + x] = 2 + oi as u8;
                }
            }
        }
    }

    // image: per-surface albedo under haze, plus mild texture
    let sky = [rng.random_range(0.55..0.75), rng.random_range(0.7..0.85), rng.random_range(0.85..1.0)];
    let ground = [rng.random_range(0.15..0.3), rng.random_range(0.15..0.3), rng.random_range(0.15..0.3)];
    let haze = [sky[0] + 0.1, sky[1] + 0.05, sky[2]];
    // objects stand out from the road so their outlines show in the image
    for o in objects.iter_mut() {
        loop {
            let c: [f64; 3] = [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)];
            let diff = (0..3).map(|k| (c[k] - ground[k]).abs()).sum::<f64>() / 3.0;
            if diff > 0.2 {
                o.color = c;
                break;
            }
        }
    }
    let texture = Normal::new(0.0, 0.015).unwrap();
    let mut image = vec![0f32; hw * 3];
    for i in 0..hw {
        let y = i / w;
        let albedo = match id[i] {
            0 => {
                let t = y as f64 / horizon.max(1) as f64;
                [sky[0] + 0.1 * t, sky[1] + 0.05 * t, sky[2]]
            }
            1 => ground,
            o => objects[(o - 2) as usize].color,
        };
        let t = if id[i] == 0 { 1.0 } else { transmission(depth[i]) };
        for c in 0..3 {
            let v = albedo[c] * t + haze[c] * (1.0 - t) + texture.sample(&mut rng);
            image[i * 3 + c] = v.clamp(0.0, 1.0) as f32;
        }
    }

    // lidar: jittered scanlines over non-sky pixels
    let spacing = (h / 16).max(2);
    let phase = rng.random_range(0..spacing);
    let mut candidates = Vec::new();
    for x in 0..w {
        let mut y = horizon + phase;
        while y < h {
            let jy = (y as i64 + rng.random_range(-1i64..=1)).clamp(0, h as i64 - 1) as usize;
            if id[jy * w + x] != 0 {
                candidates.push(jy * w + x);
            }
            y += spacing;
        }
    }
    candidates.sort_unstable();
    candidates.dedup();
    candidates.shuffle(&mut rng);
    let target = ((hw as f64) * rng.random_range(0.03..0.06)).round() as usize;
    let min_count = (0.02 * hw as f64).ceil() as usize;
    let mut lidar = vec![0f32; hw];
    let mut count = 0;
    for &i in candidates.iter().take(target) {
        lidar[i] = depth[i] as f32;
        count += 1;
    }
    let mut pool: Vec<usize> = (0..hw).filter(|&i| id[i] != 0 && lidar[i] == 0.0).collect();
    pool.shuffle(&mut rng);
    for &i in pool.iter() {
        if count >= min_count {
            break;
        }
        lidar[i] = depth[i] as f32;
        count += 1;
    }

    // radar: a few noisy returns, at least one per visible object
    let noise = Normal::new(0.0, cfg.radar_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let lo = ((0.002 * hw as f64).ceil() as usize).max(1);
    let hi = ((0.008 * hw as f64).floor() as usize).max(lo);
    let n_hits = rng.random_range(lo..=hi);
    let mut hits: Vec<usize> = Vec::with_capacity(n_hits);
    for oi in 0..objects.len() {
        if hits.len() >= n_hits {
            break;
        }
        let px: Vec<usize> = (0..hw).filter(|&i| id[i] as usize == oi + 2 && depth[i] < DEPTH_CAP).collect();
        if let Some(&p) = px.get(rng.random_range(0..px.len().max(1))) {
            hits.push(p);
        }
    }
    // ground at the cap reads like sky to radar
    let solid: Vec<usize> = (0..hw).filter(|&i| id[i] != 0 && depth[i] < DEPTH_CAP).collect();
    while hits.len() < n_hits {
        let p = solid[rng.random_range(0..solid.len())];
        if !hits.contains(&p) {
            hits.push(p);
        }
    }
    // keep the returns depth-diverse so radar explains depth variation
    let spread = |hs: &[usize]| {
        let m = hs.iter().map(|&i| depth[i]).sum::<f64>() / hs.len() as f64;
        (hs.iter().map(|&i| (depth[i] - m).powi(2)).sum::<f64>() / hs.len() as f64).sqrt()
    };
    if hits.len() >= 2 && spread(&hits) < 5.0 {
        let m = hits.iter().map(|&i| depth[i]).sum::<f64>() / hits.len() as f64;
        let far = *solid
            .iter()
            .filter(|i| !hits.contains(i))
            .max_by(|&&a, &&b| (depth[a] - m).abs().total_cmp(&(depth[b] - m).abs()).then(b.cmp(&a)))
            .expect("ground pixels exist");
        let last = hits.len() - 1;
        hits[last] = far;
    }
    hits.sort_unstable();

    // channel c extends a return upwards by c/(C-1) of the height of the
    // surface it hit, so the last channel spans a whole object
    let cr = cfg.radar_channels;
    let mut radar = vec![0f32; hw * cr];
    for &p in &hits {
        let v = (depth[p] + noise.sample(&mut rng)).clamp(0.1, DEPTH_CAP) as f32;
        let (y, x) = (p / w, p % w);
        let surface = match id[p] {
            1 => h / 8,
            o => objects[(o - 2) as usize].bottom - objects[(o - 2) as usize].top,
        };
        for c in 0..cr {
            let ext = if cr > 1 { (c * surface + (cr - 1) / 2) / (cr - 1) } else { 0 };
            let top = y.saturating_sub(ext);
            for yy in top..=y {
                let o = (yy * w + x) * cr + c;
                // nearer return wins where extensions overlap
                if radar[o] == 0.0 || v < radar[o] {
                    radar[o] = v;
                }
            }
        }
    }

    Ok(SceneSample {
        image: Tensor::new(&[h, w, 3], image)?,
        radar: Tensor::new(&[h, w, cr], radar)?,
        lidar: Tensor::new(&[h, w], lidar)?,
        depth: Tensor::new(&[h, w], depth.iter().map(|&d| d as f32).collect())?,
    })
}

/// Left-right mirror of an `[H, W]` or `[H, W, C]` map.
pub fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s[0], s[1]);
    let c = t.numel() / (h * w);
    let mut out = t.detached();
    for y in 0..h {
        for x in 0..w {
            let (src, dst) = ((y * w + x) * c, (y * w + (w - 1 - x)) * c);
            out.data_mut()[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
        }
    }
    out
}

/// Photometric factors; each drawn uniformly from `(0.9, 1.1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Photometric {
    pub gamma: f64,
    pub brightness: f64,
    pub color: [f64; 3],
}

impl Photometric {
    pub const RANGE: (f64, f64) = (0.9, 1.1);
    pub const FLIP_PROB: f64 = 0.5;

    pub fn identity() -> Self {
        Photometric {
            gamma: 1.0,
            brightness: 1.0,
            color: [1.0; 3],
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let (a, b) = Self::RANGE;
        Photometric {
            gamma: rng.random_range(a..b),
            brightness: rng.random_range(a..b),
            color: [rng.random_range(a..b), rng.random_range(a..b), rng.random_range(a..b)],
        }
    }

    /// `clamp(((x^γ)·b)·c_k, 0, 1)` per pixel and channel.
    pub fn apply(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let c = *image.shape().last().unwrap();
        Tensor::from_fn(image.shape(), |i| {
            let x = image.data()[i] as f64;
            let v = x.powf(self.gamma) * self.brightness * self.color[(i % c).min(2)];
            v.clamp(0.0, 1.0) as f32
        })
    }
}

/// Photometric jitter and a coin-flip mirror. The flag tells the caller to
/// mirror the sensor maps too.
pub fn augment(image: &Tensor<f32>, rng: &mut impl Rng) -> (Tensor<f32>, bool) {
    let p = Photometric::sample(rng);
    let flip = rng.random_bool(Photometric::FLIP_PROB);
    let out = p.apply(image);
    (if flip { flip_horizontal(&out) } else { out }, flip)
}

/// Augments a whole sample; depth values are never altered.
pub fn augment_sample(s: &SceneSample, rng: &mut impl Rng) -> SceneSample {
    let (image, flip) = augment(&s.image, rng);
    if flip {
        SceneSample {
            image,
            radar: flip_horizontal(&s.radar),
            lidar: flip_horizontal(&s.lidar),
            depth: flip_horizontal(&s.depth),
        }
    } else {
        SceneSample { image, ..s.clone() }
    }
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:06}"))
}

pub fn write_sample(dir: &Path, s: &SceneSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    rten::write(dir.join("image.rten"), &s.image)?;
    rten::write(dir.join("radar.rten"), &s.radar)?;
    rten::write(dir.join("lidar.rten"), &s.lidar)?;
    rten::write(dir.join("depth.rten"), &s.depth)
}

pub fn read_sample(dir: &Path) -> Result<SceneSample> {
    let s = SceneSample {
        image: rten::read(dir.join("image.rten"))?,
        radar: rten::read(dir.join("radar.rten"))?,
        lidar: rten::read(dir.join("lidar.rten"))?,
        depth: rten::read(dir.join("depth.rten"))?,
    };
    let (h, w) = (s.depth.shape()[0], s.depth.shape().get(1).copied().unwrap_or(0));
    let ok = s.depth.rank() == 2
        && s.lidar.shape() == [h, w]
        && s.image.shape() == [h, w, 3]
        && s.radar.rank() == 3
        && s.radar.shape()[..2] == [h, w];
    if !ok {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            msg: "inconsistent sample shapes".into(),
        });
    }
    Ok(s)
}

/// Generation parameters recorded in `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl DatasetSpec {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("count", self.count)
            .set("height", self.height)
            .set("width", self.width)
            .set("seed", self.seed)
            .set("generator_version", GENERATOR_VERSION)
            .set("radar_channels", self.scene.radar_channels)
            .set("radar_noise", self.scene.radar_noise);
        kv
    }
}

/// Samples of a dataset, generated in memory.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<SceneSample>> {
    (0..spec.count)
        .map(|i| gen_scene(sample_seed(spec.seed, i), spec.height, spec.width, &spec.scene))
        .collect()
}

/// Writes `scene_%06d/` directories plus `manifest.txt` under `root`.
pub fn write_dataset(root: &Path, spec: &DatasetSpec) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for i in 0..spec.count {
        let s = gen_scene(sample_seed(spec.seed, i), spec.height, spec.width, &spec.scene)?;
        write_sample(&scene_dir(root, i), &s)?;
    }
    spec.to_kv().write(&root.join("manifest.txt"))
}

/// Sorted `scene_*` directories of a dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub scenes: Vec<PathBuf>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let mut scenes: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("scene_"))
            })
            .collect();
        scenes.sort();
        Ok(Dataset {
            root: root.to_path_buf(),
            scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SceneSample>> + '_ {
        self.scenes.iter().map(|p| read_sample(p))
    }

    pub fn load_all(&self) -> Result<Vec<SceneSample>> {
        self.iter().collect()
    }

    pub fn manifest(&self) -> Result<Option<KeyValues>> {
        let p = self.root.join("manifest.txt");
        if p.exists() {
            KeyValues::read(&p).map(Some)
        } else {
            Ok(None)
        }
    }
}
