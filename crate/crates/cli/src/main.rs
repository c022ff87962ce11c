use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rcdpt::data::{write_dataset, Dataset, DatasetSpec, SceneConfig, SceneSample};
use rcdpt::harness::{compare, evaluate, gradcheck_report, train, EvalOptions, TrainConfig};
use rcdpt::harness::eval::{metrics_csv, write_text};
use rcdpt::kv::KeyValues;
use rcdpt::metrics::AbsRelDenominator;
use rcdpt::DepthModel;

#[derive(Parser)]
#[command(name = "rcdpt", version, about = "Radar-camera fusion depth transformer at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic radar/camera/lidar dataset.
    GenData(GenDataArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and score all four fusion modes over several seeds.
    Compare(CompareArgs),
    /// Check every backward rule and each full model against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of scenes.
    #[arg(long)]
    n: usize,
    /// `N` for N×N or `HxW`; both multiples of 8.
    #[arg(long, default_value = "48")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    radar_channels: usize,
}

/// Every config-file key as a flag. Flags override the file.
#[derive(Args, Default)]
struct ConfigFlags {
    /// `key = value` file; keys as in `config.txt` of a training run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_power: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    w_l1: Option<f64>,
    #[arg(long)]
    w_smooth: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl ConfigFlags {
    fn flag_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        macro_rules! put {
            ($($key:literal => $v:expr),* $(,)?) => {
                $(if let Some(v) = &$v {
                    kv.set($key, v);
                })*
            };
        }
        put!(
            "mode" => self.mode,
            "preset" => self.preset,
            "lr0" => self.lr0,
            "lr_power" => self.lr_power,
            "momentum" => self.momentum,
            "weight_decay" => self.weight_decay,
            "batch_size" => self.batch_size,
            "epochs" => self.epochs,
            "seed" => self.seed,
            "height" => self.height,
            "width" => self.width,
            "w_l1" => self.w_l1,
            "w_smooth" => self.w_smooth,
            "checkpoint_every" => self.checkpoint_every,
        );
        kv
    }

    /// Defaults, then the config file, then flags. Input dims not given
    /// anywhere are taken from `data`.
    fn resolve(&self, data: &[SceneSample]) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut dims_given = false;
        if let Some(p) = &self.config {
            let kv = KeyValues::read(p)?;
            dims_given |= kv.get("height").is_some() || kv.get("width").is_some();
            cfg.merge(&kv)?;
        }
        let flags = self.flag_kv();
        dims_given |= flags.get("height").is_some() || flags.get("width").is_some();
        cfg.merge(&flags)?;
        if !dims_given {
            if let Some(s) = data.first() {
                (cfg.height, cfg.width) = s.size();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory, e.g. `<run>/final`.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `target` or `prediction`.
    #[arg(long, default_value = "target")]
    absrel_denominator: String,
    /// Also score against dense depth (rows tagged `:dense`).
    #[arg(long)]
    dense: bool,
    /// Write 16-bit PGM predictions to `<out>/pred/`.
    #[arg(long)]
    pgm: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Separate evaluation dataset. Without it the last part of `--data`
    /// is held out.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Held-out fraction when `--eval-data` is absent.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random inputs per primitive case.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Scenes per end-to-end model check.
    #[arg(long, default_value_t = 3)]
    model_seeds: u64,
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 8)]
    per_tensor: usize,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (h.trim().parse()?, w.trim().parse()?),
        None => {
            let n = s.trim().parse()?;
            (n, n)
        }
    };
    Ok((h, w))
}

fn load_data(dir: &Path) -> Result<Vec<SceneSample>> {
    let ds = Dataset::open(dir)?;
    if ds.is_empty() {
        bail!("{}: no scenes", dir.display());
    }
    Ok(ds.load_all()?)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let (height, width) = parse_size(&a.size).with_context(|| format!("bad --size `{}`", a.size))?;
    let spec = DatasetSpec {
        count: a.n,
        height,
        width,
        seed: a.seed,
        scene: SceneConfig {
            radar_channels: a.radar_channels,
            ..Default::default()
        },
    };
    write_dataset(&a.out, &spec)?;
    println!("wrote {} scenes of {height}x{width} to {}", a.n, a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let cfg = a.flags.resolve(&data)?;
    let mut progress = |e: usize, l: f64| eprintln!("epoch {e:>3}/{} loss {l:.4}", cfg.epochs);
    let (_, report) = train(&cfg, &data, Some(&a.out), Some(&mut progress))?;
    if report.skipped_samples > 0 {
        eprintln!("skipped {} sample visits with no lidar", report.skipped_samples);
    }
    if let Some(r) = report.loss_ratio() {
        println!("final/first epoch loss: {r:.4}");
    }
    println!("checkpoint: {}", a.out.join("final").display());
    Ok(())
}

/// Seed of the run that produced `ckpt`, from its `config.txt` if present.
fn run_seed(ckpt: &Path) -> Result<u64> {
    let Some(cfg) = ckpt.parent().map(|p| p.join("config.txt")).filter(|p| p.exists()) else {
        return Ok(0);
    };
    Ok(KeyValues::read(&cfg)?.parse_opt("seed")?.unwrap_or(0))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = DepthModel::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let data = load_data(&a.data)?;
    let denominator: AbsRelDenominator = a.absrel_denominator.parse()?;
    let opts = EvalOptions {
        denominator,
        dense: a.dense,
        pgm_dir: a.pgm.then(|| a.out.join("pred")),
    };
    let res = evaluate(&model, &data, &opts)?;
    let mode = model.cfg.mode.to_string();
    let seed = run_seed(&a.ckpt)?;
    let mut rows = vec![(mode.clone(), seed, res.lidar)];
    if let Some(d) = res.dense {
        rows.push((format!("{mode}:dense"), seed, d));
    }
    write_text(&a.out.join("metrics.csv"), &metrics_csv(&rows))?;
    println!("lidar: {}", res.lidar);
    if let Some(d) = res.dense {
        println!("dense: {d}");
    }
    if res.skipped > 0 {
        eprintln!("{} samples had no valid lidar pixels", res.skipped);
    }
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let mut train_data = load_data(&a.data)?;
    let eval_data = match &a.eval_data {
        Some(p) => load_data(p)?,
        None => {
            if !(a.holdout > 0.0 && a.holdout < 1.0) {
                bail!("--holdout must be in (0, 1), got {}", a.holdout);
            }
            let n_eval = ((train_data.len() as f64 * a.holdout).round() as usize).max(1);
            if n_eval >= train_data.len() {
                bail!("{} scenes are too few to hold out {n_eval}", train_data.len());
            }
            train_data.split_off(train_data.len() - n_eval)
        }
    };
    let base = a.flags.resolve(&train_data)?;
    eprintln!(
        "{} training scenes, {} evaluation scenes, seeds {:?}",
        train_data.len(),
        eval_data.len(),
        a.seeds
    );
    let mut progress = |m: rcdpt::FusionMode, s: u64, e: usize, l: f64| {
        if e == base.epochs || e.is_multiple_of(10) {
            eprintln!("{m} seed {s}: epoch {e:>3}/{} loss {l:.4}", base.epochs);
        }
    };
    let cmp = compare(&base, &a.seeds, &train_data, &eval_data, Some(&a.out), Some(&mut progress))?;
    print!("{}", cmp.pretty());
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let model_seeds: Vec<u64> = (0..a.model_seeds).collect();
    let report = gradcheck_report(&seeds, &model_seeds, a.per_tensor)?;
    print!("{}", report.render());
    Ok(report.passed())
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::GenData(a) => gen_data(a)?,
        Cmd::Train(a) => cmd_train(a)?,
        Cmd::Eval(a) => cmd_eval(a)?,
        Cmd::Compare(a) => cmd_compare(a)?,
        Cmd::Gradcheck(a) => {
            if !cmd_gradcheck(a)? {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
