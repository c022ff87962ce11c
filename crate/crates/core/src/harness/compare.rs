//! Four-way fusion comparison: every mode trained per seed on the same data
//! and augmentation stream, then scored on a held-out split.

use std::fmt::Write as _;
use std::path::Path;

use super::config::TrainConfig;
use super::eval::{evaluate, metrics_csv, write_text, EvalOptions};
use super::train::train;
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::metrics::MetricsReport;

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub mode: FusionMode,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub epoch_losses: Vec<f64>,
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Stat {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompareRow {
    pub mode: FusionMode,
    pub delta1: Stat,
    pub delta2: Stat,
    pub delta3: Stat,
    pub rmse: Stat,
    pub absrel: Stat,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub runs: Vec<RunResult>,
    /// In [`FusionMode::ALL`] order.
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    pub const TABLE_HEADER: &'static str = "mode,delta1_mean,delta1_std,delta2_mean,delta2_std,delta3_mean,delta3_std,\
rmse_mean,rmse_std,absrel_mean,absrel_std,seeds";

    pub fn row(&self, mode: FusionMode) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn table_csv(&self) -> String {
        let mut s = format!("{}\n", Self::TABLE_HEADER);
        for r in &self.rows {
            write!(s, "{}", r.mode).unwrap();
            for st in [r.delta1, r.delta2, r.delta3, r.rmse, r.absrel] {
                write!(s, ",{:.6},{:.6}", st.mean, st.std).unwrap();
            }
            writeln!(s, ",{}", r.seeds).unwrap();
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let rows: Vec<_> = self.runs.iter().map(|r| (r.mode.to_string(), r.seed, r.metrics)).collect();
        metrics_csv(&rows)
    }

    /// Human-readable table with `mean ± std` cells.
    pub fn pretty(&self) -> String {
        let mut s = format!(
            "{:<18} {:>17} {:>17} {:>17} {:>17} {:>17}\n",
            "mode", "delta1", "delta2", "delta3", "rmse", "absrel"
        );
        for r in &self.rows {
            write!(s, "{:<18}", r.mode.to_string()).unwrap();
            for st in [r.delta1, r.delta2, r.delta3, r.rmse, r.absrel] {
                write!(s, " {:>8.4} ± {:<6.4}", st.mean, st.std).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Called with `(mode, seed, epoch, mean_loss)` during training.
pub type CompareProgress<'a> = &'a mut dyn FnMut(FusionMode, u64, usize, f64);

/// Trains and evaluates every mode for every seed. `base.mode` and
/// `base.seed` are ignored. With `out`, each run writes to
/// `out/<mode>_seed<seed>/` and the tables go to `out/comparison.csv` and
/// `out/runs.csv`.
pub fn compare(
    base: &TrainConfig,
    seeds: &[u64],
    train_data: &[SceneSample],
    eval_data: &[SceneSample],
    out: Option<&Path>,
    mut progress: Option<CompareProgress<'_>>,
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    if eval_data.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for mode in FusionMode::ALL {
            let cfg = TrainConfig { mode, seed, ..base.clone() };
            let dir = out.map(|o| o.join(format!("{mode}_seed{seed}")));
            let mut cb = |e: usize, l: f64| {
                if let Some(p) = progress.as_mut() {
                    p(mode, seed, e, l);
                }
            };
            let (model, report) = train(&cfg, train_data, dir.as_deref(), Some(&mut cb))?;
            let res = evaluate(&model, eval_data, &EvalOptions::default())?;
            runs.push(RunResult {
                mode,
                seed,
                metrics: res.lidar,
                epoch_losses: report.epoch_losses,
            });
        }
    }
    let rows = FusionMode::ALL
        .iter()
        .map(|&mode| {
            let m: Vec<&MetricsReport> = runs.iter().filter(|r| r.mode == mode).map(|r| &r.metrics).collect();
            let stat = |f: fn(&MetricsReport) -> f64| Stat::of(&m.iter().map(|r| f(r)).collect::<Vec<_>>());
            CompareRow {
                mode,
                delta1: stat(|r| r.delta1),
                delta2: stat(|r| r.delta2),
                delta3: stat(|r| r.delta3),
                rmse: stat(|r| r.rmse),
                absrel: stat(|r| r.absrel),
                seeds: m.len(),
            }
        })
        .collect();
    let cmp = Comparison { runs, rows };
    if let Some(o) = out {
        write_text(&o.join("comparison.csv"), &cmp.table_csv())?;
        write_text(&o.join("runs.csv"), &cmp.runs_csv())?;
    }
    Ok(cmp)
}
