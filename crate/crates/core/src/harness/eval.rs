//! Evaluation over a dataset, CSV output and depth visualisations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::loss::ValidMask;
use crate::metrics::{AbsRelDenominator, MetricsAccumulator, MetricsReport};
use crate::model::DepthModel;
use crate::tensor::Tensor;
use crate::DEPTH_CAP;

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub denominator: AbsRelDenominator,
    /// Also score against the dense ground truth.
    pub dense: bool,
    /// Write one 16-bit PGM prediction per sample here.
    pub pgm_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    /// Against sparse lidar, the official protocol.
    pub lidar: MetricsReport,
    /// Against dense depth, analysis only.
    pub dense: Option<MetricsReport>,
    pub skipped: usize,
}

/// Pixel-weighted metrics of `model` over `data`.
pub fn evaluate(model: &DepthModel, data: &[SceneSample], opts: &EvalOptions) -> Result<EvalResult> {
    let (h, w) = model.cfg.input();
    let cr = model.cfg.radar_channels;
    let mut lidar = MetricsAccumulator::new(opts.denominator);
    let mut dense = MetricsAccumulator::new(opts.denominator);
    if let Some(d) = &opts.pgm_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (i, s) in data.iter().enumerate() {
        if s.size() != (h, w) || s.radar.shape()[2] != cr {
            return Err(Error::Config(format!(
                "sample {i} is {:?} with {} radar channels; checkpoint expects {h}x{w} with {cr}",
                s.size(),
                s.radar.shape()[2]
            )));
        }
        let pred = model.predict(&s.image, &s.radar)?;
        lidar.add(&pred, &s.lidar, &ValidMask::from_target(&s.lidar)?)?;
        if opts.dense {
            dense.add(&pred, &s.depth, &ValidMask::from_target(&s.depth)?)?;
        }
        if let Some(d) = &opts.pgm_dir {
            write_pgm16(&d.join(format!("pred_{i:06}.pgm")), &pred)?;
        }
    }
    Ok(EvalResult {
        lidar: lidar.report()?,
        dense: if opts.dense { Some(dense.report()?) } else { None },
        skipped: lidar.skipped,
    })
}

/// CSV with one row per report; dense rows carry a `:dense` mode suffix.
pub fn metrics_csv(rows: &[(String, u64, MetricsReport)]) -> String {
    let mut s = format!("{}\n", MetricsReport::CSV_HEADER);
    for (mode, seed, r) in rows {
        writeln!(s, "{}", r.csv_row(mode, *seed)).unwrap();
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Binary 16-bit PGM, `0..=65535` spanning `0..=80` m.
pub fn write_pgm16(path: &Path, depth: &Tensor<f32>) -> Result<()> {
    let s = depth.shape();
    let (h, w) = (s[0], s[1]);
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &d in depth.data() {
        let v = ((d as f64 / DEPTH_CAP).clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
