//! The desk-scale comparison: one float network pretrained once, then
//! fine-tuned float and retrained under each quantization workflow with
//! the same recipe and seed.

use std::time::{Duration, Instant};

use tqt_core::calib::Mode;
use tqt_core::Rng;
use tqt_graph::Model;

use crate::data::{synthetic, Dataset, SyntheticConfig};
use crate::desk::desk_cnn;
use crate::error::Result;
use crate::train::{pretrain_float, train_float_baseline, train_quantized, PretrainConfig, Precision, Recipe, TrainReport};

/// The quantized runs of the suite, in reporting order.
pub const RUNS: [(Mode, Precision); 4] = [
    (Mode::Static, Precision::Int8),
    (Mode::RetrainWt, Precision::Int8),
    (Mode::RetrainWtTh, Precision::Int8),
    (Mode::RetrainWtTh, Precision::Int4),
];

#[derive(Debug, Clone, PartialEq)]
pub struct DeskSuiteConfig {
    pub data: SyntheticConfig,
    pub pretrain: PretrainConfig,
    pub recipe: Recipe,
    /// Seeds network initialization, pretraining and every retraining run.
    pub seed: u64,
}

impl Default for DeskSuiteConfig {
    fn default() -> Self {
        let recipe = Recipe::desk(24);
        DeskSuiteConfig {
            data: SyntheticConfig::default(),
            pretrain: PretrainConfig {
                batch: recipe.batch,
                ..PretrainConfig::default()
            },
            recipe,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantRun {
    pub mode: Mode,
    pub precision: Precision,
    pub model: Model,
    pub report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct DeskSuite {
    pub data: Dataset,
    /// The pretrained network before folding.
    pub pretrained: Model,
    pub pretrain_losses: Vec<f64>,
    pub float: TrainReport,
    pub runs: Vec<QuantRun>,
    pub elapsed: Duration,
}

impl DeskSuite {
    pub fn run(&self, mode: Mode, precision: Precision) -> Option<&QuantRun> {
        self.runs.iter().find(|r| r.mode == mode && r.precision == precision)
    }

    /// One CSV row per run with its headline metrics.
    pub fn write_summary<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["run", "initial", "best", "best_step", "last", "mean_last5", "mean_dlog2t", "frozen"])?;
        let reports = std::iter::once(&self.float).chain(self.runs.iter().map(|r| &r.report));
        for r in reports {
            w.write_record([
                r.label.clone(),
                format!("{:.2}", r.initial.top1),
                format!("{:.2}", r.best.top1),
                r.best_step.to_string(),
                format!("{:.2}", r.last.top1),
                format!("{:.2}", r.mean_last5),
                format!("{:.4}", r.mean_deviation()),
                r.frozen.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Generates the data, pretrains the desk network and runs the float
/// baseline followed by every entry of [`RUNS`].
pub fn desk_suite(cfg: &DeskSuiteConfig) -> Result<DeskSuite> {
    let start = Instant::now();
    let data = synthetic(&cfg.data);
    let mut pretrained = desk_cnn(&mut Rng::new(cfg.seed));
    let pretrain = PretrainConfig {
        seed: cfg.seed,
        ..cfg.pretrain.clone()
    };
    let pretrain_losses = pretrain_float(&mut pretrained, &data, &pretrain)?;
    let (_, float) = train_float_baseline(&pretrained, &data, &cfg.recipe, cfg.seed)?;
    let mut runs = Vec::with_capacity(RUNS.len());
    for (mode, precision) in RUNS {
        let (model, report) = train_quantized(&pretrained, &data, mode, precision, &cfg.recipe, cfg.seed)?;
        runs.push(QuantRun {
            mode,
            precision,
            model,
            report,
        });
    }
    Ok(DeskSuite {
        data,
        pretrained,
        pretrain_losses,
        float,
        runs,
        elapsed: start.elapsed(),
    })
}
