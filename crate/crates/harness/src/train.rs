//! Float pretraining, the quantized retraining recipe and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::str::FromStr;

use tqt_core::calib::{init_thresholds, Mode};
use tqt_core::optim::{AdamState, FreezeController, LrSchedule, TrainLogRow};
use tqt_core::tape::softmax_rows;
use tqt_core::{Rng, Tensor64};
use tqt_graph::calibrate::calibrate;
use tqt_graph::passes::optimize;
use tqt_graph::{forward, infer, insert_quant_layers, BnMode, ExecOptions, Model, Op, PrecisionConfig};
use tqt_runtime::bitexact::quantize_inputs;
use tqt_runtime::{execute_integer, LoweredGraph};

use crate::data::{Dataset, Split};
use crate::error::{HarnessError, Result};

/// Most epochs a retraining run may use.
pub const MAX_EPOCHS: usize = 5;

/// Images per evaluation batch.
const EVAL_BATCH: usize = 200;

/// Images used to calibrate thresholds.
const CALIB_IMAGES: usize = 480;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Int8,
    Int4,
}

impl Precision {
    pub fn config(self) -> PrecisionConfig {
        match self {
            Precision::Int8 => PrecisionConfig::INT8,
            Precision::Int4 => PrecisionConfig::INT4,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Int8 => "int8",
            Precision::Int4 => "int4",
        })
    }
}

impl FromStr for Precision {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "int8" => Ok(Precision::Int8),
            "int4" => Ok(Precision::Int4),
            _ => Err(HarnessError::Config(format!("unknown precision '{s}' (int8 or int4)"))),
        }
    }
}

/// Optimizer settings and schedules for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub batch: usize,
    pub epochs: usize,
    pub weight_lr: LrSchedule,
    pub threshold_lr: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub freeze_start: u64,
    pub freeze_interval: u64,
    pub val_interval: u64,
}

impl Recipe {
    /// The full-scale schedule: weights at `1e-6`, thresholds at `1e-2`,
    /// staircase decays every `3000·24/N` and `1000·24/N` steps, freezing
    /// from `1000·24/N` steps on, once every 50 steps.
    pub fn reference(batch: usize) -> Self {
        let n = batch as u64;
        Recipe {
            batch,
            epochs: MAX_EPOCHS,
            weight_lr: LrSchedule::weights(n),
            threshold_lr: LrSchedule::thresholds(n),
            beta1: 0.9,
            beta2: 0.999,
            freeze_start: tqt_core::optim::batch_scaled(1000, n),
            freeze_interval: 50,
            val_interval: 200,
        }
    }

    /// The reference schedule compressed for a few hundred steps per epoch.
    /// Every step count is divided by ten, and the weight rate is raised to
    /// suit a small network fine-tuned from a short pretraining run.
    pub fn desk(batch: usize) -> Self {
        let n = batch as u64;
        let scaled = |steps| tqt_core::optim::batch_scaled(steps, n);
        Recipe {
            weight_lr: LrSchedule {
                base: 1e-3,
                factor: 0.94,
                period: scaled(300),
            },
            threshold_lr: LrSchedule {
                base: 1e-2,
                factor: 0.5,
                period: scaled(100),
            },
            freeze_start: scaled(100),
            freeze_interval: 5,
            ..Self::reference(batch)
        }
    }
}

/// Experiment settings for the `train` command.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    /// Saved float model; `None` pretrains the bundled desk network.
    pub graph: Option<PathBuf>,
    /// Dataset directory; `None` generates the bundled task.
    pub data: Option<PathBuf>,
    pub mode: Mode,
    pub precision: Precision,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > MAX_EPOCHS {
            return Err(HarnessError::Config(format!(
                "at most {MAX_EPOCHS} epochs, got {}",
                self.epochs
            )));
        }
        if self.batch == 0 {
            return Err(HarnessError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eval {
    /// Top-1 accuracy in percent.
    pub top1: f64,
    /// Mean softmax cross-entropy.
    pub loss: f64,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Top-1 accuracy and loss of `model` on `split`.
pub fn evaluate(model: &Model, split: &Split, opts: &ExecOptions) -> Result<Eval> {
    if split.is_empty() {
        return Err(HarnessError::Data("evaluation split is empty".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (x, y) in split.chunks(EVAL_BATCH) {
        let logits = infer(model, &[x], opts)?.remove(0);
        if logits.rank() != 2 || logits.shape()[0] != y.len() {
            return Err(HarnessError::Data(format!(
                "model produced {:?} for a batch of {}",
                logits.shape(),
                y.len()
            )));
        }
        let k = logits.shape()[1];
        let probs = softmax_rows(&logits);
        for (i, &label) in y.iter().enumerate() {
            if label >= k {
                return Err(HarnessError::Data(format!("label {label} but only {k} logits")));
            }
            correct += (argmax(&logits.data()[i * k..(i + 1) * k]) == label) as usize;
            loss -= probs.data()[i * k + label].max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(Eval {
        top1: 100.0 * correct as f64 / split.len() as f64,
        loss: loss / split.len() as f64,
    })
}

/// Top-1 accuracy of the integer-only execution of a lowered model.
pub fn evaluate_integer(model: &Model, lg: &LoweredGraph, split: &Split) -> Result<f64> {
    let mut correct = 0usize;
    for (x, y) in split.chunks(EVAL_BATCH) {
        let ins = quantize_inputs(model, lg, &[x])?;
        let out = execute_integer(lg, &ins)?.remove(0);
        let k = out.shape()[1];
        for (i, &label) in y.iter().enumerate() {
            let row: Vec<f64> = out.data.data()[i * k..(i + 1) * k].iter().map(|&v| v as f64).collect();
            correct += (argmax(&row) == label) as usize;
        }
    }
    Ok(100.0 * correct as f64 / split.len() as f64)
}

/// Float pretraining with batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// The learning rate halves every this many epochs.
    pub halve_every: usize,
    /// Weight of the previous moving statistic in each update.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch: 24,
            lr: 3e-3,
            halve_every: 5,
            bn_momentum: 0.9,
            seed: 0,
        }
    }
}

fn check_loss(step: u64, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Diverged {
            step,
            detail: format!("loss became {loss}"),
        })
    }
}

fn apply_adam(
    model: &mut Model,
    states: &mut HashMap<String, AdamState<f64>>,
    grads: &[(String, Tensor64)],
    lr: f64,
    beta1: f64,
    beta2: f64,
) -> Result<()> {
    for (id, g) in grads {
        let st = states
            .entry(id.clone())
            .or_insert_with(|| AdamState::new(g.len(), lr, beta1, beta2, 1e-8));
        let upd = st.step_lr(g.data(), lr)?;
        let w = model.consts.get_mut(id).expect("trainable constant exists");
        for (v, u) in w.data_mut().iter_mut().zip(upd) {
            *v += u;
        }
    }
    Ok(())
}

/// Trains a float model with batch norm in batch-statistics mode and keeps
/// exponential moving averages of those statistics. Returns the mean loss
/// of every epoch.
pub fn pretrain_float(model: &mut Model, data: &Dataset, cfg: &PretrainConfig) -> Result<Vec<f64>> {
    let mut rng = Rng::new(cfg.seed);
    let opts = ExecOptions {
        train_weights: true,
        bn: BnMode::Batch,
        ..ExecOptions::float()
    };
    let mut states = HashMap::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let steps = data.train.len() / cfg.batch;
    let schedule = LrSchedule {
        base: cfg.lr,
        factor: 0.5,
        period: (steps * cfg.halve_every).max(1) as u64,
    };
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        let order = rng.permutation(data.train.len());
        let mut total = 0.0;
        for b in 0..steps {
            let (x, y) = data.train.batch(&order[b * cfg.batch..(b + 1) * cfg.batch]);
            let mut f = forward(model, &[x], &opts)?;
            let loss = f.tape.softmax_cross_entropy(f.outputs[0], &y)?;
            let value = f.tape.value(loss).item();
            check_loss(step, value)?;
            total += value;
            let grads = f.tape.backward(loss)?;
            let g: Vec<(String, Tensor64)> = f
                .params
                .iter()
                .filter_map(|(id, &v)| grads.get(v).map(|g| (id.clone(), g.clone())))
                .collect();
            apply_adam(model, &mut states, &g, schedule.lr(step), 0.9, 0.999)?;
            for (id, mean, var) in &f.bn_stats {
                let node = model.graph.node(id).expect("batch-norm node").clone();
                for (input, batch_stat) in [(&node.inputs[3], mean), (&node.inputs[4], var)] {
                    let moving = model.consts.get_mut(input).expect("moving statistic");
                    for (m, &s) in moving.data_mut().iter_mut().zip(batch_stat.data()) {
                        *m = cfg.bn_momentum * *m + (1.0 - cfg.bn_momentum) * s;
                    }
                }
            }
            step += 1;
        }
        epoch_losses.push(total / steps.max(1) as f64);
    }
    Ok(epoch_losses)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValPoint {
    pub step: u64,
    pub eval: Eval,
}

/// Outcome of one retraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub label: String,
    /// Accuracy right after calibration, before any training.
    pub initial: Eval,
    /// Best validation point; the returned model holds its parameters.
    pub best: Eval,
    pub best_step: u64,
    pub last: Eval,
    /// Mean top-1 over the last five validation points.
    pub mean_last5: f64,
    pub history: Vec<ValPoint>,
    pub steps: u64,
    /// Calibrated `log2 t` per group.
    pub calibrated: BTreeMap<String, f64>,
    /// `log2 t` per group in the returned model.
    pub trained: BTreeMap<String, f64>,
    pub frozen: usize,
    pub log: Vec<TrainLogRow>,
}

impl TrainReport {
    /// `ceil(trained) - ceil(calibrated)` per threshold group.
    pub fn deviations(&self) -> Vec<(String, i64)> {
        self.calibrated
            .iter()
            .map(|(g, &c)| (g.clone(), (self.trained[g].ceil() - c.ceil()) as i64))
            .collect()
    }

    pub fn mean_deviation(&self) -> f64 {
        let d = self.deviations();
        if d.is_empty() {
            return 0.0;
        }
        d.iter().map(|(_, v)| *v as f64).sum::<f64>() / d.len() as f64
    }

    pub fn write_history<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["run", "step", "top1", "loss"])?;
        for p in &self.history {
            w.write_record([
                self.label.clone(),
                p.step.to_string(),
                p.eval.top1.to_string(),
                p.eval.loss.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn static_report(label: String, initial: Eval, model: &Model) -> TrainReport {
    TrainReport {
        label,
        initial,
        best: initial,
        best_step: 0,
        last: initial,
        mean_last5: initial.top1,
        history: Vec::new(),
        steps: 0,
        calibrated: model.thresholds.clone(),
        trained: model.thresholds.clone(),
        frozen: 0,
        log: Vec::new(),
    }
}

/// Top-1, weights and thresholds of the best validation point so far.
type Snapshot = (f64, BTreeMap<String, Tensor64>, BTreeMap<String, f64>);

/// Runs the recipe on `model` with `opts` deciding what is quantized and
/// trained, validating every `val_interval` steps and at the end. The model
/// is left holding the best validated parameters.
pub fn fit(model: &mut Model, data: &Dataset, recipe: &Recipe, opts: &ExecOptions, seed: u64, label: &str) -> Result<TrainReport> {
    let eval_opts = ExecOptions {
        quantize: opts.quantize,
        active_groups: opts.active_groups.clone(),
        ..ExecOptions::default()
    };
    let initial = evaluate(model, &data.val, &eval_opts)?;
    let mut report = static_report(label.to_string(), initial, model);
    let steps_per_epoch = data.train.len() / recipe.batch;
    let total = (recipe.epochs * steps_per_epoch) as u64;
    if total == 0 || !(opts.train_weights || opts.train_thresholds) {
        return Ok(report);
    }

    let groups: Vec<String> = model.thresholds.keys().cloned().collect();
    let mut freeze = FreezeController::with_start(groups.len(), recipe.freeze_start);
    freeze.interval = recipe.freeze_interval;
    let mut weight_states = HashMap::new();
    let mut threshold_states: Vec<AdamState<f64>> = groups
        .iter()
        .map(|_| AdamState::new(1, recipe.threshold_lr.base, recipe.beta1, recipe.beta2, 1e-8))
        .collect();
    let mut rng = Rng::new(seed);
    let mut best: Option<Snapshot> = None;
    let mut step = 0u64;

    for _ in 0..recipe.epochs {
        let order = rng.permutation(data.train.len());
        for b in 0..steps_per_epoch {
            let (x, y) = data.train.batch(&order[b * recipe.batch..(b + 1) * recipe.batch]);
            let mut f = forward(model, &[x], opts)?;
            let loss = f.tape.softmax_cross_entropy(f.outputs[0], &y)?;
            let loss_value = f.tape.value(loss).item();
            check_loss(step, loss_value)?;
            let grads = f.tape.backward(loss)?;

            let weight_grads: Vec<(String, Tensor64)> = f
                .params
                .iter()
                .filter_map(|(id, &v)| grads.get(v).map(|g| (id.clone(), g.clone())))
                .collect();
            let lr_w = recipe.weight_lr.lr(step);
            apply_adam(model, &mut weight_states, &weight_grads, lr_w, recipe.beta1, recipe.beta2)?;

            if opts.train_thresholds {
                let tg: Vec<f64> = groups
                    .iter()
                    .map(|g| f.thresholds.get(g).and_then(|&v| grads.get(v)).map_or(0.0, |t| t.item()))
                    .collect();
                let lr_t = recipe.threshold_lr.lr(step);
                for (i, g) in groups.iter().enumerate() {
                    if freeze.is_frozen(i) {
                        continue;
                    }
                    let upd = threshold_states[i].step_lr(&[tg[i]], lr_t)?[0];
                    *model.thresholds.get_mut(g).expect("group threshold") += upd;
                }
                let values: Vec<f64> = groups.iter().map(|g| model.thresholds[g]).collect();
                freeze.freeze_step(&tg, &values)?;
                report.log.push(TrainLogRow {
                    step,
                    loss: loss_value,
                    log2_ts: values,
                    grads: tg,
                    frozen: freeze.frozen.clone(),
                });
            }
            step += 1;

            if step.is_multiple_of(recipe.val_interval) || step == total {
                let eval = evaluate(model, &data.val, &eval_opts)?;
                report.history.push(ValPoint { step, eval });
                if best.as_ref().is_none_or(|(top1, _, _)| eval.top1 > *top1) {
                    best = Some((eval.top1, model.consts.clone(), model.thresholds.clone()));
                    report.best = eval;
                    report.best_step = step;
                }
            }
        }
    }

    report.last = report.history.last().map_or(initial, |p| p.eval);
    let tail = &report.history[report.history.len().saturating_sub(5)..];
    report.mean_last5 = tail.iter().map(|p| p.eval.top1).sum::<f64>() / tail.len() as f64;
    report.steps = step;
    report.frozen = freeze.frozen_count();
    if let Some((_, consts, thresholds)) = best {
        model.consts = consts;
        model.thresholds = thresholds;
    }
    report.trained = model.thresholds.clone();
    Ok(report)
}

/// Folds and rewrites a float model into its deployable float form.
pub fn prepare(float: &Model) -> Result<Model> {
    let mut m = float.clone();
    optimize(&mut m, &crate::desk::input_shapes(1))?;
    Ok(m)
}

/// Calibration batches drawn from the head of the training split.
pub fn calibration_batches(data: &Dataset) -> Vec<Vec<Tensor64>> {
    let n = CALIB_IMAGES.min(data.train.len());
    let idx: Vec<usize> = (0..n).collect();
    idx.chunks(EVAL_BATCH)
        .map(|c| vec![data.train.batch(c).0])
        .collect()
}

/// Prepares, quantizes and calibrates `float` for `mode`, then retrains it
/// with `recipe` when the mode trains anything.
pub fn train_quantized(
    float: &Model,
    data: &Dataset,
    mode: Mode,
    precision: Precision,
    recipe: &Recipe,
    seed: u64,
) -> Result<(Model, TrainReport)> {
    let mut m = prepare(float)?;
    insert_quant_layers(&mut m, precision.config())?;
    calibrate(&mut m, &calibration_batches(data), init_thresholds(mode))?;
    let opts = ExecOptions {
        quantize: true,
        train_weights: mode.trains_weights(),
        train_thresholds: mode.trains_thresholds(),
        ..ExecOptions::default()
    };
    let report = fit(&mut m, data, recipe, &opts, seed, &format!("{mode}-{precision}"))?;
    Ok((m, report))
}

/// Fine-tunes the prepared float model with the same recipe, unquantized.
pub fn train_float_baseline(float: &Model, data: &Dataset, recipe: &Recipe, seed: u64) -> Result<(Model, TrainReport)> {
    let mut m = prepare(float)?;
    let opts = ExecOptions {
        train_weights: true,
        ..ExecOptions::float()
    };
    let report = fit(&mut m, data, recipe, &opts, seed, "float")?;
    Ok((m, report))
}

/// Number of quantizer groups whose members all read constants.
pub fn weight_group_count(model: &Model) -> Result<usize> {
    Ok(model
        .groups()?
        .iter()
        .filter(|(_, info)| {
            info.members.iter().all(|m| {
                let src = &model.graph.node(m).expect("member").inputs[0];
                matches!(model.graph.node(src).map(|n| &n.op), Some(Op::Const { .. }))
            })
        })
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticConfig};
    use crate::desk::desk_cnn;

    fn tiny() -> Dataset {
        synthetic(&SyntheticConfig {
            train: 48,
            val: 24,
            ..SyntheticConfig::default()
        })
    }

    #[test]
    fn desk_recipe_compresses_the_reference_step_counts() {
        let r = Recipe::reference(24);
        let d = Recipe::desk(24);
        assert_eq!(r.threshold_lr.period, 10 * d.threshold_lr.period);
        assert_eq!(r.weight_lr.period, 10 * d.weight_lr.period);
        assert_eq!(r.freeze_start, 10 * d.freeze_start);
        assert_eq!(r.freeze_interval, 10 * d.freeze_interval);
        assert_eq!(d.threshold_lr.base, r.threshold_lr.base);
    }

    #[test]
    fn perfect_memorization_scores_full_marks() {
        // A linear classifier that reads the label off the first pixel.
        let mut b = tqt_graph::ModelBuilder::new();
        b.input("x");
        b.op("flat", Op::Flatten, &["x"]);
        let mut w = Tensor64::zeros(&[4, 3]);
        for k in 0..3 {
            w.data_mut()[k] = k as f64;
        }
        b.matmul("fc", "flat", w);
        b.bias_add("logits", "fc", Tensor64::from_vec(vec![0.0, -0.5, -2.0]));
        b.output("logits");
        let m = b.build().unwrap();
        // Logits k·v - c_k peak at k = label for v in {0, 1, 2}.
        let labels = vec![0, 1, 2, 1, 0, 2];
        let data: Vec<f64> = labels.iter().flat_map(|&l| [l as f64, 0.0, 0.0, 0.0]).collect();
        let split = Split::new(Tensor64::new(vec![6, 2, 2, 1], data).unwrap(), labels).unwrap();
        let e = evaluate(&m, &split, &ExecOptions::float()).unwrap();
        assert_eq!(e.top1, 100.0);
    }

    #[test]
    fn zero_epochs_return_the_calibrated_metrics() {
        let data = tiny();
        let float = desk_cnn(&mut Rng::new(1));
        let mut recipe = Recipe::desk(12);
        recipe.epochs = 0;
        let (m, rep) = train_quantized(&float, &data, Mode::RetrainWtTh, Precision::Int8, &recipe, 0).unwrap();
        assert_eq!(rep.steps, 0);
        assert!(rep.history.is_empty());
        assert_eq!(rep.best, rep.initial);
        assert_eq!(rep.calibrated, m.thresholds);
        assert_eq!(rep.mean_deviation(), 0.0);
    }

    #[test]
    fn retraining_moves_weights_and_thresholds_deterministically() {
        let data = tiny();
        let float = desk_cnn(&mut Rng::new(2));
        let mut recipe = Recipe::desk(12);
        recipe.epochs = 1;
        recipe.val_interval = 2;
        let run = || train_quantized(&float, &data, Mode::RetrainWtTh, Precision::Int8, &recipe, 5).unwrap();
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(m1.consts, m2.consts);
        assert_eq!(r1.steps, 4);
        assert_eq!(r1.log.len(), 4);
        assert_eq!(r1.history.iter().map(|p| p.step).collect::<Vec<_>>(), vec![2, 4]);
        assert!(r1.calibrated.iter().any(|(g, v)| r1.log[3].log2_ts[r1.calibrated.keys().position(|k| k == g).unwrap()] != *v));
    }

    #[test]
    fn static_mode_never_trains() {
        let data = tiny();
        let float = desk_cnn(&mut Rng::new(3));
        let (m, rep) = train_quantized(&float, &data, Mode::Static, Precision::Int8, &Recipe::desk(12), 0).unwrap();
        assert_eq!(rep.steps, 0);
        assert_eq!(m.consts, prepare_quantized_consts(&float));
    }

    fn prepare_quantized_consts(float: &Model) -> BTreeMap<String, Tensor64> {
        let mut m = prepare(float).unwrap();
        insert_quant_layers(&mut m, PrecisionConfig::INT8).unwrap();
        m.consts
    }

    #[test]
    fn precision_names_parse() {
        assert_eq!("INT4".parse::<Precision>().unwrap(), Precision::Int4);
        assert!("int2".parse::<Precision>().is_err());
    }

    #[test]
    fn too_many_epochs_are_rejected() {
        let cfg = TrainRunConfig {
            graph: None,
            data: None,
            mode: Mode::Static,
            precision: Precision::Int8,
            epochs: 6,
            batch: 24,
            seed: 0,
        };
        assert!(cfg.validate().is_err());
    }
}
