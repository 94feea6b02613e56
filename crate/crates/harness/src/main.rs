use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tqt_core::calib::{init_thresholds, write_calib_report, Mode};
use tqt_core::io::write_tensor;
use tqt_core::optim::{adam_guidelines, write_train_log};
use tqt_core::Rng;
use tqt_graph::calibrate::calibrate;
use tqt_graph::passes::{avgpool_to_dwconv, collapse_concat, fold_batchnorm, infer_shapes, splice_identity};
use tqt_graph::{infer, insert_quant_layers, ExecOptions, Model, PrecisionConfig};
use tqt_harness::checks::{quantizer_gradcheck, transfer_signs};
use tqt_harness::data::{load_dir, read_real_tensor, synthetic, Dataset, SyntheticConfig};
use tqt_harness::desk::{desk_cnn, input_shapes};
use tqt_harness::suite::{desk_suite, DeskSuiteConfig};
use tqt_harness::toy::{measure_oscillation, toy_l2_run, ToyOptimizer, ToyRunConfig};
use tqt_harness::train::{
    calibration_batches, pretrain_float, train_quantized, Precision, PretrainConfig, Recipe, TrainRunConfig,
};
use tqt_harness::HarnessError;
use tqt_runtime::bitexact::{bitexact_check, quantize_inputs, random_inputs};
use tqt_runtime::{execute_integer, lower, LoweredGraph};

#[derive(Parser)]
#[command(name = "tqt", version, about = "Trained quantization thresholds: calibration, retraining and integer inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct PrecisionArgs {
    /// Preset bit-widths: int8, or int4 (4-bit weights, 8-bit activations).
    #[arg(long, default_value = "int8")]
    precision: String,
    /// Overrides the weight bit-width of the preset.
    #[arg(long)]
    bits_w: Option<u32>,
    /// Overrides the activation bit-width of the preset.
    #[arg(long)]
    bits_a: Option<u32>,
}

impl PrecisionArgs {
    fn config(&self) -> Result<PrecisionConfig> {
        let mut cfg: PrecisionConfig = self.precision.parse()?;
        if let Some(b) = self.bits_w {
            cfg.bits_w = b;
        }
        if let Some(b) = self.bits_a {
            cfg.bits_a = b;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Pass {
    FoldBn,
    AvgpoolToDwconv,
    CollapseConcat,
    SpliceIdentity,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize the thresholds of a quantized graph from data.
    Calibrate {
        #[arg(long)]
        graph: PathBuf,
        /// Dataset directory; the bundled task when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "retrain-wt-th")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply float graph rewrites.
    Transform {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
        passes: Vec<Pass>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Insert quantization layers into a float graph.
    Quantize {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        precision: PrecisionArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain a quantized network, or run the whole desk comparison with `--suite`.
    Train {
        /// Saved float model; the desk network is pretrained when omitted.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "retrain-wt-th")]
        mode: String,
        #[arg(long, default_value = "int8")]
        precision: Precision,
        #[arg(long, default_value_t = tqt_harness::train::MAX_EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = 24)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run the float baseline and every quantized workflow.
        #[arg(long)]
        suite: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lower a calibrated quantized graph to integer operations.
    Lower {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a graph on a tensor file.
    Infer {
        #[arg(long)]
        graph: PathBuf,
        /// f32 or f64 tensor holding the input batch.
        #[arg(long)]
        input: PathBuf,
        /// Treat `--graph` as a lowered bundle and run it on integers.
        #[arg(long)]
        integer: bool,
        /// Emulate quantization when running a quantized float graph.
        #[arg(long)]
        quantized: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare emulated and integer execution node by node.
    Bitexact {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Batch shape of each random input, e.g. 1,32,32,3.
        #[arg(long, value_delimiter = ',', default_value = "1,32,32,3")]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Single-quantizer L2 experiments over optimizers and input scales.
    Toy {
        #[arg(long, default_value_t = 8)]
        bits: u32,
        #[arg(long, value_delimiter = ',', default_value = "0.01,1,100")]
        sigma: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "raw-sgd,log-sgd,log-adam,normed-log-sgd")]
        optimizer: Vec<ToyOptimizer>,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the quantizer gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print Adam stability limits for log-threshold training.
    Guidelines {
        #[arg(long, value_delimiter = ',', default_value = "4,8")]
        bits: Vec<u32>,
    },
}

fn dataset(dir: Option<&Path>, seed: u64) -> Result<Dataset> {
    match dir {
        Some(d) => load_dir(d).with_context(|| format!("loading dataset from {}", d.display())),
        None => Ok(synthetic(&SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        })),
    }
}

fn load_model(dir: &Path) -> Result<Model> {
    Model::load(dir).with_context(|| format!("loading graph from {}", dir.display()))
}

fn save_model(model: &Model, dir: &Path) -> Result<()> {
    model.save(dir).with_context(|| format!("writing graph to {}", dir.display()))?;
    println!("{}", model.graph.serialize());
    Ok(())
}

fn parse_mode(s: &str) -> Result<Mode> {
    Ok(s.parse::<Mode>()?)
}

fn run_train(cfg: TrainRunConfig, out: &Path) -> Result<()> {
    let TrainRunConfig { mode, precision, epochs, batch, seed, .. } = cfg;
    cfg.validate()?;
    let data = dataset(cfg.data.as_deref(), seed)?;
    let float = match &cfg.graph {
        Some(g) => load_model(g)?,
        None => {
            let mut m = desk_cnn(&mut Rng::new(seed));
            let losses = pretrain_float(
                &mut m,
                &data,
                &PretrainConfig {
                    batch,
                    seed,
                    ..PretrainConfig::default()
                },
            )?;
            eprintln!("pretraining losses per epoch: {losses:.3?}");
            m
        }
    };
    let mut recipe = Recipe::desk(batch);
    recipe.epochs = epochs;
    let (model, report) = train_quantized(&float, &data, mode, precision, &recipe, seed)?;
    fs::create_dir_all(out)?;
    model.save(out.join("model"))?;
    report.write_history(File::create(out.join("history.csv"))?)?;
    let names: Vec<String> = report.calibrated.keys().cloned().collect();
    write_train_log(File::create(out.join("train_log.csv"))?, &names, &report.log)?;
    let mut w = csv::Writer::from_path(out.join("deviations.csv"))?;
    w.write_record(["group", "calibrated_log2_t", "trained_log2_t", "dceil"])?;
    for (g, d) in report.deviations() {
        w.write_record([
            g.clone(),
            report.calibrated[&g].to_string(),
            report.trained[&g].to_string(),
            d.to_string(),
        ])?;
    }
    w.flush()?;
    println!(
        "{}: initial {:.2}% best {:.2}% at step {} last {:.2}% mean dceil {:.3} frozen {}",
        report.label,
        report.initial.top1,
        report.best.top1,
        report.best_step,
        report.last.top1,
        report.mean_deviation(),
        report.frozen
    );
    Ok(())
}

fn run_suite(data: Option<PathBuf>, epochs: usize, batch: usize, seed: u64, out: &Path) -> Result<()> {
    if data.is_some() {
        bail!("--suite runs on the bundled task only");
    }
    let mut cfg = DeskSuiteConfig {
        seed,
        ..DeskSuiteConfig::default()
    };
    cfg.data.seed = seed;
    cfg.recipe = Recipe::desk(batch);
    cfg.recipe.epochs = epochs;
    cfg.pretrain.batch = batch;
    let suite = desk_suite(&cfg)?;
    fs::create_dir_all(out)?;
    suite.write_summary(File::create(out.join("summary.csv"))?)?;
    suite.float.write_history(File::create(out.join("history_float.csv"))?)?;
    for run in &suite.runs {
        run.report
            .write_history(File::create(out.join(format!("history_{}.csv", run.report.label)))?)?;
        run.model.save(out.join(&run.report.label))?;
    }
    suite.write_summary(std::io::stdout())?;
    eprintln!("suite finished in {:.1?}", suite.elapsed);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate { graph, data, mode, out } => {
            let mut model = load_model(&graph)?;
            if model.groups()?.is_empty() {
                bail!("{} has no quantization layers; run `tqt quantize` first", graph.display());
            }
            let data = dataset(data.as_deref(), 0)?;
            let records = calibrate(&mut model, &calibration_batches(&data), init_thresholds(parse_mode(&mode)?))?;
            fs::create_dir_all(&out)?;
            write_calib_report(File::create(out.join("calibration.csv"))?, &records)?;
            save_model(&model, &out)
        }
        Command::Transform { graph, passes, out } => {
            let mut model = load_model(&graph)?;
            for pass in passes {
                match pass {
                    Pass::All => tqt_graph::passes::optimize(&mut model, &input_shapes(1))?,
                    Pass::FoldBn => fold_batchnorm(&mut model)?,
                    Pass::AvgpoolToDwconv => {
                        let shapes = infer_shapes(&model, &input_shapes(1))?;
                        avgpool_to_dwconv(&mut model, &shapes)?
                    }
                    Pass::CollapseConcat => collapse_concat(&mut model)?,
                    Pass::SpliceIdentity => splice_identity(&mut model)?,
                }
            }
            model.graph.eliminate_dead();
            model.prune();
            model.validate()?;
            save_model(&model, &out)
        }
        Command::Quantize { graph, precision, out } => {
            let mut model = load_model(&graph)?;
            insert_quant_layers(&mut model, precision.config()?)?;
            save_model(&model, &out)
        }
        Command::Train {
            graph,
            data,
            mode,
            precision,
            epochs,
            batch,
            seed,
            suite,
            out,
        } => {
            if suite {
                run_suite(data, epochs, batch, seed, &out)
            } else {
                let cfg = TrainRunConfig {
                    graph,
                    data,
                    mode: parse_mode(&mode)?,
                    precision,
                    epochs,
                    batch,
                    seed,
                };
                run_train(cfg, &out)
            }
        }
        Command::Lower { graph, out } => {
            let lg = lower(&load_model(&graph)?)?;
            lg.save(&out).with_context(|| format!("writing bundle to {}", out.display()))?;
            println!("{}", lg.serialize());
            Ok(())
        }
        Command::Infer {
            graph,
            input,
            integer,
            quantized,
            out,
        } => {
            let x = read_real_tensor(&input)?;
            if integer {
                let lg = LoweredGraph::load(&graph)?;
                let ins = lg
                    .inputs()
                    .iter()
                    .map(|n| {
                        let (bits, signed) = n.op.bits();
                        tqt_runtime::FixedPointTensor::quantize(&x, n.f, bits, signed)
                    })
                    .collect::<tqt_runtime::Result<Vec<_>>>()?;
                let y = execute_integer(&lg, &ins)?.remove(0);
                write_tensor(&out, &y.data)?;
                println!("wrote {:?} integers with f = {} to {}", y.shape(), y.f, out.display());
            } else {
                let model = load_model(&graph)?;
                let opts = if quantized {
                    ExecOptions::quantized()
                } else {
                    ExecOptions::float()
                };
                let y = infer(&model, &[x], &opts)?.remove(0);
                write_tensor(&out, &y)?;
                println!("wrote {:?} values to {}", y.shape(), out.display());
            }
            Ok(())
        }
        Command::Bitexact {
            graph,
            trials,
            shape,
            seed,
        } => {
            let model = load_model(&graph)?;
            let lg = lower(&model)?;
            let inputs = random_inputs(&mut Rng::new(seed), &[shape], trials, 1.0);
            // Fail early on inputs the lowered graph cannot take.
            quantize_inputs(&model, &lg, &inputs[0])?;
            let report = bitexact_check(&model, &lg, &inputs)?;
            println!("{report}");
            if !report.is_exact() {
                bail!("emulated and integer execution disagree");
            }
            Ok(())
        }
        Command::Toy {
            bits,
            sigma,
            optimizer,
            alpha,
            steps,
            seed,
            out,
        } => {
            fs::create_dir_all(&out)?;
            let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
            w.write_record([
                "optimizer", "sigma", "final_log2_t", "diverged_at", "boundary", "period", "r_g", "max_dev", "reliable",
            ])?;
            for &opt in &optimizer {
                for &s in &sigma {
                    let mut cfg = ToyRunConfig::new(bits, s, opt, alpha);
                    cfg.steps = steps;
                    cfg.seed = seed;
                    let traj = toy_l2_run(&cfg)?;
                    traj.write_csv(File::create(out.join(format!("{opt}_sigma{s}.csv")))?)?;
                    let osc = measure_oscillation(&traj);
                    let row = [
                        opt.to_string(),
                        s.to_string(),
                        traj.last_log2_t().map_or(String::new(), |l| l.to_string()),
                        traj.diverged.map_or(String::new(), |d| d.to_string()),
                        osc.boundary.to_string(),
                        osc.period.to_string(),
                        osc.r_g.to_string(),
                        osc.max_deviation.to_string(),
                        osc.reliable.to_string(),
                    ];
                    println!("{}", row.join(","));
                    w.write_record(&row)?;
                }
            }
            w.flush()?;
            Ok(())
        }
        Command::Gradcheck { points, step, seed } => {
            let r = quantizer_gradcheck(&mut Rng::new(seed), points, step)?;
            println!(
                "points {} skipped {} max rel err: x {:.3e}, log2 t {:.3e}",
                r.points, r.skipped, r.max_rel_err_x, r.max_rel_err_log2_t
            );
            let s = transfer_signs(4000)?;
            println!(
                "inner sign matches {}/{}, clipped sign matches {}/{}, fakequant inner limit gradient {}",
                s.inner_sign_matches, s.inner_points, s.clipped_sign_matches, s.clipped_points, s.fakequant_inner_max
            );
            if r.max_rel_err_x >= 1e-4 || r.max_rel_err_log2_t >= 1e-4 {
                bail!("gradient check exceeded relative error 1e-4");
            }
            Ok(())
        }
        Command::Guidelines { bits } => {
            println!("bits,alpha_max,beta1_min,beta2_min,steps_estimate");
            for b in bits {
                let g = adam_guidelines(b)?;
                println!(
                    "{b},{:.4},{:.4},{:.5},{:.0}",
                    g.alpha_max, g.beta1_min, g.beta2_min, g.steps_estimate
                );
            }
            Ok(())
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(h) = err.downcast_ref::<HarnessError>() {
        return match h {
            HarnessError::Config(_) => "config",
            HarnessError::Data(_) => "data",
            HarnessError::Diverged { .. } => "diverged",
            HarnessError::Core(_) => "core",
            HarnessError::Graph(_) => "graph",
            HarnessError::Runtime(_) => "runtime",
            HarnessError::Csv(_) | HarnessError::Io(_) => "io",
        };
    }
    if err.downcast_ref::<tqt_graph::GraphError>().is_some() {
        "graph"
    } else if err.downcast_ref::<tqt_runtime::RuntimeError>().is_some() {
        "runtime"
    } else if err.downcast_ref::<tqt_core::Error>().is_some() {
        "core"
    } else if err.downcast_ref::<std::io::Error>().is_some() || err.downcast_ref::<csv::Error>().is_some() {
        "io"
    } else {
        "failed"
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error\tkind={}\tmessage={msg}", error_kind(&err));
            ExitCode::FAILURE
        }
    }
}
