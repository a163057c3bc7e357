//! Command-line surface.
//!
//! Exit codes: 0 on success, 1 on runtime failures (bad files, numeric
//! divergence, failed gradient checks), 2 on usage errors (clap's default).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::accounting::{model_flops, sweep_csv, Method, SweepAxis, SweepKind};
use crate::bench::{bench_csv, run_bench};
use crate::cam::grad_cam;
use crate::data::{load_dataset, synth_dataset, write_dataset};
use crate::error::Result;
use crate::gradcheck::{run_suite_clean, run_suite_injected};
use crate::io::{load_checkpoint, read_tensor, save_checkpoint, write_pgm};
use crate::model::{model_forward, ModelConfig, Variant};
use crate::tensor::RealTensor;
use crate::train::{metrics_csv, train_toy, TrainOptions};

#[derive(Parser)]
#[command(
    name = "fwnet",
    version,
    about = "Fourier-filtered windowed-attention image classifier toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SizeArg {
    /// Tiny: depths [2, 2, 6, 2].
    T,
    /// Small: depths [2, 2, 12, 2].
    S,
    /// Base: depths [2, 2, 18, 2].
    B,
}

impl SizeArg {
    fn config(self, classes: usize) -> ModelConfig {
        match self {
            SizeArg::T => ModelConfig::tiny(classes),
            SizeArg::S => ModelConfig::small(classes),
            SizeArg::B => ModelConfig::base(classes),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigArg {
    /// Desk-scale toy: patch 4, width 32, depths [2, 2], 56px images.
    Mini,
    Tiny,
    Small,
    Base,
}

impl ConfigArg {
    fn config(self, classes: usize) -> ModelConfig {
        match self {
            ConfigArg::Mini => ModelConfig::mini(classes),
            ConfigArg::Tiny => ModelConfig::tiny(classes),
            ConfigArg::Small => ModelConfig::small(classes),
            ConfigArg::Base => ModelConfig::base(classes),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Params,
    Flops,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    /// Sweep token width along the stage progression (grid shrinks as the
    /// width grows, anchored at the 56x56x96 first stage).
    Dimension,
    /// Sweep input image resolution at fixed first-stage width.
    Resolution,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-layer parameter and FLOP table for a configuration.
    Count {
        /// Token mixer in the odd blocks: win, fwnet, fwnet_se, fwnet_eca.
        #[arg(long, default_value = "fwnet_eca", value_parser = parse_variant)]
        variant: Variant,
        /// Model size.
        #[arg(long, value_enum, default_value_t = SizeArg::T)]
        size: SizeArg,
        /// Classifier head width.
        #[arg(long, default_value_t = 1000)]
        classes: usize,
        /// Input resolution the FLOP column assumes.
        #[arg(long, default_value_t = 224)]
        resolution: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time single-layer forward passes over a resolution/channel grid.
    Bench {
        /// Comma-separated mixers to time: msa, wmsa, fe.
        #[arg(long, value_delimiter = ',', value_parser = parse_method,
              default_value = "msa,wmsa,fe")]
        methods: Vec<Method>,
        /// Comma-separated image resolutions in pixels (tokens = pixels/4).
        #[arg(long, value_delimiter = ',', default_value = "56,112,224,448")]
        resolutions: Vec<usize>,
        /// Comma-separated channel widths.
        #[arg(long, value_delimiter = ',', default_value = "96")]
        channels: Vec<usize>,
        /// Window side for the windowed-attention rows, in tokens.
        #[arg(long, default_value_t = 7)]
        window: usize,
        /// Timed repetitions per row (30+ recommended for stable statistics).
        #[arg(long, default_value_t = 50)]
        reps: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic sinusoidal-grating dataset.
    SynthData {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of grating orientations (at most 4).
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Images per class.
        #[arg(long, default_value_t = 256)]
        per_class: usize,
        /// Image side in pixels (multiple of 28).
        #[arg(long, default_value_t = 56)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the toy classifier; writes a checkpoint and metrics.csv.
    TrainToy {
        /// Dataset directory produced by synth-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.05)]
        weight_decay: f64,
        /// Stop early once training accuracy reaches this fraction.
        #[arg(long)]
        stop_acc: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model configuration to train.
        #[arg(long, value_enum, default_value_t = ConfigArg::Mini)]
        config: ConfigArg,
        /// Token mixer in the odd blocks: win, fwnet, fwnet_se, fwnet_eca.
        #[arg(long, default_value = "fwnet_eca", value_parser = parse_variant)]
        variant: Variant,
        /// Checkpoint output path; metrics.csv is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify one image tensor with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Image tensor file of shape [S, S, 3].
        #[arg(long)]
        input: PathBuf,
    },
    /// Write a gradient-weighted class activation map as a PGM image.
    Cam {
        #[arg(long)]
        ckpt: PathBuf,
        /// Image tensor file of shape [S, S, 3].
        #[arg(long)]
        input: PathBuf,
        /// Stage index of the block to attribute.
        #[arg(long)]
        stage: usize,
        /// Block index within the stage.
        #[arg(long)]
        block: usize,
        /// Output PGM path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient check suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one fixture gradient to demonstrate failure detection.
        #[arg(long)]
        inject_failure: bool,
    },
    /// Emit analytic parameter/FLOP scaling curves as CSV.
    Sweep {
        /// Quantity to sweep.
        #[arg(long, value_enum, default_value_t = KindArg::Flops)]
        kind: KindArg,
        /// Axis to sweep along.
        #[arg(long, value_enum, default_value_t = AxisArg::Resolution)]
        axis: AxisArg,
        /// Comma-separated mixers: msa, wmsa, fe.
        #[arg(long, value_delimiter = ',', value_parser = parse_method,
              default_value = "msa,wmsa,fe")]
        methods: Vec<Method>,
        /// Comma-separated axis values (defaults depend on the axis).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn giga(n: u64) -> String {
    format!("{:.2}G", n as f64 / 1e9)
}

fn default_sweep_values(axis: AxisArg) -> Vec<usize> {
    match axis {
        // Widths along the stage progression anchored at 56x56x96.
        AxisArg::Dimension => vec![24, 48, 96, 192, 384],
        AxisArg::Resolution => vec![56, 112, 224, 448],
    }
}

/// Read one [S, S, 3] image tensor from disk.
fn read_image(path: &PathBuf) -> Result<RealTensor> {
    let t = read_tensor(path)?;
    if t.rank() != 3 || t.shape()[2] != 3 || t.shape()[0] != t.shape()[1] {
        crate::error::arg_err!(
            "{} has shape {:?}, expected a square [S, S, 3] image",
            path.display(),
            t.shape()
        );
    }
    Ok(t)
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Count { variant, size, classes, resolution, csv } => {
            let mut config = size.config(classes);
            config.variant = variant;
            let report = model_flops(&config, resolution)?;
            print!("{}", report.render_table());
            println!(
                "\n{} {} variant, {classes} classes at {resolution}px: \
                 {} params, {} flops/image",
                config.depths.iter().sum::<usize>(),
                variant.name(),
                millions(report.total_params),
                giga(report.total_flops),
            );
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv())?;
                eprintln!("wrote per-layer CSV to {}", path.display());
            }
        }
        Command::Bench { methods, resolutions, channels, window, reps, out } => {
            if reps < 30 {
                eprintln!("warning: {reps} reps gives unstable timing statistics; use 30 or more");
            }
            let report = run_bench(&methods, &resolutions, &channels, window, reps)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let csv = bench_csv(&report.rows);
            match out {
                Some(path) => {
                    std::fs::write(&path, csv)?;
                    eprintln!("wrote {} rows to {}", report.rows.len(), path.display());
                }
                None => print!("{csv}"),
            }
        }
        Command::SynthData { out, classes, per_class, size, seed } => {
            let data = synth_dataset(classes, per_class, size, seed)?;
            write_dataset(&out, &data)?;
            println!(
                "wrote {} images ({classes} classes x {per_class}, {size}x{size}px) to {}",
                data.len(),
                out.display()
            );
        }
        Command::TrainToy {
            data,
            epochs,
            lr,
            batch_size,
            weight_decay,
            stop_acc,
            seed,
            config,
            variant,
            out,
        } => {
            let dataset = load_dataset(&data)?;
            let classes = dataset.labels.iter().max().map_or(0, |m| m + 1).max(2);
            let mut cfg = config.config(classes);
            cfg.variant = variant;
            let opts = TrainOptions { epochs, batch_size, lr, weight_decay, stop_acc };
            let outcome = train_toy(&cfg, &dataset, &opts, seed)?;
            for s in &outcome.stats {
                println!(
                    "epoch {:>3}: loss {:.6}  acc {:.4}",
                    s.epoch, s.train_loss, s.train_acc
                );
            }
            save_checkpoint(&out, &outcome.model)?;
            let metrics_path = out
                .parent()
                .map(|p| p.join("metrics.csv"))
                .unwrap_or_else(|| PathBuf::from("metrics.csv"));
            std::fs::write(&metrics_path, metrics_csv(&outcome.stats))?;
            println!("saved checkpoint to {}", out.display());
            println!("wrote metrics to {}", metrics_path.display());
        }
        Command::Infer { ckpt, input } => {
            let model = load_checkpoint(&ckpt)?;
            let img = read_image(&input)?;
            let mut shape = vec![1];
            shape.extend_from_slice(img.shape());
            let batched = RealTensor::from_vec(&shape, img.data().to_vec())?;
            let logits = model_forward(&batched, &model)?;
            let row = logits.data();
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            println!("class: {best}");
            let joined: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            println!("logits: {}", joined.join(" "));
        }
        Command::Cam { ckpt, input, stage, block, out } => {
            let model = load_checkpoint(&ckpt)?;
            let img = read_image(&input)?;
            let cam = grad_cam(&model, &img, stage, block, None)?;
            write_pgm(&out, cam.size, cam.size, &cam.heat)?;
            println!("class: {}", cam.class);
            println!(
                "wrote {0}x{0} map (block {stage}.{block}, {1}x{1} tokens) to {2}",
                cam.size,
                cam.grid,
                out.display()
            );
        }
        Command::Gradcheck { seed, inject_failure } => {
            let report = if inject_failure {
                run_suite_injected(seed)?
            } else {
                run_suite_clean(seed)?
            };
            print!("{}", report.render());
            if !report.passed() {
                eprintln!("gradient check FAILED");
                return Ok(ExitCode::from(1));
            }
        }
        Command::Sweep { kind, axis, methods, values, out } => {
            let kind = match kind {
                KindArg::Params => SweepKind::Params,
                KindArg::Flops => SweepKind::Flops,
            };
            let values = values.unwrap_or_else(|| default_sweep_values(axis));
            let axis = match axis {
                AxisArg::Dimension => SweepAxis::Dimension,
                AxisArg::Resolution => SweepAxis::Resolution,
            };
            let csv = sweep_csv(kind, axis, &methods, &values)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &csv)?;
                    eprintln!("wrote {} rows to {}", csv.lines().count() - 1, path.display());
                }
                None => print!("{csv}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Parse the command line and run it; the binary's whole `main`.
pub fn main_impl() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

// ── Tests ─────────────────────────────────────────────────────────────────
