//! Command-line front end: inference, structural analysis, counting,
//! gridding densities, profiling, self-verification and weight
//! initialization.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 verification
//! failure. Failures print a single line starting with
//! `error[usage]`, `error[data]` or `error[verify]`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use streetseg::analysis;
use streetseg::blocks::MergeMode;
use streetseg::image::{self, Normalization, CITYSCAPES_PALETTE};
use streetseg::kernels::{KernelPath, PoolKind};
use streetseg::network::{predict_labels, FusionMode, Network, NetworkOptions, RateMode};
use streetseg::tensor::{seeded_fill, FillDistribution, Shape};
use streetseg::weights::WeightStore;

#[derive(Parser)]
#[command(
    name = "streetseg",
    about = "CPU inference engine and analyzer for a real-time street-scene segmentation network",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Avg,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeArg {
    Concat,
    Sum,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Ffn,
    Add,
}

#[derive(Clone, Copy, ValueEnum)]
enum RateModeArg {
    Block,
    First,
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    Naive,
    Optimized,
}

impl From<PathArg> for KernelPath {
    fn from(p: PathArg) -> KernelPath {
        match p {
            PathArg::Naive => KernelPath::Naive,
            PathArg::Optimized => KernelPath::Optimized,
        }
    }
}

/// Network configuration shared by the subcommands that build a graph.
#[derive(Args, Clone, Copy)]
struct NetArgs {
    /// DASPP branch pooling kind.
    #[arg(long = "daspp-pool", value_enum, default_value = "avg")]
    daspp_pool: PoolArg,
    /// DASPP merge mode: concatenate-reduce-shortcut or plain sum.
    #[arg(long = "daspp-merge", value_enum, default_value = "concat")]
    daspp_merge: MergeArg,
    /// Fusion head combining the semantic and spatial branches.
    #[arg(long, value_enum, default_value = "ffn")]
    fusion: FusionArg,
    /// Atrous-rate policy for repeated backbone units.
    #[arg(long = "rate-mode", value_enum, default_value = "block")]
    rate_mode: RateModeArg,
    /// Number of output classes.
    #[arg(long, default_value_t = 19)]
    classes: usize,
}

impl NetArgs {
    fn options(&self) -> NetworkOptions {
        NetworkOptions {
            num_classes: self.classes,
            daspp_pool: match self.daspp_pool {
                PoolArg::Avg => PoolKind::Avg,
                PoolArg::Max => PoolKind::Max,
            },
            daspp_merge: match self.daspp_merge {
                MergeArg::Concat => MergeMode::ConcatShortcut,
                MergeArg::Sum => MergeMode::Sum,
            },
            fusion: match self.fusion {
                FusionArg::Ffn => FusionMode::Ffn,
                FusionArg::Add => FusionMode::Add,
            },
            rate_mode: match self.rate_mode {
                RateModeArg::Block => RateMode::BlockWide,
                RateModeArg::First => RateMode::FirstUnitOnly,
            },
            cam_enabled: true,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run inference on a binary PPM (P6) and write the colorized labels.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Colorized prediction output (P6 PPM).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Raw label-id output (P5 PGM, one byte per pixel).
        #[arg(long = "labels-out")]
        labels_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "optimized")]
        path: PathArg,
        /// Skip the (v - 0.5) / 0.5 input normalization.
        #[arg(long = "no-normalize", default_value_t = false)]
        no_normalize: bool,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Emit the per-layer receptive-field table.
    Analyze {
        /// Write the plain-text table here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the structured report (JSON).
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long = "input-size", default_value = "448x896")]
        input_size: String,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Emit the parameter / multiply-accumulate report.
    Count {
        #[arg(long = "input-size")]
        input_size: String,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Print sampling coverage densities for an atrous rate stack.
    Gridding {
        /// Comma-separated rates, e.g. "2,4,8,16".
        #[arg(long)]
        rates: String,
        /// Kernel size (odd).
        #[arg(long, default_value_t = 3)]
        kernel: usize,
    },
    /// Time repeated forward passes on a seeded random input.
    Profile {
        #[arg(long = "input-size", default_value = "448x896")]
        input_size: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, value_enum, default_value = "optimized")]
        path: PathArg,
        /// Skip the cross-path agreement run.
        #[arg(long = "no-check", default_value_t = false)]
        no_check: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Run the oracle-equivalence and invariant suite.
    Verify,
    /// Write a seeded random weight store.
    InitWeights {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        net: NetArgs,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("bad size `{s}`, want HxW"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    Ok((h, w))
}

fn data_err(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error[data]: {e}");
    ExitCode::from(2)
}

fn usage_err(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error[usage]: {e}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version itself; real usage errors become a
            // single parsable line.
            if e.use_stderr() {
                let msg = e.to_string();
                let line = msg
                    .lines()
                    .find(|l| !l.trim().is_empty())
                    .unwrap_or("bad arguments");
                return usage_err(line.trim_start_matches("error: "));
            }
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };

    match run(cli.command) {
        Ok(code) => code,
        Err(e) => data_err(e),
    }
}

fn run(command: Command) -> streetseg::Result<ExitCode> {
    match command {
        Command::Infer {
            image,
            weights,
            out,
            labels_out,
            path,
            no_normalize,
            net,
        } => {
            let network = Network::build(net.options());
            let store = WeightStore::load(&weights)?;
            network.validate_weights(&store, false)?;
            let rgb = image::read_ppm(&image)?;
            let normalize = if no_normalize {
                None
            } else {
                Some(Normalization::default())
            };
            let input = image::image_to_tensor(&rgb, normalize)?;
            let logits = network.forward(&store, &input, path.into())?;
            let labels = predict_labels(&logits)?;
            if let Some(out) = &out {
                let colored = image::colorize(&labels, &CITYSCAPES_PALETTE)?;
                image::write_ppm(out, &colored)?;
                println!("wrote {}", out.display());
            }
            if let Some(path) = &labels_out {
                image::write_labels_pgm(path, &labels)?;
                println!("wrote {}", path.display());
            }
            if out.is_none() && labels_out.is_none() {
                println!(
                    "predicted {}x{} labels (no output path given)",
                    labels.width, labels.height
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze {
            report,
            json,
            input_size,
            net,
        } => {
            let (h, w) = match parse_size(&input_size) {
                Ok(hw) => hw,
                Err(e) => return Ok(usage_err(e)),
            };
            let network = Network::build(net.options());
            let analysis = analysis::count_params_flops(&network, h, w)?;
            let table = analysis.text_table();
            match report {
                Some(path) => {
                    std::fs::write(&path, &table)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{table}"),
            }
            if let Some(path) = json {
                let body = serde_json::to_string_pretty(&analysis)
                    .expect("report serialization is infallible");
                std::fs::write(&path, body)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Count {
            input_size,
            json,
            net,
        } => {
            let (h, w) = match parse_size(&input_size) {
                Ok(hw) => hw,
                Err(e) => return Ok(usage_err(e)),
            };
            let network = Network::build(net.options());
            let report = analysis::count_params_flops(&network, h, w)?;
            println!("input {h}x{w}");
            println!(
                "params {} ({:.3}M)",
                report.total_params,
                report.total_params as f64 / 1e6
            );
            println!(
                "macs {} ({:.3}G)",
                report.total_macs,
                report.total_macs as f64 / 1e9
            );
            println!(
                "flops(2xmacs) {} ({:.3}G)",
                report.total_flops_2x,
                report.total_flops_2x as f64 / 1e9
            );
            println!(
                "aux elementwise ops {} ({:.3}G)",
                report.total_aux_ops,
                report.total_aux_ops as f64 / 1e9
            );
            if let Some(path) = json {
                let body = serde_json::to_string_pretty(&report)
                    .expect("report serialization is infallible");
                std::fs::write(&path, body)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gridding { rates, kernel } => {
            if kernel % 2 == 0 || kernel == 0 {
                return Ok(usage_err(format!("kernel {kernel} must be odd")));
            }
            let parsed: Result<Vec<usize>, _> =
                rates.split(',').map(|r| r.trim().parse::<usize>()).collect();
            let rates = match parsed {
                Ok(r) if !r.is_empty() && r.iter().all(|&d| d >= 1) => r,
                _ => return Ok(usage_err(format!("bad rate list `{rates}`"))),
            };
            for &d in &rates {
                let density = analysis::gridding_coverage(&[(kernel, d)]);
                println!("rate {d}: density {density:.6}");
            }
            let stack: Vec<(usize, usize)> = rates.iter().map(|&d| (kernel, d)).collect();
            let density = analysis::gridding_coverage(&stack);
            println!("stack {rates:?}: density {density:.6}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Profile {
            input_size,
            repeats,
            path,
            no_check,
            seed,
            net,
        } => {
            let (h, w) = match parse_size(&input_size) {
                Ok(hw) => hw,
                Err(e) => return Ok(usage_err(e)),
            };
            let network = Network::build(net.options());
            let store = network.random_init(seed);
            let input = seeded_fill(
                Shape::new(1, 3, h, w),
                seed.wrapping_add(1),
                FillDistribution::Uniform { limit: 1.0 },
            );
            let report = analysis::profile_forward(
                &network,
                &store,
                &input,
                repeats,
                path.into(),
                !no_check,
            )?;
            println!(
                "path {}  input {h}x{w}  repeats {}  threads {}",
                report.path, report.repeats, report.threads
            );
            println!(
                "mean {:.2} ms  stddev {:.2} ms",
                report.mean_ms, report.stddev_ms
            );
            for (i, t) in report.runs_ms.iter().enumerate() {
                println!("run {i}: {t:.2} ms");
            }
            if let Some(rel) = report.agreement_rel {
                println!("path agreement: max rel diff {rel:.3e}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let checks = streetseg::verify::run_all();
            let mut failed = 0;
            for check in &checks {
                println!(
                    "{}: {} ({})",
                    check.name,
                    if check.passed { "pass" } else { "FAIL" },
                    check.detail
                );
                if !check.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                eprintln!("error[verify]: {failed} of {} checks failed", checks.len());
                return Ok(ExitCode::from(3));
            }
            println!("all {} checks passed", checks.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::InitWeights { seed, out, net } => {
            let network = Network::build(net.options());
            let store = network.random_init(seed);
            store.save(&out)?;
            println!("wrote {} ({} entries)", out.display(), store.len());
            Ok(ExitCode::SUCCESS)
        }
    }
}
