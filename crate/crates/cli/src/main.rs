use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use quadscan::backbone::{build_variant, count_params_flops, Variant, VariantConfig};
use quadscan::harness::bench::{bench_scan, BenchOptions};
use quadscan::harness::data::Pgm;
use quadscan::harness::export::{export_partition_map, write_partition_export};
use quadscan::harness::selftest::{selftest, SelftestOptions};
use quadscan::harness::train::{train, TrainConfig};
use quadscan::quadtree::{build_perm, ScanKind};
use quadscan::{checkpoint, Error};

#[derive(Parser)]
#[command(name = "quadscan", version, about = "Quadtree-ordered selective scan models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every module's invariant suite.
    Selftest {
        /// Corrupt the permutation cache to confirm failures are caught.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Train the micro model on the synthetic quadrant task.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Timing benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Write per-block partition maps for one image.
    ExportPartition {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Greyscale PGM input.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a scan ordering.
    Perm {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, value_enum)]
        kind: PermKind,
        /// Print the full forward and inverse arrays as JSON.
        #[arg(long)]
        dump: bool,
    },
    /// Parameter and FLOP counts of a model variant.
    Flops {
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Square input side.
        #[arg(long)]
        input: Option<usize>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Sequential and parallel scans against naive attention.
    Scan(ScanArgs),
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long, value_delimiter = ',', default_value = "1024,4096,16384,65536")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 9)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Skip the attention reference.
    #[arg(long)]
    no_attention: bool,
    /// Per-kernel cap in seconds on timed runs at one length (0 disables).
    #[arg(long, default_value_t = 120.0)]
    budget: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PermKind {
    Raster,
    Coarse,
    Fine,
    Nested,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Lite,
    Tiny,
    Small,
    Base,
    Micro,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Lite => Variant::Lite,
            VariantArg::Tiny => Variant::Tiny,
            VariantArg::Small => Variant::Small,
            VariantArg::Base => Variant::Base,
            VariantArg::Micro => Variant::Micro,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Selftest { inject_fault } => {
            let results = selftest(&SelftestOptions {
                inject_perm_fault: inject_fault,
            });
            for r in &results {
                let status = if r.ok() { "ok" } else { "FAILED" };
                println!("{:<20} {:>2}/{:<2} {status} ({:.2}s)", r.name, r.passed, r.total, r.seconds);
                for f in &r.failures {
                    println!("    {f}");
                }
            }
            let failed: Vec<_> = results.iter().filter(|r| !r.ok()).map(|r| r.name).collect();
            if failed.is_empty() {
                println!("all suites passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("failing suites: {}", failed.join(", "));
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Train { config, out, seed, steps } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let (model, report) = train(&cfg, |s| {
                if s.step % 25 == 0 {
                    eprintln!("step {:>4}  loss {:.4}  lr {:.2e}  |g| {:.3}", s.step, s.loss, s.lr, s.grad_norm);
                }
            })?;
            fs::create_dir_all(&out)?;
            let meta = serde_json::json!({
                "train_config": cfg,
                "final_loss": report.final_loss,
                "final_accuracy": report.final_accuracy,
            });
            checkpoint::save(&model, meta, &out.join("checkpoint.qten"))?;
            fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
            println!(
                "initial loss {:.4}  final loss {:.4}  accuracy {:.3}  quadrant agreement {:.3}  ({:.1}s)",
                report.initial_loss, report.final_loss, report.final_accuracy, report.quadrant_agreement, report.wall_time_s
            );
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench(BenchCommand::Scan(a)) => {
            let opts = BenchOptions {
                reps: a.reps,
                warmup: a.warmup,
                include_attention: !a.no_attention,
                time_budget_s: (a.budget > 0.0).then_some(a.budget),
                ..BenchOptions::default()
            };
            let r = bench_scan(&a.lengths, &opts)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                println!("{:>8} {:>14} {:>14} {:>16}  runs", "L", "sequential_ns", "parallel_ns", "attention_ns");
                for row in &r.rows {
                    let att = row.attention_reference_ns.map_or("-".to_string(), |v| v.to_string());
                    println!(
                        "{:>8} {:>14} {:>14} {:>16}  {:?}",
                        row.len, row.sequential_ns, row.parallel_ns, att, row.reps
                    );
                }
                let att = r.slopes.attention_reference.map_or("-".to_string(), |s| format!("{s:.3}"));
                println!(
                    "log-log slopes: sequential {:.3}  parallel {:.3}  attention {att}",
                    r.slopes.sequential, r.slopes.parallel
                );
                println!("timed outputs match oracle: {}", r.outputs_match_oracle);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportPartition { checkpoint: ckpt, image, out } => {
            let (model, _) = checkpoint::load::<f32>(&ckpt)?;
            let pgm = Pgm::read(BufReader::new(fs::File::open(&image)?))?;
            let records = export_partition_map(&model, &pgm.to_image())?;
            write_partition_export(&records, &out)?;
            for r in &records {
                println!(
                    "block {:>2}  {}x{}  selected quadrant {}  scores {:?}",
                    r.block, r.height, r.width, r.selected, r.quadrant_scores
                );
            }
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Perm {
            height,
            width,
            kind,
            dump,
        } => {
            let kind = match kind {
                PermKind::Raster => ScanKind::Raster,
                PermKind::Coarse => ScanKind::CoarseQuad,
                PermKind::Fine => ScanKind::FineQuad,
                PermKind::Nested => ScanKind::NestedQuad,
            };
            let p = build_perm(height, width, kind)?;
            if dump {
                let v = serde_json::json!({
                    "height": height,
                    "width": width,
                    "kind": kind.to_string(),
                    "forward": p.forward().as_ref(),
                    "inverse": p.inverse().as_ref(),
                });
                println!("{}", serde_json::to_string(&v)?);
            } else {
                let head: Vec<_> = p.forward().iter().take(16).collect();
                println!("{kind} {height}x{width}: {} positions, consistent {}", p.len(), p.is_consistent());
                println!("first positions: {head:?}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Flops { variant, input, json } => {
            let cfg = VariantConfig::preset(variant.into());
            let side = input.unwrap_or(cfg.image_size);
            let model = build_variant::<f32>(&cfg, 0)?;
            let c = count_params_flops(&model, (side, side))?;
            let reference = cfg.reference();
            if json {
                let v = serde_json::json!({
                    "variant": cfg.variant,
                    "input": side,
                    "complexity": c,
                    "gmacs": c.gmacs(),
                    "reference_params": reference.map(|r| r.params),
                    "reference_gflops": reference.map(|r| r.gflops),
                });
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                println!("{} at {side}x{side}", cfg.variant);
                println!("  params             {:>14} ({:.2}M)", c.params, c.params as f64 / 1e6);
                println!("  multiply-adds      {:>14} ({:.3}G)", c.macs, c.gmacs());
                println!("  flops (2 x MACs)   {:>14} ({:.3}G)", c.flops, c.flops as f64 / 1e9);
                println!("  attention formula  {:>14}", c.attention_reference_flops);
                if let Some(r) = reference {
                    println!(
                        "  published: {:.2}M params ({:+.1}%), {:.2}G ({:+.1}% against multiply-adds)",
                        r.params / 1e6,
                        100.0 * (c.params as f64 / r.params - 1.0),
                        r.gflops,
                        100.0 * (c.gmacs() / r.gflops - 1.0)
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
