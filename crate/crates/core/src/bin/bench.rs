use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use icount::bench::{read_csv, run_experiment, summarize, ExperimentConfig, SuiteReport, FULL_PROTOCOL_SEEDS};
use icount::density::{render_density, DotScene};
use icount::formats::{load_dgrid, load_json, save_dgrid, save_json, save_lmap, RegionTable};
use icount::ipse::{segment_full_resolution, SegmentationConfig};

#[derive(Parser)]
#[command(name = "bench", about = "Interactive density counting experiments and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulated-feedback experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the five-seed protocol.
        #[arg(long, conflicts_with = "seed")]
        full_protocol: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Segment a density grid into near-integer regions.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Segmentation config JSON; defaults to the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the downsampling factor (1, 2, 4 or 8).
        #[arg(long)]
        factor: Option<usize>,
        /// Region table output; defaults to `<out>.regions.json`.
        #[arg(long)]
        regions: Option<PathBuf>,
    },
    /// Render a dot scene to a density grid.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a results CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn print_report(report: &SuiteReport) {
    println!("iteration,mae,mae_se,rmse,rmse_se,seg_ms,adapt_ms,sessions");
    for it in &report.iterations {
        println!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.2},{:.2},{}",
            it.iteration, it.mae, it.mae_se, it.rmse, it.rmse_se, it.seg_ms, it.adapt_ms, it.sessions
        );
    }
    println!(
        "# mae reduction {:.2}% (se {:.2}%) over seeds {:?}",
        100.0 * report.mae_reduction,
        100.0 * report.mae_reduction_se,
        report.seeds
    );
}

fn run(cli: Cli) -> icount::Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            full_protocol,
            csv,
            json,
        } => {
            let mut cfg: ExperimentConfig = match config {
                Some(p) => load_json(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if full_protocol {
                cfg.seeds = FULL_PROTOCOL_SEEDS.to_vec();
            }
            if csv.is_some() {
                cfg.output.csv = csv;
            }
            if json.is_some() {
                cfg.output.json = json;
            }
            let run = run_experiment(&cfg)?;
            print_report(&run.report);
            eprintln!("{} rows in {:.1}s", run.rows.len(), run.elapsed_s);
        }
        Command::Segment {
            input,
            out,
            config,
            factor,
            regions,
        } => {
            let grid = load_dgrid(&input)?;
            let mut cfg: SegmentationConfig = match config {
                Some(p) => load_json(p)?,
                None => SegmentationConfig::desk(),
            };
            if let Some(f) = factor {
                cfg.downsample_factor = f;
            }
            let seg = segment_full_resolution(&grid, &cfg)?;
            save_lmap(&out, &seg.labels)?;
            let table_path = regions.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".regions.json");
                p.into()
            });
            save_json(&table_path, &RegionTable::from_regions(&seg.working.regions))?;
            eprintln!(
                "{} regions ({} foreground), total {:.3}",
                seg.working.regions.len(),
                seg.working.foreground_count(),
                grid.total()
            );
        }
        Command::Render { scene, out } => {
            let scene: DotScene = load_json(scene)?;
            let grid = render_density(&scene)?;
            save_dgrid(&out, &grid)?;
            eprintln!("{}x{} grid, total {:.3}", grid.height(), grid.width(), grid.total());
        }
        Command::Report { input, json } => {
            let report = summarize(&read_csv(&input)?)?;
            print_report(&report);
            if let Some(p) = json {
                save_json(p, &report)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
