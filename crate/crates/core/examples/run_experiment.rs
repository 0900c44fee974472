//! Runs a simulated-feedback experiment and prints the per-iteration error curve.
//!
//! ```text
//! cargo run --example run_experiment -- [config.json] [strategy] [noise]
//! ```

use icount::bench::{run_experiment, ExperimentConfig};
use icount::sim::{NoiseLevel, SelectionStrategy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut config: ExperimentConfig = match args.first().map(String::as_str) {
        Some(path) if path != "-" => icount::formats::load_json(path)?,
        _ => ExperimentConfig::default(),
    };
    if let Some(s) = args.get(1) {
        config.user.strategy = serde_json::from_value::<SelectionStrategy>(s.as_str().into())?;
    }
    if let Some(n) = args.get(2) {
        config.user.noise = serde_json::from_value::<NoiseLevel>(n.as_str().into())?;
    }

    let run = run_experiment(&config)?;
    println!("iteration  mae (se)          rmse (se)         seg_ms  adapt_ms");
    for it in &run.report.iterations {
        println!(
            "{:>9}  {:>7.3} ({:.3})  {:>7.3} ({:.3})  {:>6.1}  {:>8.1}",
            it.iteration, it.mae, it.mae_se, it.rmse, it.rmse_se, it.seg_ms, it.adapt_ms
        );
    }
    println!(
        "MAE reduction {:.1}% (se {:.1}%) in {:.1}s",
        100.0 * run.report.mae_reduction,
        100.0 * run.report.mae_reduction_se,
        run.elapsed_s
    );
    Ok(())
}
