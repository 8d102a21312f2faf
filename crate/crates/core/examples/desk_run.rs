//! Runs a preset grid (default `modes`) over several seeds on a base
//! config and prints the comparison table.
//!
//! ```text
//! cargo run --release -p m3l-core --example desk_run -- [config.toml] [seeds] [preset]
//! ```

use std::time::Instant;

use m3l_core::config::ExperimentConfig;
use m3l_core::experiment::{preset, run_ablation_grid};

fn main() -> m3l_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let base = match args.first().filter(|a| a.as_str() != "-") {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let seeds: Vec<u64> = (0..args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5)).collect();
    let name = args.get(2).map(String::as_str).unwrap_or("modes");
    let start = Instant::now();
    let report = run_ablation_grid(name, &preset(name, &base)?, &seeds, None)?;
    print!("{}", report.to_text());
    println!("{:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
