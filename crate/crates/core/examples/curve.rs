//! Prints the held-out mAP curve of one run.
//!
//! ```text
//! cargo run --release -p m3l-core --example curve -- <config.toml>
//! ```

use m3l_core::config::ExperimentConfig;
use m3l_core::experiment::prepare_data;
use m3l_core::trainer::{self, EvalSets, MetricEvent};

fn main() -> m3l_core::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let domains = cfg.data.generate()?;
    let data = prepare_data(&cfg, &domains)?;
    let sets = EvalSets {
        query: &data.query,
        gallery: &data.gallery,
    };
    let init = trainer::TrainerState::new(&cfg.train, &cfg.encoder, &data.sources)?;
    let r0 = trainer::evaluate_encoder(&init.params.encoder, sets.query, sets.gallery)?;
    println!("init mAP {:.4} rank1 {:.4}", r0.map, r0.rank1);
    trainer::train(&cfg.train, &cfg.encoder, &data.sources, Some(sets), |e| {
        match e {
            MetricEvent::Eval(m) => println!(
                "epoch {:>3} mAP {:.4} rank1 {:.4}",
                m.epoch, m.report.map, m.report.rank1
            ),
            MetricEvent::Iteration(m) if m.iteration % 40 == 0 => {
                println!("  it {:>4} l_mtr {:.4} l_mte {:?}", m.iteration, m.l_mtr, m.l_mte)
            }
            _ => {}
        }
        Ok(())
    })?;
    Ok(())
}
