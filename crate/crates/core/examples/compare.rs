//! Runs syn_all, every syn_subset and asyndgan for one seed and prints a
//! comparison table.
//!
//! Usage: `cargo run --release --example compare -- [SEED] [ITERATIONS] [OUT_DIR]`

use std::path::PathBuf;

use asyndgan_core::experiment::{report, run_experiment, write_report, RunConfig, Scenario};

fn main() -> asyndgan_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let iterations: u32 = args.next().map_or(5000, |s| s.parse().expect("iterations"));
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("asyndgan-compare"), PathBuf::from);

    let base = RunConfig {
        iterations,
        seed_init: seed,
        seed_data: seed,
        seed_dropout: seed,
        seed_eval: seed,
        ..RunConfig::default()
    };
    let mut scenarios = vec![Scenario::SynAll, Scenario::AsynDgan];
    scenarios.extend((0..base.nodes).map(Scenario::SynSubset));
    let mut dirs = Vec::new();
    for scenario in scenarios {
        let cfg = RunConfig {
            scenario,
            ..base.clone()
        };
        let dir = out.join(format!("{}_seed{seed}", scenario.to_string().replace(':', "")));
        run_experiment(&cfg, &cfg.emit(), &dir)?;
        dirs.push(dir);
    }
    write_report(&mut std::io::stdout(), &report(&dirs)?)
}
