//! The whole incremental loop from a config file, with the same run
//! directory layout and reports the `flowforge` binary produces.
//!
//! cargo run --release --example full_pipeline -- configs/demo.toml /tmp/demo

use std::path::PathBuf;

use flowforge::cli::{cmd_report, cmd_run, RunConfig};

fn main() -> flowforge::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/demo.toml")));
    let mut cfg = RunConfig::load(&config)?;
    if let Some(out) = args.next() {
        cfg.output_dir = out.into();
    }

    let outcome = cmd_run(&cfg)?;
    for c in &outcome.cycles {
        println!(
            "cycle {}: {} labels, accuracy {:.3}, {:.1}s",
            c.cycle, c.labels_used, c.accuracy, c.wall_seconds
        );
    }
    let report = cmd_report(&cfg.output_dir)?;
    println!(
        "{} angels / {} devils, accuracy {}; reports in {}",
        outcome.selection.angels.len(),
        outcome.selection.devils.len(),
        report.accuracy.accuracy,
        cfg.output_dir.display()
    );
    Ok(())
}
