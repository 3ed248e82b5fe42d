//! Compares the five optimizers and eight activations on a toy pipeline.

use flowforge::ablation::{run_ablation, standard_variants};
use flowforge::cli::RunConfig;

fn main() -> flowforge::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.toml").to_string());
    let cfg = RunConfig::load(path.as_ref())?;
    let variants = standard_variants(&cfg.trainer);
    let rows = run_ablation(&cfg.flow_space, &cfg.oracle, &cfg.trainer, cfg.seed, &variants)?;

    println!("{:<10} {:<10} {:>9} {:>11}", "optimizer", "activation", "accuracy", "final loss");
    for r in rows {
        println!(
            "{:<10} {:<10} {:>9.3} {:>11.4}",
            format!("{:?}", r.variant.optimizer),
            format!("{:?}", r.variant.activation),
            r.accuracy,
            r.final_loss
        );
    }
    Ok(())
}
