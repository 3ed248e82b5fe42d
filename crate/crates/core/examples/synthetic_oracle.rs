//! Measures flows with the synthetic oracle and sorts them into seven classes.

use flowforge::flowspace::{sample_flows, FlowSpaceSpec};
use flowforge::labeling::{fit_class_model, DEFAULT_PERCENTILES};
use flowforge::oracle::{evaluate_synthetic, Metric, QoRRecord, SyntheticOracleConfig};

fn main() -> flowforge::Result<()> {
    let spec = FlowSpaceSpec::numbered(6, 2)?;
    let oracle = SyntheticOracleConfig::default();
    let flows = sample_flows(&spec, 1000, 3)?;
    let qor: Vec<QoRRecord> = flows.iter().map(|f| evaluate_synthetic(f, &oracle)).collect();

    let model = fit_class_model(&qor, Metric::Delay, 7, &DEFAULT_PERCENTILES)?;
    println!("delay determinators: {:.3?}", model.determinators);

    let mut sizes = [0usize; 7];
    for q in &qor {
        sizes[model.classify(q)?] += 1;
    }
    println!("class sizes: {sizes:?}");

    let best = qor
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.delay.total_cmp(&b.1.delay))
        .map(|(i, _)| i)
        .unwrap_or(0);
    println!(
        "fastest flow: {} (delay {:.3}, area {:.3})",
        flows[best].display(&spec),
        qor[best].delay,
        qor[best].area
    );
    Ok(())
}
