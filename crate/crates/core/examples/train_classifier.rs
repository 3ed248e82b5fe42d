//! Trains a small classifier on labeled flows and checks it on held-out ones.

use flowforge::encoding::InputLayout;
use flowforge::flowspace::{sample_flows, FlowSpaceSpec};
use flowforge::labeling::{fit_class_model, DEFAULT_PERCENTILES};
use flowforge::nn::{fit, predict_batch, Architecture, FitConfig, OptimizerConfig, OptimizerKind};
use flowforge::oracle::{evaluate_synthetic, Metric, QoRRecord, SyntheticOracleConfig};

fn main() -> flowforge::Result<()> {
    let spec = FlowSpaceSpec::numbered(6, 2)?;
    let oracle = SyntheticOracleConfig {
        interaction_scale: 100.0,
        ..SyntheticOracleConfig::default()
    };
    let flows = sample_flows(&spec, 1500, 5)?;
    let qor: Vec<QoRRecord> = flows.iter().map(|f| evaluate_synthetic(f, &oracle)).collect();
    let classes = fit_class_model(&qor[..1000], Metric::Delay, 7, &DEFAULT_PERCENTILES)?;

    let layout = InputLayout::natural(&spec);
    let mut data = Vec::with_capacity(flows.len());
    for (flow, q) in flows.iter().zip(&qor) {
        data.push((layout.encode::<f64>(flow, &spec)?, classes.classify(q)?));
    }
    let (train, test) = data.split_at(1000);

    let net = Architecture {
        conv_filters: 8,
        local_filters: 0,
        dense_units: 32,
        ..Architecture::default()
    }
    .build((layout.height, layout.width), 7)?;
    let cfg = FitConfig {
        steps: 3000,
        log_interval: 500,
        optimizer: OptimizerConfig::new(OptimizerKind::Rmsprop, 1e-3),
        ..FitConfig::default()
    };
    let outcome = fit(&net, train, &cfg)?;
    for (step, loss) in &outcome.loss_trace {
        println!("step {step:>5}: loss {loss:.4}");
    }

    let inputs: Vec<Vec<f64>> = test.iter().map(|(x, _)| x.clone()).collect();
    let predictions = predict_batch(&outcome.model, &inputs)?;
    let exact = predictions.iter().zip(test).filter(|(p, (_, y))| p.class == *y).count();
    let near = predictions
        .iter()
        .zip(test)
        .filter(|(p, (_, y))| p.class.abs_diff(*y) <= 1)
        .count();
    println!(
        "held out: {exact}/{} exact, {near}/{} within one class",
        test.len(),
        test.len()
    );
    Ok(())
}
