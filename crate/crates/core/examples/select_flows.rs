//! Angel and devil selection on a five-flow prediction table, then accuracy
//! against a made-up ground truth.

use std::collections::HashMap;

use flowforge::flowspace::FlowSpaceSpec;
use flowforge::nn::argmax;
use flowforge::pipeline::{compute_accuracy, select_angel_devil, PredictionRecord, ACCURACY_FORMULA};

fn main() -> flowforge::Result<()> {
    let spec = FlowSpaceSpec::numbered(3, 1)?;
    let table: [(&str, [f64; 7]); 5] = [
        ("p0;p1;p2", [0.47, 0.13, 0.22, 0.02, 0.03, 0.12, 0.01]),
        ("p0;p2;p1", [0.51, 0.12, 0.01, 0.09, 0.17, 0.08, 0.02]),
        ("p1;p0;p2", [0.02, 0.45, 0.14, 0.12, 0.11, 0.10, 0.06]),
        ("p1;p2;p0", [0.12, 0.03, 0.17, 0.62, 0.01, 0.02, 0.03]),
        ("p2;p0;p1", [0.35, 0.23, 0.09, 0.02, 0.13, 0.17, 0.01]),
    ];
    let mut predictions = Vec::new();
    for (text, p) in table {
        predictions.push(PredictionRecord {
            flow: spec.parse_flow(text)?,
            probabilities: p.to_vec(),
            class: argmax(&p),
        });
    }

    let selection = select_angel_devil(&predictions, 2, 7, &spec);
    for (name, picks, class) in [("angels", &selection.angels, 0), ("devils", &selection.devils, 6)] {
        println!("{name}:");
        for r in picks {
            println!("  {}  p{class} = {}", r.flow.display(&spec), r.probabilities[class]);
        }
    }
    println!(
        "devil shortfall {}: no flow is predicted class 6, so the list is topped up",
        selection.devil_shortfall
    );

    let truth: HashMap<_, _> = predictions
        .iter()
        .zip([0, 1, 1, 3, 6])
        .map(|(r, c)| (r.flow.clone(), c))
        .collect();
    let angels: Vec<_> = selection.angels.iter().map(|r| r.flow.clone()).collect();
    let devils: Vec<_> = selection.devils.iter().map(|r| r.flow.clone()).collect();
    let acc = compute_accuracy(&angels, &devils, &truth, 7, 2)?;
    println!("accuracy {ACCURACY_FORMULA} = {}", acc.value);
    Ok(())
}
