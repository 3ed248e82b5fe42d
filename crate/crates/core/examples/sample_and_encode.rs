//! Uniform sampling of distinct flows and their one-hot matrices.

use flowforge::encoding::{decode_one_hot, encode_one_hot, InputLayout};
use flowforge::flowspace::{sample_flows, FlowSpaceSpec};

fn main() -> flowforge::Result<()> {
    let spec = FlowSpaceSpec::new(["balance", "rewrite", "refactor", "resub"], 2)?;
    let flows = sample_flows(&spec, 5, 7)?;

    for flow in &flows {
        println!("{}", flow.to_canonical(&spec));
    }

    let first = &flows[0];
    let matrix = encode_one_hot(first, &spec)?;
    println!("\none-hot matrix of the first flow ({}x{}):", matrix.rows(), matrix.cols());
    for row in matrix.to_rows() {
        let cells: Vec<String> = row.iter().map(u8::to_string).collect();
        println!("  {}", cells.join(" "));
    }
    assert_eq!(&decode_one_hot(&matrix, &spec)?, first);

    let layout = InputLayout::reshaped(&spec, 4, 8)?;
    let input: Vec<f64> = layout.encode(first, &spec)?;
    println!("\nreshaped to 4x8 for the network:");
    for row in input.chunks(8) {
        println!("  {row:?}");
    }
    Ok(())
}
