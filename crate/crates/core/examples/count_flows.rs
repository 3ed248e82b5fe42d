//! Exact flow-space sizes, from tiny spaces to six passes repeated four times.
//!
//! cargo run --example count_flows -- 6 2

use flowforge::flowspace::{approx, count_flows, enumerate_flows, FlowSpaceSpec};

fn main() -> flowforge::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (n, m) = match args[..] {
        [n, m] => (n, m),
        _ => (6, 2),
    };

    println!("three passes, length 3, each at most once: {}", count_flows(3, 3, 1)?);
    println!("two passes, length 4, each at most twice:  {}", count_flows(2, 4, 2)?);

    let spec = FlowSpaceSpec::numbered(3, 2)?;
    println!("\nall {} flows of {} passes repeated {} times:", count_flows(3, 6, 2)?, 3, 2);
    for flow in enumerate_flows(&spec)?.take(5) {
        println!("  {}", flow.display(&spec));
    }
    println!("  ...");

    let total = count_flows(n, n * m, m)?;
    println!("\nn = {n}, m = {m}: {total} flows (~{:.3e})", approx(&total));
    let large = count_flows(6, 24, 4)?;
    println!("n = 6, m = 4: {large} flows (~{:.3e})", approx(&large));
    Ok(())
}
