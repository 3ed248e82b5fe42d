//! Drives an external tool. A shell one-liner stands in for ABC here; it
//! prints a fake report whose numbers depend on the script length.

use std::collections::BTreeMap;

use flowforge::flowspace::{sample_flows, FlowSpaceSpec};
use flowforge::oracle::{evaluate_external, render_script, ExternalToolConfig};

fn main() -> flowforge::Result<()> {
    let spec = FlowSpaceSpec::new(["balance", "rewrite", "refactor"], 2)?;
    let tool = ExternalToolConfig {
        command: vec![
            "sh".into(),
            "-c".into(),
            r#"n=$(printf '%s\n' "$1" | wc -c); echo "delay = $n"; echo "area = $((n * 3))""#.into(),
            "tool".into(),
            "{script}".into(),
        ],
        preamble: "read {design}; strash".into(),
        postamble: "map; print_stats".into(),
        pass_commands: BTreeMap::from([("rewrite".into(), "rewrite -z".into())]),
        patterns: BTreeMap::from([
            ("delay".into(), r"delay\s*=\s*(\S+)".into()),
            ("area".into(), r"area\s*=\s*(\S+)".into()),
        ]),
        timeout_secs: 10.0,
    };
    tool.validate()?;
    let dir = tempfile::tempdir().map_err(|e| flowforge::Error::Argument(e.to_string()))?;
    let design = dir.path().join("design.blif");
    std::fs::write(&design, ".model top\n.end\n").map_err(|e| flowforge::Error::Argument(e.to_string()))?;
    let design = design.as_path();

    for flow in sample_flows(&spec, 3, 11)? {
        println!("--- {}", flow.display(&spec));
        println!("{}", render_script(&flow, &spec, design, &tool));
        let qor = evaluate_external(&flow, &spec, design, &tool)?;
        println!("=> delay {}, area {}", qor.delay, qor.area);
    }
    Ok(())
}
