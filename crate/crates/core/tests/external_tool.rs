use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use flowforge::flowspace::{sample_flows, FlowSpaceSpec};
use flowforge::oracle::{evaluate_batch, evaluate_external, ExternalToolConfig, Oracle, TOOL_PATH_ENV};
use flowforge::Error;

fn tool(body: &str) -> ExternalToolConfig {
    ExternalToolConfig {
        command: vec!["sh".into(), "-c".into(), body.into(), "stub".into(), "{script}".into()],
        preamble: "read {design}".into(),
        postamble: "map".into(),
        pass_commands: BTreeMap::new(),
        patterns: BTreeMap::from([
            ("delay".into(), r"delay\s*=\s*(\S+)".into()),
            ("area".into(), r"area\s*=\s*(\S+)".into()),
        ]),
        timeout_secs: 10.0,
    }
}

// delay counts `balance` lines, area counts script lines
const COUNTING_STUB: &str = r#"d=$(grep -c '^balance$' "$1"); a=$(wc -l < "$1"); echo "delay = $d"; echo "area = $a""#;

struct Fixture {
    _dir: tempfile::TempDir,
    design: PathBuf,
    spec: FlowSpaceSpec,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let design = dir.path().join("top.blif");
    std::fs::write(&design, ".model top\n.end\n").unwrap();
    Fixture {
        _dir: dir,
        design,
        spec: FlowSpaceSpec::new(["balance", "rewrite", "refactor"], 2).unwrap(),
    }
}

#[test]
fn stub_output_is_parsed() {
    let f = fixture();
    let flow = f.spec.parse_flow("balance;rewrite;balance;refactor;rewrite;refactor").unwrap();
    let qor = evaluate_external(&flow, &f.spec, &f.design, &tool(COUNTING_STUB)).unwrap();
    assert_eq!(qor.delay, 2.0);
    assert_eq!(qor.area, 8.0);
}

#[test]
fn the_last_report_wins_and_extras_are_kept() {
    let f = fixture();
    let mut cfg = tool("echo 'delay = 1 area = 2'; echo 'power = 7'; echo 'delay = 3 area = 4'");
    cfg.patterns.insert("power".into(), r"power\s*=\s*(\S+)".into());
    let flow = sample_flows(&f.spec, 1, 0).unwrap().remove(0);
    let qor = evaluate_external(&flow, &f.spec, &f.design, &cfg).unwrap();
    assert_eq!((qor.delay, qor.area), (3.0, 4.0));
    assert_eq!(qor.extras.get("power"), Some(&7.0));
}

#[test]
fn unmatched_output_is_a_parse_error() {
    let f = fixture();
    let flow = sample_flows(&f.spec, 1, 0).unwrap().remove(0);
    let err = evaluate_external(&flow, &f.spec, &f.design, &tool("echo 'no numbers here'")).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err}");
    assert!(err.to_string().contains("no numbers here"));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn nonzero_exit_keeps_the_output() {
    let f = fixture();
    let flow = sample_flows(&f.spec, 1, 0).unwrap().remove(0);
    let err = evaluate_external(&flow, &f.spec, &f.design, &tool("echo boom >&2; exit 3")).unwrap_err();
    let Error::ToolFailure { output, .. } = &err else {
        panic!("expected a tool failure, got {err}")
    };
    assert!(output.contains("boom"));
}

#[test]
fn a_hung_tool_is_killed_at_the_timeout() {
    let f = fixture();
    let mut cfg = tool("sleep 30 & sleep 30; echo 'delay = 1 area = 1'");
    cfg.timeout_secs = 0.3;
    let flow = sample_flows(&f.spec, 1, 0).unwrap().remove(0);
    let started = Instant::now();
    let err = evaluate_external(&flow, &f.spec, &f.design, &cfg).unwrap_err();
    assert!(started.elapsed() < Duration::from_secs(10));
    assert!(err.to_string().contains("timed out"), "{err}");
}

#[test]
fn missing_design_is_an_io_error() {
    let f = fixture();
    let flow = sample_flows(&f.spec, 1, 0).unwrap().remove(0);
    let err = evaluate_external(&flow, &f.spec, &f.design.with_extension("missing"), &tool(COUNTING_STUB)).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn batch_faults_stay_at_their_index() {
    let f = fixture();
    // fails whenever the flow starts with refactor
    let stub = format!(r#"sed -n 2p "$1" | grep -q '^refactor$' && exit 1; {COUNTING_STUB}"#);
    let oracle = Oracle::External {
        tool: tool(&stub),
        design: f.design.clone(),
    };
    let flows = sample_flows(&f.spec, 30, 4).unwrap();
    let results = evaluate_batch(&flows, &f.spec, &oracle, 3).unwrap();
    assert_eq!(results.len(), flows.len());
    let mut failures = 0;
    for (flow, result) in flows.iter().zip(&results) {
        let starts_with_refactor = f.spec.pass_name(usize::from(flow.steps()[0])) == Some("refactor");
        assert_eq!(result.is_err(), starts_with_refactor, "{}", flow.display(&f.spec));
        if let Ok(qor) = result {
            assert_eq!(qor.area, 8.0);
        }
        failures += usize::from(starts_with_refactor);
    }
    assert!(failures > 0 && failures < flows.len());
}

#[test]
fn tool_path_variable_replaces_the_program() {
    let f = fixture();
    let mut cfg = tool(COUNTING_STUB);
    cfg.command[0] = "no-such-program-flowforge".into();
    let flow = sample_flows(&f.spec, 1, 0).unwrap().remove(0);
    // every test here runs `sh`, so pointing the override at it is harmless to them
    std::env::set_var(TOOL_PATH_ENV, "sh");
    let result = evaluate_external(&flow, &f.spec, &f.design, &cfg);
    std::env::remove_var(TOOL_PATH_ENV);
    assert!(result.is_ok(), "{:?}", result.err());
}
