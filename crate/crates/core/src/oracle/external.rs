use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::thread::JoinHandle;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::QoRRecord;
use crate::error::{Error, Result};
use crate::flowspace::{Flow, FlowSpaceSpec};

/// Overrides the executable named by the first element of the command template.
pub const TOOL_PATH_ENV: &str = "FLOWFORGE_TOOL_PATH";

const CONTEXT_LINES: usize = 8;

/// How to drive an external synthesis tool.
///
/// The flow becomes a script of `preamble`, one command per pass, and
/// `postamble`, separated by newlines. `{script}` and `{design}` in the command
/// template (and `{design}` in the preamble/postamble) are replaced literally;
/// no shell is involved unless the template names one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalToolConfig {
    pub command: Vec<String>,
    #[serde(default)]
    pub preamble: String,
    #[serde(default)]
    pub postamble: String,
    /// Pass name to tool command; unmapped passes are emitted verbatim.
    #[serde(default)]
    pub pass_commands: BTreeMap<String, String>,
    /// Metric name to a regex with one capture group; `delay` and `area` are
    /// required, other names become extra metrics.
    pub patterns: BTreeMap<String, String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    600.0
}

impl ExternalToolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.command.is_empty() {
            return Err(Error::Config("tool command template is empty".into()));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(Error::Config("tool timeout must be positive".into()));
        }
        for required in ["delay", "area"] {
            if !self.patterns.contains_key(required) {
                return Err(Error::Config(format!("missing `{required}` parse pattern")));
            }
        }
        self.compiled_patterns().map(|_| ())
    }

    fn compiled_patterns(&self) -> Result<Vec<(&str, Regex)>> {
        self.patterns
            .iter()
            .map(|(name, pattern)| {
                let re = Regex::new(pattern)
                    .map_err(|e| Error::Config(format!("pattern `{name}`: {e}")))?;
                if re.captures_len() != 2 {
                    return Err(Error::Config(format!(
                        "pattern `{name}` must have exactly one capture group"
                    )));
                }
                Ok((name.as_str(), re))
            })
            .collect()
    }
}

/// The script text handed to the tool for `flow`.
pub fn render_script(flow: &Flow, spec: &FlowSpaceSpec, design: &Path, cfg: &ExternalToolConfig) -> String {
    let design = design.to_string_lossy();
    let mut lines = Vec::with_capacity(flow.len() + 2);
    if !cfg.preamble.is_empty() {
        lines.push(cfg.preamble.replace("{design}", &design));
    }
    for &step in flow.steps() {
        let name = spec.pass_name(usize::from(step)).unwrap_or_default();
        lines.push(
            cfg.pass_commands
                .get(name)
                .cloned()
                .unwrap_or_else(|| name.to_string()),
        );
    }
    if !cfg.postamble.is_empty() {
        lines.push(cfg.postamble.replace("{design}", &design));
    }
    let mut script = lines.join("\n");
    script.push('\n');
    script
}

/// Runs the tool on `design` with the script for `flow` and parses its output.
pub fn evaluate_external(
    flow: &Flow,
    spec: &FlowSpaceSpec,
    design: &Path,
    cfg: &ExternalToolConfig,
) -> Result<QoRRecord> {
    let patterns = cfg.compiled_patterns()?;
    if cfg.command.is_empty() {
        return Err(Error::Config("tool command template is empty".into()));
    }
    if !design.exists() {
        return Err(Error::io(
            design,
            std::io::Error::new(std::io::ErrorKind::NotFound, "design file not found"),
        ));
    }

    // removed when dropped, on every return path
    let workdir = tempfile::Builder::new()
        .prefix("flowforge-")
        .tempdir()
        .map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let script_path = workdir.path().join("flow.script");
    std::fs::write(&script_path, render_script(flow, spec, design, cfg))
        .map_err(|e| Error::io(&script_path, e))?;

    let script = script_path.to_string_lossy();
    let design_text = design.to_string_lossy();
    let mut argv: Vec<String> = cfg
        .command
        .iter()
        .map(|arg| arg.replace("{script}", &script).replace("{design}", &design_text))
        .collect();
    if let Ok(tool) = std::env::var(TOOL_PATH_ENV) {
        if !tool.is_empty() {
            argv[0] = tool;
        }
    }

    let output = run_with_timeout(&argv, Duration::from_secs_f64(cfg.timeout_secs))?;
    parse_output(&output, &patterns)
}

fn run_with_timeout(argv: &[String], timeout: Duration) -> Result<String> {
    let mut command = Command::new(&argv[0]);
    command
        .args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        command.process_group(0);
    }
    let mut child = command.spawn().map_err(|e| Error::ToolFailure {
        message: format!("cannot start `{}`: {e}", argv[0]),
        output: String::new(),
    })?;
    let stdout = drain(child.stdout.take());
    let stderr = drain(child.stderr.take());

    let waited = child.wait_timeout(timeout);
    let status = match waited {
        Ok(Some(status)) => Some(status),
        Ok(None) | Err(_) => {
            kill_tree(&mut child);
            None
        }
    };
    let mut output = join(stdout);
    let err_text = join(stderr);
    if !err_text.is_empty() {
        if !output.is_empty() && !output.ends_with('\n') {
            output.push('\n');
        }
        output.push_str(&err_text);
    }

    match status {
        None => Err(Error::ToolFailure {
            message: format!("`{}` timed out after {:.1}s", argv[0], timeout.as_secs_f64()),
            output,
        }),
        Some(status) if !status.success() => Err(Error::ToolFailure {
            message: format!("`{}` exited with {status}", argv[0]),
            output,
        }),
        Some(_) => Ok(output),
    }
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> Option<JoinHandle<String>> {
    pipe.map(|mut pipe| {
        std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = pipe.read_to_end(&mut buf);
            String::from_utf8_lossy(&buf).into_owned()
        })
    })
}

fn join(handle: Option<JoinHandle<String>>) -> String {
    handle.and_then(|h| h.join().ok()).unwrap_or_default()
}

fn kill_tree(child: &mut Child) {
    #[cfg(unix)]
    {
        // the child leads its own process group; take down grandchildren too
        // so the output pipes close
        let pgid = child.id() as libc::pid_t;
        unsafe {
            libc::kill(-pgid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

fn parse_output(output: &str, patterns: &[(&str, Regex)]) -> Result<QoRRecord> {
    let mut record = QoRRecord {
        delay: 0.0,
        area: 0.0,
        extras: BTreeMap::new(),
    };
    for (name, re) in patterns {
        // tools print intermediate statistics; the last match is the final one
        let value = re
            .captures_iter(output)
            .last()
            .and_then(|c| c.get(1))
            .and_then(|m| m.as_str().trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Parse {
                pattern: name.to_string(),
                context: tail(output, CONTEXT_LINES),
            })?;
        match *name {
            "delay" => record.delay = value,
            "area" => record.area = value,
            other => {
                record.extras.insert(other.to_string(), value);
            }
        }
    }
    record.check()?;
    Ok(record)
}

fn tail(text: &str, lines: usize) -> String {
    let all: Vec<&str> = text.lines().collect();
    all[all.len().saturating_sub(lines)..].join("\n")
}
