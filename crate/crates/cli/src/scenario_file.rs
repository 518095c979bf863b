//! Scenario files: TOML holding every scenario field plus an optional
//! `[output]` table. Schema errors carry the line they occur on.

use std::fmt;
use std::path::Path;

use ballworld::sim::{
    ControllerSpec, DeadlockMonitor, Scenario, SimError, SystemSpec, WorldSpec, DEFAULT_DT, DEFAULT_HORIZON,
};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputOptions {
    /// Ball-world snapshots drawn per trajectory (first and last included).
    pub snapshots: usize,
    /// Marching-squares samples per axis for the contour plot.
    pub grid: usize,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self { snapshots: 3, grid: 400 }
    }
}

/// Mirrors [`Scenario`] field by field so that deserializing straight from
/// the text keeps span information for every key.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    system: SystemSpec,
    controller: ControllerSpec,
    #[serde(default)]
    world: Option<WorldSpec>,
    #[serde(default)]
    goal: [f64; 2],
    initial_states: Vec<Vec<f64>>,
    #[serde(default)]
    dt: Option<f64>,
    #[serde(default)]
    horizon: Option<f64>,
    #[serde(default)]
    monitor: DeadlockMonitor,
    #[serde(default)]
    output: OutputOptions,
}

/// Input the run cannot start from; maps to exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct InputError {
    pub source: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{line}: {}", self.source, self.message),
            None => write!(f, "{}: {}", self.source, self.message),
        }
    }
}

impl std::error::Error for InputError {}

#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub output: OutputOptions,
    /// File path or `builtin:<name>`.
    pub source: String,
    text: Option<String>,
}

impl LoadedScenario {
    /// Attaches the most plausible line to a validation failure.
    pub fn input_error(&self, err: &SimError) -> InputError {
        let message = err.to_string();
        let line = self.text.as_deref().and_then(|text| locate(text, &message));
        InputError { source: self.source.clone(), line, message }
    }
}

pub fn parse(text: &str, source: &str) -> Result<LoadedScenario, InputError> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| {
        let message = e.message().trim().to_string();
        let line = e.span().map(|s| refine_line(text, s, &message));
        InputError { source: source.into(), line, message }
    })?;
    let scenario = Scenario {
        name: file.name,
        system: file.system,
        controller: file.controller,
        world: file.world,
        goal: file.goal,
        initial_states: file.initial_states,
        dt: file.dt.unwrap_or(DEFAULT_DT),
        horizon: file.horizon.unwrap_or(DEFAULT_HORIZON),
        monitor: file.monitor,
    };
    if file.output.grid < 2 {
        let line = locate(text, "grid");
        return Err(InputError { source: source.into(), line, message: "output.grid must be at least 2".into() });
    }
    Ok(LoadedScenario { scenario, output: file.output, source: source.into(), text: Some(text.to_string()) })
}

/// A readable file, else a built-in scenario name.
pub fn load(spec: &str) -> Result<LoadedScenario, InputError> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InputError { source: spec.into(), line: None, message: e.to_string() })?;
        return parse(&text, spec);
    }
    match Scenario::builtin(spec) {
        Some(scenario) => {
            Ok(LoadedScenario { scenario, output: OutputOptions::default(), source: format!("builtin:{spec}"), text: None })
        }
        None => Err(InputError {
            source: spec.into(),
            line: None,
            message: format!(
                "no such file or built-in scenario (built-ins: {})",
                ballworld::sim::BUILTIN_NAMES.join(", ")
            ),
        }),
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Tagged enums are deserialized from buffered content, so their errors span
/// the whole table; narrow an unknown-field error to the key's own line.
fn refine_line(text: &str, span: std::ops::Range<usize>, message: &str) -> usize {
    let start = line_of_offset(text, span.start);
    let key = message.strip_prefix("unknown field `").and_then(|m| m.split('`').next());
    let Some(key) = key else { return start };
    // the span may cover only the table header; scan to the next table
    let end = line_of_offset(text, span.end);
    let next_table = text.lines().enumerate().skip(end).find(|(_, l)| l.trim_start().starts_with('['));
    let last = next_table.map_or(usize::MAX, |(i, _)| i);
    text.lines()
        .enumerate()
        .take(last)
        .skip(start - 1)
        .find(|(_, l)| {
            let t = l.trim_start();
            t.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map_or(start, |(i, _)| i + 1)
}

/// Validation messages name the offending field; find where it is set.
fn locate(text: &str, message: &str) -> Option<usize> {
    const KEYS: [(&str, &str); 16] = [
        ("initial_states", "initial_states"),
        ("initial state", "initial_states"),
        ("initial ball world", "ball_radii"),
        ("ball_radii", "ball_radii"),
        ("dt and horizon", "dt"),
        ("monitor", "monitor"),
        ("lookahead", "lookahead"),
        ("funnel", "barrier"),
        ("circle barrier", "barrier"),
        ("drift", "drift"),
        ("input", "input"),
        ("ball-world controller", "controller"),
        ("standard-cbf", "controller"),
        ("workspace", "workspace"),
        ("shape", "shape"),
        ("grid", "grid"),
    ];
    let (_, key) = KEYS.iter().find(|(needle, _)| message.contains(needle))?;
    text.lines().position(|l| {
        let t = l.trim_start();
        let bare = t.trim_start_matches('[');
        (t.starts_with(key) && t[key.len()..].trim_start().starts_with('='))
            || (t.starts_with('[') && (bare.starts_with(key) || bare.contains(&format!(".{key}"))))
    })
    .or_else(|| text.lines().position(|l| l.contains(key)))
    .map(|i| i + 1)
}
