use std::path::Path;

use jetplan::sim::ScenarioConfig;

use crate::error::{CliError, CliResult};

/// Reads and validates a scenario, pointing errors at the offending line.
pub fn load(path: &Path) -> CliResult<(ScenarioConfig, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: cannot read: {e}", path.display())))?;
    let config = parse(path, &text)?;
    Ok((config, text))
}

pub fn parse(path: &Path, text: &str) -> CliResult<ScenarioConfig> {
    let config: ScenarioConfig = serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?;
    config.validate().map_err(|issue| match field_line(text, issue.field) {
        Some(line) => CliError::Config(format!("{}:{line}: {issue}", path.display())),
        None => CliError::Config(format!("{}: {issue}", path.display())),
    })?;
    Ok(config)
}

/// One-based line of the first top-level-looking `"field":` key.
fn field_line(text: &str, field: &str) -> Option<usize> {
    let key = format!("\"{field}\"");
    text.lines().position(|l| {
        l.find(&key).is_some_and(|at| l[at + key.len()..].trim_start().starts_with(':'))
    })
    .map(|i| i + 1)
}
