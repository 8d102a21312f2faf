//! `--set section.key=value` edits applied to a config before validation.

use anyhow::{anyhow, bail, Context, Result};
use m3l_core::config::ExperimentConfig;

/// Splits `a.b.c=value` into the key path and the raw value.
pub fn parse_assignment(text: &str) -> Result<(Vec<String>, String)> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key=value, got {text:?}"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        bail!("empty path segment in {key:?}");
    }
    Ok((path, value.trim().to_string()))
}

/// TOML literal if the value parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

pub fn apply(config: &ExperimentConfig, assignments: &[String]) -> Result<ExperimentConfig> {
    if assignments.is_empty() {
        return Ok(config.clone());
    }
    let mut table: toml::Table = toml::Value::try_from(config)?
        .try_into()
        .context("config does not serialize to a table")?;
    for a in assignments {
        let (path, raw) = parse_assignment(a)?;
        let (last, parents) = path.split_last().expect("non-empty path");
        let mut node = &mut table;
        for p in parents {
            node = node
                .entry(p.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| anyhow!("{p} in {a:?} is not a section"))?;
        }
        node.insert(last.clone(), parse_value(&raw));
    }
    let edited: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .with_context(|| format!("applying {assignments:?}"))?;
    Ok(edited)
}
