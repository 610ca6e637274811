//! TOML config files with `section.key=value` overrides.
//!
//! A document holds the experiment sections, an optional `[lab]` table for
//! the convergence lab, and an optional `[manifest]` table that is written
//! by runs and ignored on read.

use std::fs;
use std::path::Path;

use acfl::federation::ExperimentConfig;
use acfl::lab::LabConfig;
use anyhow::{anyhow, bail, Context, Result};
use toml::{Table, Value};

pub const LAB_TABLE: &str = "lab";
pub const MANIFEST_TABLE: &str = "manifest";

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override, creating tables on the way.
pub fn apply_override(doc: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not KEY=VALUE"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override key `{path}` has an empty segment");
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut table = doc;
    for k in parents {
        let entry = table.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry.as_table_mut().ok_or_else(|| anyhow!("override `{path}`: `{k}` is not a table"))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Fills the cost parameters that follow from others.
fn complete(doc: &mut Table) {
    let mean_size = doc
        .get("partition")
        .and_then(|p| p.get("mean_size"))
        .and_then(Value::as_integer)
        .map(|v| v as f64);
    let econ = doc.entry("economics").or_insert_with(|| Value::Table(Table::new()));
    let Some(econ) = econ.as_table_mut() else { return };
    let num = |v: &Value| v.as_float().or_else(|| v.as_integer().map(|i| i as f64));
    match (econ.get("chi").and_then(num), econ.get("zeta").and_then(num)) {
        (Some(chi), None) => {
            econ.insert("zeta".into(), Value::Float(1.0 - chi));
        }
        (None, Some(zeta)) => {
            econ.insert("chi".into(), Value::Float(1.0 - zeta));
        }
        _ => {}
    }
    if let (None, Some(m)) = (econ.get("sample_scale"), mean_size) {
        econ.insert("sample_scale".into(), Value::Float(m));
    }
    if econ.is_empty() {
        doc.remove("economics");
    }
}

pub fn read_document(path: Option<&Path>) -> Result<Table> {
    let Some(path) = path else { return Ok(Table::new()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<Table>().with_context(|| format!("parsing {}", path.display()))
}

/// Loads a document and applies overrides in order.
pub fn load_document(path: Option<&Path>, overrides: &[String]) -> Result<Table> {
    let mut doc = read_document(path)?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    Ok(doc)
}

fn one_line(what: &str, e: toml::de::Error) -> anyhow::Error {
    anyhow!("{what}: {}", e.to_string().split_whitespace().collect::<Vec<_>>().join(" "))
}

pub fn experiment_from_document(doc: &Table) -> Result<ExperimentConfig> {
    let mut doc = doc.clone();
    doc.remove(LAB_TABLE);
    doc.remove(MANIFEST_TABLE);
    complete(&mut doc);
    let cfg: ExperimentConfig = Value::Table(doc).try_into().map_err(|e| one_line("invalid config", e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn lab_from_document(doc: &Table) -> Result<LabConfig> {
    let lab = doc.get(LAB_TABLE).cloned().unwrap_or_else(|| Value::Table(Table::new()));
    let cfg: LabConfig = lab.try_into().map_err(|e| one_line("invalid [lab] config", e))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads an experiment config, applying `overrides` after the file.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    experiment_from_document(&load_document(path, overrides)?)
}

pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc: Table = text.parse().context("parsing config")?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    experiment_from_document(&doc)
}

pub fn experiment_table(cfg: &ExperimentConfig) -> Result<Table> {
    Ok(Table::try_from(cfg)?)
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    Ok(toml::to_string(cfg)?)
}
