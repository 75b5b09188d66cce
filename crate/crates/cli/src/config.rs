//! `--config path.json`: validate the file against the published schema and
//! splice its keys into argv as flags, ahead of any flag the user typed so
//! that the command line wins.

use gwfract::{Error, Result};
use serde_json::{Map, Value};

pub const SCHEMA: &str = include_str!("../config.schema.json");

pub const COMMANDS: &[&str] = &[
    "simulate",
    "extinction",
    "moran",
    "fixpoint",
    "gk-curve",
    "extract",
    "diffuse-cert",
    "check-diffuse",
    "check-ahlfors",
    "boxdim",
    "experiment",
    "render",
];

/// Flags accepted by every subcommand; these go before the subcommand name.
const GLOBAL_KEYS: &[&str] = &["seed", "threads", "json", "timing", "out"];

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

/// Pull `--config <path>` / `--config=<path>` out of argv.
fn take_config(args: &mut Vec<String>) -> Result<Option<String>> {
    let mut i = 1;
    while i < args.len() {
        if args[i] == "--" {
            break;
        }
        if let Some(v) = args[i].strip_prefix("--config=") {
            let v = v.to_string();
            args.remove(i);
            return Ok(Some(v));
        }
        if args[i] == "--config" {
            if i + 1 >= args.len() {
                return Err(invalid("--config needs a path"));
            }
            let v = args.remove(i + 1);
            args.remove(i);
            return Ok(Some(v));
        }
        i += 1;
    }
    Ok(None)
}

pub fn validate(doc: &Value) -> Result<()> {
    let schema: Value = serde_json::from_str(SCHEMA)?;
    let validator = jsonschema::validator_for(&schema).map_err(|e| invalid(format!("bad schema: {e}")))?;
    let problems: Vec<String> = validator
        .iter_errors(doc)
        .map(|e| {
            let at = e.instance_path().to_string();
            if at.is_empty() {
                e.to_string()
            } else {
                format!("{at}: {e}")
            }
        })
        .collect();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(invalid(format!("config does not match the schema: {}", problems.join("; "))))
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(scalar).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn push_flag(out: &mut Vec<String>, key: &str, v: &Value) {
    let flag = format!("--{}", key.replace('_', "-"));
    match v {
        Value::Bool(true) => out.push(flag),
        Value::Bool(false) | Value::Null => {}
        _ => {
            out.push(flag);
            out.push(scalar(v));
        }
    }
}

fn percolation_shorthand(v: &Value) -> String {
    match v {
        Value::Object(m) => ["b", "d", "p"]
            .iter()
            .filter_map(|k| m.get(*k).map(|x| format!("{k}={x}")))
            .collect::<Vec<_>>()
            .join(","),
        other => scalar(other),
    }
}

/// Split the config into (global flags, subcommand, subcommand arguments).
fn flags(doc: &Map<String, Value>) -> (Vec<String>, Option<String>, Vec<String>) {
    let mut global = Vec::new();
    let mut local = Vec::new();
    if let Some(id) = doc.get("id") {
        local.push(scalar(id));
    }
    for (key, v) in doc {
        match key.as_str() {
            "command" | "id" => {}
            "percolation" => local.extend(["--percolation".to_string(), percolation_shorthand(v)]),
            "params" => {
                if let Value::Object(m) = v {
                    for (k, x) in m {
                        push_flag(&mut local, k, x);
                    }
                }
            }
            k if GLOBAL_KEYS.contains(&k) => push_flag(&mut global, k, v),
            k => push_flag(&mut local, k, v),
        }
    }
    let command = doc.get("command").and_then(Value::as_str).map(str::to_string);
    (global, command, local)
}

/// Expand `--config` into plain flags. Without `--config`, argv is returned
/// unchanged.
pub fn expand(mut args: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = take_config(&mut args)? else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| invalid(format!("cannot read config {path}: {e}")))?;
    let doc: Value = serde_json::from_str(&text)?;
    validate(&doc)?;
    let Value::Object(map) = doc else {
        return Err(invalid("config must be a JSON object"));
    };
    let (global, command, mut local) = flags(&map);
    let pos = args.iter().position(|a| COMMANDS.contains(&a.as_str()));
    let mut out = vec![args[0].clone()];
    out.extend(global);
    match pos {
        Some(i) => {
            // The typed subcommand wins; a positional id from the file would
            // clash with a typed one, so drop it.
            if args[i] == "experiment" && map.contains_key("id") && args.len() > i + 1 && !args[i + 1].starts_with('-') {
                local.remove(0);
            }
            if command.as_deref().is_some_and(|c| c != args[i]) {
                // Keys meant for another subcommand would be rejected anyway.
                local.clear();
            }
            out.extend(args[1..=i].iter().cloned());
            out.extend(local);
            out.extend(args[i + 1..].iter().cloned());
        }
        None => {
            out.extend(args[1..].iter().cloned());
            if let Some(c) = command {
                out.push(c);
                out.extend(local);
            }
        }
    }
    Ok(out)
}
