//! `--section.key value` overrides applied to the TOML config tree.

use std::path::PathBuf;

use toml::{Table, Value};

use crate::error::{CliError, Result};

/// Short flags and the config keys they set.
const ALIASES: &[(&str, &[&str])] = &[
    ("batch-size", &["train.batch_size"]),
    ("epochs", &["train.epochs"]),
    ("views", &["train.views"]),
    ("lr", &["train.lr"]),
    ("variant", &["train.variant"]),
    ("regularizer", &["train.regularizer"]),
    ("out-dim", &["train.out_dim"]),
    ("seed", &["data.seed", "train.seed", "eval.seed"]),
    ("seeds", &["ablate.seeds"]),
    ("out", &["output_dir"]),
    ("output-dir", &["output_dir"]),
];

/// Splits `args` into `(key, value)` pairs; accepts `--key value` and `--key=value`.
pub fn parse_pairs(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(CliError::Config(format!("expected an override flag, got {arg:?}")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Config(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((key, value));
    }
    Ok(out)
}

/// Removes a `--config` given among the overrides.
pub fn take_config(args: &[String]) -> Result<(Option<PathBuf>, Vec<String>)> {
    let mut config = None;
    let mut rest = Vec::new();
    for (key, value) in parse_pairs(args)? {
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            rest.push(format!("--{key}={value}"));
        }
    }
    Ok((config, rest))
}

/// Parses a command-line value as a TOML scalar or array, falling back to a string.
pub fn parse_value(s: &str) -> Value {
    if let Ok(mut t) = format!("v = {s}").parse::<Table>() {
        if let Some(v) = t.remove("v") {
            return v;
        }
    }
    if s.contains(',') {
        return Value::Array(s.split(',').map(|p| parse_value(p.trim())).collect());
    }
    Value::String(s.to_string())
}

fn set_path(doc: &mut Table, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key {path:?}")));
    }
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for s in sections {
        let entry = table.entry(s.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("{path}: {s} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Applies overrides in order; later flags win.
pub fn apply(doc: &mut Table, args: &[String]) -> Result<()> {
    for (key, raw) in parse_pairs(args)? {
        if key == "ablation" {
            let variant = icone::experiment::AblationVariant::parse(&raw)?;
            let l = variant.losses();
            let mut t = Table::new();
            t.insert("vv".into(), Value::Boolean(l.vv));
            t.insert("vi".into(), Value::Boolean(l.vi));
            t.insert("div".into(), Value::Boolean(l.div));
            set_path(doc, "train.losses", Value::Table(t))?;
            continue;
        }
        let value = parse_value(&raw);
        match ALIASES.iter().find(|(a, _)| *a == key) {
            Some((_, targets)) => {
                for t in *targets {
                    set_path(doc, t, value.clone())?;
                }
            }
            None => set_path(doc, &key, value)?,
        }
    }
    Ok(())
}
