//! Layered configuration: documented defaults, then a TOML file, then
//! `--key value` flags. Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use toml::{Table, Value};

use ffdsplat::engine::TrainConfig;
use ffdsplat::phantom::DatasetSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub out: PathBuf,
    /// Also write the time-averaged ground-truth volume used to seed reconstructions.
    pub write_init_volume: bool,
    pub dataset: DatasetSpec,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            out: "dataset".into(),
            write_init_volume: true,
            dataset: DatasetSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub data: PathBuf,
    /// Initializer volume; defaults to `<data>/init_volume.json`.
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub train: TrainConfig,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            data: "dataset".into(),
            init: None,
            out: "run".into(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    /// Uniformly spaced evaluation times.
    pub samples: usize,
    /// Evaluate every time index instead of `samples`.
    pub all_times: bool,
    /// Add the time whose blob positions are closest to their average.
    pub mean_time: bool,
    /// Directory for per-time coronal slice dumps.
    pub slices: Option<PathBuf>,
    pub window: [f32; 2],
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            data: "dataset".into(),
            checkpoint: "run".into(),
            out: "report.json".into(),
            samples: 10,
            all_times: false,
            mean_time: true,
            slices: None,
            window: [0.0, 0.03],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub times: Vec<f64>,
    /// Dataset whose geometry is used for projection renders; none skips renders.
    pub data: Option<PathBuf>,
    pub window: [f32; 2],
    /// Clamp exported volume values to `window`.
    pub clamp: bool,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            checkpoint: "run".into(),
            out: "export".into(),
            times: vec![0.0],
            data: None,
            window: [0.0, 0.03],
            clamp: false,
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Path of `key` inside `table`: itself if present at the top level,
/// otherwise the unique nested occurrence.
fn locate(table: &Table, key: &str) -> std::result::Result<Vec<String>, String> {
    if table.contains_key(key) {
        return Ok(vec![key.to_string()]);
    }
    let mut found = Vec::new();
    fn walk(t: &Table, key: &str, prefix: &mut Vec<String>, found: &mut Vec<Vec<String>>) {
        for (k, v) in t {
            if let Value::Table(sub) = v {
                prefix.push(k.clone());
                if sub.contains_key(key) {
                    let mut p = prefix.clone();
                    p.push(key.to_string());
                    found.push(p);
                }
                walk(sub, key, prefix, found);
                prefix.pop();
            }
        }
    }
    walk(table, key, &mut Vec::new(), &mut found);
    match found.len() {
        0 => Ok(vec![key.to_string()]),
        1 => Ok(found.pop().unwrap()),
        _ => Err(format!(
            "flag '{key}' is ambiguous; use one of {}",
            found.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
        )),
    }
}

fn parse_value(text: &str) -> Value {
    let literal = |s: &str| {
        format!("v = {s}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
    };
    if let Some(v) = literal(text) {
        return v;
    }
    if text.contains(',') {
        let items: Option<Vec<Value>> = text.split(',').map(|s| literal(s.trim())).collect();
        if let Some(items) = items {
            return Value::Array(items);
        }
    }
    Value::String(text.to_string())
}

/// Adapts a parsed flag value to the type already present at that key.
fn coerce(existing: Option<&Value>, v: Value) -> Value {
    match (existing, v) {
        (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
        (Some(Value::String(_)), v @ (Value::Integer(_) | Value::Float(_) | Value::Boolean(_))) => {
            Value::String(v.to_string())
        }
        (Some(Value::Array(a)), Value::Integer(i)) if a.first().is_some_and(Value::is_float) => {
            Value::Array(vec![Value::Float(i as f64)])
        }
        (Some(Value::Array(_)), Value::Float(f)) => Value::Array(vec![Value::Float(f)]),
        (Some(Value::Array(a)), Value::Array(items)) if a.first().is_some_and(Value::is_float) => Value::Array(
            items
                .into_iter()
                .map(|x| match x {
                    Value::Integer(i) => Value::Float(i as f64),
                    x => x,
                })
                .collect(),
        ),
        (_, v) => v,
    }
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut t = table;
    for p in parents {
        let entry = t.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        t = entry.as_table_mut().ok_or_else(|| format!("'{p}' is not a table"))?;
    }
    let v = coerce(t.get(last), value);
    t.insert(last.clone(), v);
    Ok(())
}

/// Splits `--key value` / `--key=value` pairs; bare `--flag` means `true`.
pub fn parse_overrides(args: &[String]) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let Some(key) = a.strip_prefix("--") else {
            return Err(format!("unexpected argument '{a}'"));
        };
        // Flags are kebab-case; config keys are snake_case.
        let norm = |k: &str| k.replace('-', "_");
        if let Some((k, v)) = key.split_once('=') {
            out.push((norm(k), v.to_string()));
            i += 1;
        } else if i + 1 < args.len() && !args[i + 1].starts_with("--") {
            out.push((norm(key), args[i + 1].clone()));
            i += 2;
        } else {
            out.push((norm(key), "true".into()));
            i += 1;
        }
    }
    Ok(out)
}

/// Defaults ← file ← overrides, then strict deserialization.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> std::result::Result<T, String> {
    let mut table = Table::try_from(T::default()).map_err(|e| e.to_string())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let file_table: Table = text.parse().map_err(|e| format!("{}: {e}", path.display()))?;
        merge(&mut table, file_table);
    }
    for (key, value) in overrides {
        let key = key.replace('-', "_");
        let path: Vec<String> = if key.contains('.') {
            key.split('.').map(str::to_string).collect()
        } else {
            locate(&table, &key)?
        };
        set_path(&mut table, &path, parse_value(value))?;
    }
    Value::Table(table).try_into().map_err(|e: toml::de::Error| e.to_string())
}
