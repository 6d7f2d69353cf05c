//! Run configuration files.
//!
//! A file holds one JSON object. An optional top-level `sweep` list holds
//! override objects; each is deep-merged into the rest of the file to produce
//! one run. Every resulting run is parsed strictly before anything is computed.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use cotlab_core::looped::LoopFlowConfig;
use cotlab_core::TrainConfig;
use serde::Deserialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// The result a recipe reproduces; listed by `cotlab list --recipes`.
    #[serde(default)]
    pub claim: Option<String>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub construct: Option<ConstructSection>,
    #[serde(default)]
    pub verify: Option<VerifySection>,
    #[serde(default, rename = "loop")]
    pub looped: Option<LoopSection>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoints: Vec<PathBuf>,
    pub k_prime: Vec<usize>,
    pub tasks: usize,
    pub seed: u64,
    /// Prompt length; defaults to the checkpoint's sidecar.
    #[serde(default)]
    pub n: Option<usize>,
    /// Reported in the `eta` column when the checkpoint has no sidecar.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Input covariances; empty means the identity only.
    #[serde(default)]
    pub sigma: Vec<SigmaSpec>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaSpec {
    Identity,
    Diag(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
    /// `count` random covariances with spectrum in `[delta/eta, (2-delta)/eta]`.
    Window { count: usize, delta: f64 },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstructSection {
    pub d: usize,
    pub eta: f64,
    /// Recorded in the sidecar for later evaluation.
    pub n: usize,
    #[serde(default)]
    pub k: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Check names; empty runs all of them.
    #[serde(default)]
    pub checks: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialA {
    /// `A = scale * I`.
    Scale(f64),
    Diag(Vec<f64>),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSection {
    pub d: usize,
    pub a0: InitialA,
    pub seed: u64,
    pub flow: LoopFlowConfig,
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Expands a configuration document into its runs.
pub fn expand(doc: Value) -> CliResult<Vec<RunConfig>> {
    let Value::Object(mut obj) = doc else {
        return Err(CliError::Usage("configuration must be a JSON object".into()));
    };
    let sweep = match obj.remove("sweep") {
        None => None,
        Some(Value::Array(items)) => Some(items),
        Some(_) => return Err(CliError::Usage("sweep must be a list of override objects".into())),
    };
    let base = Value::Object(obj);
    let parse = |v: Value| serde_json::from_value::<RunConfig>(v).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")));
    let runs = match sweep {
        None => vec![parse(base)?],
        Some(items) if items.is_empty() => return Err(CliError::Usage("sweep is empty".into())),
        Some(items) => {
            let base_id = base.get("run_id").and_then(Value::as_str).unwrap_or_default().to_string();
            let mut runs = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                if !item.is_object() {
                    return Err(CliError::Usage(format!("sweep entry {i} is not an object")));
                }
                let mut v = base.clone();
                merge(&mut v, item);
                let mut run = parse(v)?;
                if item.get("run_id").is_none() {
                    run.run_id = format!("{base_id}_{i}");
                }
                runs.push(run);
            }
            runs
        }
    };
    let mut seen = HashSet::new();
    for r in &runs {
        validate_run_id(&r.run_id)?;
        if !seen.insert(r.run_id.clone()) {
            return Err(CliError::Usage(format!("duplicate run_id {}", r.run_id)));
        }
    }
    Ok(runs)
}

fn validate_run_id(id: &str) -> CliResult<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "run_id {id:?} must be non-empty and use only letters, digits, '-', '_' or '.'"
        )))
    }
}

pub fn load(path: &Path) -> CliResult<Vec<RunConfig>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    expand(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn train_doc() -> Value {
        json!({
            "run_id": "base",
            "train": {
                "d": 2, "n": 4, "k": 1, "eta": 0.4, "mode": "experiment",
                "optimizer": {"kind": "adam", "lr": 0.001},
                "batch": 8, "iterations": 1, "seed": 1
            }
        })
    }

    #[test]
    fn sweep_overrides_nested_fields() {
        let mut doc = train_doc();
        doc["sweep"] = json!([{"train": {"k": 3}}, {"run_id": "named", "train": {"k": 5}}]);
        let runs = expand(doc).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].run_id, "base_0");
        assert_eq!(runs[0].train.as_ref().unwrap().k, 3);
        assert_eq!(runs[1].run_id, "named");
        assert_eq!(runs[1].train.as_ref().unwrap().n, 4);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut doc = train_doc();
        doc["train"]["learning_rate"] = json!(0.1);
        assert!(matches!(expand(doc), Err(CliError::Usage(_))));
        let mut doc = train_doc();
        doc["extra"] = json!(1);
        assert!(matches!(expand(doc), Err(CliError::Usage(_))));
    }

    #[test]
    fn sigma_specs_parse() {
        let v: Vec<SigmaSpec> = serde_json::from_value(json!(["identity", {"diag": [1.0, 2.0]}, {"window": {"count": 3, "delta": 0.5}}])).unwrap();
        assert_eq!(v[0], SigmaSpec::Identity);
        assert_eq!(v[2], SigmaSpec::Window { count: 3, delta: 0.5 });
    }

    #[test]
    fn run_ids_are_file_safe() {
        let mut doc = train_doc();
        doc["run_id"] = json!("../x");
        assert!(expand(doc).is_err());
    }
}
