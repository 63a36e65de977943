//! Run directories, manifests, verdicts and budget accounting.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{builtin_source, Model, ModelFile};

/// Default output root when neither `--out` nor `FBSDE_OUT` is set.
pub const DEFAULT_OUT: &str = "runs";

/// A loaded model with the bytes it was read from.
pub struct LoadedModel {
    pub reference: String,
    pub bytes: Vec<u8>,
    pub model: Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub reference: String,
    pub builtin: bool,
    pub sha256: String,
}

impl LoadedModel {
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(&self.bytes))
    }

    pub fn model_ref(&self) -> ModelRef {
        ModelRef {
            reference: self.reference.clone(),
            builtin: builtin_source(&self.reference).is_some(),
            sha256: self.sha256(),
        }
    }
}

/// Resolve a builtin alias or read a model file.
pub fn load_model(reference: &str) -> Result<LoadedModel> {
    let bytes = match builtin_source(reference) {
        Some(src) => src.as_bytes().to_vec(),
        None => fs::read(reference).with_context(|| format!("reading model file `{reference}`"))?,
    };
    let model = ModelFile::from_json_bytes(&bytes)
        .and_then(|f| f.build())
        .with_context(|| format!("loading model `{reference}`"))?;
    Ok(LoadedModel {
        reference: reference.to_string(),
        bytes,
        model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub model: Option<ModelRef>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub workers: Option<usize>,
    pub cost_path_steps: f64,
    pub budget_path_steps: f64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub outputs: Vec<String>,
    pub pass: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub command: String,
    pub pass: bool,
    pub checks: Vec<CheckLine>,
}

impl Verdict {
    pub fn new(command: &str) -> Self {
        Verdict {
            command: command.to_string(),
            pass: true,
            checks: Vec::new(),
        }
    }

    pub fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.pass &= pass;
        self.checks.push(CheckLine {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }
}

/// Output root: `--out`, else `FBSDE_OUT`, else `runs`.
pub fn output_root(out: Option<&Path>) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os("FBSDE_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
    }
}

/// Refuse plans above the budget, reporting the computed cost.
pub fn check_budget(cost: f64, budget: f64) -> Result<()> {
    if cost > budget {
        bail!(
            "plan needs {cost:.3e} path-steps, above the budget of {budget:.3e}; \
             raise --budget or reduce paths, steps or sweep sizes"
        );
    }
    Ok(())
}

/// `<root>/<command>/<label or timestamp>/` with its manifest.
pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Create the directory and write the manifest before any result.
    pub fn create(root: &Path, label: Option<&str>, mut manifest: RunManifest) -> Result<Self> {
        let now = chrono::Utc::now();
        manifest.started_at = now.to_rfc3339();
        let leaf = match label {
            Some(l) => l.to_string(),
            None => now.format("%Y%m%dT%H%M%S%.3fZ").to_string(),
        };
        let path = root.join(&manifest.command).join(leaf);
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let dir = RunDir { path, manifest };
        dir.write_manifest()?;
        Ok(dir)
    }

    fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.path.join("manifest.json"), text + "\n")?;
        Ok(())
    }

    fn track(&mut self, name: &str) {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.to_string());
        }
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        fs::write(self.path.join(name), text).with_context(|| format!("writing {name}"))?;
        self.track(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write_text(name, &text)
    }

    /// Write serializable rows as CSV with a header.
    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
        fs::write(self.path.join(name), bytes).with_context(|| format!("writing {name}"))?;
        self.track(name);
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.path.join(name), bytes).with_context(|| format!("writing {name}"))?;
        self.track(name);
        Ok(())
    }

    /// Write the verdict and finalize the manifest.
    pub fn finish(mut self, verdict: &Verdict) -> Result<PathBuf> {
        self.write_json("verdict.json", verdict)?;
        self.manifest.pass = Some(verdict.pass);
        self.manifest.finished_at = Some(chrono::Utc::now().to_rfc3339());
        self.write_manifest()?;
        Ok(self.path)
    }
}

/// Every `verdict.json` below `dir`, in sorted path order.
pub fn find_verdicts(dir: &Path) -> Result<Vec<(PathBuf, Verdict)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&d)
            .with_context(|| format!("reading {}", d.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "verdict.json") {
                let text = fs::read_to_string(&p)?;
                let v: Verdict = serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", p.display()))?;
                out.push((p, v));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_hash_matches_source_bytes() {
        let m = load_model("T0").unwrap();
        let expect = hex::encode(Sha256::digest(builtin_source("T0").unwrap().as_bytes()));
        assert_eq!(m.sha256(), expect);
        assert!(m.model_ref().builtin);
    }

    #[test]
    fn budget_refusal_reports_cost() {
        let e = check_budget(2e7, 1e7).unwrap_err().to_string();
        assert!(e.contains("2.000e7"), "{e}");
        assert!(check_budget(1e7, 1e7).is_ok());
    }

    #[test]
    fn run_dir_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = RunManifest {
            tool: "fbsde".into(),
            version: "0".into(),
            command: "solve".into(),
            model: None,
            config: serde_json::Value::Null,
            seed: 1,
            workers: None,
            cost_path_steps: 0.0,
            budget_path_steps: 1.0,
            started_at: String::new(),
            finished_at: None,
            outputs: vec![],
            pass: None,
        };
        let mut dir = RunDir::create(tmp.path(), Some("lbl"), manifest).unwrap();
        assert!(tmp.path().join("solve/lbl/manifest.json").exists());
        dir.write_csv("a.csv", &[(1, 2.5)]).unwrap();
        let mut v = Verdict::new("solve");
        v.check("x", true, "");
        let path = dir.finish(&v).unwrap();
        let found = find_verdicts(tmp.path()).unwrap();
        assert_eq!(found.len(), 1);
        assert!(found[0].1.pass);
        let m: RunManifest =
            serde_json::from_str(&fs::read_to_string(path.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.outputs, vec!["a.csv", "verdict.json"]);
        assert_eq!(m.pass, Some(true));
    }
}
