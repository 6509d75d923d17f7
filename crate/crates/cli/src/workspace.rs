//! Workspace directory, stage manifest and exit-code carrying errors.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sagcn::util::{sha256_hex, write_atomic};

pub const EXIT_PRECONDITION: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// An error that maps to a specific process exit code.
#[derive(Debug)]
pub struct Fail {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Fail {}

pub fn precondition(message: impl Into<String>) -> anyhow::Error {
    Fail {
        code: EXIT_PRECONDITION,
        message: message.into(),
    }
    .into()
}

pub fn backend_failure(message: impl Into<String>) -> anyhow::Error {
    Fail {
        code: EXIT_BACKEND,
        message: message.into(),
    }
    .into()
}

pub fn divergence(message: impl Into<String>) -> anyhow::Error {
    Fail {
        code: EXIT_DIVERGENCE,
        message: message.into(),
    }
    .into()
}

/// Which stage writes each workspace artifact.
pub fn producer(file: &str) -> Option<&'static str> {
    Some(match file {
        "idmaps.json" | "records.jsonl" | "split.json" | "raw_aspects.json" => "extract",
        "aspects.json" => "consolidate",
        "annotations.jsonl" => "annotate",
        "graphs.bin" | "graphs.summary.json" => "build-graphs",
        "model.ckpt" | "model.meta.json" | "training_log.jsonl" => "train",
        _ => return None,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub params: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// `manifest.json`: per completed stage, the hashes of its parameters,
/// inputs and outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

pub struct Workspace {
    pub root: PathBuf,
    pub force: bool,
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl Workspace {
    pub fn open(root: &Path, force: bool) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating workspace {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            force,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn read_string(&self, name: &str) -> Result<String> {
        let p = self.path(name);
        fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    }

    pub fn read_bytes(&self, name: &str) -> Result<Vec<u8>> {
        let p = self.path(name);
        fs::read(&p).with_context(|| format!("reading {}", p.display()))
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        write_atomic(&p, bytes.as_ref()).with_context(|| format!("writing {}", p.display()))
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        let p = self.path("manifest.json");
        if !p.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).map_err(|e| precondition(format!("manifest.json is corrupt: {e}")))
    }

    fn save_manifest(&self, m: &Manifest) -> Result<()> {
        self.write("manifest.json", serde_json::to_string_pretty(m)? + "\n")
    }

    /// Fail unless every workspace input exists and matches the hash its
    /// producing stage recorded.
    pub fn require(&self, inputs: &[&str]) -> Result<BTreeMap<String, String>> {
        let manifest = self.load_manifest()?;
        let mut hashes = BTreeMap::new();
        for &name in inputs {
            let p = self.path(name);
            if !p.exists() {
                let hint = match producer(name) {
                    Some(stage) => format!("; run `sagcn {stage}` first"),
                    None => String::new(),
                };
                return Err(precondition(format!("missing {}{hint}", p.display())));
            }
            let h = hash_file(&p)?;
            if let Some(stage) = producer(name) {
                match manifest.stages.get(stage).and_then(|r| r.outputs.get(name)) {
                    Some(recorded) if *recorded != h => {
                        return Err(precondition(format!(
                            "{name} does not match what `{stage}` recorded in manifest.json; rerun `sagcn {stage}`"
                        )))
                    }
                    None => {
                        return Err(precondition(format!(
                            "{name} has no manifest record; rerun `sagcn {stage}`"
                        )))
                    }
                    _ => {}
                }
            }
            hashes.insert(name.to_owned(), h);
        }
        Ok(hashes)
    }

    /// Run `body` unless the stage already completed with the same params and
    /// inputs and its outputs are intact. Returns whether it ran.
    ///
    /// `inputs` are workspace file names; `external` are files outside the
    /// workspace (such as the raw corpus). `body` returns the names of the
    /// workspace files it wrote.
    pub fn stage(
        &self,
        name: &str,
        inputs: &[&str],
        external: &[&Path],
        params: &serde_json::Value,
        body: impl FnOnce() -> Result<Vec<String>>,
    ) -> Result<bool> {
        let mut input_hashes = self.require(inputs)?;
        for p in external {
            if !p.exists() {
                return Err(precondition(format!("missing input {}", p.display())));
            }
            input_hashes.insert(p.display().to_string(), hash_file(p)?);
        }
        let params_hash = sha256_hex(serde_json::to_string(params)?.as_bytes());
        let manifest = self.load_manifest()?;
        if !self.force {
            if let Some(rec) = manifest.stages.get(name) {
                let same = rec.params == params_hash
                    && rec.inputs == input_hashes
                    && rec.outputs.iter().all(|(f, h)| {
                        let p = self.path(f);
                        p.exists() && hash_file(&p).is_ok_and(|x| x == *h)
                    });
                if same {
                    log::info!("{name}: up to date, nothing to do");
                    return Ok(false);
                }
            }
        }
        let outputs = body()?;
        let mut output_hashes = BTreeMap::new();
        for f in outputs {
            output_hashes.insert(f.clone(), hash_file(&self.path(&f))?);
        }
        let mut manifest = self.load_manifest()?;
        manifest.stages.insert(
            name.to_owned(),
            StageRecord {
                params: params_hash,
                inputs: input_hashes,
                outputs: output_hashes,
            },
        );
        self.save_manifest(&manifest)?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn second_run_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path(), false).unwrap();
        let mut runs = 0;
        for _ in 0..2 {
            ws.stage("consolidate", &[], &[], &json!({"n": 8}), || {
                runs += 1;
                ws.write("aspects.json", "{}")?;
                Ok(vec!["aspects.json".into()])
            })
            .unwrap();
        }
        assert_eq!(runs, 1);
        ws.stage("consolidate", &[], &[], &json!({"n": 4}), || {
            runs += 1;
            Ok(vec!["aspects.json".into()])
        })
        .unwrap();
        assert_eq!(runs, 2);
    }

    #[test]
    fn missing_input_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path(), false).unwrap();
        let err = ws.require(&["graphs.bin"]).unwrap_err();
        let fail = err.downcast_ref::<Fail>().unwrap();
        assert_eq!(fail.code, EXIT_PRECONDITION);
        assert!(fail.message.contains("sagcn build-graphs"));
    }

    #[test]
    fn tampered_input_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path(), false).unwrap();
        ws.stage("build-graphs", &[], &[], &json!({}), || {
            ws.write("graphs.bin", "abc")?;
            Ok(vec!["graphs.bin".into()])
        })
        .unwrap();
        assert!(ws.require(&["graphs.bin"]).is_ok());
        ws.write("graphs.bin", "abd").unwrap();
        let err = ws.require(&["graphs.bin"]).unwrap_err();
        assert!(err.to_string().contains("rerun `sagcn build-graphs`"));
    }
}
