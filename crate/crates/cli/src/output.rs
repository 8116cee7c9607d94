//! File writers and the pass/fail verdict every command emits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// One thresholded quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub passed: bool,
}

impl Check {
    pub fn within(name: &str, value: f64, min: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            value,
            min: Some(min),
            max: Some(max),
            passed: value >= min && value <= max,
        }
    }

    pub fn below(name: &str, value: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            value,
            min: None,
            max: Some(max),
            passed: value < max,
        }
    }

    pub fn above(name: &str, value: f64, min: f64) -> Self {
        Self {
            name: name.into(),
            value,
            min: Some(min),
            max: None,
            passed: value > min,
        }
    }

    /// `value` within a factor `factor` of `target` either way.
    pub fn factor(name: &str, value: f64, target: f64, factor: f64) -> Self {
        Self::within(name, value, target / factor, target * factor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub command: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Verdict {
    pub fn new(command: &str, checks: Vec<Check>) -> Self {
        Self {
            command: command.into(),
            passed: checks.iter().all(|c| c.passed),
            checks,
            error: None,
        }
    }

    pub fn failed(command: &str, error: String) -> Self {
        Self {
            command: command.into(),
            passed: false,
            checks: Vec::new(),
            error: Some(error),
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn file_name(command: &str) -> String {
        format!("{}_verdict.json", command.replace('-', "_"))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Writes `rows` as CSV with a header taken from the record fields.
pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).with_context(|| format!("writing {}", path.display()))?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).with_context(|| format!("writing {}", path.display()))?;
    writeln!(w).and_then(|_| w.flush()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Files written under one output directory.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create(&self, name: &str) -> Result<BufWriter<File>> {
        create(&self.path(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks() {
        assert!(Check::within("a", 1.0, 0.0, 1.0).passed);
        assert!(!Check::below("b", 1.0, 1.0).passed);
        assert!(Check::above("c", 0.1, 0.0).passed);
        let f = Check::factor("d", 0.33, 0.16, 2.0);
        assert!(!f.passed);
        assert_eq!(f.max, Some(0.32));
        assert!(Check::factor("e", 0.081, 0.16, 2.0).passed);
    }

    #[test]
    fn verdict_passes_only_if_all_checks_do() {
        let v = Verdict::new("x", vec![Check::below("a", 0.0, 1.0), Check::below("b", 2.0, 1.0)]);
        assert!(!v.passed);
        assert!(Verdict::new("x", vec![]).passed);
        assert_eq!(Verdict::file_name("solve-bs"), "solve_bs_verdict.json");
    }

    #[test]
    fn csv_header_comes_from_fields() {
        #[derive(Serialize)]
        struct Row {
            a: usize,
            b: f64,
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.csv");
        write_csv(&p, [Row { a: 1, b: 0.5 }, Row { a: 2, b: 1e-7 }]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n1,0.5\n2,1e-7\n");
    }

    #[test]
    fn unwritable_path_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, "").unwrap();
        let err = write_json(&file.join("x.json"), &1).unwrap_err();
        assert!(format!("{err:#}").contains(file.to_str().unwrap()));
    }
}
