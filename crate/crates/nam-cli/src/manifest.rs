//! Run manifest: a sectioned key-value file in TOML syntax.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! ratings = "ratings.csv"
//! metadata = "metadata.tsv"
//! schema = "genres:multihot,year:scalar"
//!
//! [train]
//! epochs = 20
//!
//! [eval]
//! k = [1, 5, 10, 20]
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use nam::item2vec::SgnsConfig;
use nam::training::TrainConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub ratings: Option<PathBuf>,
    pub sessions: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    /// `column:kind` pairs, e.g. `genres:multihot,year:scalar`.
    pub schema: Option<String>,
    pub dense: Vec<DenseSpec>,
    /// Ratings strictly above this count as positive.
    pub threshold: f64,
    pub delimiter: char,
    pub header: bool,
    pub folds: usize,
    pub test_fold: usize,
    pub use_cf: bool,
    pub min_label_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            ratings: None,
            sessions: None,
            metadata: None,
            schema: None,
            dense: Vec::new(),
            threshold: 3.5,
            delimiter: ',',
            header: true,
            folds: 10,
            test_fold: 0,
            use_cf: true,
            min_label_count: 2,
        }
    }
}

/// A precomputed dense view file (`item<TAB>v1…`).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseSpec {
    pub name: String,
    pub path: PathBuf,
    pub dim: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: Vec<usize>,
    pub cold_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: (1..=20).collect(),
            cold_fraction: 0.10,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub data: DataSection,
    pub item2vec: SgnsConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl Manifest {
    /// Reads `path` (or starts from defaults), applies `section.key=value`
    /// overrides, and resolves relative paths against the manifest directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut m: Manifest = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("manifest: {e}")))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        m.data.ratings.as_mut().map(resolve);
        m.data.sessions.as_mut().map(resolve);
        m.data.metadata.as_mut().map(resolve);
        m.data.dense.iter_mut().for_each(|d| resolve(&mut d.path));
        resolve(&mut m.output.dir);
        Ok(m)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.item2vec.seed = seed;
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {spec:?}")))?;
    // Bare words that are not TOML literals become strings.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::Usage(format!("empty key in {spec:?}")))?;
    let mut node = table;
    for p in parts {
        node = node
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("{p} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
