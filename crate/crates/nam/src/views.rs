//! Direct views: per-item attribute vectors, one table per view.
//!
//! A view either has a row for an item or it does not. Absence is what drives
//! attention masking downstream, so nothing here ever fills in a missing row.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NamError, Result};

/// Dense index of an item inside a [`Catalog`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemIdx(pub u32);

impl ItemIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ItemIdx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// The item universe. Items are ordered by id (numerically when the ids are
/// integers), so ascending [`ItemIdx`] is ascending item id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Catalog {
    ids: Vec<String>,
    index: HashMap<String, ItemIdx>,
}

impl Catalog {
    pub fn new<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        ids.sort_by(|a, b| natural_cmp(a, b));
        ids.dedup();
        let index = ids
            .iter()
            .enumerate()
            .map(|(k, id)| (id.clone(), ItemIdx(k as u32)))
            .collect();
        Catalog { ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<ItemIdx> {
        self.index.get(id).copied()
    }

    pub fn lookup(&self, id: &str) -> Result<ItemIdx> {
        self.get(id)
            .ok_or_else(|| NamError::Lookup(format!("item {id:?} is not in the catalog")))
    }

    pub fn id(&self, idx: ItemIdx) -> &str {
        &self.ids[idx.index()]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn items(&self) -> impl Iterator<Item = ItemIdx> + '_ {
        (0..self.ids.len() as u32).map(ItemIdx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Cf,
    Multihot,
    Onehot,
    Scalar,
    Dense,
}

impl ViewKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::Cf => "cf",
            ViewKind::Multihot => "multihot",
            ViewKind::Onehot => "onehot",
            ViewKind::Scalar => "scalar",
            ViewKind::Dense => "dense",
        }
    }
}

impl std::str::FromStr for ViewKind {
    type Err = NamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cf" => Ok(ViewKind::Cf),
            "multihot" => Ok(ViewKind::Multihot),
            "onehot" => Ok(ViewKind::Onehot),
            "scalar" => Ok(ViewKind::Scalar),
            "dense" => Ok(ViewKind::Dense),
            other => Err(NamError::Domain(format!("unknown view kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViewId {
    pub name: String,
    pub kind: ViewKind,
}

impl ViewId {
    pub fn new(name: impl Into<String>, kind: ViewKind) -> Self {
        ViewId {
            name: name.into(),
            kind,
        }
    }
}

/// A non-empty vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(NamError::Domain("vectors must be non-empty".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(NamError::Domain(format!("non-finite vector entry {bad}")));
        }
        Ok(DenseVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Ordered label list; position in the list is the vector coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(labels.len());
        for (k, label) in labels.iter().enumerate() {
            if index.insert(label.clone(), k).is_some() {
                return Err(NamError::Domain(format!("duplicate vocabulary label {label:?}")));
            }
        }
        Ok(Vocabulary { labels, index })
    }

    /// Keeps labels seen in at least `min_count` label sets, sorted.
    pub fn from_label_sets<'a, I>(sets: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a BTreeSet<String>>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for set in sets {
            for label in set {
                *counts.entry(label.as_str()).or_default() += 1;
            }
        }
        let labels = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .map(|(l, _)| l.to_string());
        Vocabulary::new(labels).expect("BTreeMap keys are unique")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NamError::io(path, e))?;
        Vocabulary::new(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for label in &self.labels {
            out.push_str(label);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| NamError::io(path, e))
    }
}

/// 0/1 vector with a one at each label's position.
pub fn encode_multihot<S: AsRef<str>>(vocabulary: &Vocabulary, labels: &[S]) -> Result<DenseVector> {
    let mut v = vec![0.0; vocabulary.len()];
    for label in labels {
        let label = label.as_ref();
        let pos = vocabulary
            .position(label)
            .ok_or_else(|| NamError::UnknownLabel(label.to_string()))?;
        v[pos] = 1.0;
    }
    DenseVector::new(v)
}

pub fn encode_onehot(vocabulary: &Vocabulary, label: &str) -> Result<DenseVector> {
    encode_multihot(vocabulary, &[label])
}

/// Standardized scalar, `[(year − mean) / std]`.
pub fn encode_year(year: i64, mean: f64, std: f64) -> Result<DenseVector> {
    if !(std > 0.0) {
        return Err(NamError::Domain(format!("year std must be positive, got {std}")));
    }
    DenseVector::new(vec![(year as f64 - mean) / std])
}

/// One view's rows keyed by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectViewTable {
    pub view: ViewId,
    pub dim: usize,
    rows: BTreeMap<String, DenseVector>,
}

impl DirectViewTable {
    pub fn new(view: ViewId, dim: usize) -> Self {
        DirectViewTable {
            view,
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, item: impl Into<String>, vector: DenseVector) -> Result<()> {
        if vector.len() != self.dim {
            return Err(NamError::Shape {
                op: "view row",
                expected: self.dim,
                got: vector.len(),
            });
        }
        let item = item.into();
        if self.rows.contains_key(&item) {
            return Err(NamError::Domain(format!(
                "duplicate row for item {item:?} in view {}",
                self.view.name
            )));
        }
        self.rows.insert(item, vector);
        Ok(())
    }

    pub fn get(&self, item: &str) -> Option<&DenseVector> {
        self.rows.get(item)
    }

    pub fn is_present(&self, item: &str) -> bool {
        self.rows.contains_key(item)
    }

    pub fn present_count(&self) -> usize {
        self.rows.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseVector)> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Writes the tab-separated dense-view format, optionally preceded by a
    /// `#` header line.
    pub fn save(&self, path: &Path, header: Option<&str>) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| NamError::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            if let Some(h) = header {
                writeln!(out, "# {h}")?;
            }
            for (item, v) in &self.rows {
                write!(out, "{item}")?;
                for x in v.as_slice() {
                    write!(out, "\t{x:?}")?;
                }
                writeln!(out)?;
            }
            out.flush()
        };
        write().map_err(|e| NamError::io(path, e))
    }
}

/// Reads a dense-view file: one `item<TAB>v1<TAB>…<TAB>v_dim` record per
/// line. Blank lines and lines starting with `#` are skipped.
pub fn load_dense_view(path: &Path, view: ViewId, expected_dim: usize) -> Result<DirectViewTable> {
    let text = fs::read_to_string(path).map_err(|e| NamError::io(path, e))?;
    let mut table = DirectViewTable::new(view, expected_dim);
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let item = fields.next().unwrap_or_default().trim();
        if item.is_empty() {
            return Err(NamError::parse(path, lineno, "missing item id"));
        }
        let values = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| NamError::parse(path, lineno, format!("bad value: {e}")))?;
        if values.len() != expected_dim {
            return Err(NamError::parse(
                path,
                lineno,
                format!("expected {expected_dim} values, found {}", values.len()),
            ));
        }
        let vector = DenseVector::new(values).map_err(|e| NamError::parse(path, lineno, e.to_string()))?;
        if table.is_present(item) {
            return Err(NamError::parse(path, lineno, format!("duplicate item id {item:?}")));
        }
        table.insert(item, vector)?;
    }
    Ok(table)
}

/// The ordered set of views bound to a catalog.
///
/// View order is the attention axis order and must match the model's.
#[derive(Debug, Clone)]
pub struct ViewRegistry {
    catalog: Catalog,
    views: Vec<ViewId>,
    dims: Vec<usize>,
    rows: Vec<Vec<Option<DenseVector>>>,
}

impl ViewRegistry {
    /// Binds tables to the catalog. Rows for items outside the catalog are an
    /// error.
    pub fn new(catalog: Catalog, tables: Vec<DirectViewTable>) -> Result<Self> {
        if tables.is_empty() {
            return Err(NamError::Domain("a registry needs at least one view".into()));
        }
        let mut seen = BTreeSet::new();
        let mut views = Vec::with_capacity(tables.len());
        let mut dims = Vec::with_capacity(tables.len());
        let mut rows = Vec::with_capacity(tables.len());
        for table in tables {
            if !seen.insert(table.view.name.clone()) {
                return Err(NamError::Domain(format!("view {:?} registered twice", table.view.name)));
            }
            let mut dense = vec![None; catalog.len()];
            for (item, v) in table.rows {
                let idx = catalog.get(&item).ok_or_else(|| {
                    NamError::Lookup(format!(
                        "view {} has a row for {item:?}, which is not in the catalog",
                        table.view.name
                    ))
                })?;
                dense[idx.index()] = Some(v);
            }
            views.push(table.view);
            dims.push(table.dim);
            rows.push(dense);
        }
        Ok(ViewRegistry {
            catalog,
            views,
            dims,
            rows,
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn views(&self) -> &[ViewId] {
        &self.views
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn dim(&self, view: usize) -> usize {
        self.dims[view]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.views.iter().position(|v| v.name == name)
    }

    /// Row of `item` in the view at position `view`, if present.
    pub fn vector(&self, view: usize, item: ItemIdx) -> Option<&DenseVector> {
        self.rows[view][item.index()].as_ref()
    }

    pub fn is_present(&self, view: usize, item: ItemIdx) -> bool {
        self.rows[view][item.index()].is_some()
    }

    /// Looks a row up by view name. Unknown views are an error; a missing
    /// row is `Ok(None)`.
    pub fn get_view_vector(&self, item: ItemIdx, view: &str) -> Result<Option<&DenseVector>> {
        let pos = self
            .position(view)
            .ok_or_else(|| NamError::Lookup(format!("view {view:?} is not registered")))?;
        Ok(self.vector(pos, item))
    }

    /// Copy of the registry with one view dropped.
    pub fn without_view(&self, name: &str) -> Result<Self> {
        let pos = self
            .position(name)
            .ok_or_else(|| NamError::Lookup(format!("view {name:?} is not registered")))?;
        if self.views.len() == 1 {
            return Err(NamError::Domain("cannot remove the only view".into()));
        }
        let mut out = self.clone();
        out.views.remove(pos);
        out.dims.remove(pos);
        out.rows.remove(pos);
        Ok(out)
    }

    /// Rebuilds the table for one view.
    pub fn table(&self, view: usize) -> DirectViewTable {
        let mut t = DirectViewTable::new(self.views[view].clone(), self.dims[view]);
        for item in self.catalog.items() {
            if let Some(v) = self.vector(view, item) {
                t.rows.insert(self.catalog.id(item).to_string(), v.clone());
            }
        }
        t
    }
}
