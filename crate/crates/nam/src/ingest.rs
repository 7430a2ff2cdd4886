//! Ratings, session and metadata parsers, and the registry builder that turns
//! them into views.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{NamError, Result};
use crate::views::{
    encode_multihot, encode_onehot, Catalog, DenseVector, DirectViewTable, ItemIdx, ViewId, ViewKind, ViewRegistry,
    Vocabulary,
};

/// A line that could not be parsed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Malformed {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub malformed: Vec<Malformed>,
    /// Well-formed records dropped by rule (e.g. empty sessions).
    pub dropped: usize,
}

impl<T> Default for Parsed<T> {
    fn default() -> Self {
        Parsed {
            records: Vec::new(),
            malformed: Vec::new(),
            dropped: 0,
        }
    }
}

impl<T> Parsed<T> {
    /// Records the problem, or fails right away in strict mode.
    fn reject(&mut self, path: &Path, line: usize, message: String, strict: bool) -> Result<()> {
        if strict {
            return Err(NamError::parse(path, line, message));
        }
        log::warn!("{}:{line}: {message}", path.display());
        self.malformed.push(Malformed { line, message });
        Ok(())
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| NamError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingsRecord {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingsFormat {
    pub delimiter: char,
    pub header: bool,
    pub min_rating: f64,
    pub max_rating: f64,
}

impl Default for RatingsFormat {
    /// MovieLens `ratings.csv`.
    fn default() -> Self {
        RatingsFormat {
            delimiter: ',',
            header: true,
            min_rating: 0.0,
            max_rating: 5.0,
        }
    }
}

fn parse_rating_line(line: &str, format: &RatingsFormat) -> std::result::Result<RatingsRecord, String> {
    let fields: Vec<&str> = line.split(format.delimiter).map(str::trim).collect();
    if !(3..=4).contains(&fields.len()) {
        return Err(format!("expected 3 or 4 fields, found {}", fields.len()));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err("empty user or item id".into());
    }
    let rating: f64 = fields[2].parse().map_err(|e| format!("bad rating {:?}: {e}", fields[2]))?;
    if !(rating >= format.min_rating && rating <= format.max_rating) {
        return Err(format!(
            "rating {rating} outside [{}, {}]",
            format.min_rating, format.max_rating
        ));
    }
    let timestamp = match fields.get(3) {
        Some(t) if !t.is_empty() => Some(t.parse().map_err(|e| format!("bad timestamp {t:?}: {e}"))?),
        _ => None,
    };
    Ok(RatingsRecord {
        user: fields[0].to_string(),
        item: fields[1].to_string(),
        rating,
        timestamp,
    })
}

/// `user, item, rating[, timestamp]` per line.
pub fn parse_ratings(path: &Path, format: &RatingsFormat, strict: bool) -> Result<Parsed<RatingsRecord>> {
    let text = read(path)?;
    let mut out = Parsed::default();
    let skip = usize::from(format.header);
    for (k, line) in text.lines().enumerate().skip(skip) {
        if line.trim().is_empty() {
            continue;
        }
        match parse_rating_line(line, format) {
            Ok(r) => out.records.push(r),
            Err(msg) => out.reject(path, k + 1, msg, strict)?,
        }
    }
    Ok(out)
}

/// Canonical text form of `records` in `format`; parsing it back yields the
/// same records.
pub fn ratings_to_string(records: &[RatingsRecord], format: &RatingsFormat) -> String {
    let d = format.delimiter;
    let mut out = String::new();
    if format.header {
        let _ = writeln!(out, "userId{d}movieId{d}rating{d}timestamp");
    }
    for r in records {
        let _ = write!(out, "{}{d}{}{d}{:?}", r.user, r.item, r.rating);
        if let Some(t) = r.timestamp {
            let _ = write!(out, "{d}{t}");
        }
        out.push('\n');
    }
    out
}

/// Per-user sets of items rated strictly above `threshold`, ordered by user
/// id. Users with no such item are left out.
pub fn filter_positive(records: &[RatingsRecord], threshold: f64) -> Vec<(String, BTreeSet<String>)> {
    let mut users: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.rating > threshold) {
        users.entry(&r.user).or_default().insert(r.item.clone());
    }
    users.into_iter().map(|(u, s)| (u.to_string(), s)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub id: String,
    /// In file order; duplicates are kept.
    pub items: Vec<String>,
}

/// `session-id<TAB>item,item,...` per line. Sessions with no items are
/// dropped and counted.
pub fn parse_sessions(path: &Path, strict: bool) -> Result<Parsed<SessionRecord>> {
    let text = read(path)?;
    let mut out = Parsed::default();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, items)) = line.split_once('\t') else {
            out.reject(path, k + 1, "expected session id, a tab, then items".into(), strict)?;
            continue;
        };
        let id = id.trim();
        if id.is_empty() {
            out.reject(path, k + 1, "empty session id".into(), strict)?;
            continue;
        }
        let items: Vec<String> = items
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if items.is_empty() {
            out.dropped += 1;
            continue;
        }
        out.records.push(SessionRecord { id: id.to_string(), items });
    }
    Ok(out)
}

/// Column name → view kind for a metadata table. Label columns hold
/// `separator`-joined label lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataSchema {
    pub columns: Vec<(String, ViewKind)>,
    pub separator: char,
}

impl FromStr for MetadataSchema {
    type Err = NamError;

    /// `genres:multihot,year:scalar`
    fn from_str(s: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for spec in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            let (name, kind) = spec
                .split_once(':')
                .ok_or_else(|| NamError::Domain(format!("schema entry {spec:?} is not name:kind")))?;
            let kind: ViewKind = kind.trim().parse()?;
            if !matches!(kind, ViewKind::Multihot | ViewKind::Onehot | ViewKind::Scalar) {
                return Err(NamError::Domain(format!(
                    "metadata column {name:?} must be multihot, onehot or scalar"
                )));
            }
            let name = name.trim().to_string();
            if columns.iter().any(|(n, _)| *n == name) {
                return Err(NamError::Domain(format!("duplicate schema column {name:?}")));
            }
            columns.push((name, kind));
        }
        if columns.is_empty() {
            return Err(NamError::Domain("empty metadata schema".into()));
        }
        Ok(MetadataSchema { columns, separator: '|' })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Labels(BTreeSet<String>),
    Scalar(f64),
}

/// Per-item attributes, one slot per schema column; `None` marks a missing
/// field.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadataTable {
    pub schema: MetadataSchema,
    pub rows: BTreeMap<String, Vec<Option<FieldValue>>>,
}

impl MetadataTable {
    pub fn field(&self, item: &str, column: &str) -> Option<&FieldValue> {
        let c = self.schema.columns.iter().position(|(n, _)| n == column)?;
        self.rows.get(item)?[c].as_ref()
    }
}

fn parse_field(raw: &str, kind: ViewKind, sep: char) -> std::result::Result<Option<FieldValue>, String> {
    let raw = raw.trim();
    match kind {
        // An empty label list is information, not a missing field.
        ViewKind::Multihot => Ok(Some(FieldValue::Labels(
            raw.split(sep).map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect(),
        ))),
        ViewKind::Onehot if raw.is_empty() => Ok(None),
        ViewKind::Onehot if raw.contains(sep) => Err(format!("one-hot field {raw:?} holds several labels")),
        ViewKind::Onehot => Ok(Some(FieldValue::Labels(BTreeSet::from([raw.to_string()])))),
        ViewKind::Scalar if raw.is_empty() => Ok(None),
        ViewKind::Scalar => {
            let x: f64 = raw.parse().map_err(|e| format!("bad number {raw:?}: {e}"))?;
            if x.is_finite() {
                Ok(Some(FieldValue::Scalar(x)))
            } else {
                Err(format!("non-finite number {raw:?}"))
            }
        }
        ViewKind::Cf | ViewKind::Dense => Err(format!("{} is not a metadata kind", kind.as_str())),
    }
}

/// Tab-separated table whose header names the item-id column first and then
/// attribute columns. Schema columns must all appear in the header; extra
/// header columns are an error in strict mode and ignored otherwise.
pub fn parse_metadata(path: &Path, schema: &MetadataSchema, strict: bool) -> Result<(MetadataTable, Vec<Malformed>)> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut table = MetadataTable {
        schema: schema.clone(),
        rows: BTreeMap::new(),
    };
    let mut log: Parsed<()> = Parsed::default();
    let Some((header_k, header)) = lines.next() else {
        return Ok((table, log.malformed));
    };
    let header: Vec<&str> = header.split('\t').map(str::trim).collect();
    let mut slot_of_column = vec![None; header.len()];
    for (c, name) in header.iter().enumerate().skip(1) {
        match schema.columns.iter().position(|(n, _)| n == name) {
            Some(s) => slot_of_column[c] = Some(s),
            None if strict => {
                return Err(NamError::parse(path, header_k + 1, format!("unknown column {name:?}")));
            }
            None => log::warn!("{}: ignoring unknown column {name:?}", path.display()),
        }
    }
    for (name, _) in &schema.columns {
        if !header[1..].contains(&name.as_str()) {
            return Err(NamError::parse(path, header_k + 1, format!("schema column {name:?} missing from header")));
        }
    }

    'rows: for (k, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() > header.len() {
            log.reject(path, k + 1, format!("{} fields, header has {}", fields.len(), header.len()), strict)?;
            continue;
        }
        let item = fields[0].trim();
        if item.is_empty() {
            log.reject(path, k + 1, "empty item id".into(), strict)?;
            continue;
        }
        if table.rows.contains_key(item) {
            log.reject(path, k + 1, format!("duplicate item id {item:?}"), strict)?;
            continue;
        }
        let mut values = vec![None; schema.columns.len()];
        for (c, slot) in slot_of_column.iter().enumerate().skip(1) {
            let Some(s) = *slot else { continue };
            let raw = fields.get(c).copied().unwrap_or("");
            match parse_field(raw, schema.columns[s].1, schema.separator) {
                Ok(v) => values[s] = v,
                Err(msg) => {
                    log.reject(path, k + 1, format!("column {:?}: {msg}", schema.columns[s].0), strict)?;
                    continue 'rows;
                }
            }
        }
        table.rows.insert(item.to_string(), values);
    }
    Ok((table, log.malformed))
}

/// Catalog over interaction items plus metadata-only items. The latter never
/// get CF data and stay cold.
pub fn build_catalog<'a>(
    interaction_items: impl IntoIterator<Item = &'a String>,
    metadata: Option<&MetadataTable>,
) -> Catalog {
    let mut ids: BTreeSet<&str> = interaction_items.into_iter().map(String::as_str).collect();
    if let Some(m) = metadata {
        ids.extend(m.rows.keys().map(String::as_str));
    }
    Catalog::new(ids)
}

/// Maps item-id histories to catalog indices.
pub fn index_histories<'a, I, H>(catalog: &Catalog, histories: I) -> Result<Vec<Vec<ItemIdx>>>
where
    I: IntoIterator<Item = H>,
    H: IntoIterator<Item = &'a String>,
{
    histories
        .into_iter()
        .map(|h| h.into_iter().map(|id| catalog.lookup(id)).collect())
        .collect()
}

/// Reserved one-hot slot for labels pruned from, or unseen in, the training
/// vocabulary.
pub const OTHER_LABEL: &str = "<other>";

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryConfig {
    /// Multihot labels seen on fewer training items are dropped.
    pub min_label_count: usize,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig { min_label_count: 2 }
    }
}

/// What was learned from the training items to encode content views.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContentEncoders {
    pub vocabularies: BTreeMap<String, Vocabulary>,
    /// `(mean, std)` per scalar column.
    pub scalar_stats: BTreeMap<String, (f64, f64)>,
}

pub struct RegistryInputs<'a> {
    pub catalog: Catalog,
    pub metadata: Option<&'a MetadataTable>,
    /// Omitted in content-only runs.
    pub cf: Option<DirectViewTable>,
    /// Precomputed dense views such as text embeddings.
    pub dense: Vec<DirectViewTable>,
    /// Items whose metadata defines vocabularies and scalar statistics; all
    /// catalog items when `None`.
    pub training_items: Option<&'a BTreeSet<ItemIdx>>,
}

fn population_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Encodes every metadata column into a view table.
pub fn build_content_views(
    catalog: &Catalog,
    metadata: &MetadataTable,
    training_items: Option<&BTreeSet<ItemIdx>>,
    config: &RegistryConfig,
) -> Result<(Vec<DirectViewTable>, ContentEncoders)> {
    let in_training = |id: &str| match (training_items, catalog.get(id)) {
        (None, _) => true,
        (Some(set), Some(idx)) => set.contains(&idx),
        (Some(_), None) => false,
    };
    let mut encoders = ContentEncoders::default();
    let mut tables = Vec::new();
    for (c, (name, kind)) in metadata.schema.columns.iter().enumerate() {
        let view = ViewId::new(name.clone(), *kind);
        let training_values = metadata
            .rows
            .iter()
            .filter(|(id, _)| in_training(id))
            .filter_map(|(_, row)| row[c].as_ref());
        let table = match kind {
            ViewKind::Multihot | ViewKind::Onehot => {
                let sets: Vec<&BTreeSet<String>> = training_values
                    .filter_map(|v| match v {
                        FieldValue::Labels(s) => Some(s),
                        FieldValue::Scalar(_) => None,
                    })
                    .collect();
                let min_count = if *kind == ViewKind::Multihot { config.min_label_count } else { 1 };
                let mut vocab = Vocabulary::from_label_sets(sets.iter().copied(), min_count);
                if *kind == ViewKind::Onehot {
                    vocab = Vocabulary::new(vocab.labels().iter().cloned().chain([OTHER_LABEL.to_string()]))?;
                }
                if vocab.is_empty() {
                    log::warn!("view {name:?} has an empty vocabulary; skipped");
                    continue;
                }
                let mut table = DirectViewTable::new(view, vocab.len());
                for (id, row) in &metadata.rows {
                    let Some(FieldValue::Labels(labels)) = &row[c] else { continue };
                    let v = if *kind == ViewKind::Multihot {
                        let kept: Vec<&String> = labels.iter().filter(|l| vocab.position(l).is_some()).collect();
                        encode_multihot(&vocab, &kept)?
                    } else {
                        let label = labels.iter().next().expect("one-hot fields hold one label");
                        let label = if vocab.position(label).is_some() { label.as_str() } else { OTHER_LABEL };
                        encode_onehot(&vocab, label)?
                    };
                    table.insert(id.clone(), v)?;
                }
                encoders.vocabularies.insert(name.clone(), vocab);
                table
            }
            ViewKind::Scalar => {
                let xs: Vec<f64> = training_values
                    .filter_map(|v| match v {
                        FieldValue::Scalar(x) => Some(*x),
                        FieldValue::Labels(_) => None,
                    })
                    .collect();
                if xs.is_empty() {
                    log::warn!("view {name:?} has no training values; skipped");
                    continue;
                }
                let (mean, mut std) = population_stats(&xs);
                if std == 0.0 {
                    log::warn!("view {name:?} is constant on the training items; using std 1");
                    std = 1.0;
                }
                let mut table = DirectViewTable::new(view, 1);
                for (id, row) in &metadata.rows {
                    if let Some(FieldValue::Scalar(x)) = row[c] {
                        table.insert(id.clone(), DenseVector::new(vec![(x - mean) / std])?)?;
                    }
                }
                encoders.scalar_stats.insert(name.clone(), (mean, std));
                table
            }
            ViewKind::Cf | ViewKind::Dense => unreachable!("rejected by the schema parser"),
        };
        tables.push(table);
    }
    Ok((tables, encoders))
}

/// CF first, then metadata views in schema order, then dense views.
pub fn build_registry(inputs: RegistryInputs<'_>, config: &RegistryConfig) -> Result<(ViewRegistry, ContentEncoders)> {
    let mut tables = Vec::new();
    tables.extend(inputs.cf);
    let mut encoders = ContentEncoders::default();
    if let Some(metadata) = inputs.metadata {
        let (content, enc) = build_content_views(&inputs.catalog, metadata, inputs.training_items, config)?;
        tables.extend(content);
        encoders = enc;
    }
    tables.extend(inputs.dense);
    if tables.is_empty() {
        return Err(NamError::Domain("no views configured".into()));
    }
    Ok((ViewRegistry::new(inputs.catalog, tables)?, encoders))
}
