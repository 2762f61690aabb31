//! Spider-format dataset loading: schema catalog, question files, subset
//! selection and exclusion lists.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::case::{Column, ColumnRef, SchemaDescription, Table};
use crate::error::{Error, Result};
use crate::sqlrun::{spider_db_path, SqlRunner};

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash of the question after trimming, collapsing whitespace and lowercasing.
pub fn question_hash(question: &str) -> u64 {
    let normalized = question
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    fnv1a64(normalized.as_bytes())
}

/// Stable identity of a dataset item, independent of file order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemKey {
    pub db_id: String,
    pub question_hash: u64,
}

impl fmt::Display for ItemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:016x}", self.db_id, self.question_hash)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    /// Position in the source question file.
    pub index: usize,
    pub db_id: String,
    pub question: String,
    pub ground_truth_sql: String,
    /// Set when the ground truth failed to execute during validation.
    #[serde(default)]
    pub truth_error: Option<String>,
}

impl DatasetItem {
    pub fn key(&self) -> ItemKey {
        ItemKey {
            db_id: self.db_id.clone(),
            question_hash: question_hash(&self.question),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExclusionList {
    pub entries: BTreeSet<ItemKey>,
}

impl ExclusionList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &ItemKey) -> bool {
        self.entries.contains(key)
    }

    /// Parses `db_id<TAB>hash` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::CorruptedRecord {
                line: n + 1,
                reason: format!("expected `db_id<TAB>hash`, got `{line}`"),
            };
            let (db_id, hash) = line.split_once('\t').ok_or_else(bad)?;
            let question_hash = u64::from_str_radix(hash.trim(), 16).map_err(|_| bad())?;
            entries.insert(ItemKey {
                db_id: db_id.to_string(),
                question_hash,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|k| format!("{k}\n")).collect()
    }

    /// Entries matching none of `items`.
    pub fn unmatched<'a>(&'a self, items: &[DatasetItem]) -> Vec<&'a ItemKey> {
        let keys: HashSet<ItemKey> = items.iter().map(DatasetItem::key).collect();
        self.entries.iter().filter(|k| !keys.contains(k)).collect()
    }
}

#[derive(Deserialize)]
struct RawSchema {
    db_id: String,
    table_names_original: Vec<String>,
    column_names_original: Vec<(i64, String)>,
    column_types: Vec<String>,
    #[serde(default)]
    primary_keys: Vec<KeyIndex>,
    #[serde(default)]
    foreign_keys: Vec<(usize, usize)>,
}

/// Spider lists composite primary keys as nested arrays.
#[derive(Deserialize)]
#[serde(untagged)]
enum KeyIndex {
    One(usize),
    Many(Vec<usize>),
}

fn convert_schema(raw: RawSchema) -> Result<SchemaDescription> {
    let count = raw.column_names_original.len();
    let mut tables: Vec<Table> = raw
        .table_names_original
        .iter()
        .map(|n| Table {
            name: n.clone(),
            columns: Vec::new(),
        })
        .collect();
    let mut refs: Vec<Option<ColumnRef>> = Vec::with_capacity(count);
    for (i, (table_idx, name)) in raw.column_names_original.iter().enumerate() {
        if *table_idx < 0 {
            refs.push(None);
            continue;
        }
        let table = tables.get_mut(*table_idx as usize).ok_or_else(|| Error::invalid(
            "schema catalog",
            format!("database `{}`: table index {table_idx} out of range", raw.db_id),
        ))?;
        let ty = raw.column_types.get(i).map_or("", |s| s.as_str()).trim().to_string();
        table.columns.push(Column {
            name: name.clone(),
            ty,
        });
        refs.push(Some(ColumnRef::new(table.name.clone(), name.clone())));
    }
    let resolve = |index: usize| -> Result<ColumnRef> {
        refs.get(index)
            .ok_or(Error::DanglingColumnIndex {
                db_id: raw.db_id.clone(),
                index,
                count,
            })?
            .clone()
            .ok_or_else(|| Error::invalid("schema catalog", format!("key refers to `*` in `{}`", raw.db_id)))
    };
    let mut primary_keys = Vec::new();
    for pk in &raw.primary_keys {
        match pk {
            KeyIndex::One(i) => primary_keys.push(resolve(*i)?),
            KeyIndex::Many(is) => {
                for i in is {
                    primary_keys.push(resolve(*i)?);
                }
            }
        }
    }
    let foreign_keys = raw
        .foreign_keys
        .iter()
        .map(|&(a, b)| Ok((resolve(a)?, resolve(b)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SchemaDescription {
        db_id: raw.db_id,
        tables,
        primary_keys,
        foreign_keys,
    })
}

pub fn parse_schemas(json: &str) -> Result<Vec<SchemaDescription>> {
    let raw: Vec<RawSchema> = serde_json::from_str(json).map_err(|e| Error::json("schema catalog", e))?;
    raw.into_iter().map(convert_schema).collect()
}

/// Reads a Spider `tables.json` catalog.
pub fn load_schemas(path: &Path) -> Result<Vec<SchemaDescription>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_schemas(&text)
}

#[derive(Deserialize)]
struct RawItem {
    db_id: String,
    question: String,
    query: String,
}

pub fn parse_items(
    json: &str,
    known_db_ids: &HashSet<&str>,
    exclusions: &ExclusionList,
    subset: Option<&[String]>,
) -> Result<Vec<DatasetItem>> {
    let raw: Vec<RawItem> = serde_json::from_str(json).map_err(|e| Error::json("question file", e))?;
    let mut items = Vec::new();
    for (index, r) in raw.into_iter().enumerate() {
        if !known_db_ids.contains(r.db_id.as_str()) {
            return Err(Error::UnknownDb(r.db_id));
        }
        if subset.is_some_and(|s| !s.contains(&r.db_id)) {
            continue;
        }
        let item = DatasetItem {
            index,
            db_id: r.db_id,
            question: r.question,
            ground_truth_sql: r.query,
            truth_error: None,
        };
        if exclusions.contains(&item.key()) {
            continue;
        }
        items.push(item);
    }
    Ok(items)
}

/// Reads a Spider question file, keeping input order.
pub fn load_items(
    path: &Path,
    schemas: &[SchemaDescription],
    exclusions: &ExclusionList,
    subset: Option<&[String]>,
) -> Result<Vec<DatasetItem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let known: HashSet<&str> = schemas.iter().map(|s| s.db_id.as_str()).collect();
    parse_items(&text, &known, exclusions, subset)
}

/// Executes every ground truth, recording failures on the item. Returns the
/// number of flagged items.
pub fn validate_ground_truth(items: &mut [DatasetItem], runner: &SqlRunner) -> usize {
    let mut flagged = 0;
    for item in items.iter_mut() {
        item.truth_error = runner
            .execute(&item.db_id, &item.ground_truth_sql)
            .err()
            .map(|e| e.to_string());
        flagged += usize::from(item.truth_error.is_some());
    }
    flagged
}

/// A loaded Spider-layout dataset rooted at `root`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub schemas: Vec<SchemaDescription>,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    /// Loads `<root>/tables.json` and the given question file.
    pub fn load(
        root: &Path,
        questions: &Path,
        exclusions: &ExclusionList,
        subset: Option<&[String]>,
    ) -> Result<Self> {
        let schemas = load_schemas(&root.join("tables.json"))?;
        let items = load_items(questions, &schemas, exclusions, subset)?;
        Ok(Self {
            root: root.to_path_buf(),
            schemas,
            items,
        })
    }

    pub fn schema(&self, db_id: &str) -> Option<&SchemaDescription> {
        self.schemas.iter().find(|s| s.db_id == db_id)
    }

    /// Database ids with a schema but no SQLite file on disk.
    pub fn missing_databases(&self) -> Vec<&str> {
        self.schemas
            .iter()
            .map(|s| s.db_id.as_str())
            .filter(|id| !spider_db_path(&self.root, id).exists())
            .collect()
    }

    pub fn runner(&self, config: crate::sqlrun::RunnerConfig) -> SqlRunner {
        let mut runner = SqlRunner::new(config);
        runner.register_spider(&self.root, self.schemas.iter().map(|s| s.db_id.as_str()));
        runner
    }
}
