//! Knowledge base of correction cases with exact top-k cosine retrieval.
//!
//! Store file: a JSON header line `{"version":"ecpt-kb/1","dimension":D,
//! "model_hash":H}` followed by one JSON record per entry (the correction
//! case fields plus `id` and `vector`). Vectors are unit-norm, so the dot
//! product is the cosine similarity.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::case::{serialize_case, Case, CorrectionCase, ErrorId};
use crate::casefile::{check_version, CorrectionRecord, KB_VERSION};
use crate::embedding::{embed, BaseEmbedder, EmbeddingVector, ProjectionModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    pub id: u64,
    pub vector: EmbeddingVector,
    pub correction_case: CorrectionCase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbStore {
    dimension: usize,
    model_hash: String,
    entries: Vec<KbEntry>,
    next_id: u64,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    version: String,
    dimension: usize,
    model_hash: String,
}

#[derive(Serialize, Deserialize)]
struct StoreRecord {
    id: u64,
    #[serde(flatten)]
    case: CorrectionRecord,
    vector: Vec<f64>,
}

impl KbStore {
    pub fn new(dimension: usize, model_hash: impl Into<String>) -> Self {
        Self {
            dimension,
            model_hash: model_hash.into(),
            entries: Vec::new(),
            next_id: 0,
        }
    }

    /// An empty store bound to `model`'s embedding space.
    pub fn for_model(model: &ProjectionModel) -> Self {
        Self::new(model.dim(), model.identity_hash())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn get(&self, id: u64) -> Option<&KbEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn check_model(&self, model: &ProjectionModel) -> Result<()> {
        let found = model.identity_hash();
        if found != self.model_hash {
            return Err(Error::ModelMismatch {
                expected: self.model_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got,
            });
        }
        Ok(())
    }

    /// Appends an entry with a precomputed vector.
    pub fn insert_vector(&mut self, correction_case: CorrectionCase, vector: EmbeddingVector) -> Result<u64> {
        self.check_dim(vector.dim())?;
        let id = self.next_id;
        self.next_id += 1;
        self.entries.push(KbEntry {
            id,
            vector,
            correction_case,
        });
        Ok(id)
    }

    /// Embeds the case text (with its result) through `model` and appends it.
    pub fn insert(
        &mut self,
        correction_case: CorrectionCase,
        embedder: &dyn BaseEmbedder,
        model: &ProjectionModel,
    ) -> Result<u64> {
        self.check_model(model)?;
        let vector = embed(embedder, &serialize_case(&correction_case.case, true), model)?;
        self.insert_vector(correction_case, vector)
    }

    /// Top-`k` entries by cosine similarity, descending, ties by ascending
    /// id. With a filter, only entries sharing at least one error type with
    /// it are candidates.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: Option<&HashSet<ErrorId>>,
    ) -> Result<Vec<(&KbEntry, f64)>> {
        if k == 0 {
            return Err(Error::invalid("search", "k must be at least 1"));
        }
        self.check_dim(query.dim())?;
        let mut scored: Vec<(&KbEntry, f64)> = self
            .entries
            .iter()
            .filter(|e| filter.is_none_or(|f| e.correction_case.error_types.iter().any(|t| f.contains(t))))
            .map(|e| (e, e.vector.dot(query)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Embeds `case` through `model` and searches; the model must match the
    /// one the store was built with.
    pub fn search_case(
        &self,
        embedder: &dyn BaseEmbedder,
        model: &ProjectionModel,
        case: &Case,
        k: usize,
        filter: Option<&HashSet<ErrorId>>,
    ) -> Result<Vec<(&KbEntry, f64)>> {
        self.check_model(model)?;
        let query = embed(embedder, &serialize_case(case, true), model)?;
        self.search(&query, k, filter)
    }

    pub fn to_text(&self) -> String {
        let header = StoreHeader {
            version: KB_VERSION.into(),
            dimension: self.dimension,
            model_hash: self.model_hash.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            let rec = StoreRecord {
                id: e.id,
                case: CorrectionRecord::from_case(&e.correction_case, true),
                vector: e.vector.as_slice().to_vec(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header = check_version(lines.next().map(|(_, l)| l), KB_VERSION)?;
        let header: StoreHeader = serde_json::from_value(header).map_err(|e| Error::CorruptedRecord {
            line: 1,
            reason: e.to_string(),
        })?;
        let mut store = KbStore::new(header.dimension, header.model_hash);
        let mut seen = HashSet::new();
        let no_catalog = HashMap::new();
        for (n, line) in lines {
            let corrupt = |reason: String| Error::CorruptedRecord { line: n + 1, reason };
            let rec: StoreRecord = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            if !seen.insert(rec.id) {
                return Err(corrupt(format!("duplicate id {}", rec.id)));
            }
            if rec.vector.len() != store.dimension {
                return Err(corrupt(format!(
                    "vector has dimension {}, store has {}",
                    rec.vector.len(),
                    store.dimension
                )));
            }
            let vector = EmbeddingVector::from_unit(rec.vector).map_err(|e| corrupt(e.to_string()))?;
            let cc = rec.case.into_case(&no_catalog).map_err(|e| corrupt(e.to_string()))?;
            store.next_id = store.next_id.max(rec.id + 1);
            store.entries.push(KbEntry {
                id: rec.id,
                vector,
                correction_case: cc,
            });
        }
        Ok(store)
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
