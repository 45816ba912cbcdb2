//! Canonical technology-record schema and the corpus file format.
//!
//! A corpus file is a JSON document with a `records` array. Each record
//! carries `id`, `name`, `sections`, `images` and `text_url`. Records are
//! kept sorted by id and sections in canonical order, so a parsed corpus
//! always serializes to the same bytes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

/// Section keys in canonical order. Keys not in this list sort after them,
/// alphabetically.
pub const CANONICAL_SECTIONS: [&str; 9] = [
    "summary",
    "description",
    "physical_principle",
    "data_acquisition",
    "data_processing",
    "data_interpretation",
    "advantages",
    "limitations",
    "references",
];

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("malformed corpus document at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate id {id}: records {first:?} and {second:?}")]
    DuplicateId {
        id: u64,
        first: String,
        second: String,
    },
    #[error("duplicate name {name:?}: records {first} and {second}")]
    DuplicateName { name: String, first: u64, second: u64 },
    #[error("record {id}: invalid URL in {field}: {value:?}")]
    InvalidUrl {
        id: u64,
        field: String,
        value: String,
    },
    #[error("record {id}: {message}")]
    InvalidRecord { id: u64, message: String },
}

/// Lower-cases a heading or key and joins its alphanumeric runs with `_`.
///
/// `"Physical Principle"` becomes `physical_principle`.
pub fn normalize_section_key(raw: &str) -> String {
    let lower = raw.to_lowercase();
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|part| !part.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

/// A normalized section key. Ordering follows [`CANONICAL_SECTIONS`], with
/// unknown keys last in alphabetical order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SectionKey(String);

impl SectionKey {
    pub fn new(raw: &str) -> Option<Self> {
        let key = normalize_section_key(raw);
        if key.is_empty() {
            None
        } else {
            Some(SectionKey(key))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_canonical(&self) -> bool {
        self.rank().is_some()
    }

    fn rank(&self) -> Option<usize> {
        CANONICAL_SECTIONS.iter().position(|k| *k == self.0)
    }
}

impl Ord for SectionKey {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.rank(), other.rank()) {
            (Some(a), Some(b)) => a.cmp(&b),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => self.0.cmp(&other.0),
        }
    }
}

impl PartialOrd for SectionKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for SectionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub type Sections = BTreeMap<SectionKey, String>;

/// One scraped technology page.
#[derive(Debug, Clone, PartialEq)]
pub struct TechnologyRecord {
    pub id: u64,
    pub name: String,
    pub sections: Sections,
    pub images: Vec<String>,
    pub text_url: String,
}

impl TechnologyRecord {
    /// Builds a record from raw section pairs, normalizing keys and dropping
    /// blank sections, then checks the record invariants.
    pub fn new<I, K, V>(
        id: u64,
        name: impl Into<String>,
        sections: I,
        images: Vec<String>,
        text_url: impl Into<String>,
    ) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: Into<String>,
    {
        let mut map = Sections::new();
        for (raw_key, content) in sections {
            let content = content.into();
            if content.trim().is_empty() {
                continue;
            }
            let key = SectionKey::new(raw_key.as_ref()).ok_or_else(|| CorpusError::InvalidRecord {
                id,
                message: format!("section key {:?} has no usable characters", raw_key.as_ref()),
            })?;
            if map.contains_key(&key) {
                return Err(CorpusError::InvalidRecord {
                    id,
                    message: format!("section {key} appears twice after normalization"),
                });
            }
            map.insert(key, content);
        }
        let record = TechnologyRecord {
            id,
            name: name.into(),
            sections: map,
            images,
            text_url: text_url.into(),
        };
        record.validate()?;
        Ok(record)
    }

    pub fn section(&self, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(k, _)| k.as_str() == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let id = self.id;
        if id == 0 {
            return Err(CorpusError::InvalidRecord {
                id,
                message: "id must be a positive integer".into(),
            });
        }
        if self.name.trim().is_empty() {
            return Err(CorpusError::InvalidRecord {
                id,
                message: "name is empty".into(),
            });
        }
        for (key, content) in &self.sections {
            if content.trim().is_empty() {
                return Err(CorpusError::InvalidRecord {
                    id,
                    message: format!("section {key} is blank"),
                });
            }
        }
        check_url(id, "text_url", &self.text_url)?;
        for (i, image) in self.images.iter().enumerate() {
            check_url(id, &format!("images[{i}]"), image)?;
            if self.images[..i].contains(image) {
                return Err(CorpusError::InvalidRecord {
                    id,
                    message: format!("duplicate image {image:?}"),
                });
            }
        }
        Ok(())
    }
}

fn check_url(id: u64, field: &str, value: &str) -> Result<(), CorpusError> {
    match Url::parse(value) {
        Ok(url) if url.has_host() => Ok(()),
        _ => Err(CorpusError::InvalidUrl {
            id,
            field: field.to_string(),
            value: value.to_string(),
        }),
    }
}

/// A validated set of records, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<TechnologyRecord>,
    pub source_label: String,
}

impl Corpus {
    pub fn new(
        mut records: Vec<TechnologyRecord>,
        source_label: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        for record in &records {
            record.validate()?;
        }
        let mut by_id: HashMap<u64, &str> = HashMap::new();
        let mut by_name: HashMap<String, u64> = HashMap::new();
        for record in &records {
            if let Some(first) = by_id.insert(record.id, &record.name) {
                return Err(CorpusError::DuplicateId {
                    id: record.id,
                    first: first.to_string(),
                    second: record.name.clone(),
                });
            }
            if let Some(first) = by_name.insert(record.name.to_lowercase(), record.id) {
                return Err(CorpusError::DuplicateName {
                    name: record.name.clone(),
                    first,
                    second: record.id,
                });
            }
        }
        records.sort_by_key(|r| r.id);
        Ok(Corpus {
            records,
            source_label: source_label.into(),
        })
    }

    pub fn empty(source_label: impl Into<String>) -> Self {
        Corpus {
            records: Vec::new(),
            source_label: source_label.into(),
        }
    }

    pub fn records(&self) -> &[TechnologyRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&TechnologyRecord> {
        self.records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.records[i])
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusDoc {
    records: Vec<RecordDoc>,
}

#[derive(Serialize, Deserialize)]
struct RecordDoc {
    id: u64,
    name: String,
    // serde_json's preserve_order is off, so a Vec of pairs keeps the
    // emitted key order under our control.
    #[serde(with = "ordered_sections")]
    sections: Vec<(String, String)>,
    images: Vec<String>,
    text_url: String,
}

mod ordered_sections {
    use serde::de::{MapAccess, Visitor};
    use serde::ser::SerializeMap;
    use serde::{Deserializer, Serializer};
    use std::fmt;

    pub fn serialize<S: Serializer>(pairs: &[(String, String)], s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(pairs.len()))?;
        for (k, v) in pairs {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(String, String)>, D::Error> {
        struct PairVisitor;
        impl<'de> Visitor<'de> for PairVisitor {
            type Value = Vec<(String, String)>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object of string to string")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = access.next_entry::<String, String>()? {
                    out.push((k, v));
                }
                Ok(out)
            }
        }
        d.deserialize_map(PairVisitor)
    }
}

/// Parses and validates a corpus document.
pub fn parse_corpus(document: &[u8], source_label: &str) -> Result<Corpus, CorpusError> {
    let doc: CorpusDoc = serde_json::from_slice(document).map_err(|e| CorpusError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let records = doc
        .records
        .into_iter()
        .map(|r| TechnologyRecord::new(r.id, r.name, r.sections, r.images, r.text_url))
        .collect::<Result<Vec<_>, _>>()?;
    Corpus::new(records, source_label)
}

/// Emits the canonical corpus document: records by ascending id, sections in
/// canonical order, two-space indentation and a trailing newline.
pub fn serialize_corpus(corpus: &Corpus) -> Vec<u8> {
    let doc = CorpusDoc {
        records: corpus
            .records
            .iter()
            .map(|r| RecordDoc {
                id: r.id,
                name: r.name.clone(),
                sections: r
                    .sections
                    .iter()
                    .map(|(k, v)| (k.as_str().to_string(), v.clone()))
                    .collect(),
                images: r.images.clone(),
                text_url: r.text_url.clone(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&doc).expect("corpus document serializes");
    out.push(b'\n');
    out
}
