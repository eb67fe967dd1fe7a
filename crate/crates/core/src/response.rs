//! Raw annotation ingestion, attention-check filtering, and dichotomization
//! into a respondents x items response matrix.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw categorical annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub respondent_id: String,
    pub item_id: String,
    pub label: String,
    pub is_attention_check: bool,
}

/// Gold labels per item, plus the label vocabulary they define.
#[derive(Debug, Clone, Default)]
pub struct GoldKey {
    map: BTreeMap<String, String>,
    vocabulary: BTreeSet<String>,
}

impl GoldKey {
    pub fn new(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        let map: BTreeMap<String, String> = entries.into_iter().collect();
        let vocabulary = map.values().cloned().collect();
        Self { map, vocabulary }
    }

    /// Reads `item_id,gold_label` CSV.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut entries = Vec::new();
        for (idx, row) in reader.records().enumerate() {
            let row = row?;
            let line = idx + 2;
            if row.len() < 2 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line,
                    message: "expected columns item_id,gold_label".into(),
                });
            }
            entries.push((row[0].to_string(), row[1].to_string()));
        }
        Ok(Self::new(entries))
    }

    pub fn gold(&self, item_id: &str) -> Option<&str> {
        self.map.get(item_id).map(String::as_str)
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.map.contains_key(item_id)
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.vocabulary.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn parse_annotations<R: Read>(
    source: R,
    path_label: &str,
    vocabulary: &[String],
) -> Result<Vec<AnnotationRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let mut records = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (idx, row) in reader.records().enumerate() {
        let row = row?;
        let line = idx + 2; // 1-based, after the header
        if row.len() < 4 {
            return Err(Error::Parse {
                path: path_label.to_string(),
                line,
                message: "expected columns respondent_id,item_id,label,is_attention_check".into(),
            });
        }
        let respondent_id = row[0].to_string();
        let item_id = row[1].to_string();
        let label = row[2].to_string();
        let is_attention_check = match row[3].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    path: path_label.to_string(),
                    line,
                    message: format!("is_attention_check must be 0 or 1, got {other:?}"),
                })
            }
        };
        if !vocabulary.is_empty() && !vocabulary.iter().any(|v| v == &label) {
            return Err(Error::UnknownLabel {
                label,
                line,
                vocabulary: vocabulary.to_vec(),
            });
        }
        if !seen.insert((respondent_id.clone(), item_id.clone())) {
            return Err(Error::DuplicateKey {
                respondent: respondent_id,
                item: item_id,
                line,
            });
        }
        records.push(AnnotationRecord {
            respondent_id,
            item_id,
            label,
            is_attention_check,
        });
    }
    Ok(records)
}

/// Loads an annotation CSV (`respondent_id,item_id,label,is_attention_check`).
/// Labels are validated against `vocabulary` when it is non-empty, and
/// duplicate (respondent, item) rows are rejected.
pub fn load_annotations(path: &Path, vocabulary: &[String]) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path)?;
    parse_annotations(file, &path.display().to_string(), vocabulary)
}

/// Same as [`load_annotations`], reading from an in-memory string.
pub fn load_annotations_from_str(csv: &str, vocabulary: &[String]) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(csv.as_bytes(), "<string>", vocabulary)
}

/// Removes every record of any respondent who answered at least one
/// attention-check item incorrectly, then strips the attention-check items
/// from the surviving table. Returns the filtered table and the ids of the
/// removed respondents (sorted).
pub fn filter_attention_checks(
    records: &[AnnotationRecord],
    key: &GoldKey,
) -> Result<(Vec<AnnotationRecord>, Vec<String>)> {
    let mut failed: BTreeSet<String> = BTreeSet::new();
    for rec in records {
        if rec.is_attention_check {
            let gold = key.gold(&rec.item_id).ok_or_else(|| Error::MissingKeyEntry {
                item: rec.item_id.clone(),
            })?;
            if rec.label != gold {
                failed.insert(rec.respondent_id.clone());
            }
        }
    }
    let filtered = records
        .iter()
        .filter(|r| !r.is_attention_check && !failed.contains(&r.respondent_id))
        .cloned()
        .collect();
    Ok((filtered, failed.into_iter().collect()))
}

/// Respondents x items grid of graded outcomes. `Some(true)` is correct,
/// `Some(false)` incorrect, `None` missing.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    respondents: Vec<String>,
    items: Vec<String>,
    /// Row-major, respondents x items.
    cells: Vec<Option<bool>>,
}

impl ResponseMatrix {
    pub fn new(respondents: Vec<String>, items: Vec<String>, cells: Vec<Option<bool>>) -> Self {
        assert_eq!(cells.len(), respondents.len() * items.len());
        Self {
            respondents,
            items,
            cells,
        }
    }

    pub fn n_respondents(&self) -> usize {
        self.respondents.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn respondents(&self) -> &[String] {
        &self.respondents
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i == id)
    }

    #[inline]
    pub fn get(&self, respondent: usize, item: usize) -> Option<bool> {
        self.cells[respondent * self.items.len() + item]
    }

    pub fn set(&mut self, respondent: usize, item: usize, value: Option<bool>) {
        self.cells[respondent * self.items.len() + item] = value;
    }

    /// Row slice for one respondent.
    pub fn row(&self, respondent: usize) -> &[Option<bool>] {
        let j = self.items.len();
        &self.cells[respondent * j..(respondent + 1) * j]
    }

    /// Observed (non-missing) count for an item.
    pub fn n_observed(&self, item: usize) -> usize {
        (0..self.n_respondents())
            .filter(|&r| self.get(r, item).is_some())
            .count()
    }

    /// Proportion correct among observed responses; `None` when unobserved.
    pub fn prop_correct(&self, item: usize) -> Option<f64> {
        let mut n = 0usize;
        let mut correct = 0usize;
        for r in 0..self.n_respondents() {
            if let Some(x) = self.get(r, item) {
                n += 1;
                correct += usize::from(x);
            }
        }
        (n > 0).then(|| correct as f64 / n as f64)
    }

    /// New matrix keeping only the listed item columns, in the given order.
    pub fn select_items(&self, keep: &[usize]) -> ResponseMatrix {
        let items = keep.iter().map(|&i| self.items[i].clone()).collect();
        let mut cells = Vec::with_capacity(self.respondents.len() * keep.len());
        for r in 0..self.n_respondents() {
            for &i in keep {
                cells.push(self.get(r, i));
            }
        }
        ResponseMatrix::new(self.respondents.clone(), items, cells)
    }

    /// New matrix without the listed item ids.
    pub fn drop_items_by_id(&self, drop: &BTreeSet<String>) -> ResponseMatrix {
        let keep: Vec<usize> = (0..self.n_items())
            .filter(|&i| !drop.contains(&self.items[i]))
            .collect();
        self.select_items(&keep)
    }

    /// Writes the matrix CSV: first column `respondent_id`, one column per
    /// item, cells in {0, 1, empty}.
    pub fn to_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["respondent_id".to_string()];
        header.extend(self.items.iter().cloned());
        w.write_record(&header)?;
        for r in 0..self.n_respondents() {
            let mut row = vec![self.respondents[r].clone()];
            for i in 0..self.n_items() {
                row.push(match self.get(r, i) {
                    Some(true) => "1".into(),
                    Some(false) => "0".into(),
                    None => String::new(),
                });
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_path(&self, path: &Path) -> Result<()> {
        self.to_csv(std::fs::File::create(path)?)
    }

    pub fn from_csv<R: Read>(source: R, path_label: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(source);
        let mut rows = reader.records();
        let header = rows.next().transpose()?.ok_or_else(|| Error::Parse {
            path: path_label.to_string(),
            line: 1,
            message: "missing header".into(),
        })?;
        if header.len() < 2 || &header[0] != "respondent_id" {
            return Err(Error::Parse {
                path: path_label.to_string(),
                line: 1,
                message: "header must start with respondent_id followed by item ids".into(),
            });
        }
        let items: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut respondents = Vec::new();
        let mut cells = Vec::new();
        for (idx, row) in rows.enumerate() {
            let row = row?;
            let line = idx + 2;
            if row.len() != items.len() + 1 {
                return Err(Error::Parse {
                    path: path_label.to_string(),
                    line,
                    message: format!("expected {} columns, got {}", items.len() + 1, row.len()),
                });
            }
            respondents.push(row[0].to_string());
            for cell in row.iter().skip(1) {
                cells.push(match cell.trim() {
                    "" => None,
                    "1" => Some(true),
                    "0" => Some(false),
                    other => {
                        return Err(Error::Parse {
                            path: path_label.to_string(),
                            line,
                            message: format!("cell must be 0, 1, or empty, got {other:?}"),
                        })
                    }
                });
            }
        }
        Ok(Self::new(respondents, items, cells))
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?, &path.display().to_string())
    }
}

/// Grades a table against the gold key: 1 iff the label equals the gold
/// label, 0 otherwise; (respondent, item) pairs with no record are missing.
/// Respondent and item order follow first appearance in the table.
pub fn dichotomize(records: &[AnnotationRecord], key: &GoldKey) -> Result<ResponseMatrix> {
    let mut respondents: Vec<String> = Vec::new();
    let mut items: Vec<String> = Vec::new();
    let mut r_index: HashMap<&str, usize> = HashMap::new();
    let mut i_index: HashMap<&str, usize> = HashMap::new();
    for rec in records {
        if !key.contains(&rec.item_id) {
            return Err(Error::MissingKeyEntry {
                item: rec.item_id.clone(),
            });
        }
        if !r_index.contains_key(rec.respondent_id.as_str()) {
            r_index.insert(&rec.respondent_id, respondents.len());
            respondents.push(rec.respondent_id.clone());
        }
        if !i_index.contains_key(rec.item_id.as_str()) {
            i_index.insert(&rec.item_id, items.len());
            items.push(rec.item_id.clone());
        }
    }
    let mut cells = vec![None; respondents.len() * items.len()];
    for rec in records {
        let r = r_index[rec.respondent_id.as_str()];
        let i = i_index[rec.item_id.as_str()];
        let gold = key.gold(&rec.item_id).expect("checked above");
        cells[r * items.len() + i] = Some(rec.label == gold);
    }
    Ok(ResponseMatrix::new(respondents, items, cells))
}
