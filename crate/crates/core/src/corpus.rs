//! Annotation records, dataset validation, line-delimited I/O, stratified
//! item-level splitting and the majority-vote filter.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::featurize;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Ordinal3,
    Preference,
}

impl Task {
    /// Number of label classes.
    pub fn num_classes(self) -> usize {
        match self {
            Task::Ordinal3 => 3,
            Task::Binary | Task::Preference => 2,
        }
    }

    /// Number of binary sub-tasks the label decomposes into (CORAL thresholds for ordinal).
    pub fn num_subtasks(self) -> usize {
        self.num_classes() - 1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Ordinal3 => "ordinal3",
            Task::Preference => "preference",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "ordinal3" | "ordinal" => Ok(Task::Ordinal3),
            "preference" => Ok(Task::Preference),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// An integer label code valid for some task.
///
/// Ordinal codes are `Low = 0`, `Neutral = 1`, `High = 2`. For preference
/// data `1` means the first item (A) was preferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelValue(u8);

impl LabelValue {
    pub const LOW: LabelValue = LabelValue(0);
    pub const NEUTRAL: LabelValue = LabelValue(1);
    pub const HIGH: LabelValue = LabelValue(2);

    pub fn new(code: i64, task: Task) -> Option<Self> {
        (0..task.num_classes() as i64)
            .contains(&code)
            .then_some(LabelValue(code as u8))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    /// Binary indicator for sub-task `s`: `1[label > s]`.
    pub fn subtask_target(self, s: usize) -> f64 {
        if self.index() > s {
            1.0
        } else {
            0.0
        }
    }

    /// Label one-hot over `num_classes` classes.
    pub fn one_hot(self, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        v[self.index()] = 1.0;
        v
    }
}

/// One annotation of one item.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub item_id: String,
    pub label: LabelValue,
    /// Item embedding; featurized from `text` when the record was given as raw text.
    pub embedding: Vec<f64>,
    pub text: Option<String>,
    /// Second item of a preference pair.
    pub embedding_b: Option<Vec<f64>>,
    pub text_b: Option<String>,
    pub rationale_embedding: Option<Vec<f64>>,
    pub clusters: Option<Vec<String>>,
    pub attributes: Option<BTreeMap<String, String>>,
}

impl AnnotationRecord {
    pub fn new(item_id: impl Into<String>, label: LabelValue, embedding: Vec<f64>) -> Self {
        AnnotationRecord {
            item_id: item_id.into(),
            label,
            embedding,
            text: None,
            embedding_b: None,
            text_b: None,
            rationale_embedding: None,
            clusters: None,
            attributes: None,
        }
    }
}

/// Record layout on disk.
#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    item_id: String,
    label: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clusters: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attributes: Option<BTreeMap<String, String>>,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Output dimension of the text featurizer for raw-text records.
    pub featurizer_dim: usize,
    /// When set, every `clusters` entry must belong to this set.
    pub cluster_universe: Option<BTreeSet<String>>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            featurizer_dim: featurize::DEFAULT_DIM,
            cluster_universe: None,
        }
    }
}

/// Annotations of one item, as indices into [`Dataset::records`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub id: String,
    pub records: Vec<usize>,
}

/// A validated, immutable collection of annotations for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    task: Task,
    records: Vec<AnnotationRecord>,
    items: Vec<Item>,
    dim: usize,
}

impl Dataset {
    /// Validates `records` and groups them by item id (first-appearance order).
    pub fn new(task: Task, records: Vec<AnnotationRecord>) -> Result<Self> {
        let mut dim = None;
        let mut rationale_dim = None;
        for (i, r) in records.iter().enumerate() {
            let line = i + 1;
            if LabelValue::new(i64::from(r.label.code()), task).is_none() {
                return Err(Error::LabelOutOfRange {
                    line,
                    label: i64::from(r.label.code()),
                    task,
                });
            }
            check_dim(&mut dim, r.embedding.len(), line, "embedding")?;
            match (&r.embedding_b, task) {
                (Some(b), Task::Preference) => check_dim(&mut dim, b.len(), line, "embedding_b")?,
                (None, Task::Preference) => return Err(Error::MissingSecondItem { line }),
                (Some(_), _) => {
                    return Err(Error::Malformed {
                        line,
                        message: format!("embedding_b is only valid for preference data, task is {task}"),
                    })
                }
                (None, _) => {}
            }
            if let Some(re) = &r.rationale_embedding {
                check_dim(&mut rationale_dim, re.len(), line, "rationale_embedding")?;
            }
            if let Some(cs) = &r.clusters {
                let unique: BTreeSet<&String> = cs.iter().collect();
                if unique.len() != cs.len() {
                    return Err(Error::Malformed {
                        line,
                        message: "duplicate cluster id in clusters".into(),
                    });
                }
            }
            let all_finite = r
                .embedding
                .iter()
                .chain(r.embedding_b.iter().flatten())
                .chain(r.rationale_embedding.iter().flatten())
                .all(|v| v.is_finite());
            if !all_finite {
                return Err(Error::Malformed {
                    line,
                    message: "non-finite embedding value".into(),
                });
            }
        }
        let dim = dim.unwrap_or(0);
        if dim == 0 && !records.is_empty() {
            return Err(Error::Malformed {
                line: 1,
                message: "zero-length embedding".into(),
            });
        }

        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut items: Vec<Item> = Vec::new();
        for (i, r) in records.iter().enumerate() {
            let slot = *index.entry(r.item_id.as_str()).or_insert_with(|| {
                items.push(Item {
                    id: r.item_id.clone(),
                    records: Vec::new(),
                });
                items.len() - 1
            });
            items[slot].records.push(i);
        }

        Ok(Dataset {
            task,
            records,
            items,
            dim,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    /// Item embedding dimensionality `d` (0 for an empty dataset).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Mean number of annotations per item.
    pub fn mean_annotations_per_item(&self) -> f64 {
        if self.items.is_empty() {
            0.0
        } else {
            self.records.len() as f64 / self.items.len() as f64
        }
    }

    /// New dataset holding the listed items, keeping the original record order.
    pub fn select_items(&self, item_indices: &[usize]) -> Result<Dataset> {
        let mut keep = vec![false; self.records.len()];
        for &it in item_indices {
            for &r in &self.items[it].records {
                keep[r] = true;
            }
        }
        let records = self
            .records
            .iter()
            .zip(keep)
            .filter_map(|(r, k)| k.then(|| r.clone()))
            .collect();
        Dataset::new(self.task, records)
    }

    /// Labels of one item, re-oriented for preference pairs so that every
    /// label refers to the item's first-seen (A, B) ordering.
    pub fn oriented_labels(&self, item: usize) -> Vec<LabelValue> {
        let recs = &self.items[item].records;
        let first = &self.records[recs[0]];
        recs.iter()
            .map(|&r| {
                let rec = &self.records[r];
                if self.task == Task::Preference && is_swapped(first, rec) {
                    LabelValue(1 - rec.label.code())
                } else {
                    rec.label
                }
            })
            .collect()
    }

    /// Majority label of item `item` (see [`majority_label`]).
    pub fn item_majority(&self, item: usize) -> Majority {
        majority_label(&self.oriented_labels(item)).expect("items always hold at least one record")
    }

    /// Serializes to the line-delimited record format.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            let raw = RawRecord {
                item_id: r.item_id.clone(),
                label: i64::from(r.label.code()),
                embedding: r.text.is_none().then(|| r.embedding.clone()),
                text: r.text.clone(),
                embedding_b: if r.text_b.is_none() {
                    r.embedding_b.clone()
                } else {
                    None
                },
                text_b: r.text_b.clone(),
                rationale_embedding: r.rationale_embedding.clone(),
                clusters: r.clusters.clone(),
                attributes: r.attributes.clone(),
            };
            serde_json::to_writer(&mut out, &raw)?;
            out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Set of declared taxonomy cluster ids across all records.
    pub fn declared_clusters(&self) -> BTreeSet<String> {
        self.records
            .iter()
            .flat_map(|r| r.clusters.iter().flatten().cloned())
            .collect()
    }
}

fn is_swapped(first: &AnnotationRecord, rec: &AnnotationRecord) -> bool {
    match (&first.embedding_b, &rec.embedding_b) {
        (Some(fb), Some(rb)) => {
            rec.embedding == *fb && *rb == first.embedding && first.embedding != *fb
        }
        _ => false,
    }
}

fn check_dim(slot: &mut Option<usize>, found: usize, line: usize, what: &str) -> Result<()> {
    if found == 0 {
        return Err(Error::Malformed {
            line,
            message: format!("zero-length {what}"),
        });
    }
    match *slot {
        None => {
            *slot = Some(found);
            Ok(())
        }
        Some(expected) if expected == found => Ok(()),
        Some(expected) => Err(Error::DimensionMismatch {
            expected,
            found,
            context: format!("{what} on line {line}"),
        }),
    }
}

fn resolve_side(
    embedding: Option<Vec<f64>>,
    text: &Option<String>,
    opts: &LoadOptions,
    line: usize,
    side: &str,
) -> Result<Option<Vec<f64>>> {
    match (embedding, text) {
        (Some(_), Some(_)) => Err(Error::Malformed {
            line,
            message: format!("item {side} has both an embedding and raw text"),
        }),
        (Some(e), None) => Ok(Some(e)),
        (None, Some(t)) => Ok(Some(featurize::featurize(t, opts.featurizer_dim))),
        (None, None) => Ok(None),
    }
}

fn parse_line(line_no: usize, line: &str, task: Task, opts: &LoadOptions) -> Result<AnnotationRecord> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    let label = LabelValue::new(raw.label, task).ok_or(Error::LabelOutOfRange {
        line: line_no,
        label: raw.label,
        task,
    })?;
    let embedding = resolve_side(raw.embedding, &raw.text, opts, line_no, "A")?.ok_or_else(|| {
        Error::Malformed {
            line: line_no,
            message: "record has neither embedding nor text".into(),
        }
    })?;
    let embedding_b = resolve_side(raw.embedding_b, &raw.text_b, opts, line_no, "B")?;
    if task == Task::Preference && embedding_b.is_none() {
        return Err(Error::MissingSecondItem { line: line_no });
    }
    if let (Some(universe), Some(cs)) = (&opts.cluster_universe, &raw.clusters) {
        if let Some(unknown) = cs.iter().find(|c| !universe.contains(*c)) {
            return Err(Error::Malformed {
                line: line_no,
                message: format!("cluster {unknown:?} is not in the declared cluster universe"),
            });
        }
    }
    Ok(AnnotationRecord {
        item_id: raw.item_id,
        label,
        embedding,
        text: raw.text,
        embedding_b,
        text_b: raw.text_b,
        rationale_embedding: raw.rationale_embedding,
        clusters: raw.clusters,
        attributes: raw.attributes,
    })
}

/// Parses line-delimited records. Blank lines are skipped; line numbers in
/// errors are 1-based physical lines.
pub fn read_dataset(reader: impl BufRead, task: Task, opts: &LoadOptions) -> Result<Dataset> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(line_no, &line, task, opts)?);
    }
    Dataset::new(task, records)
}

pub fn load_dataset(path: impl AsRef<Path>, task: Task) -> Result<Dataset> {
    load_dataset_with(path, task, &LoadOptions::default())
}

pub fn load_dataset_with(path: impl AsRef<Path>, task: Task, opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), task, opts)
}

/// Result of a majority vote over one item's labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Majority {
    Label(LabelValue),
    Tie,
}

impl fmt::Display for Majority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Majority::Label(l) => write!(f, "label={}", l.code()),
            Majority::Tie => f.write_str("tie"),
        }
    }
}

/// Modal label, or [`Majority::Tie`] when several labels share the top count.
pub fn majority_label(labels: &[LabelValue]) -> Result<Majority> {
    if labels.is_empty() {
        return Err(Error::invalid("majority of an empty label list"));
    }
    let mut counts: BTreeMap<LabelValue, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    let mut winners = counts.iter().filter(|(_, &c)| c == top);
    match (winners.next(), winners.next()) {
        (Some((&l, _)), None) => Ok(Majority::Label(l)),
        _ => Ok(Majority::Tie),
    }
}

/// Keeps only annotations that agree with their item's majority label.
/// Items with a tied majority are dropped.
pub fn majority_filter(ds: &Dataset) -> Result<Dataset> {
    let mut keep = vec![false; ds.len()];
    for (i, item) in ds.items().iter().enumerate() {
        if let Majority::Label(maj) = ds.item_majority(i) {
            for (&r, l) in item.records.iter().zip(ds.oriented_labels(i)) {
                keep[r] = l == maj;
            }
        }
    }
    let records = ds
        .records()
        .iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then(|| r.clone()))
        .collect();
    Dataset::new(ds.task(), records)
}

/// Splits items into train/test, stratified by each item's majority label
/// (tied items form their own stratum).
///
/// The test side receives `round(test_fraction * N)` items. Per-stratum
/// test counts are allocated by largest remainder, so each stratum's count
/// differs from its exact proportional share by less than one item.
pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = ds.num_items();
    let mut strata: BTreeMap<Majority, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        strata.entry(ds.item_majority(i)).or_default().push(i);
    }
    for (key, members) in &strata {
        if *key != Majority::Tie && members.len() < 2 {
            return Err(Error::StratumTooSmall {
                stratum: key.to_string(),
                items: members.len(),
                reason: "a label stratum needs at least 2 items to appear on both sides".into(),
            });
        }
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        let (key, members) = strata
            .iter()
            .min_by_key(|(_, m)| m.len())
            .ok_or_else(|| Error::invalid("cannot split an empty dataset"))?;
        return Err(Error::StratumTooSmall {
            stratum: key.to_string(),
            items: members.len(),
            reason: format!("{n} items leave one side of a {test_fraction} split empty"),
        });
    }

    // Largest-remainder apportionment of n_test across strata.
    let quotas: Vec<f64> = strata
        .values()
        .map(|m| m.len() as f64 * n_test as f64 / n as f64)
        .collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n_test - alloc.iter().sum::<usize>();
    for &s in order.iter().take(short) {
        alloc[s] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_items = Vec::with_capacity(n_test);
    let mut train_items = Vec::with_capacity(n - n_test);
    for (members, take) in strata.values().zip(alloc) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        test_items.extend_from_slice(&shuffled[..take]);
        train_items.extend_from_slice(&shuffled[take..]);
    }
    Ok((ds.select_items(&train_items)?, ds.select_items(&test_items)?))
}
