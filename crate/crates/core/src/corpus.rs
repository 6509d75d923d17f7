//! Review corpus ingestion, dense id assignment and the per-user
//! train/validation/test split.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util::{mix_seed, round_half_up};
use crate::Pair;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("corpus is empty")]
    Empty,
    #[error("invalid split ratio {0}")]
    BadRatio(f64),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    AmazonJsonLines,
    Csv,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "amazon-json-lines" | "jsonl" | "json-lines" => Ok(Self::AmazonJsonLines),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown corpus format `{other}`")),
        }
    }
}

/// One review. `user` and `item` are the dense indices assigned at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub review_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

impl InteractionRecord {
    pub fn pair(&self) -> Pair {
        (self.user, self.item)
    }

    /// Only records with a non-blank review go through the aspect pipeline.
    pub fn has_review(&self) -> bool {
        !self.review_text.trim().is_empty()
    }
}

/// Bijection between external string ids and dense indices, in
/// first-appearance order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMaps {
    users: Vec<String>,
    items: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct IdMapsFile {
    users: Vec<String>,
    items: Vec<String>,
}

impl IdMaps {
    pub fn from_lists(users: Vec<String>, items: Vec<String>) -> Self {
        let user_index = users.iter().cloned().zip(0..).collect();
        let item_index = items.iter().cloned().zip(0..).collect();
        Self {
            users,
            items,
            user_index,
            item_index,
        }
    }

    fn intern(list: &mut Vec<String>, index: &mut HashMap<String, usize>, id: &str) -> usize {
        if let Some(&i) = index.get(id) {
            return i;
        }
        let i = list.len();
        list.push(id.to_owned());
        index.insert(id.to_owned(), i);
        i
    }

    pub fn intern_user(&mut self, id: &str) -> usize {
        Self::intern(&mut self.users, &mut self.user_index, id)
    }

    pub fn intern_item(&mut self, id: &str) -> usize {
        Self::intern(&mut self.items, &mut self.item_index, id)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn user_id(&self, index: usize) -> Option<&str> {
        self.users.get(index).map(String::as_str)
    }

    pub fn item_id(&self, index: usize) -> Option<&str> {
        self.items.get(index).map(String::as_str)
    }

    pub fn to_json(&self) -> Result<String, CorpusError> {
        Ok(serde_json::to_string_pretty(&IdMapsFile {
            users: self.users.clone(),
            items: self.items.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self, CorpusError> {
        let f: IdMapsFile = serde_json::from_str(s)?;
        Ok(Self::from_lists(f.users, f.items))
    }
}

/// Raw fields before id assignment.
struct RawRecord {
    user_id: String,
    item_id: String,
    rating: f64,
    review_text: String,
    timestamp: Option<i64>,
}

#[derive(Deserialize)]
struct AmazonLine {
    #[serde(rename = "reviewerID")]
    reviewer_id: Option<StringOrNumber>,
    asin: Option<StringOrNumber>,
    overall: Option<f64>,
    #[serde(rename = "reviewText")]
    review_text: Option<String>,
    #[serde(rename = "unixReviewTime")]
    unix_review_time: Option<i64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StringOrNumber {
    S(String),
    N(serde_json::Number),
}

impl StringOrNumber {
    fn into_string(self) -> String {
        match self {
            Self::S(s) => s,
            Self::N(n) => n.to_string(),
        }
    }
}

fn check_rating(rating: f64, line: usize) -> Result<f64, CorpusError> {
    if !(1.0..=5.0).contains(&rating) {
        return Err(CorpusError::Malformed {
            line,
            message: format!("rating {rating} outside [1, 5]"),
        });
    }
    Ok(rating)
}

fn parse_json_line(text: &str, line: usize) -> Result<RawRecord, CorpusError> {
    let malformed = |message: String| CorpusError::Malformed { line, message };
    let raw: AmazonLine = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let user_id = raw
        .reviewer_id
        .ok_or_else(|| malformed("missing `reviewerID`".into()))?
        .into_string();
    let item_id = raw
        .asin
        .ok_or_else(|| malformed("missing `asin`".into()))?
        .into_string();
    let rating = raw.overall.ok_or_else(|| malformed("missing `overall`".into()))?;
    let review_text = raw
        .review_text
        .ok_or_else(|| malformed("missing `reviewText`".into()))?;
    Ok(RawRecord {
        user_id,
        item_id,
        rating: check_rating(rating, line)?,
        review_text,
        timestamp: raw.unix_review_time,
    })
}

const USER_COLUMNS: &[&str] = &["reviewerID", "user_id", "user"];
const ITEM_COLUMNS: &[&str] = &["asin", "item_id", "item", "book_id"];
const RATING_COLUMNS: &[&str] = &["overall", "rating"];
const REVIEW_COLUMNS: &[&str] = &["reviewText", "review_text", "review"];
const TIME_COLUMNS: &[&str] = &["unixReviewTime", "timestamp"];

fn find_column(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    headers
        .iter()
        .position(|h| names.iter().any(|n| n.eq_ignore_ascii_case(h.trim())))
}

fn read_csv(path: &Path) -> Result<Vec<RawRecord>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Malformed {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let header_err = |role: &str| CorpusError::Malformed {
        line: 1,
        message: format!("header has no {role} column"),
    };
    let user_col = find_column(&headers, USER_COLUMNS).ok_or_else(|| header_err("user"))?;
    let item_col = find_column(&headers, ITEM_COLUMNS).ok_or_else(|| header_err("item"))?;
    let rating_col = find_column(&headers, RATING_COLUMNS).ok_or_else(|| header_err("rating"))?;
    let review_col = find_column(&headers, REVIEW_COLUMNS).ok_or_else(|| header_err("review"))?;
    let time_col = find_column(&headers, TIME_COLUMNS);

    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| CorpusError::Malformed {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |col: usize, role: &str| {
            row.get(col).ok_or_else(|| CorpusError::Malformed {
                line,
                message: format!("missing {role} field"),
            })
        };
        let rating_text = field(rating_col, "rating")?;
        let rating: f64 = rating_text.trim().parse().map_err(|_| CorpusError::Malformed {
            line,
            message: format!("rating `{rating_text}` is not a number"),
        })?;
        let timestamp = match time_col.and_then(|c| row.get(c)).map(str::trim) {
            None | Some("") => None,
            Some(t) => Some(t.parse::<i64>().map_err(|_| CorpusError::Malformed {
                line,
                message: format!("timestamp `{t}` is not an integer"),
            })?),
        };
        out.push(RawRecord {
            user_id: field(user_col, "user")?.trim().to_owned(),
            item_id: field(item_col, "item")?.trim().to_owned(),
            rating: check_rating(rating, line)?,
            review_text: field(review_col, "review")?.to_owned(),
            timestamp,
        });
    }
    Ok(out)
}

fn read_json_lines(path: &Path) -> Result<Vec<RawRecord>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_json_line(&line, n + 1)?);
    }
    Ok(out)
}

/// Load a corpus, assign dense ids and deduplicate `(user, item)` pairs.
///
/// Duplicates keep the record with the latest timestamp; among equal (or
/// missing) timestamps the earliest in file order wins. Records come back in
/// first-appearance order of their pair.
pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
) -> Result<(Vec<InteractionRecord>, IdMaps), CorpusError> {
    let raw = match format {
        CorpusFormat::AmazonJsonLines => read_json_lines(path)?,
        CorpusFormat::Csv => read_csv(path)?,
    };
    build_records(raw)
}

fn build_records(raw: Vec<RawRecord>) -> Result<(Vec<InteractionRecord>, IdMaps), CorpusError> {
    if raw.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut maps = IdMaps::default();
    let mut slot_of: HashMap<Pair, usize> = HashMap::new();
    let mut records: Vec<InteractionRecord> = Vec::new();
    for r in raw {
        let user = maps.intern_user(&r.user_id);
        let item = maps.intern_item(&r.item_id);
        let record = InteractionRecord {
            user_id: r.user_id,
            item_id: r.item_id,
            user,
            item,
            rating: r.rating,
            review_text: r.review_text,
            timestamp: r.timestamp,
        };
        match slot_of.get(&(user, item)) {
            Some(&slot) => {
                let newer = match (record.timestamp, records[slot].timestamp) {
                    (Some(new), Some(old)) => new > old,
                    (Some(_), None) => true,
                    _ => false,
                };
                if newer {
                    records[slot] = record;
                }
            }
            None => {
                slot_of.insert((user, item), records.len());
                records.push(record);
            }
        }
    }
    Ok((records, maps))
}

/// Disjoint per-user partition of the deduplicated interactions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: Vec<Pair>,
    pub validation: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl SplitSpec {
    pub fn to_json(&self) -> Result<String, CorpusError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, CorpusError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Items per user for one partition, each list sorted ascending.
    pub fn by_user(pairs: &[Pair], num_users: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_users];
        for &(u, i) in pairs {
            out[u].push(i);
        }
        for items in &mut out {
            items.sort_unstable();
            items.dedup();
        }
        out
    }

    pub fn num_users(&self) -> usize {
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .map(|p| p.0 + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Number of held-out test interactions for a user of the given degree.
pub fn test_count(degree: usize, ratio_test: f64) -> usize {
    if degree < 2 {
        0
    } else {
        round_half_up(ratio_test * degree as f64).max(1).min(degree - 1)
    }
}

/// Number of validation interactions taken from the remaining pairs.
pub fn validation_count(remaining: usize, ratio_val: f64) -> usize {
    round_half_up(ratio_val * remaining as f64).min(remaining.saturating_sub(1))
}

/// Split every user's interactions into train/validation/test.
///
/// Each user's items are shuffled with a stream derived from `(seed, user)`,
/// so the result does not depend on record order.
pub fn split_interactions(
    records: &[InteractionRecord],
    ratio_test: f64,
    ratio_val: f64,
    seed: u64,
) -> Result<SplitSpec, CorpusError> {
    for r in [ratio_test, ratio_val] {
        if !(0.0..1.0).contains(&r) {
            return Err(CorpusError::BadRatio(r));
        }
    }
    let num_users = records.iter().map(|r| r.user + 1).max().unwrap_or(0);
    let pairs: Vec<Pair> = records.iter().map(InteractionRecord::pair).collect();
    let per_user = SplitSpec::by_user(&pairs, num_users);

    let mut split = SplitSpec {
        seed,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (u, items) in per_user.into_iter().enumerate() {
        let mut items = items;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u as u64, 0x5B11));
        items.shuffle(&mut rng);
        let n_test = test_count(items.len(), ratio_test);
        let n_val = validation_count(items.len() - n_test, ratio_val);
        for (k, i) in items.into_iter().enumerate() {
            if k < n_test {
                split.test.push((u, i));
            } else if k < n_test + n_val {
                split.validation.push((u, i));
            } else {
                split.train.push((u, i));
            }
        }
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Write records as JSON lines (the normalized corpus artifact).
pub fn records_to_jsonl(records: &[InteractionRecord]) -> Result<String, CorpusError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn records_from_jsonl(s: &str) -> Result<Vec<InteractionRecord>, CorpusError> {
    s.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| CorpusError::Malformed {
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
