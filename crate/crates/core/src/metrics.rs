//! Join objects and the metric distances defined over them.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Vector(Vec<f64>),
    Text(String),
    /// Sorted, de-duplicated tokens.
    Tokens(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Vector,
    String,
    Set,
}

impl PayloadKind {
    pub fn name(self) -> &'static str {
        match self {
            PayloadKind::Vector => "vector",
            PayloadKind::String => "string",
            PayloadKind::Set => "set",
        }
    }
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PayloadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vector" | "vectors" => Ok(PayloadKind::Vector),
            "string" | "strings" => Ok(PayloadKind::String),
            "set" | "sets" => Ok(PayloadKind::Set),
            other => Err(Error::Input(format!("unknown payload kind `{other}`"))),
        }
    }
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Vector(_) => PayloadKind::Vector,
            Payload::Text(_) => PayloadKind::String,
            Payload::Tokens(_) => PayloadKind::Set,
        }
    }

    pub fn tokens<I, S>(tokens: I) -> Payload
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v: Vec<String> = tokens.into_iter().map(Into::into).collect();
        v.sort_unstable();
        v.dedup();
        Payload::Tokens(v)
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Payload::Vector(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataObject {
    pub id: u64,
    pub payload: Payload,
}

impl DataObject {
    pub fn new(id: u64, payload: Payload) -> Self {
        DataObject { id, payload }
    }

    pub fn vector(id: u64, coords: Vec<f64>) -> Self {
        DataObject { id, payload: Payload::Vector(coords) }
    }

    pub fn text(id: u64, s: impl Into<String>) -> Self {
        DataObject { id, payload: Payload::Text(s.into()) }
    }

    pub fn set<I, S>(id: u64, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        DataObject { id, payload: Payload::tokens(tokens) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[serde(alias = "l1")]
    L1Norm,
    #[serde(alias = "l2")]
    Euclidean,
    #[serde(alias = "edit")]
    EditDistance,
    #[serde(alias = "jaccard")]
    JaccardDistance,
}

impl MetricKind {
    pub fn payload_kind(self) -> PayloadKind {
        match self {
            MetricKind::L1Norm | MetricKind::Euclidean => PayloadKind::Vector,
            MetricKind::EditDistance => PayloadKind::String,
            MetricKind::JaccardDistance => PayloadKind::Set,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::L1Norm => "l1",
            MetricKind::Euclidean => "euclidean",
            MetricKind::EditDistance => "edit",
            MetricKind::JaccardDistance => "jaccard",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "l1norm" | "l1_norm" | "manhattan" => Ok(MetricKind::L1Norm),
            "l2" | "euclidean" => Ok(MetricKind::Euclidean),
            "edit" | "edit_distance" | "editdistance" | "levenshtein" => Ok(MetricKind::EditDistance),
            "jaccard" | "jaccard_distance" | "jaccarddistance" => Ok(MetricKind::JaccardDistance),
            other => Err(Error::Input(format!("unknown metric `{other}`"))),
        }
    }
}

/// Join threshold δ.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(delta: f64) -> Result<Self> {
        if delta.is_finite() && delta >= 0.0 {
            Ok(Threshold(delta))
        } else {
            Err(Error::Input(format!("threshold must be a finite non-negative number, got {delta}")))
        }
    }

    pub fn delta(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Threshold {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Threshold::new(v)
    }
}

impl From<Threshold> for f64 {
    fn from(t: Threshold) -> f64 {
        t.0
    }
}

fn check_kind(metric: MetricKind, payload: &Payload) -> Result<()> {
    if payload.kind() == metric.payload_kind() {
        Ok(())
    } else {
        Err(Error::PayloadMismatch { metric: metric.name(), payload: payload.kind().name() })
    }
}

pub fn distance(metric: MetricKind, a: &DataObject, b: &DataObject) -> Result<f64> {
    payload_distance(metric, &a.payload, &b.payload)
}

pub fn payload_distance(metric: MetricKind, a: &Payload, b: &Payload) -> Result<f64> {
    check_kind(metric, a)?;
    check_kind(metric, b)?;
    Ok(match (a, b) {
        (Payload::Vector(x), Payload::Vector(y)) => {
            if x.len() != y.len() {
                return Err(Error::DimensionMismatch { left: x.len(), right: y.len() });
            }
            if metric == MetricKind::L1Norm {
                l1(x, y)
            } else {
                euclidean(x, y)
            }
        }
        (Payload::Text(x), Payload::Text(y)) => levenshtein(x, y) as f64,
        (Payload::Tokens(x), Payload::Tokens(y)) => jaccard(x, y),
        _ => unreachable!("payload kinds checked above"),
    })
}

pub fn is_similar(metric: MetricKind, a: &DataObject, b: &DataObject, t: Threshold) -> Result<bool> {
    Ok(verify(metric, &a.payload, &b.payload, t)?.is_some())
}

/// Returns the distance when it is within the threshold.
///
/// Vector metrics stop summing once the partial sum passes δ; edit distance
/// stops as soon as every cell of a DP row exceeds δ. Reported distances are
/// bit-identical to [`distance`].
pub fn verify(metric: MetricKind, a: &Payload, b: &Payload, t: Threshold) -> Result<Option<f64>> {
    check_kind(metric, a)?;
    check_kind(metric, b)?;
    let delta = t.delta();
    match (metric, a, b) {
        (MetricKind::L1Norm | MetricKind::Euclidean, Payload::Vector(x), Payload::Vector(y)) => {
            if x.len() != y.len() {
                return Err(Error::DimensionMismatch { left: x.len(), right: y.len() });
            }
            Ok(if metric == MetricKind::L1Norm {
                l1_within(x, y, delta).filter(|&d| d <= delta)
            } else {
                // sqrt is monotone and correctly rounded, so any sum whose
                // root is ≤ δ is below δ²·(1 + 1e-9).
                squared_within(x, y, delta * delta * (1.0 + 1e-9)).map(f64::sqrt).filter(|&d| d <= delta)
            })
        }
        (MetricKind::EditDistance, Payload::Text(x), Payload::Text(y)) => {
            let bound = delta.floor().min(usize::MAX as f64) as usize;
            Ok(levenshtein_within(x, y, bound).map(|d| d as f64))
        }
        _ => {
            let d = payload_distance(metric, a, b)?;
            Ok((d <= delta).then_some(d))
        }
    }
}

pub fn l1(x: &[f64], y: &[f64]) -> f64 {
    l1_within(x, y, f64::INFINITY).unwrap_or(f64::INFINITY)
}

pub fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    squared_within(x, y, f64::INFINITY).unwrap_or(f64::INFINITY).sqrt()
}

// Partial sums of non-negative terms never decrease, so exceeding `bound`
// early is final.
fn l1_within(x: &[f64], y: &[f64], bound: f64) -> Option<f64> {
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y) {
        s += (a - b).abs();
        if s > bound {
            return None;
        }
    }
    Some(s)
}

fn squared_within(x: &[f64], y: &[f64], bound: f64) -> Option<f64> {
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y) {
        s += (a - b) * (a - b);
        if s > bound {
            return None;
        }
    }
    Some(s)
}

/// `1 - |A ∩ B| / |A ∪ B|` over sorted, de-duplicated token lists.
/// Two empty sets are at distance 0.
pub fn jaccard(x: &[String], y: &[String]) -> f64 {
    if x.is_empty() && y.is_empty() {
        return 0.0;
    }
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = x.len() + y.len() - common;
    1.0 - common as f64 / union as f64
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    if a.is_ascii() && b.is_ascii() {
        lev_slices(a.as_bytes(), b.as_bytes(), usize::MAX).unwrap_or(usize::MAX)
    } else {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        lev_slices(&a, &b, usize::MAX).unwrap_or(usize::MAX)
    }
}

/// Levenshtein distance if it is at most `bound`, `None` otherwise.
pub fn levenshtein_within(a: &str, b: &str, bound: usize) -> Option<usize> {
    if a.is_ascii() && b.is_ascii() {
        lev_slices(a.as_bytes(), b.as_bytes(), bound)
    } else {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        lev_slices(&a, &b, bound)
    }
}

fn lev_slices<T: PartialEq>(a: &[T], b: &[T], bound: usize) -> Option<usize> {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    if a.len() - b.len() > bound {
        return None;
    }
    if b.is_empty() {
        return Some(a.len());
    }
    let mut stack = [0usize; 64];
    let mut heap = Vec::new();
    let row: &mut [usize] = if b.len() < stack.len() {
        &mut stack[..=b.len()]
    } else {
        heap.resize(b.len() + 1, 0);
        &mut heap
    };
    for (j, r) in row.iter_mut().enumerate() {
        *r = j;
    }
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        let mut row_min = row[0];
        for (j, cb) in b.iter().enumerate() {
            let above = row[j + 1];
            let cost = if ca == cb { diag } else { diag + 1 };
            let v = cost.min(above + 1).min(row[j] + 1);
            diag = above;
            row[j + 1] = v;
            row_min = row_min.min(v);
        }
        if row_min > bound {
            return None;
        }
    }
    let d = row[b.len()];
    (d <= bound).then_some(d)
}

/// A self-join input: objects of one payload kind with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: PayloadKind,
    dim: Option<usize>,
    objects: Vec<DataObject>,
}

impl Dataset {
    pub fn new(objects: Vec<DataObject>) -> Result<Self> {
        let Some(first) = objects.first() else {
            return Ok(Dataset { kind: PayloadKind::Vector, dim: None, objects });
        };
        let kind = first.payload.kind();
        let dim = first.payload.as_vector().map(<[f64]>::len);
        let mut seen = HashSet::with_capacity(objects.len());
        for o in &objects {
            if o.payload.kind() != kind {
                return Err(Error::Input(format!(
                    "object {} is a {} but the dataset holds {}s",
                    o.id,
                    o.payload.kind(),
                    kind
                )));
            }
            if let (Some(d), Some(v)) = (dim, o.payload.as_vector()) {
                if v.len() != d {
                    return Err(Error::DimensionMismatch { left: d, right: v.len() });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Input(format!("object {} has a non-finite coordinate", o.id)));
                }
            }
            if !seen.insert(o.id) {
                return Err(Error::Input(format!("duplicate object id {}", o.id)));
            }
        }
        Ok(Dataset { kind, dim, objects })
    }

    pub fn from_vectors(rows: Vec<Vec<f64>>) -> Result<Self> {
        Dataset::new(rows.into_iter().enumerate().map(|(i, v)| DataObject::vector(i as u64, v)).collect())
    }

    pub fn kind(&self) -> PayloadKind {
        self.kind
    }

    /// Vector dimension, `None` for string and set payloads.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn objects(&self) -> &[DataObject] {
        &self.objects
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn into_objects(self) -> Vec<DataObject> {
        self.objects
    }

    pub fn read(path: impl AsRef<Path>, kind: PayloadKind) -> Result<Self> {
        match kind {
            PayloadKind::Vector => read_vectors(path),
            PayloadKind::String => read_strings(path),
            PayloadKind::Set => read_sets(path),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for o in &self.objects {
            match &o.payload {
                Payload::Vector(v) => {
                    write!(w, "{}", o.id).map_err(|e| Error::io(path, e))?;
                    for x in v {
                        write!(w, ",{x}").map_err(|e| Error::io(path, e))?;
                    }
                    writeln!(w).map_err(|e| Error::io(path, e))?;
                }
                Payload::Text(s) => writeln!(w, "{s}").map_err(|e| Error::io(path, e))?,
                Payload::Tokens(t) => writeln!(w, "{}", t.join(" ")).map_err(|e| Error::io(path, e))?,
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `id,x1,...,xm` per line, no header.
pub fn read_vectors(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut objects = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let mut fields = record.iter();
        let id: u64 = fields
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad id", line + 1)))?;
        let coords = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", line + 1)))?;
        if coords.is_empty() {
            return Err(Error::parse(path, format!("line {}: no coordinates", line + 1)));
        }
        objects.push(DataObject::vector(id, coords));
    }
    Dataset::new(objects)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::parse(path, e.to_string())
    }
}

/// One string per line; the id is the 0-based line number.
pub fn read_strings(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::new(
        text.lines()
            .enumerate()
            .map(|(i, l)| DataObject::text(i as u64, l.trim_end_matches('\r')))
            .collect(),
    )
}

/// Whitespace-separated tokens per line; the id is the 0-based line number.
pub fn read_sets(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::new(
        text.lines()
            .enumerate()
            .map(|(i, l)| DataObject::set(i as u64, l.split_whitespace()))
            .collect(),
    )
}
