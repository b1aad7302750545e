//! Immutable embedding corpus with crop-tier lineage.
//!
//! On disk a corpus is JSON lines: a header object
//! `{"dimension": D, "categories": [...], "concepts": [...]}` followed by
//! one [`ImageRecord`] per line.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::Metric;

pub const DEFAULT_DIMENSION: usize = 128;

/// Relative tolerance on crop area ratios.
const AREA_RTOL: f64 = 1e-6;

/// Crop-size tier of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tier {
    Full,
    Quarter,
    Eighth,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Full, Tier::Quarter, Tier::Eighth];

    /// Fraction of the parent image's area covered by a crop of this tier.
    pub fn area_fraction(self) -> f64 {
        match self {
            Tier::Full => 1.0,
            Tier::Quarter => 0.25,
            Tier::Eighth => 0.125,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Full => "FULL",
            Tier::Quarter => "QUARTER",
            Tier::Eighth => "EIGHTH",
        })
    }
}

impl std::str::FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FULL" => Ok(Tier::Full),
            "QUARTER" => Ok(Tier::Quarter),
            "EIGHTH" => Ok(Tier::Eighth),
            _ => Err(Error::InvalidArgument(format!("unknown tier {s:?}"))),
        }
    }
}

/// Axis-aligned rectangle in parent-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    #[serde(alias = "w")]
    pub width: f64,
    #[serde(alias = "h")]
    pub height: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn is_well_formed(&self) -> bool {
        [self.x, self.y, self.width, self.height]
            .iter()
            .all(|v| v.is_finite())
            && self.width > 0.0
            && self.height > 0.0
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = (self.x + self.width).min(other.x + other.width) - self.x.max(other.x);
        let h = (self.y + self.height).min(other.y + other.height) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn within(&self, size: &ImageSize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.width <= size.width
            && self.y + self.height <= size.height
    }
}

/// Pixel extent of a FULL-tier image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

/// One corpus entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    #[serde(default)]
    pub source_uri: String,
    pub tier: Tier,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Rect>,
    /// Pixel extent; only meaningful on FULL records, required when the
    /// record has crop children.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<ImageSize>,
    pub diagnosis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_labels: Option<BTreeMap<String, bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_intensities: Option<BTreeMap<String, f64>>,
    pub embedding: Vec<f64>,
}

impl ImageRecord {
    /// Whether the record is labeled as containing `concept`.
    pub fn has_concept(&self, concept: &str) -> bool {
        self.concept_labels
            .as_ref()
            .and_then(|labels| labels.get(concept).copied())
            .unwrap_or(false)
    }

    pub fn oracle_intensity(&self, concept: &str) -> Option<f64> {
        self.oracle_intensities
            .as_ref()
            .and_then(|m| m.get(concept).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub dimension: usize,
    pub categories: Vec<String>,
    #[serde(default)]
    pub concepts: Vec<String>,
}

impl CorpusHeader {
    pub fn new(dimension: usize, categories: Vec<String>, concepts: Vec<String>) -> Self {
        Self {
            dimension,
            categories,
            concepts,
        }
    }
}

/// A validated, immutable collection of [`ImageRecord`]s.
#[derive(Debug, Clone)]
pub struct Corpus {
    header: CorpusHeader,
    records: Vec<ImageRecord>,
    index: HashMap<String, usize>,
    tiers: [Vec<usize>; 3],
    children: HashMap<String, Vec<usize>>,
    median_norm: Option<f64>,
    metric: Metric,
}

impl Corpus {
    /// Validates `records` against `header` and builds the lookup tables.
    pub fn new(header: CorpusHeader, records: Vec<ImageRecord>) -> Result<Self> {
        validate_header(&header)?;
        let categories: BTreeSet<&str> = header.categories.iter().map(String::as_str).collect();
        let concepts: BTreeSet<&str> = header.concepts.iter().map(String::as_str).collect();

        let mut index = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            if index.insert(rec.id.clone(), i).is_some() {
                return Err(Error::record(&rec.id, "duplicate id"));
            }
        }

        let mut tiers: [Vec<usize>; 3] = Default::default();
        let mut children: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, rec) in records.iter().enumerate() {
            validate_record_fields(rec, header.dimension, &categories, &concepts)?;
            if let Some(parent_id) = &rec.parent_id {
                let parent = index.get(parent_id).map(|&p| &records[p]).ok_or_else(|| {
                    Error::record(&rec.id, format!("dangling parent_id {parent_id:?}"))
                })?;
                validate_lineage(rec, parent)?;
                children.entry(parent_id.clone()).or_default().push(i);
            }
            tiers[rec.tier.slot()].push(i);
        }

        let median_norm = median(records.iter().map(|r| l2_norm(&r.embedding)).collect());

        Ok(Self {
            header,
            records,
            index,
            tiers,
            children,
            median_norm,
            metric: Metric::default(),
        })
    }

    /// Selects the distance used by search and scatter data.
    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn header(&self) -> &CorpusHeader {
        &self.header
    }

    pub fn dimension(&self) -> usize {
        self.header.dimension
    }

    pub fn categories(&self) -> &[String] {
        &self.header.categories
    }

    pub fn concepts(&self) -> &[String] {
        &self.header.concepts
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn get_record(&self, id: &str) -> Result<&ImageRecord> {
        self.index
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::NotFound(id.to_owned()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn tier_records(&self, tier: Tier) -> impl Iterator<Item = &ImageRecord> + '_ {
        self.tiers[tier.slot()].iter().map(|&i| &self.records[i])
    }

    pub fn tier_len(&self, tier: Tier) -> usize {
        self.tiers[tier.slot()].len()
    }

    /// Crop records whose parent is `id`, in corpus order.
    pub fn crop_children(&self, id: &str) -> impl Iterator<Item = &ImageRecord> + '_ {
        self.children
            .get(id)
            .into_iter()
            .flatten()
            .map(|&i| &self.records[i])
    }

    /// Median L2 norm of all embeddings; `None` for an empty corpus.
    pub fn median_norm(&self) -> Option<f64> {
        self.median_norm
    }

    pub fn has_category(&self, category: &str) -> bool {
        self.header.categories.iter().any(|c| c == category)
    }

    pub fn has_concept(&self, concept: &str) -> bool {
        self.header.concepts.iter().any(|c| c == concept)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_corpus(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, &self.header)?;
        out.write_all(b"\n")?;
        for rec in &self.records {
            serde_json::to_writer(&mut *out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads and validates a corpus file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut header: Option<CorpusHeader> = None;
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(serde_json::from_str(&line).map_err(|e| Error::Malformed {
                line: lineno,
                what: "header",
                message: e.to_string(),
            })?);
            continue;
        }
        records.push(parse_record_line(&line, lineno)?);
    }
    let header = header.ok_or(Error::Malformed {
        line: 1,
        what: "header",
        message: "missing header line".into(),
    })?;
    Corpus::new(header, records)
}

/// Parses one record line, naming the record id in the error when it can be recovered.
pub(crate) fn parse_record_line(line: &str, lineno: usize) -> Result<ImageRecord> {
    serde_json::from_str(line).map_err(|e| {
        let id = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(str::to_owned));
        match id {
            Some(id) => Error::record(id, format!("malformed record on line {lineno}: {e}")),
            None => Error::Malformed {
                line: lineno,
                what: "record",
                message: e.to_string(),
            },
        }
    })
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Exact median (mean of the two middle values for even counts).
fn median(mut values: Vec<f64>) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mid = n / 2;
    let (lower, &mut upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        Some(upper)
    } else {
        let below = lower.iter().copied().max_by(f64::total_cmp)?;
        Some((below + upper) / 2.0)
    }
}

fn validate_header(header: &CorpusHeader) -> Result<()> {
    let malformed = |message: String| Error::Malformed {
        line: 1,
        what: "header",
        message,
    };
    if header.dimension == 0 {
        return Err(malformed("dimension must be positive".into()));
    }
    if header.categories.is_empty() {
        return Err(malformed("category set is empty".into()));
    }
    for (name, list) in [
        ("category", &header.categories),
        ("concept", &header.concepts),
    ] {
        let unique: BTreeSet<_> = list.iter().collect();
        if unique.len() != list.len() {
            return Err(malformed(format!("duplicate {name} names")));
        }
    }
    Ok(())
}

fn validate_record_fields(
    rec: &ImageRecord,
    dimension: usize,
    categories: &BTreeSet<&str>,
    concepts: &BTreeSet<&str>,
) -> Result<()> {
    if rec.id.is_empty() {
        return Err(Error::record("", "empty id"));
    }
    if rec.embedding.len() != dimension {
        return Err(Error::record(
            &rec.id,
            format!(
                "embedding has {} entries, expected dimension {dimension}",
                rec.embedding.len()
            ),
        ));
    }
    if rec.embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::record(
            &rec.id,
            "embedding contains non-finite values",
        ));
    }
    if !categories.contains(rec.diagnosis.as_str()) {
        return Err(Error::record(
            &rec.id,
            format!("unknown diagnosis category {:?}", rec.diagnosis),
        ));
    }
    if let Some(labels) = &rec.concept_labels {
        if let Some(c) = labels.keys().find(|c| !concepts.contains(c.as_str())) {
            return Err(Error::record(
                &rec.id,
                format!("label for unknown concept {c:?}"),
            ));
        }
    }
    if let Some(intensities) = &rec.oracle_intensities {
        for (c, z) in intensities {
            if !concepts.contains(c.as_str()) {
                return Err(Error::record(
                    &rec.id,
                    format!("intensity for unknown concept {c:?}"),
                ));
            }
            if !(0.0..=1.0).contains(z) {
                return Err(Error::record(
                    &rec.id,
                    format!("intensity {z} for {c:?} outside [0,1]"),
                ));
            }
        }
    }
    match rec.tier {
        Tier::Full => {
            if rec.parent_id.is_some() || rec.region.is_some() {
                return Err(Error::record(
                    &rec.id,
                    "FULL record must not carry parent_id or region",
                ));
            }
            if let Some(size) = &rec.size {
                if !(size.width > 0.0 && size.height > 0.0 && size.area().is_finite()) {
                    return Err(Error::record(&rec.id, "image size must be positive"));
                }
            }
        }
        tier => {
            if rec.parent_id.is_none() || rec.region.is_none() {
                return Err(Error::record(
                    &rec.id,
                    format!("{tier} crop requires parent_id and region"),
                ));
            }
            if rec.size.is_some() {
                return Err(Error::record(
                    &rec.id,
                    "only FULL records carry an image size",
                ));
            }
        }
    }
    Ok(())
}

fn validate_lineage(crop: &ImageRecord, parent: &ImageRecord) -> Result<()> {
    if parent.tier != Tier::Full {
        return Err(Error::record(
            &crop.id,
            format!("parent {:?} is not a FULL record", parent.id),
        ));
    }
    let region = crop.region.as_ref().expect("checked by field validation");
    if !region.is_well_formed() {
        return Err(Error::record(
            &crop.id,
            "region must have positive finite extent",
        ));
    }
    let size = parent.size.ok_or_else(|| {
        Error::record(
            &crop.id,
            format!("parent {:?} has crop children but no image size", parent.id),
        )
    })?;
    if !region.within(&size) {
        return Err(Error::record(
            &crop.id,
            "region exceeds the parent image bounds",
        ));
    }
    let expected = size.area() * crop.tier.area_fraction();
    if (region.area() - expected).abs() > AREA_RTOL * size.area() {
        return Err(Error::record(
            &crop.id,
            format!(
                "{} crop area {} is not {} of parent area {}",
                crop.tier,
                region.area(),
                crop.tier.area_fraction(),
                size.area()
            ),
        ));
    }
    Ok(())
}
