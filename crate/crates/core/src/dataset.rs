//! Manifest ingestion, single-label filtering, class accounting, and seeded
//! stratified k-fold assignment.
//!
//! Manifest CSV header:
//!
//! ```text
//! id,image_path,labels,lx,ly,rx,ry,nx,ny,bx,by,bw,bh
//! ```
//!
//! `labels` holds one or more `;`-separated tokens. The landmark (`lx`..`ny`)
//! and box (`bx`..`bh`) columns are optional, either absent from the header
//! or left empty on a row.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagebuf::{BoundingBox, FaceLandmarks, Point};

pub const MANIFEST_HEADER: [&str; 13] = [
    "id",
    "image_path",
    "labels",
    "lx",
    "ly",
    "rx",
    "ry",
    "nx",
    "ny",
    "bx",
    "by",
    "bw",
    "bh",
];

/// Expression labels in the column order used by result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Happiness,
    Sadness,
    Surprise,
    Fear,
    Anger,
    Disgust,
    Contempt,
    Neutral,
    /// Ingestion-only marker.
    Other,
    /// Ingestion-only marker.
    Uncertain,
}

impl EmotionLabel {
    /// The eight trainable classes, in table order.
    pub const CLASSES: [EmotionLabel; 8] = [
        EmotionLabel::Happiness,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
        EmotionLabel::Fear,
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Contempt,
        EmotionLabel::Neutral,
    ];

    pub fn is_marker(self) -> bool {
        matches!(self, EmotionLabel::Other | EmotionLabel::Uncertain)
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Happiness => "happiness",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Surprise => "surprise",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Contempt => "contempt",
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Other => "other",
            EmotionLabel::Uncertain => "uncertain",
        }
    }

    /// Seven Ekman expressions plus neutral.
    pub fn ekman_with_neutral() -> BTreeSet<EmotionLabel> {
        Self::CLASSES.into_iter().collect()
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let label = match s.trim().to_ascii_lowercase().as_str() {
            "happiness" | "happy" => EmotionLabel::Happiness,
            "sadness" | "sad" => EmotionLabel::Sadness,
            "surprise" | "surprised" => EmotionLabel::Surprise,
            "fear" | "fearful" | "afraid" => EmotionLabel::Fear,
            "anger" | "angry" => EmotionLabel::Anger,
            "disgust" | "disgusted" => EmotionLabel::Disgust,
            "contempt" => EmotionLabel::Contempt,
            "neutral" => EmotionLabel::Neutral,
            "other" => EmotionLabel::Other,
            "uncertain" | "unknown" => EmotionLabel::Uncertain,
            _ => return Err(Error::UnknownLabel(s.to_string())),
        };
        Ok(label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub raw_labels: Vec<EmotionLabel>,
    pub landmarks: Option<FaceLandmarks>,
    pub bbox: Option<BoundingBox>,
}

impl SampleRecord {
    /// The label of a single-label record.
    pub fn label(&self) -> Option<EmotionLabel> {
        match self.raw_labels.as_slice() {
            [only] => Some(*only),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    records: Vec<SampleRecord>,
    label_universe: BTreeSet<EmotionLabel>,
}

impl Manifest {
    pub fn new(records: Vec<SampleRecord>, label_universe: BTreeSet<EmotionLabel>) -> Result<Self> {
        if label_universe.iter().any(|l| l.is_marker()) {
            return Err(Error::InvalidConfig(
                "label universe may not contain other/uncertain".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if r.raw_labels.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "record {:?} has no labels",
                    r.id
                )));
            }
            if let Some(l) = r
                .raw_labels
                .iter()
                .find(|l| !l.is_marker() && !label_universe.contains(l))
            {
                return Err(Error::UnknownClass(format!("{l} (record {:?})", r.id)));
            }
        }
        Ok(Self {
            records,
            label_universe,
        })
    }

    /// Builds a manifest whose universe is every non-marker label observed.
    pub fn from_records(records: Vec<SampleRecord>) -> Result<Self> {
        let universe = records
            .iter()
            .flat_map(|r| r.raw_labels.iter().copied())
            .filter(|l| !l.is_marker())
            .collect();
        Self::new(records, universe)
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn label_universe(&self) -> &BTreeSet<EmotionLabel> {
        &self.label_universe
    }

    /// Universe in table order, the class index space of trained models.
    pub fn classes(&self) -> Vec<EmotionLabel> {
        self.label_universe.iter().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(MANIFEST_HEADER)?;
        for r in &self.records {
            let labels = r
                .raw_labels
                .iter()
                .map(|l| l.name())
                .collect::<Vec<_>>()
                .join(";");
            let mut row = vec![r.id.clone(), r.image_path.clone(), labels];
            match &r.landmarks {
                Some(lm) => {
                    for p in [lm.left_eye, lm.right_eye, lm.nose] {
                        row.push(p.x.to_string());
                        row.push(p.y.to_string());
                    }
                }
                None => row.extend(std::iter::repeat_n(String::new(), 6)),
            }
            match &r.bbox {
                Some(b) => row.extend([b.x, b.y, b.w, b.h].map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn parse_optional_group(
    record: &csv::StringRecord,
    cols: &[Option<usize>],
    row: usize,
) -> Result<Option<Vec<f64>>> {
    let cells: Vec<&str> = cols
        .iter()
        .map(|c| c.and_then(|i| record.get(i)).unwrap_or("").trim())
        .collect();
    if cells.iter().all(|c| c.is_empty()) {
        return Ok(None);
    }
    if cells.iter().any(|c| c.is_empty()) {
        return Err(Error::MalformedRow {
            row,
            message: "partially filled coordinate group".into(),
        });
    }
    cells
        .iter()
        .map(|c| {
            c.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedRow {
                    row,
                    message: format!("bad number {c:?}"),
                })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_reader(file)
}

pub fn parse_manifest_reader(reader: impl std::io::Read) -> Result<Manifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(id_col), Some(path_col), Some(label_col)) =
        (col("id"), col("image_path"), col("labels"))
    else {
        return Err(Error::MalformedRow {
            row: 1,
            message: "header must contain id, image_path and labels".into(),
        });
    };
    let lm_cols: Vec<Option<usize>> = MANIFEST_HEADER[3..9].iter().map(|n| col(n)).collect();
    let box_cols: Vec<Option<usize>> = MANIFEST_HEADER[9..13].iter().map(|n| col(n)).collect();

    let mut records = Vec::new();
    for result in rdr.records() {
        let record = result?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let cell = |i: usize| record.get(i).unwrap_or("").to_string();
        let id = cell(id_col);
        if id.is_empty() {
            return Err(Error::MalformedRow {
                row,
                message: "empty id".into(),
            });
        }
        let raw_labels = cell(label_col)
            .split(';')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(EmotionLabel::from_str)
            .collect::<Result<Vec<_>>>()?;
        if raw_labels.is_empty() {
            return Err(Error::MalformedRow {
                row,
                message: "no labels".into(),
            });
        }
        let landmarks = parse_optional_group(&record, &lm_cols, row)?
            .map(|v| {
                FaceLandmarks::new(
                    Point::new(v[0], v[1]),
                    Point::new(v[2], v[3]),
                    Point::new(v[4], v[5]),
                )
            })
            .transpose()
            .map_err(|e| Error::MalformedRow {
                row,
                message: e.to_string(),
            })?;
        let bbox = parse_optional_group(&record, &box_cols, row)?
            .map(|v| BoundingBox::new(v[0], v[1], v[2], v[3]))
            .transpose()
            .map_err(|e| Error::MalformedRow {
                row,
                message: e.to_string(),
            })?;
        records.push(SampleRecord {
            id,
            image_path: cell(path_col),
            raw_labels,
            landmarks,
            bbox,
        });
    }
    Manifest::from_records(records)
}

/// Keeps records carrying exactly one label drawn from `allowed`.
pub fn filter_single_label(m: &Manifest, allowed: &BTreeSet<EmotionLabel>) -> Manifest {
    let records = m
        .records
        .iter()
        .filter(|r| r.label().is_some_and(|l| allowed.contains(&l)))
        .cloned()
        .collect();
    let label_universe = m
        .label_universe
        .intersection(allowed)
        .copied()
        .filter(|l| !l.is_marker())
        .collect();
    Manifest {
        records,
        label_universe,
    }
}

/// Per-class record counts over the universe (zeros included). Multi-label
/// records are counted under each of their labels.
pub fn class_counts(m: &Manifest) -> BTreeMap<EmotionLabel, usize> {
    let mut counts: BTreeMap<EmotionLabel, usize> =
        m.label_universe.iter().map(|&l| (l, 0)).collect();
    for r in &m.records {
        for &l in &r.raw_labels {
            *counts.entry(l).or_default() += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Ids of each fold, sorted.
    pub fn folds(&self) -> Vec<Vec<String>> {
        let mut folds = vec![Vec::new(); self.k];
        for (id, &f) in &self.assignment {
            folds[f].push(id.clone());
        }
        folds
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: FoldPlan = serde_json::from_str(text)?;
        if plan.k < 2 || plan.assignment.values().any(|&f| f >= plan.k) {
            return Err(Error::InvalidConfig(format!(
                "fold plan has k = {} with out-of-range fold indices",
                plan.k
            )));
        }
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Per-(seed, class) generator for fold shuffling.
fn class_rng(seed: u64, label: EmotionLabel) -> Xoshiro256PlusPlus {
    let stream = (label as u64 + 1).wrapping_mul(GOLDEN_GAMMA);
    Xoshiro256PlusPlus::seed_from_u64(seed ^ stream)
}

/// Stratified k-fold assignment of a single-label manifest.
///
/// Within each class, ids are sorted, shuffled with a xoshiro256++ stream
/// seeded from `(seed, class)`, then dealt round-robin. The dealing offset
/// carries over between classes so fold totals also stay within one of each
/// other.
pub fn stratified_kfold(m: &Manifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "k must be at least 2, got {k}"
        )));
    }
    if m.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    let mut by_class: BTreeMap<EmotionLabel, Vec<&str>> = BTreeMap::new();
    for r in &m.records {
        let label = r.label().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "record {:?} is not single-label; filter the manifest first",
                r.id
            ))
        })?;
        by_class.entry(label).or_default().push(&r.id);
    }

    let mut assignment = BTreeMap::new();
    let mut offset = 0usize;
    for (label, mut ids) in by_class {
        ids.sort_unstable();
        ids.shuffle(&mut class_rng(seed, label));
        for (i, id) in ids.iter().enumerate() {
            assignment.insert(id.to_string(), (offset + i) % k);
        }
        offset = (offset + ids.len()) % k;
    }
    Ok(FoldPlan {
        k,
        seed,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, labels: &[EmotionLabel]) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            image_path: format!("{id}.png"),
            raw_labels: labels.to_vec(),
            landmarks: None,
            bbox: None,
        }
    }

    use EmotionLabel::*;

    fn five_fixture() -> Manifest {
        Manifest::from_records(vec![
            rec("A", &[Happiness]),
            rec("B", &[Happiness, Sadness]),
            rec("C", &[Other]),
            rec("D", &[Fear]),
            rec("E", &[Uncertain]),
        ])
        .unwrap()
    }

    #[test]
    fn label_tokens_are_case_insensitive() {
        assert_eq!("happiness".parse::<EmotionLabel>().unwrap(), Happiness);
        assert_eq!("HAPPY".parse::<EmotionLabel>().unwrap(), Happiness);
        assert_eq!(" Neutral ".parse::<EmotionLabel>().unwrap(), Neutral);
        assert!(matches!(
            "joy".parse::<EmotionLabel>(),
            Err(Error::UnknownLabel(_))
        ));
    }

    #[test]
    fn parse_empty_manifest() {
        let m = parse_manifest_reader(MANIFEST_HEADER.join(",").as_bytes()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn parse_three_rows() {
        let text = "id,image_path,labels,lx,ly,rx,ry,nx,ny,bx,by,bw,bh\n\
                    a,img/a.png,happiness,10,20,30,20,20,30,0,0,40,50\n\
                    b,img/b.png,Sadness;fear,,,,,,,,,,\n\
                    c,img/c.png,neutral,,,,,,,5,5,10,10\n";
        let m = parse_manifest_reader(text.as_bytes()).unwrap();
        assert_eq!(m.len(), 3);
        let a = &m.records()[0];
        assert_eq!(a.raw_labels, vec![Happiness]);
        assert_eq!(a.landmarks.unwrap().nose, Point::new(20.0, 30.0));
        assert_eq!(a.bbox.unwrap().h, 50.0);
        assert_eq!(m.records()[1].raw_labels, vec![Sadness, Fear]);
        assert!(m.records()[1].landmarks.is_none());
        assert!(m.records()[2].landmarks.is_none() && m.records()[2].bbox.is_some());
        assert_eq!(m.classes(), vec![Happiness, Sadness, Fear, Neutral]);
    }

    #[test]
    fn parse_minimal_header() {
        let m = parse_manifest_reader("id,image_path,labels\nx,x.png,anger\n".as_bytes()).unwrap();
        assert_eq!(m.records()[0].raw_labels, vec![Anger]);
    }

    #[test]
    fn parse_errors() {
        let dup = "id,image_path,labels\na,a.png,fear\na,b.png,fear\n";
        assert!(matches!(
            parse_manifest_reader(dup.as_bytes()),
            Err(Error::DuplicateId(id)) if id == "a"
        ));
        let unknown = "id,image_path,labels\na,a.png,joy\n";
        assert!(matches!(
            parse_manifest_reader(unknown.as_bytes()),
            Err(Error::UnknownLabel(_))
        ));
        let bad = "id,image_path,labels,lx,ly,rx,ry,nx,ny\na,a.png,fear,1,2,3,4,5,6\nb,b.png,fear,1,2,x,4,5,6\n";
        assert!(matches!(
            parse_manifest_reader(bad.as_bytes()),
            Err(Error::MalformedRow { row: 3, .. })
        ));
        let partial = "id,image_path,labels,lx,ly,rx,ry,nx,ny\na,a.png,fear,1,2,,,,\n";
        assert!(matches!(
            parse_manifest_reader(partial.as_bytes()),
            Err(Error::MalformedRow { row: 2, .. })
        ));
    }

    #[test]
    fn write_then_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut r = rec("z", &[Disgust, Neutral]);
        r.landmarks = Some(
            FaceLandmarks::new(
                Point::new(1.5, 2.0),
                Point::new(3.0, 2.25),
                Point::new(2.0, 4.0),
            )
            .unwrap(),
        );
        r.bbox = Some(BoundingBox::new(-1.0, 0.5, 10.0, 12.0).unwrap());
        let m = Manifest::from_records(vec![r, rec("y", &[Other])]).unwrap();
        m.write_csv(&p).unwrap();
        assert_eq!(parse_manifest(&p).unwrap(), m);
    }

    #[test]
    fn filter_examples() {
        let allowed = EmotionLabel::ekman_with_neutral();
        let f = filter_single_label(&five_fixture(), &allowed);
        let ids: Vec<_> = f.records().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["A", "D"]);
        let counts: Vec<_> = class_counts(&f)
            .into_iter()
            .filter(|&(_, c)| c > 0)
            .collect();
        assert_eq!(counts, vec![(Happiness, 1), (Fear, 1)]);
        assert_eq!(filter_single_label(&f, &allowed), f);

        let empty = Manifest::from_records(vec![]).unwrap();
        assert!(filter_single_label(&empty, &allowed).is_empty());
        assert!(class_counts(&empty).values().all(|&c| c == 0));
    }

    #[test]
    fn kfold_exact_divisibility() {
        let records: Vec<_> = (0..10)
            .map(|i| rec(&format!("r{i}"), &[if i < 5 { Anger } else { Neutral }]))
            .collect();
        let m = Manifest::from_records(records).unwrap();
        let plan = stratified_kfold(&m, 5, 42).unwrap();
        for fold in plan.folds() {
            let labels: BTreeSet<_> = fold
                .iter()
                .map(|id| m.get(id).unwrap().raw_labels[0])
                .collect();
            assert_eq!(fold.len(), 2);
            assert_eq!(labels.len(), 2);
        }
        assert_eq!(plan, stratified_kfold(&m, 5, 42).unwrap());
    }

    #[test]
    fn kfold_errors() {
        let m = Manifest::from_records(vec![rec("a", &[Fear]), rec("b", &[Fear])]).unwrap();
        assert!(stratified_kfold(&m, 1, 0).is_err());
        let empty = Manifest::from_records(vec![]).unwrap();
        assert!(matches!(
            stratified_kfold(&empty, 5, 0),
            Err(Error::EmptyInput(_))
        ));
        let multi = Manifest::from_records(vec![rec("a", &[Fear, Anger])]).unwrap();
        assert!(stratified_kfold(&multi, 2, 0).is_err());
    }

    #[test]
    fn kfold_ignores_record_order() {
        let records: Vec<_> = (0..30)
            .map(|i| rec(&format!("s{i:02}"), &[EmotionLabel::CLASSES[i % 3]]))
            .collect();
        let mut reversed = records.clone();
        reversed.reverse();
        let a = stratified_kfold(&Manifest::from_records(records).unwrap(), 4, 9).unwrap();
        let b = stratified_kfold(&Manifest::from_records(reversed).unwrap(), 4, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fold_plan_json() {
        let m = Manifest::from_records(vec![rec("a", &[Fear]), rec("b", &[Fear])]).unwrap();
        let plan = stratified_kfold(&m, 2, 3).unwrap();
        let json = plan.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["k"], 2);
        assert_eq!(v["seed"], 3);
        assert!(v["assignment"]["a"].is_u64());
        assert_eq!(FoldPlan::from_json(&json).unwrap(), plan);
        assert!(FoldPlan::from_json(r#"{"k":2,"seed":1,"assignment":{"a":2}}"#).is_err());
    }
}
