//! Corpus discovery, labeling, splitting, and pairing checks.
//!
//! Manifests are deterministic (records sorted by path regardless of
//! directory-walk order) and persist as diff-able tab-separated text.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use walkdir::WalkDir;

use crate::{Error, Result};

/// Default label pattern: the token between the final underscore and the
/// file extension, e.g. `00012_train_3+.png` -> `3+`.
pub const DEFAULT_LABEL_PATTERN: &str = r"_([0-3]\+?)\.[^.]+$";

/// Staining protocol that produced an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum StainModality {
    HE,
    IHC,
}

impl StainModality {
    pub fn as_str(self) -> &'static str {
        match self {
            StainModality::HE => "HE",
            StainModality::IHC => "IHC",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "HE" => Some(StainModality::HE),
            "IHC" => Some(StainModality::IHC),
            _ => None,
        }
    }
}

impl fmt::Display for StainModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Clinical HER2 score stage. Labels `0`, `1+`, `2+`, `3+` map to indices 0..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Her2Score {
    Zero,
    OnePlus,
    TwoPlus,
    ThreePlus,
}

pub const NUM_CLASSES: usize = 4;

impl Her2Score {
    pub const ALL: [Her2Score; NUM_CLASSES] = [
        Her2Score::Zero,
        Her2Score::OnePlus,
        Her2Score::TwoPlus,
        Her2Score::ThreePlus,
    ];

    pub fn index(self) -> usize {
        match self {
            Her2Score::Zero => 0,
            Her2Score::OnePlus => 1,
            Her2Score::TwoPlus => 2,
            Her2Score::ThreePlus => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Her2Score::Zero => "0",
            Her2Score::OnePlus => "1+",
            Her2Score::TwoPlus => "2+",
            Her2Score::ThreePlus => "3+",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "0" => Some(Her2Score::Zero),
            "1+" => Some(Her2Score::OnePlus),
            "2+" => Some(Her2Score::TwoPlus),
            "3+" => Some(Her2Score::ThreePlus),
            _ => None,
        }
    }
}

impl fmt::Display for Her2Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Train/test assignment of a record. `None` in [`ImageRecord::split`]
/// means the record has not been assigned yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub sample_id: String,
    pub modality: StainModality,
    pub score: Her2Score,
    pub split: Option<Split>,
    pub source_width_px: u32,
    pub source_height_px: u32,
}

/// Deterministic, sorted listing of one modality's labeled images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub modality: StainModality,
    pub records: Vec<ImageRecord>,
    pub seed: u64,
    pub pattern: String,
    /// Files under the root whose names did not parse (skipped, not fatal).
    pub skipped: usize,
}

impl DatasetManifest {
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for r in &self.records {
            counts[r.score.index()] += 1;
        }
        counts
    }

    /// (train, test) counts; unsplit records are in neither.
    pub fn split_counts(&self) -> (usize, usize) {
        let train = self.records.iter().filter(|r| r.split == Some(Split::Train)).count();
        let test = self.records.iter().filter(|r| r.split == Some(Split::Test)).count();
        (train, test)
    }

    pub fn is_split(&self) -> bool {
        self.records.iter().any(|r| r.split.is_some())
    }

    pub fn records_in(&self, split: Split) -> Vec<&ImageRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }

    /// Serialize to the manifest text format:
    /// header `#convoher2-manifest v1 modality=<..> seed=<..> ...`, then one
    /// tab-separated record per line.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#convoher2-manifest v1 modality={} seed={} skipped={} pattern={}\n",
            self.modality, self.seed, self.skipped, self.pattern
        );
        for r in &self.records {
            let split = r.split.map(Split::as_str).unwrap_or("unsplit");
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.path.display(),
                r.sample_id,
                r.modality,
                r.score,
                split,
                r.source_width_px,
                r.source_height_px
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::MalformedManifest("empty file".into()))??;
        let mut modality = None;
        let mut seed = 0u64;
        let mut skipped = 0usize;
        let mut pattern = DEFAULT_LABEL_PATTERN.to_string();
        let mut toks = header.split_whitespace();
        if toks.next() != Some("#convoher2-manifest") || toks.next() != Some("v1") {
            return Err(Error::MalformedManifest("bad header".into()));
        }
        for tok in toks {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::MalformedManifest(format!("bad header token {tok:?}")))?;
            match k {
                "modality" => modality = StainModality::parse(v),
                "seed" => seed = v.parse().map_err(|_| Error::MalformedManifest("bad seed".into()))?,
                "skipped" => skipped = v.parse().map_err(|_| Error::MalformedManifest("bad skipped".into()))?,
                "pattern" => pattern = v.to_string(),
                _ => return Err(Error::MalformedManifest(format!("unknown header key {k:?}"))),
            }
        }
        let modality = modality.ok_or_else(|| Error::MalformedManifest("missing modality".into()))?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(Error::MalformedManifest(format!("bad record line {line:?}")));
            }
            let split = match fields[4] {
                "train" => Some(Split::Train),
                "test" => Some(Split::Test),
                "unsplit" => None,
                s => return Err(Error::MalformedManifest(format!("bad split {s:?}"))),
            };
            records.push(ImageRecord {
                path: PathBuf::from(fields[0]),
                sample_id: fields[1].to_string(),
                modality: StainModality::parse(fields[2])
                    .ok_or_else(|| Error::MalformedManifest("bad modality".into()))?,
                score: Her2Score::from_label(fields[3])
                    .ok_or_else(|| Error::MalformedManifest("bad score".into()))?,
                split,
                source_width_px: fields[5]
                    .parse()
                    .map_err(|_| Error::MalformedManifest("bad width".into()))?,
                source_height_px: fields[6]
                    .parse()
                    .map_err(|_| Error::MalformedManifest("bad height".into()))?,
            });
        }
        Ok(DatasetManifest { modality, records, seed, pattern, skipped })
    }
}

/// Extract the HER2 score from a filename using a pattern with one capture
/// group over the label token.
pub fn parse_label(filename: &str, pattern: &Regex) -> Result<Her2Score> {
    let mut matches = pattern.captures_iter(filename);
    let first = matches.next().ok_or_else(|| Error::NoLabelToken(filename.to_string()))?;
    let extra = matches.count();
    if extra > 0 {
        return Err(Error::AmbiguousLabel(filename.to_string(), extra + 1));
    }
    let token = first
        .get(1)
        .ok_or_else(|| Error::NoLabelToken(filename.to_string()))?
        .as_str();
    Her2Score::from_label(token).ok_or_else(|| Error::NoLabelToken(filename.to_string()))
}

/// Sample id shared across modalities: filename stem with the label token
/// match stripped.
fn sample_id_of(filename: &str, pattern: &Regex) -> String {
    match pattern.find(filename) {
        Some(m) => format!("{}{}", &filename[..m.start()], ""),
        None => filename.to_string(),
    }
}

fn image_dims(path: &Path) -> Option<(u32, u32)> {
    image::image_dimensions(path).ok()
}

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "PNG"];

/// Walk `root`, parse labels from filenames, and build a sorted manifest.
///
/// Predefined `train/` and `test/` subdirectories assign splits; otherwise
/// all records are left unsplit. Unparseable image filenames are counted in
/// `skipped` rather than failing the scan.
pub fn scan_dataset(root: &Path, modality: StainModality, pattern: &Regex) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for entry in WalkDir::new(root) {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTS.iter().any(|x| x.eq_ignore_ascii_case(e)))
            .unwrap_or(false);
        if !ext_ok {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_string();
        let score = match parse_label(&name, pattern) {
            Ok(s) => s,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let split = path.strip_prefix(root).ok().and_then(|rel| {
            rel.components().find_map(|c| match c.as_os_str().to_str() {
                Some("train") => Some(Split::Train),
                Some("test") => Some(Split::Test),
                _ => None,
            })
        });
        let (w, h) = image_dims(path).unwrap_or((0, 0));
        records.push(ImageRecord {
            path: path.to_path_buf(),
            sample_id: sample_id_of(&name, pattern),
            modality,
            score,
            split,
            source_width_px: w,
            source_height_px: h,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(DatasetManifest {
        modality,
        records,
        seed: 0,
        pattern: pattern.as_str().to_string(),
        skipped,
    })
}

/// Assign train/test splits to an unsplit manifest.
///
/// Deterministic for a given (manifest, seed). With `stratified`, each
/// category contributes round(fraction * size) train records, so the
/// per-category train share deviates from the fraction by under one record.
pub fn split_manifest(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
    stratified: bool,
    force: bool,
) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidFraction(train_fraction));
    }
    if manifest.is_split() && !force {
        return Err(Error::AlreadySplit);
    }
    let mut out = manifest.clone();
    out.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        Her2Score::ALL
            .iter()
            .map(|s| {
                (0..out.records.len())
                    .filter(|&i| out.records[i].score == *s)
                    .collect()
            })
            .collect()
    } else {
        vec![(0..out.records.len()).collect()]
    };
    for mut group in groups {
        group.shuffle(&mut rng);
        let n_train = (train_fraction * group.len() as f64).round() as usize;
        for (k, &i) in group.iter().enumerate() {
            out.records[i].split = Some(if k < n_train { Split::Train } else { Split::Test });
        }
    }
    Ok(out)
}

/// Result of cross-checking the two modality manifests.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct PairingReport {
    pub matched: usize,
    /// (sample_id, he score label, ihc score label)
    pub score_mismatches: Vec<(String, String, String)>,
    pub missing_in_he: Vec<String>,
    pub missing_in_ihc: Vec<String>,
}

impl PairingReport {
    pub fn is_ok(&self) -> bool {
        self.score_mismatches.is_empty()
            && self.missing_in_he.is_empty()
            && self.missing_in_ihc.is_empty()
    }
}

/// Verify that the H&E and IHC manifests cover the same sample ids with
/// agreeing scores. Discrepancies are report content, never errors.
pub fn verify_pairing(he: &DatasetManifest, ihc: &DatasetManifest) -> PairingReport {
    let he_map: BTreeMap<&str, Her2Score> =
        he.records.iter().map(|r| (r.sample_id.as_str(), r.score)).collect();
    let ihc_map: BTreeMap<&str, Her2Score> =
        ihc.records.iter().map(|r| (r.sample_id.as_str(), r.score)).collect();
    let mut report = PairingReport::default();
    for (id, he_score) in &he_map {
        match ihc_map.get(id) {
            Some(ihc_score) if ihc_score == he_score => report.matched += 1,
            Some(ihc_score) => report.score_mismatches.push((
                id.to_string(),
                he_score.label().to_string(),
                ihc_score.label().to_string(),
            )),
            None => report.missing_in_ihc.push(id.to_string()),
        }
    }
    for id in ihc_map.keys() {
        if !he_map.contains_key(id) {
            report.missing_in_he.push(id.to_string());
        }
    }
    report
}

pub fn default_pattern() -> Regex {
    Regex::new(DEFAULT_LABEL_PATTERN).expect("default pattern compiles")
}
