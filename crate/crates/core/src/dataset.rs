//! Grades, consensus, the dataset manifest, train/test splitting and the
//! append-only grade store.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::GroundTruth;

/// Number of distinct graders needed before an image has a consensus.
pub const REQUIRED_GRADERS: usize = 3;

/// A single grader's verdict, and the binary class used for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryClass {
    Accept,
    Reject,
}

impl BinaryClass {
    pub fn flip(self) -> Self {
        match self {
            Self::Accept => Self::Reject,
            Self::Reject => Self::Accept,
        }
    }

    /// Hinge-loss label: +1 for accept, −1 for reject.
    pub fn sign<T: Scalar>(self) -> T {
        match self {
            Self::Accept => T::one(),
            Self::Reject => -T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consensus {
    Accept,
    Reject,
    Ambiguous,
    Ungraded,
}

impl Consensus {
    /// The training class, if the consensus is unanimous.
    pub fn binary(self) -> Option<BinaryClass> {
        match self {
            Self::Accept => Some(BinaryClass::Accept),
            Self::Reject => Some(BinaryClass::Reject),
            _ => None,
        }
    }
}

impl From<BinaryClass> for Consensus {
    fn from(c: BinaryClass) -> Self {
        match c {
            BinaryClass::Accept => Self::Accept,
            BinaryClass::Reject => Self::Reject,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub image_id: String,
    pub grader_id: String,
    pub label: BinaryClass,
    pub timestamp: DateTime<Utc>,
}

/// Latest grade per grader. Equal timestamps resolve to `reject` so the
/// result never depends on input order.
fn effective_grades(grades: &[GradeRecord]) -> BTreeMap<&str, &GradeRecord> {
    let mut latest: BTreeMap<&str, &GradeRecord> = BTreeMap::new();
    for g in grades {
        latest
            .entry(g.grader_id.as_str())
            .and_modify(|cur| {
                if (g.timestamp, g.label) > (cur.timestamp, cur.label) {
                    *cur = g;
                }
            })
            .or_insert(g);
    }
    latest
}

/// Unanimous label, `ambiguous` on any disagreement, `ungraded` with fewer
/// than `required_graders` distinct graders.
pub fn consensus(grades: &[GradeRecord], required_graders: usize) -> Consensus {
    let latest = effective_grades(grades);
    if latest.len() < required_graders.max(1) {
        return Consensus::Ungraded;
    }
    let labels: BTreeSet<BinaryClass> = latest.values().map(|g| g.label).collect();
    match labels.into_iter().collect::<Vec<_>>().as_slice() {
        [only] => (*only).into(),
        _ => Consensus::Ambiguous,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub grades: Vec<GradeRecord>,
    pub consensus: Consensus,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    /// Unique ids, and no ambiguous entry in the training split.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::Consistency(format!("duplicate image id {}", e.image_id)));
            }
            if e.split == Split::Train && e.consensus.binary().is_none() {
                return Err(Error::Consistency(format!(
                    "image {} has consensus {:?} but is in the training split",
                    e.image_id, e.consensus
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn entry_mut(&mut self, image_id: &str) -> Option<&mut ManifestEntry> {
        self.entries.iter_mut().find(|e| e.image_id == image_id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Recomputes every entry's consensus from its grades.
    pub fn recompute_consensus(&mut self, required_graders: usize) {
        for e in &mut self.entries {
            e.consensus = consensus(&e.grades, required_graders);
        }
    }

    pub fn count(&self, c: Consensus) -> usize {
        self.entries.iter().filter(|e| e.consensus == c).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Where an entry's image lives given the manifest's own path.
pub fn resolve_image_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    if entry.path.is_absolute() {
        entry.path.clone()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(&entry.path)
    }
}

fn split_key(seed: u64, image_id: &str) -> [u8; 32] {
    Sha256::digest(format!("{seed}:{image_id}").as_bytes()).into()
}

/// A split manifest plus any stratification warnings.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Assigns train/test splits.
///
/// Within each class, entries are ranked by `SHA-256("<seed>:<id>")` and the
/// first `round(train_fraction · n)` go to train, so the result depends only
/// on ids and seed, never on entry order. Ambiguous entries always go to test.
/// Adding an image moves at most one existing entry of its class.
pub fn split_dataset(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<SplitOutcome> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    manifest.validate()?;
    if let Some(e) = manifest.entries.iter().find(|e| e.consensus == Consensus::Ungraded) {
        return Err(Error::Input(format!("image {} is ungraded", e.image_id)));
    }
    let mut out = manifest.clone();
    let mut by_class: BTreeMap<BinaryClass, Vec<(usize, [u8; 32])>> = BTreeMap::new();
    for (i, e) in out.entries.iter_mut().enumerate() {
        match e.consensus.binary() {
            Some(c) => by_class.entry(c).or_default().push((i, split_key(seed, &e.image_id))),
            None => e.split = Split::Test,
        }
    }
    let mut warnings = Vec::new();
    for class in [BinaryClass::Accept, BinaryClass::Reject] {
        let mut members = by_class.remove(&class).unwrap_or_default();
        members.sort_by_key(|a| a.1);
        let n_train = (train_fraction * members.len() as f64).round() as usize;
        for (rank, (i, _)) in members.iter().enumerate() {
            out.entries[*i].split = if rank < n_train { Split::Train } else { Split::Test };
        }
        if members.is_empty() {
            continue;
        }
        if n_train == 0 && train_fraction > 0.0 {
            warnings.push(format!("training split has no {class:?} images"));
        }
        if n_train == members.len() && train_fraction < 1.0 {
            warnings.push(format!("test split has no {class:?} images"));
        }
    }
    Ok(SplitOutcome { manifest: out, warnings })
}

/// Append-only JSONL store of [`GradeRecord`]s.
///
/// Writes are whole lines ending in `\n`; a reader that finds a final line
/// without its newline treats it as not yet written. A fragment left behind
/// by a crashed writer is terminated by the next append and then skipped,
/// since the file is never rewritten.
#[derive(Debug, Clone)]
pub struct GradeStore {
    path: PathBuf,
}

impl GradeStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Every complete record, in append order.
    pub fn read_all(&self) -> Result<Vec<GradeRecord>> {
        let bytes = match std::fs::read(&self.path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.path, e)),
        };
        let complete = match bytes.iter().rposition(|&b| b == b'\n') {
            Some(end) => &bytes[..=end],
            None => return Ok(Vec::new()),
        };
        let text = std::str::from_utf8(complete)
            .map_err(|e| Error::Input(format!("{}: not UTF-8: {e}", self.path.display())))?;
        Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
    }

    /// Records grouped by image id.
    pub fn by_image(&self) -> Result<BTreeMap<String, Vec<GradeRecord>>> {
        let mut map: BTreeMap<String, Vec<GradeRecord>> = BTreeMap::new();
        for r in self.read_all()? {
            map.entry(r.image_id.clone()).or_default().push(r);
        }
        Ok(map)
    }

    /// Appends `record` unless it would not change that grader's effective
    /// label for the image. Returns whether a line was written.
    ///
    /// Callers must serialize calls; the store assumes a single writer.
    pub fn append(&self, record: &GradeRecord) -> Result<bool> {
        if record.grader_id.trim().is_empty() {
            return Err(Error::Input("grader_id must be non-empty".into()));
        }
        let existing: Vec<GradeRecord> = self
            .read_all()?
            .into_iter()
            .filter(|r| r.image_id == record.image_id && r.grader_id == record.grader_id)
            .collect();
        if let Some(cur) = effective_grades(&existing).get(record.grader_id.as_str()) {
            if cur.label == record.label {
                return Ok(false);
            }
        }
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let torn = std::fs::read(&self.path)
            .map(|b| b.last().is_some_and(|&c| c != b'\n'))
            .unwrap_or(false);
        if torn {
            line.insert(0, '\n');
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use BinaryClass::{Accept as A, Reject as R};

    pub(crate) fn grade(image: &str, grader: &str, label: BinaryClass, t: i64) -> GradeRecord {
        GradeRecord {
            image_id: image.into(),
            grader_id: grader.into(),
            label,
            timestamp: Utc.timestamp_opt(1_500_000_000 + t, 0).unwrap(),
        }
    }

    fn entry(id: &str, c: Consensus) -> ManifestEntry {
        ManifestEntry {
            image_id: id.into(),
            path: format!("{id}.ppm").into(),
            grades: vec![],
            consensus: c,
            split: Split::Excluded,
            ground_truth: None,
        }
    }

    #[test]
    fn consensus_examples() {
        let g = |labels: &[BinaryClass]| -> Vec<_> {
            labels
                .iter()
                .enumerate()
                .map(|(i, &l)| grade("x", &format!("g{i}"), l, 0))
                .collect()
        };
        assert_eq!(consensus(&g(&[A, A, A]), 3), Consensus::Accept);
        assert_eq!(consensus(&g(&[R, R, R]), 3), Consensus::Reject);
        assert_eq!(consensus(&g(&[A, A, R]), 3), Consensus::Ambiguous);
        assert_eq!(consensus(&g(&[A, A]), 3), Consensus::Ungraded);
    }

    #[test]
    fn latest_grade_per_grader_wins() {
        let gs = vec![
            grade("x", "a", R, 0),
            grade("x", "a", A, 10),
            grade("x", "b", A, 0),
            grade("x", "c", A, 0),
        ];
        assert_eq!(consensus(&gs, 3), Consensus::Accept);
        // Re-grading by one grader does not count as a second grader.
        assert_eq!(consensus(&gs[..2], 2), Consensus::Ungraded);
    }

    #[test]
    fn split_counts_and_ambiguous_never_train() {
        let mut entries: Vec<_> = (0..60).map(|i| entry(&format!("a{i}"), Consensus::Accept)).collect();
        entries.extend((0..40).map(|i| entry(&format!("r{i}"), Consensus::Reject)));
        entries.extend((0..5).map(|i| entry(&format!("m{i}"), Consensus::Ambiguous)));
        let m = DatasetManifest::new(entries).unwrap();
        let s = split_dataset(&m, 0.5, 7).unwrap();
        assert!(s.warnings.is_empty());
        let train = s.manifest.split(Split::Train).count();
        assert_eq!(train, 50);
        assert_eq!(s.manifest.split(Split::Test).count(), 55);
        assert!(s
            .manifest
            .entries
            .iter()
            .filter(|e| e.consensus == Consensus::Ambiguous)
            .all(|e| e.split == Split::Test));
        let again = split_dataset(&m, 0.5, 7).unwrap();
        assert_eq!(again.manifest, s.manifest);
    }

    #[test]
    fn ungraded_split_is_an_error() {
        let m = DatasetManifest::new(vec![entry("u", Consensus::Ungraded)]).unwrap();
        assert!(split_dataset(&m, 0.5, 1).is_err());
    }

    #[test]
    fn single_class_split_warns() {
        let m = DatasetManifest::new((0..4).map(|i| entry(&format!("a{i}"), Consensus::Accept)).collect()).unwrap();
        let s = split_dataset(&m, 0.5, 1).unwrap();
        assert!(s.warnings.is_empty());
        let m = DatasetManifest::new(vec![entry("a", Consensus::Accept), entry("r", Consensus::Reject)]).unwrap();
        let s = split_dataset(&m, 0.5, 1).unwrap();
        assert_eq!(s.warnings.len(), 2);
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(DatasetManifest::new(vec![entry("a", Consensus::Accept), entry("a", Consensus::Reject)]).is_err());
        let mut bad = entry("m", Consensus::Ambiguous);
        bad.split = Split::Train;
        assert!(DatasetManifest::new(vec![bad]).is_err());
    }

    #[test]
    fn manifest_json_round_trip() {
        let mut e = entry("a", Consensus::Accept);
        e.grades.push(grade("a", "g1", A, 5));
        let m = DatasetManifest::new(vec![e]).unwrap();
        let json = m.to_json().unwrap();
        assert!(json.contains("\"2017-07-14T02:40:05Z\""), "{json}");
        assert_eq!(DatasetManifest::from_json(&json).unwrap(), m);
    }

    #[test]
    fn store_append_is_idempotent_and_ignores_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let store = GradeStore::new(dir.path().join("grades.jsonl"));
        assert!(store.read_all().unwrap().is_empty());
        assert!(store.append(&grade("x", "a", A, 0)).unwrap());
        assert!(!store.append(&grade("x", "a", A, 1)).unwrap());
        assert!(store.append(&grade("x", "a", R, 2)).unwrap());
        assert_eq!(store.read_all().unwrap().len(), 2);
        assert!(store.append(&grade("x", "", R, 2)).is_err());

        let mut f = OpenOptions::new().append(true).open(store.path()).unwrap();
        f.write_all(b"{\"image_id\":\"x\",\"gra").unwrap();
        assert_eq!(store.read_all().unwrap().len(), 2);
        assert!(store.append(&grade("x", "b", R, 3)).unwrap());
        assert_eq!(store.by_image().unwrap()["x"].len(), 3);
    }
}
