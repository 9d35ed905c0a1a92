//! Discovery, integrity checking and cleaning of the two-class image corpus.
//!
//! Expected layout: `root/{train,test}/{infected,notinfected}/**/*.{png,jpg,jpeg,bmp}`.
//! The `noninfected` spelling is accepted for the negative class folder.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::label::{ClassLabel, Split};

/// File extensions treated as images (compared case-insensitively).
pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Folder under the corpus root that receives quarantined files.
pub const QUARANTINE_DIR: &str = "_quarantine";

/// Default size of the integrity-check worker pool.
pub const DEFAULT_WORKERS: usize = 2;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("required split folder is missing: {0}")]
    MissingSplit(PathBuf),
    #[error("required class folder is missing: {0}")]
    MissingClass(PathBuf),
    #[error("class folder contains no images: {0}")]
    EmptyClass(PathBuf),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest (de)serialization failed: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

impl IngestError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        IngestError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Valid,
    Corrupted,
    Unreadable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Path relative to the manifest root.
    #[serde(with = "slash_path")]
    pub path: PathBuf,
    pub label: ClassLabel,
    pub split: Split,
    pub status: RecordStatus,
}

impl ImageRecord {
    /// Stable identifier used in logit dumps: the forward-slash relative path.
    pub fn id(&self) -> String {
        slash_path::to_slash(&self.path)
    }

    pub fn is_valid(&self) -> bool {
        self.status == RecordStatus::Valid
    }
}

pub type ClassCounts = BTreeMap<Split, BTreeMap<ClassLabel, usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub generated_at: String,
    pub counts: ClassCounts,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, mut records: Vec<ImageRecord>) -> Self {
        records.sort_by(|a, b| a.path.cmp(&b.path));
        let mut manifest = DatasetManifest {
            root: root.into(),
            generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            counts: ClassCounts::new(),
            records,
        };
        manifest.recompute_counts();
        manifest
    }

    pub fn recompute_counts(&mut self) {
        let mut counts = ClassCounts::new();
        for split in Split::ALL {
            let per_class = counts.entry(split).or_default();
            for label in ClassLabel::ALL {
                per_class.insert(label, 0);
            }
        }
        for record in self.records.iter().filter(|r| r.is_valid()) {
            *counts
                .get_mut(&record.split)
                .and_then(|m| m.get_mut(&record.label))
                .expect("all cells initialized") += 1;
        }
        self.counts = counts;
    }

    pub fn count(&self, split: Split, label: ClassLabel) -> usize {
        self.counts
            .get(&split)
            .and_then(|m| m.get(&label))
            .copied()
            .unwrap_or(0)
    }

    pub fn total_valid(&self) -> usize {
        self.counts.values().flat_map(|m| m.values()).sum()
    }

    /// Valid records of one split, in manifest order.
    pub fn valid_records(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records
            .iter()
            .filter(move |r| r.split == split && r.is_valid())
    }

    pub fn flagged_records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| !r.is_valid())
    }

    pub fn absolute_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn find(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id() == id)
    }

    pub fn to_json(&self) -> Result<String, IngestError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        fs::write(path, self.to_json()?).map_err(|e| IngestError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(crate) mod slash_path {
    use std::path::{Path, PathBuf};

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn to_slash(path: &Path) -> String {
        path.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn serialize<S: Serializer>(path: &Path, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&to_slash(path))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<PathBuf, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.split('/').collect())
    }
}

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn find_child_dir(parent: &Path, matches: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>, IngestError> {
    let mut found = Vec::new();
    for entry in fs::read_dir(parent).map_err(|e| IngestError::io(parent, e))? {
        let entry = entry.map_err(|e| IngestError::io(parent, e))?;
        let path = entry.path();
        if path.is_dir() && entry.file_name().to_str().is_some_and(&matches) {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

/// Builds the manifest for `root` using the default worker pool size.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest, IngestError> {
    scan_dataset_with_workers(root, DEFAULT_WORKERS)
}

pub fn scan_dataset_with_workers(root: &Path, workers: usize) -> Result<DatasetManifest, IngestError> {
    let mut records = Vec::new();
    for split in Split::ALL {
        let split_dir = find_child_dir(root, |n| n == split.as_str())?
            .into_iter()
            .next()
            .ok_or_else(|| IngestError::MissingSplit(root.join(split.as_str())))?;
        for label in ClassLabel::ALL {
            let class_dirs =
                find_child_dir(&split_dir, |n| ClassLabel::from_folder_name(n) == Some(label))?;
            if class_dirs.is_empty() {
                return Err(IngestError::MissingClass(split_dir.join(label.as_str())));
            }
            let before = records.len();
            for class_dir in &class_dirs {
                for entry in WalkDir::new(class_dir).sort_by_file_name() {
                    let entry = entry.map_err(|e| {
                        let path = e.path().unwrap_or(class_dir).to_path_buf();
                        IngestError::io(path, e.into())
                    })?;
                    if !entry.file_type().is_file() {
                        continue;
                    }
                    if !is_image_path(entry.path()) {
                        log::warn!("ignoring non-image file {}", entry.path().display());
                        continue;
                    }
                    let relative = entry
                        .path()
                        .strip_prefix(root)
                        .expect("walk stays under root")
                        .to_path_buf();
                    records.push(ImageRecord {
                        path: relative,
                        label,
                        split,
                        status: RecordStatus::Valid,
                    });
                }
            }
            if records.len() == before {
                return Err(IngestError::EmptyClass(class_dirs[0].clone()));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| IngestError::Pool(e.to_string()))?;
    let records = pool.install(|| {
        records
            .into_par_iter()
            .map(|r| verify_integrity(root, r))
            .collect::<Vec<_>>()
    });
    for r in records.iter().filter(|r| !r.is_valid()) {
        log::warn!("{} flagged as {:?}", r.id(), r.status);
    }
    Ok(DatasetManifest::new(root, records))
}

/// Re-checks one record's file and returns it with its status updated.
pub fn verify_integrity(root: &Path, mut record: ImageRecord) -> ImageRecord {
    record.status = check_image_file(&root.join(&record.path));
    record
}

/// Fully decodes the file. Header-only checks are not enough: truncated payloads must fail.
pub fn check_image_file(path: &Path) -> RecordStatus {
    let bytes = match fs::read(path) {
        Ok(b) if !b.is_empty() => b,
        _ => return RecordStatus::Unreadable,
    };
    let format = match image::guess_format(&bytes) {
        Ok(f) => f,
        Err(_) => return RecordStatus::Unreadable,
    };
    // The JPEG decoder tolerates missing scan data; a truncated file lacks the EOI marker.
    if format == image::ImageFormat::Jpeg && !has_jpeg_end_marker(&bytes) {
        return RecordStatus::Corrupted;
    }
    match image::load_from_memory_with_format(&bytes, format) {
        Ok(_) => RecordStatus::Valid,
        Err(image::ImageError::Unsupported(_)) => RecordStatus::Unreadable,
        Err(_) => RecordStatus::Corrupted,
    }
}

fn has_jpeg_end_marker(bytes: &[u8]) -> bool {
    let end = bytes
        .iter()
        .rposition(|&b| b != 0)
        .map(|i| i + 1)
        .unwrap_or(0);
    end >= 2 && bytes[end - 2..end] == [0xFF, 0xD9]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanMode {
    DryRun,
    #[default]
    Quarantine,
    Delete,
}

impl std::str::FromStr for CleanMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "dry_run" => Ok(CleanMode::DryRun),
            "quarantine" => Ok(CleanMode::Quarantine),
            "delete" => Ok(CleanMode::Delete),
            _ => Err(format!("unknown clean mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanEntry {
    #[serde(with = "slash_path")]
    pub path: PathBuf,
    pub reason: RecordStatus,
    /// Where the file went; `None` for dry runs and deletions.
    pub moved_to: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub mode: CleanMode,
    pub removed: usize,
    pub entries: Vec<CleanEntry>,
}

/// Removes flagged records from disk (per `mode`) and from the manifest.
///
/// On a filesystem failure the manifest still reflects every file already handled.
pub fn clean_dataset(manifest: &mut DatasetManifest, mode: CleanMode) -> Result<CleanReport, IngestError> {
    let flagged: Vec<ImageRecord> = manifest.flagged_records().cloned().collect();
    let mut report = CleanReport {
        mode,
        removed: 0,
        entries: Vec::with_capacity(flagged.len()),
    };
    if mode == CleanMode::DryRun {
        report.entries = flagged
            .into_iter()
            .map(|r| CleanEntry {
                path: r.path,
                reason: r.status,
                moved_to: None,
            })
            .collect();
        return Ok(report);
    }

    let mut handled = Vec::new();
    let mut failure = None;
    for record in flagged {
        let source = manifest.absolute_path(&record);
        let outcome = match mode {
            CleanMode::Quarantine => {
                let dest = manifest.root.join(QUARANTINE_DIR).join(&record.path);
                quarantine_file(&source, &dest).map(|_| Some(dest))
            }
            CleanMode::Delete => fs::remove_file(&source)
                .map(|_| None)
                .map_err(|e| IngestError::io(&source, e)),
            CleanMode::DryRun => unreachable!(),
        };
        match outcome {
            Ok(moved_to) => {
                log::info!("{:?} {} ({:?})", mode, record.id(), record.status);
                handled.push(record.path.clone());
                report.entries.push(CleanEntry {
                    path: record.path,
                    reason: record.status,
                    moved_to,
                });
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    report.removed = handled.len();
    manifest.records.retain(|r| !handled.contains(&r.path));
    manifest.recompute_counts();
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

fn quarantine_file(source: &Path, dest: &Path) -> Result<(), IngestError> {
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent).map_err(|e| IngestError::io(parent, e))?;
    }
    fs::rename(source, dest).map_err(|e| IngestError::io(source, e))
}

/// Train records split into a fitting part and a held-out part.
#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub fit: Vec<ImageRecord>,
    pub holdout: Vec<ImageRecord>,
}

/// Reserves a seeded, class-stratified fraction of the valid train records.
///
/// Every class with at least two records contributes at least one held-out record
/// when `fraction > 0`. Both parts are returned in manifest order.
pub fn holdout_split(manifest: &DatasetManifest, fraction: f64, seed: u64) -> HoldoutSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = Vec::new();
    for label in ClassLabel::ALL {
        let mut ids: Vec<&ImageRecord> = manifest
            .valid_records(Split::Train)
            .filter(|r| r.label == label)
            .collect();
        ids.shuffle(&mut rng);
        let mut take = (ids.len() as f64 * fraction.clamp(0.0, 1.0)).round() as usize;
        if fraction > 0.0 && take == 0 && ids.len() >= 2 {
            take = 1;
        }
        held.extend(ids.into_iter().take(take).map(|r| r.path.clone()));
    }
    let (holdout, fit) = manifest
        .valid_records(Split::Train)
        .cloned()
        .partition(|r| held.contains(&r.path));
    HoldoutSplit { fit, holdout }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    fn write_png(path: &Path, seed: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        let img = GrayImage::from_fn(32, 24, |x, y| Luma([(x as u8).wrapping_mul(7) ^ (y as u8) ^ seed]));
        img.save(path).unwrap();
    }

    fn layout(root: &Path, per_class: usize, negative_name: &str) {
        for split in ["train", "test"] {
            for class in ["infected", negative_name] {
                for i in 0..per_class {
                    write_png(&root.join(split).join(class).join(format!("{i}.png")), i as u8);
                }
            }
        }
    }

    #[test]
    fn empty_root_is_missing_split() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_dataset(dir.path()), Err(IngestError::MissingSplit(_))));
    }

    #[test]
    fn missing_class_and_empty_class_name_the_folder() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), 1, "notinfected");
        fs::remove_dir_all(dir.path().join("test/infected")).unwrap();
        match scan_dataset(dir.path()) {
            Err(IngestError::MissingClass(p)) => assert!(p.ends_with("test/infected")),
            other => panic!("unexpected {other:?}"),
        }
        fs::create_dir_all(dir.path().join("test/infected")).unwrap();
        fs::write(dir.path().join("test/infected/readme.txt"), "x").unwrap();
        match scan_dataset(dir.path()) {
            Err(IngestError::EmptyClass(p)) => assert!(p.ends_with("test/infected")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn alias_folder_and_non_image_files() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), 3, "noninfected");
        fs::write(dir.path().join("train/infected/notes.txt"), "hello").unwrap();
        let m = scan_dataset(dir.path()).unwrap();
        for split in Split::ALL {
            for label in ClassLabel::ALL {
                assert_eq!(m.count(split, label), 3);
            }
        }
        assert_eq!(m.records.len(), 12);
        assert_eq!(m.total_valid(), 12);
    }

    #[test]
    fn integrity_statuses() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.png");
        write_png(&good, 1);
        assert_eq!(check_image_file(&good), RecordStatus::Valid);

        let empty = dir.path().join("empty.png");
        fs::write(&empty, b"").unwrap();
        assert_eq!(check_image_file(&empty), RecordStatus::Unreadable);

        let bytes = fs::read(&good).unwrap();
        let truncated = dir.path().join("trunc.png");
        fs::write(&truncated, &bytes[..bytes.len() * 6 / 10]).unwrap();
        assert_eq!(check_image_file(&truncated), RecordStatus::Corrupted);

        let garbage = dir.path().join("garbage.jpg");
        fs::write(&garbage, b"definitely not an image").unwrap();
        assert_eq!(check_image_file(&garbage), RecordStatus::Unreadable);

        assert_eq!(check_image_file(&dir.path().join("absent.png")), RecordStatus::Unreadable);
    }

    #[test]
    fn truncated_jpeg_is_corrupted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jpg");
        let img = image::RgbImage::from_fn(64, 64, |x, y| image::Rgb([x as u8 * 3, y as u8 * 2, 90]));
        img.save(&path).unwrap();
        assert_eq!(check_image_file(&path), RecordStatus::Valid);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() * 6 / 10]).unwrap();
        assert_eq!(check_image_file(&path), RecordStatus::Corrupted);
    }

    #[test]
    fn verify_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), 1, "notinfected");
        let m = scan_dataset(dir.path()).unwrap();
        for r in &m.records {
            let a = verify_integrity(dir.path(), r.clone());
            let b = verify_integrity(dir.path(), r.clone());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn manifest_json_uses_relative_slash_paths() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), 1, "notinfected");
        let m = scan_dataset(dir.path()).unwrap();
        let json: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(json["counts"]["train"]["infected"], 1);
        assert_eq!(json["records"][0]["path"], "test/infected/0.png");
        assert_eq!(json["records"][0]["status"], "valid");
        assert!(json["generated_at"].is_string());
        let back: DatasetManifest = serde_json::from_value(json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn clean_modes() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), 3, "notinfected");
        fs::write(dir.path().join("train/infected/bad1.png"), b"").unwrap();
        let good = fs::read(dir.path().join("test/notinfected/0.png")).unwrap();
        fs::write(dir.path().join("test/notinfected/bad2.png"), &good[..good.len() / 2]).unwrap();

        let mut m = scan_dataset(dir.path()).unwrap();
        assert_eq!(m.flagged_records().count(), 2);
        let before = m.clone();

        let report = clean_dataset(&mut m, CleanMode::DryRun).unwrap();
        assert_eq!(report.removed, 0);
        assert_eq!(report.entries.len(), 2);
        assert_eq!(m, before);
        assert!(dir.path().join("train/infected/bad1.png").exists());

        let report = clean_dataset(&mut m, CleanMode::Quarantine).unwrap();
        assert_eq!(report.removed, 2);
        assert!(dir.path().join("_quarantine/train/infected/bad1.png").exists());
        assert!(dir.path().join("_quarantine/test/notinfected/bad2.png").exists());
        assert!(!dir.path().join("train/infected/bad1.png").exists());
        assert_eq!(m.records.len(), before.records.len() - 2);
        assert_eq!(m.counts, before.counts);

        let rescanned = scan_dataset(dir.path()).unwrap();
        assert_eq!(rescanned.records.len(), before.records.len() - 2);
        assert_eq!(rescanned.counts, before.counts);

        let mut again = rescanned.clone();
        assert_eq!(clean_dataset(&mut again, CleanMode::Delete).unwrap().removed, 0);
    }

    #[test]
    fn delete_mode_removes_files() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), 2, "notinfected");
        let bad = dir.path().join("train/notinfected/zzz.bmp");
        fs::write(&bad, b"BM").unwrap();
        let mut m = scan_dataset(dir.path()).unwrap();
        let report = clean_dataset(&mut m, CleanMode::Delete).unwrap();
        assert_eq!(report.removed, 1);
        assert!(!bad.exists());
        assert!(m.flagged_records().next().is_none());
    }

    #[test]
    fn holdout_is_stratified_and_seeded() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), 10, "notinfected");
        let m = scan_dataset(dir.path()).unwrap();
        let a = holdout_split(&m, 0.1, 7);
        let b = holdout_split(&m, 0.1, 7);
        assert_eq!(a.holdout, b.holdout);
        assert_eq!(a.holdout.len(), 2);
        assert_eq!(a.fit.len(), 18);
        for label in ClassLabel::ALL {
            assert_eq!(a.holdout.iter().filter(|r| r.label == label).count(), 1);
        }
        assert!(a.fit.iter().all(|r| !a.holdout.contains(r)));
    }
}
