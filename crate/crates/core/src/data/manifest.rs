//! Declarative dataset manifest.
//!
//! A manifest is one JSON document listing sketch/photo pairs with relative
//! paths, a split per pair, and optional evaluation metadata (captions,
//! class and domain labels, object lists). Photos that belong to the
//! retrieval gallery without a paired sketch go in `extra_photos`.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "name": "shapes",
//!   "root": ".",
//!   "pairs": [
//!     { "id": "train-000", "sketch": "sketches/a.png", "photo": "photos/a.png",
//!       "split": "train" },
//!     { "id": "test-000", "sketch": "sketches/b.png", "photo": "photos/b.png",
//!       "caption": "red color", "class_label": "circle", "split": "test" }
//!   ]
//! }
//! ```
//!
//! `root` is resolved against the manifest's directory. A pair's photo
//! identity is `photo_id` when given, otherwise its photo path.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DuetError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub sketch: String,
    pub photo: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photo_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_label: Option<String>,
    /// Objects visible in the photo (scene protocol).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<String>>,
    /// Objects requested by the sketch plus caption (scene protocol).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_objects: Option<Vec<String>>,
    pub split: Split,
}

impl PairEntry {
    pub fn photo_identity(&self) -> &str {
        self.photo_id.as_deref().unwrap_or(&self.photo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraPhoto {
    pub id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub name: String,
    #[serde(default = "default_root")]
    pub root: PathBuf,
    pub pairs: Vec<PairEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_photos: Vec<ExtraPhoto>,
    /// Explicit retrieval candidates by photo id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gallery: Option<Vec<String>>,
}

fn default_root() -> PathBuf {
    PathBuf::from(".")
}

/// A gallery candidate with its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotoRecord {
    pub id: String,
    pub path: PathBuf,
    pub class_label: Option<String>,
    pub domain_label: Option<String>,
    pub objects: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub train_photos: usize,
    pub test_photos: usize,
    pub test_captions: usize,
}

/// A manifest whose paths have been resolved and checked.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: DatasetManifest,
    /// Absolute dataset root.
    pub root: PathBuf,
    pub stats: SplitStats,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(DuetError::Validation(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Loads, checks structure and file existence, and reports split sizes.
    pub fn load(path: &Path) -> Result<LoadedManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| DuetError::load(path, e))?;
        let manifest = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let root = base.join(&manifest.root);
        manifest.validate()?;
        for rel in manifest.referenced_files() {
            let full = root.join(rel);
            if !full.is_file() {
                return Err(DuetError::load(full, "referenced file does not exist"));
            }
        }
        let stats = manifest.stats();
        log::info!(
            "manifest {}: {} train pairs ({} photos), {} test pairs ({} photos, {} captioned)",
            manifest.name,
            stats.train_pairs,
            stats.train_photos,
            stats.test_pairs,
            stats.test_photos,
            stats.test_captions
        );
        Ok(LoadedManifest {
            manifest,
            root,
            stats,
        })
    }

    fn referenced_files(&self) -> impl Iterator<Item = &str> {
        self.pairs
            .iter()
            .flat_map(|p| [p.sketch.as_str(), p.photo.as_str()])
            .chain(self.extra_photos.iter().map(|e| e.path.as_str()))
    }

    /// Structural checks that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(DuetError::Validation("manifest lists no pairs".into()));
        }
        let mut ids = HashSet::new();
        for p in &self.pairs {
            if !ids.insert(p.id.as_str()) {
                return Err(DuetError::Validation(format!("duplicate pair id {}", p.id)));
            }
        }
        let train: HashSet<&str> = self.photos_in(Split::Train).collect();
        let test: HashSet<&str> = self.photos_in(Split::Test).collect();
        if let Some(shared) = train.intersection(&test).next() {
            return Err(DuetError::Validation(format!(
                "photo {shared} appears in both train and test splits"
            )));
        }
        let mut known: HashSet<&str> = train.union(&test).copied().collect();
        for e in &self.extra_photos {
            if !known.insert(e.id.as_str()) {
                return Err(DuetError::Validation(format!(
                    "duplicate photo id {}",
                    e.id
                )));
            }
        }
        if let Some(gallery) = &self.gallery {
            if let Some(unknown) = gallery.iter().find(|g| !known.contains(g.as_str())) {
                return Err(DuetError::Validation(format!(
                    "gallery lists unknown photo {unknown}"
                )));
            }
        }
        Ok(())
    }

    fn photos_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.pairs
            .iter()
            .filter(move |p| p.split == split)
            .map(PairEntry::photo_identity)
    }

    pub fn stats(&self) -> SplitStats {
        let count = |s: Split| self.pairs.iter().filter(|p| p.split == s).count();
        let photos = |s: Split| self.photos_in(s).collect::<BTreeSet<_>>().len();
        SplitStats {
            train_pairs: count(Split::Train),
            test_pairs: count(Split::Test),
            train_photos: photos(Split::Train),
            test_photos: photos(Split::Test),
            test_captions: self
                .pairs
                .iter()
                .filter(|p| p.split == Split::Test && p.caption.is_some())
                .count(),
        }
    }

    /// Canonical form: explicit photo ids and a sorted, deduplicated
    /// gallery. Serializing a loaded manifest yields this form.
    pub fn normalized(&self) -> Self {
        let mut m = self.clone();
        for p in &mut m.pairs {
            if p.photo_id.is_none() {
                p.photo_id = Some(p.photo.clone());
            }
        }
        if let Some(g) = &mut m.gallery {
            let set: BTreeSet<String> = g.drain(..).collect();
            g.extend(set);
        }
        m
    }

    pub fn pairs_in(&self, split: Split) -> impl Iterator<Item = &PairEntry> {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    /// Retrieval candidates: the explicit gallery list if present, otherwise
    /// every distinct photo of `split` plus all extra photos. Order is
    /// first appearance.
    pub fn gallery_photos(&self, root: &Path, split: Split) -> Vec<PhotoRecord> {
        let mut seen = HashSet::new();
        let mut all = Vec::new();
        for p in &self.pairs {
            if self.gallery.is_none() && p.split != split {
                continue;
            }
            if seen.insert(p.photo_identity().to_string()) {
                all.push(PhotoRecord {
                    id: p.photo_identity().to_string(),
                    path: root.join(&p.photo),
                    class_label: p.class_label.clone(),
                    domain_label: p.domain_label.clone(),
                    objects: p.objects.clone(),
                });
            }
        }
        for e in &self.extra_photos {
            if seen.insert(e.id.clone()) {
                all.push(PhotoRecord {
                    id: e.id.clone(),
                    path: root.join(&e.path),
                    class_label: e.class_label.clone(),
                    domain_label: e.domain_label.clone(),
                    objects: e.objects.clone(),
                });
            }
        }
        match &self.gallery {
            Some(list) => {
                let wanted: HashSet<&str> = list.iter().map(String::as_str).collect();
                all.retain(|r| wanted.contains(r.id.as_str()));
                all
            }
            None => all,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(id: &str, photo: &str, split: Split) -> PairEntry {
        PairEntry {
            id: id.into(),
            sketch: format!("{id}.png"),
            photo: photo.into(),
            photo_id: None,
            caption: None,
            class_label: None,
            domain_label: None,
            objects: None,
            query_objects: None,
            split,
        }
    }

    fn manifest(pairs: Vec<PairEntry>) -> DatasetManifest {
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            name: "t".into(),
            root: ".".into(),
            pairs,
            extra_photos: vec![],
            gallery: None,
        }
    }

    #[test]
    fn empty_pairs_fail_validation() {
        assert!(matches!(
            manifest(vec![]).validate(),
            Err(DuetError::Validation(_))
        ));
    }

    #[test]
    fn overlapping_splits_fail_validation() {
        let m = manifest(vec![
            pair("a", "p.png", Split::Train),
            pair("b", "p.png", Split::Test),
        ]);
        assert!(matches!(m.validate(), Err(DuetError::Validation(_))));
    }

    #[test]
    fn stats_count_splits_and_shared_photos() {
        let mut m = manifest(vec![
            pair("a", "p1.png", Split::Train),
            pair("b", "p1.png", Split::Train),
            pair("c", "p2.png", Split::Test),
        ]);
        m.pairs[2].caption = Some("red".into());
        m.validate().unwrap();
        let s = m.stats();
        assert_eq!(
            (s.train_pairs, s.train_photos, s.test_pairs, s.test_captions),
            (2, 1, 1, 1)
        );
    }

    #[test]
    fn unknown_schema_version_is_rejected() {
        let mut m = manifest(vec![pair("a", "p.png", Split::Train)]);
        m.schema_version = 99;
        assert!(DatasetManifest::parse(&m.to_json().unwrap()).is_err());
    }

    #[test]
    fn missing_file_reports_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(vec![pair("a", "nope.png", Split::Train)]);
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        match DatasetManifest::load(&path) {
            Err(DuetError::Load { path, .. }) => {
                assert!(path.ends_with("a.png") || path.ends_with("nope.png"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn explicit_gallery_filters_candidates() {
        let mut m = manifest(vec![
            pair("a", "p1.png", Split::Train),
            pair("b", "p2.png", Split::Test),
        ]);
        m.gallery = Some(vec!["p1.png".into()]);
        let g = m.gallery_photos(Path::new("/r"), Split::Test);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].id, "p1.png");
        m.gallery = Some(vec!["zzz".into()]);
        assert!(m.validate().is_err());
    }

    fn arb_pair() -> impl Strategy<Value = PairEntry> {
        (
            "[a-z]{1,6}",
            "[a-z]{1,6}",
            proptest::option::of("[a-z ]{1,12}"),
            proptest::option::of("[a-z]{1,5}"),
            any::<bool>(),
        )
            .prop_map(|(id, photo, caption, class_label, train)| PairEntry {
                id,
                sketch: "s.png".into(),
                photo: format!("{photo}.png"),
                photo_id: None,
                caption,
                class_label,
                domain_label: None,
                objects: None,
                query_objects: None,
                split: if train { Split::Train } else { Split::Test },
            })
    }

    proptest! {
        #[test]
        fn serialization_round_trips_to_normal_form(pairs in proptest::collection::vec(arb_pair(), 1..8)) {
            let m = manifest(pairs);
            let back = DatasetManifest::parse(&m.normalized().to_json().unwrap()).unwrap();
            prop_assert_eq!(back.normalized(), m.normalized());
            prop_assert_eq!(back.normalized().normalized(), back.normalized());
        }
    }
}
