//! Gallery index: unit-normalized photo features with exhaustive cosine
//! search, plus the Acc@q and r@q metrics.
//!
//! On disk an index is a directory holding `features.bin` (row-major
//! little-endian `f32`, `N × d`) and `index.json` (ids, metadata,
//! dimensions, fingerprint).

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PhotoRecord;
use crate::error::{DuetError, Result};
use crate::model::DuetModel;
use crate::nn::hex;

pub const INDEX_FORMAT_VERSION: u32 = 1;
const FEATURES_FILE: &str = "features.bin";
const SIDECAR_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotoMeta {
    pub id: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<String>>,
}

impl From<&PhotoRecord> for PhotoMeta {
    fn from(r: &PhotoRecord) -> Self {
        Self {
            id: r.id.clone(),
            path: r.path.clone(),
            class_label: r.class_label.clone(),
            domain_label: r.domain_label.clone(),
            objects: r.objects.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub id: String,
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    fingerprint: String,
    backbone_id: String,
    rows: usize,
    dim: usize,
    photos: Vec<PhotoMeta>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    skipped: Vec<SkippedImage>,
    /// Checkpoint directory the features were computed with, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
}

/// What a result was computed for.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEcho {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connector: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ids: Vec<String>,
    pub scores: Vec<f32>,
    pub query: QueryEcho,
}

impl RetrievalResult {
    /// 1-based rank of `id`, if retrieved.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    sidecar: Sidecar,
    features: Vec<f32>,
    positions: HashMap<String, usize>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Orders `(id, score)` pairs by descending score, ties by ascending id.
pub fn rank(scored: &mut [(&str, f32)]) {
    // `+ 0.0` folds -0.0 into 0.0, which `total_cmp` would otherwise split.
    scored.sort_by(|a, b| {
        (b.1 + 0.0)
            .total_cmp(&(a.1 + 0.0))
            .then_with(|| a.0.cmp(b.0))
    });
}

impl GalleryIndex {
    /// Builds from raw rows, normalizing each to unit length.
    pub fn from_rows(
        photos: Vec<PhotoMeta>,
        rows: Vec<Vec<f32>>,
        fingerprint: &str,
        backbone_id: &str,
    ) -> Result<Self> {
        if photos.len() != rows.len() {
            return Err(DuetError::shape(
                format!("{} rows", photos.len()),
                rows.len(),
            ));
        }
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut features = Vec::with_capacity(rows.len() * dim);
        for (meta, row) in photos.iter().zip(&rows) {
            if row.len() != dim {
                return Err(DuetError::shape(format!("width {dim}"), row.len()));
            }
            let norm = row
                .iter()
                .map(|v| (*v as f64) * (*v as f64))
                .sum::<f64>()
                .sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(DuetError::Input(format!(
                    "feature of {} has norm {norm}",
                    meta.id
                )));
            }
            features.extend(row.iter().map(|v| (*v as f64 / norm) as f32));
        }
        Self::assemble(
            Sidecar {
                format_version: INDEX_FORMAT_VERSION,
                fingerprint: fingerprint.to_string(),
                backbone_id: backbone_id.to_string(),
                rows: photos.len(),
                dim,
                photos,
                skipped: Vec::new(),
                checkpoint: None,
            },
            features,
        )
    }

    fn assemble(sidecar: Sidecar, features: Vec<f32>) -> Result<Self> {
        if features.len() != sidecar.rows * sidecar.dim {
            return Err(DuetError::shape(
                format!("{} x {} features", sidecar.rows, sidecar.dim),
                features.len(),
            ));
        }
        let mut positions = HashMap::new();
        for (i, p) in sidecar.photos.iter().enumerate() {
            if positions.insert(p.id.clone(), i).is_some() {
                return Err(DuetError::Validation(format!(
                    "duplicate photo id {} in index",
                    p.id
                )));
            }
        }
        Ok(Self {
            sidecar,
            features,
            positions,
        })
    }

    /// Encodes every photo once. Unreadable images are skipped and listed
    /// in [`skipped`](Self::skipped).
    pub fn build(model: &DuetModel, photos: &[PhotoRecord], batch_size: usize) -> Result<Self> {
        let mut kept = Vec::new();
        let mut tensors = Vec::new();
        let mut skipped = Vec::new();
        for p in photos {
            match image::open(&p.path)
                .map_err(DuetError::from)
                .and_then(|img| model.image_tensor(&img))
            {
                Ok(t) => {
                    kept.push(PhotoMeta::from(p));
                    tensors.push(t);
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", p.path.display());
                    skipped.push(SkippedImage {
                        id: p.id.clone(),
                        path: p.path.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        let mut rows = Vec::with_capacity(kept.len());
        for chunk in tensors.chunks(batch_size.max(1)) {
            let feats = model
                .encode_gallery(&candle_core::Tensor::stack(chunk, 0)?)?
                .to_dtype(candle_core::DType::F32)?
                .to_vec2::<f32>()?;
            rows.extend(feats);
        }
        let mut index = Self::from_rows(
            kept,
            rows,
            &model.fingerprint()?,
            &model.encoder().config().backbone_id,
        )?;
        index.sidecar.skipped = skipped;
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.sidecar.rows
    }

    pub fn is_empty(&self) -> bool {
        self.sidecar.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.sidecar.dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.sidecar.fingerprint
    }

    pub fn backbone_id(&self) -> &str {
        &self.sidecar.backbone_id
    }

    pub fn photos(&self) -> &[PhotoMeta] {
        &self.sidecar.photos
    }

    pub fn checkpoint(&self) -> Option<&Path> {
        self.sidecar.checkpoint.as_deref()
    }

    /// Records the checkpoint directory the index was built from.
    pub fn set_checkpoint(&mut self, dir: &Path) {
        self.sidecar.checkpoint = Some(dir.to_path_buf());
    }

    pub fn skipped(&self) -> &[SkippedImage] {
        &self.sidecar.skipped
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.sidecar.photos.iter().map(|p| p.id.as_str())
    }

    pub fn photo(&self, id: &str) -> Option<&PhotoMeta> {
        self.positions.get(id).map(|&i| &self.sidecar.photos[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.sidecar.dim;
        &self.features[i * d..(i + 1) * d]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn check_fingerprint(&self, model_fingerprint: &str) -> Result<()> {
        if self.sidecar.fingerprint != model_fingerprint {
            return Err(DuetError::Fingerprint {
                index: self.sidecar.fingerprint.clone(),
                checkpoint: model_fingerprint.to_string(),
            });
        }
        Ok(())
    }

    /// Top-`k` rows by cosine similarity with a unit query vector.
    pub fn query_vector(
        &self,
        query: &[f32],
        k: usize,
        echo: QueryEcho,
    ) -> Result<RetrievalResult> {
        if query.len() != self.dim() {
            return Err(DuetError::shape(
                format!("query width {}", self.dim()),
                query.len(),
            ));
        }
        if k > self.len() {
            log::warn!("k = {k} exceeds gallery size {}, returning all", self.len());
        }
        let mut scored: Vec<(&str, f32)> = (0..self.len())
            .map(|i| {
                let s = self
                    .row(i)
                    .iter()
                    .zip(query)
                    .map(|(a, b)| a * b)
                    .sum::<f32>();
                (self.sidecar.photos[i].id.as_str(), s)
            })
            .collect();
        rank(&mut scored);
        scored.truncate(k);
        Ok(RetrievalResult {
            ids: scored.iter().map(|(id, _)| id.to_string()).collect(),
            scores: scored.iter().map(|(_, s)| *s).collect(),
            query: echo,
        })
    }

    /// Full query path: fingerprint check, composed query, ranking.
    pub fn search(
        &self,
        model: &DuetModel,
        sketch: &image::DynamicImage,
        text: Option<&str>,
        connector: Option<&str>,
        k: usize,
    ) -> Result<RetrievalResult> {
        self.check_fingerprint(&model.fingerprint()?)?;
        let q = model
            .build_inference_query(sketch, text, connector)?
            .to_dtype(candle_core::DType::F32)?
            .to_vec1::<f32>()?;
        let echo = QueryEcho {
            sketch_sha256: Some(sha256_hex(sketch.as_bytes())),
            text: text.map(str::to_string),
            connector: connector.map(str::to_string),
        };
        self.query_vector(&q, k, echo)
    }

    /// Writes the index to `dir` via a temporary sibling and a rename.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = sibling(dir, "tmp");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        let bytes: Vec<u8> = self.features.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(tmp.join(FEATURES_FILE), bytes)?;
        std::fs::write(
            tmp.join(SIDECAR_FILE),
            serde_json::to_string_pretty(&self.sidecar)?,
        )?;
        publish_dir(&tmp, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar_path = dir.join(SIDECAR_FILE);
        let sidecar: Sidecar = serde_json::from_str(
            &std::fs::read_to_string(&sidecar_path)
                .map_err(|e| DuetError::load(&sidecar_path, e))?,
        )?;
        if sidecar.format_version != INDEX_FORMAT_VERSION {
            return Err(DuetError::load(
                &sidecar_path,
                format!("unsupported index format {}", sidecar.format_version),
            ));
        }
        let features_path = dir.join(FEATURES_FILE);
        let bytes =
            std::fs::read(&features_path).map_err(|e| DuetError::load(&features_path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(DuetError::load(
                &features_path,
                "length is not a multiple of 4",
            ));
        }
        let features = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::assemble(sidecar, features)
    }
}

pub(crate) fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// Replaces `dest` with the fully written directory `tmp`.
pub(crate) fn publish_dir(tmp: &Path, dest: &Path) -> Result<()> {
    if let Some(parent) = dest.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    if dest.exists() {
        let old = sibling(dest, "old");
        if old.exists() {
            std::fs::remove_dir_all(&old)?;
        }
        std::fs::rename(dest, &old)?;
        std::fs::rename(tmp, dest)?;
        std::fs::remove_dir_all(&old)?;
    } else {
        std::fs::rename(tmp, dest)?;
    }
    Ok(())
}

/// Percentage of queries whose truth id is within the top `q`.
pub fn acc_at_q(results: &[RetrievalResult], truths: &[&str], q: usize) -> Result<f64> {
    if results.len() != truths.len() {
        return Err(DuetError::shape(
            format!("{} truths", results.len()),
            truths.len(),
        ));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let hits = results
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.rank_of(t).is_some_and(|rank| rank <= q))
        .count();
    Ok(100.0 * hits as f64 / results.len() as f64)
}

/// Like [`acc_at_q`], warning about truths that the gallery lacks.
pub fn acc_at_q_checked(
    index: &GalleryIndex,
    results: &[RetrievalResult],
    truths: &[&str],
    q: usize,
) -> Result<f64> {
    for t in truths {
        if !index.contains(t) {
            log::warn!("truth {t} is not in the gallery; counted as a miss");
        }
    }
    acc_at_q(results, truths, q)
}

/// Mean over queries of `|top-q ∩ relevant| / |relevant|`. Queries with
/// an empty relevance set are excluded with a warning.
pub fn recall_at_q(
    results: &[RetrievalResult],
    relevance: &[HashSet<String>],
    q: usize,
) -> Result<f64> {
    if results.len() != relevance.len() {
        return Err(DuetError::shape(
            format!("{} relevance sets", results.len()),
            relevance.len(),
        ));
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (i, (r, rel)) in results.iter().zip(relevance).enumerate() {
        if rel.is_empty() {
            log::warn!("query {i} has no relevant items; excluded from recall");
            continue;
        }
        let found = r.ids.iter().take(q).filter(|id| rel.contains(*id)).count();
        sum += found as f64 / rel.len() as f64;
        counted += 1;
    }
    Ok(if counted == 0 {
        0.0
    } else {
        sum / counted as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_zero_scores_tie_on_id() {
        let mut scored = vec![("b", 0.0f32), ("a", -0.0), ("c", 0.5)];
        rank(&mut scored);
        let ids: Vec<&str> = scored.iter().map(|(id, _)| *id).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    fn meta(id: &str) -> PhotoMeta {
        PhotoMeta {
            id: id.into(),
            path: format!("{id}.png").into(),
            class_label: None,
            domain_label: None,
            objects: None,
        }
    }

    fn small() -> GalleryIndex {
        GalleryIndex::from_rows(
            vec![meta("c"), meta("a"), meta("b")],
            vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 5.0]],
            "fp",
            "test",
        )
        .unwrap()
    }

    #[test]
    fn rows_are_unit_and_ties_break_by_id() {
        let idx = small();
        for i in 0..idx.len() {
            let n: f32 = idx.row(i).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        let r = idx
            .query_vector(&[0.0, 1.0], 3, QueryEcho::default())
            .unwrap();
        assert_eq!(r.ids, vec!["a", "b", "c"]);
        assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        assert!(idx
            .query_vector(&[0.0, 1.0], 0, QueryEcho::default())
            .unwrap()
            .ids
            .is_empty());
        assert_eq!(
            idx.query_vector(&[1.0, 0.0], 10, QueryEcho::default())
                .unwrap()
                .ids
                .len(),
            3
        );
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("idx");
        let idx = small();
        idx.save(&out).unwrap();
        idx.save(&out).unwrap();
        assert_eq!(GalleryIndex::load(&out).unwrap(), idx);
    }

    #[test]
    fn duplicate_ids_and_fingerprint_mismatch_are_errors() {
        assert!(GalleryIndex::from_rows(
            vec![meta("a"), meta("a")],
            vec![vec![1.0], vec![2.0]],
            "f",
            "t"
        )
        .is_err());
        assert!(matches!(
            small().check_fingerprint("other"),
            Err(DuetError::Fingerprint { .. })
        ));
    }

    #[test]
    fn metrics_by_hand() {
        let r = RetrievalResult {
            ids: vec!["x".into(), "y".into(), "z".into(), "w".into()],
            scores: vec![4.0, 3.0, 2.0, 1.0],
            query: QueryEcho::default(),
        };
        assert_eq!(acc_at_q(std::slice::from_ref(&r), &["z"], 2).unwrap(), 0.0);
        assert_eq!(
            acc_at_q(std::slice::from_ref(&r), &["z"], 3).unwrap(),
            100.0
        );
        assert_eq!(
            acc_at_q(std::slice::from_ref(&r), &["nope"], 4).unwrap(),
            0.0
        );
        let rel: HashSet<String> = ["x", "z", "q1", "q2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            recall_at_q(std::slice::from_ref(&r), &[rel], 3).unwrap(),
            0.5
        );
        assert_eq!(recall_at_q(&[r], &[HashSet::new()], 3).unwrap(), 0.0);
    }
}
