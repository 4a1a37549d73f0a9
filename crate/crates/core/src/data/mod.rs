//! Datasets: manifests, phrase lists, image loading and batch sampling.
//!
//! Training batches never carry captions. Evaluation items carry whatever
//! metadata the manifest provides.

pub mod fixture;
pub mod manifest;
pub mod phrases;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::preprocess::{normalize, to_unit_rgb};
use crate::error::{DuetError, Result};
pub use manifest::{DatasetManifest, LoadedManifest, PairEntry, PhotoRecord, Split};

/// Decodes and caches images as unit-range RGB buffers at one resolution.
#[derive(Debug)]
pub struct ImageStore {
    resolution: usize,
    dtype: DType,
    device: Device,
    cache: Mutex<HashMap<PathBuf, Arc<Vec<f32>>>>,
}

impl ImageStore {
    pub fn new(resolution: usize, dtype: DType, device: &Device) -> Self {
        Self {
            resolution,
            dtype,
            device: device.clone(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// `(3, r, r)` values in `[0, 1]`.
    pub fn unit(&self, path: &Path) -> Result<Arc<Vec<f32>>> {
        if let Some(hit) = self.cache.lock().expect("image cache").get(path) {
            return Ok(hit.clone());
        }
        let img = image::open(path).map_err(|e| DuetError::load(path, e))?;
        let data = Arc::new(to_unit_rgb(&img, self.resolution));
        self.cache
            .lock()
            .expect("image cache")
            .insert(path.to_path_buf(), data.clone());
        Ok(data)
    }

    fn stack(&self, buffers: Vec<Vec<f32>>) -> Result<Tensor> {
        let r = self.resolution;
        let b = buffers.len();
        let flat: Vec<f32> = buffers.into_iter().flatten().collect();
        Ok(Tensor::from_vec(flat, (b, 3, r, r), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Normalized model inputs, `(B, 3, r, r)`.
    pub fn model_batch(&self, paths: &[&Path]) -> Result<Tensor> {
        let bufs = paths
            .iter()
            .map(|p| Ok(normalize(&self.unit(p)?, self.resolution)))
            .collect::<Result<Vec<_>>>()?;
        self.stack(bufs)
    }

    /// Unit-range pixels, `(B, 3, r, r)`.
    pub fn pixel_batch(&self, paths: &[&Path]) -> Result<Tensor> {
        let bufs = paths
            .iter()
            .map(|p| Ok(self.unit(p)?.as_ref().clone()))
            .collect::<Result<Vec<_>>>()?;
        self.stack(bufs)
    }
}

/// Paths and photo identities of one training triplet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub pair_id: String,
    pub sketch: PathBuf,
    pub positive: PathBuf,
    pub positive_id: String,
    pub negative: PathBuf,
    pub negative_id: String,
}

/// Model-ready tensors for a list of triplets.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub triplets: Vec<Triplet>,
    pub sketches: Tensor,
    pub positives: Tensor,
    pub negatives: Tensor,
    /// Positive photos in `[0, 1]` for the reconstruction loss.
    pub positive_pixels: Tensor,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// An evaluation query with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub pair_id: String,
    pub sketch: PathBuf,
    pub photo_id: String,
    pub caption: Option<String>,
    pub class_label: Option<String>,
    pub domain_label: Option<String>,
    pub query_objects: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
struct TrainPair {
    id: String,
    sketch: PathBuf,
    photo: PathBuf,
    photo_id: String,
}

/// Loaded dataset serving caption-free training triplets and captioned
/// evaluation items.
#[derive(Debug)]
pub struct PairDataset {
    loaded: LoadedManifest,
    train: Vec<TrainPair>,
    /// Distinct training photos, used as the negative pool.
    photos: Vec<(String, PathBuf)>,
    store: ImageStore,
}

impl PairDataset {
    pub fn open(path: &Path, resolution: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self::from_loaded(
            DatasetManifest::load(path)?,
            ImageStore::new(resolution, dtype, device),
        ))
    }

    pub fn from_loaded(loaded: LoadedManifest, store: ImageStore) -> Self {
        let root = loaded.root.clone();
        let train: Vec<TrainPair> = loaded
            .manifest
            .pairs_in(Split::Train)
            .map(|p| TrainPair {
                id: p.id.clone(),
                sketch: root.join(&p.sketch),
                photo: root.join(&p.photo),
                photo_id: p.photo_identity().to_string(),
            })
            .collect();
        let mut photos: Vec<(String, PathBuf)> = Vec::new();
        for p in &train {
            if !photos.iter().any(|(id, _)| *id == p.photo_id) {
                photos.push((p.photo_id.clone(), p.photo.clone()));
            }
        }
        Self {
            loaded,
            train,
            photos,
            store,
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.loaded.manifest
    }

    pub fn root(&self) -> &Path {
        &self.loaded.root
    }

    pub fn store(&self) -> &ImageStore {
        &self.store
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    fn triplet<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> Result<Triplet> {
        let pair = &self.train[index];
        if self.photos.len() < 2 {
            return Err(DuetError::Validation(
                "training split needs at least two distinct photos for negatives".into(),
            ));
        }
        let negative = loop {
            let cand = &self.photos[rng.random_range(0..self.photos.len())];
            if cand.0 != pair.photo_id {
                break cand;
            }
        };
        Ok(Triplet {
            pair_id: pair.id.clone(),
            sketch: pair.sketch.clone(),
            positive: pair.photo.clone(),
            positive_id: pair.photo_id.clone(),
            negative: negative.1.clone(),
            negative_id: negative.0.clone(),
        })
    }

    fn ensure_train(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(DuetError::Validation("training split is empty".into()));
        }
        Ok(())
    }

    /// `b` triplets drawn under `seed`. Pairs are drawn without replacement
    /// unless `b` exceeds the training split.
    pub fn train_triplets(&self, b: usize, seed: u64) -> Result<Vec<Triplet>> {
        self.ensure_train()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices: Vec<usize> = if b > self.train.len() {
            log::warn!(
                "batch size {b} exceeds {} training pairs, sampling with replacement",
                self.train.len()
            );
            (0..b)
                .map(|_| rng.random_range(0..self.train.len()))
                .collect()
        } else {
            let mut all: Vec<usize> = (0..self.train.len()).collect();
            all.shuffle(&mut rng);
            all.truncate(b);
            all
        };
        indices
            .into_iter()
            .map(|i| self.triplet(i, &mut rng))
            .collect()
    }

    pub fn train_batch(&self, b: usize, seed: u64) -> Result<TrainBatch> {
        let triplets = self.train_triplets(b, seed)?;
        self.load_batch(triplets)
    }

    /// One epoch as a list of batches: a seeded permutation of the training
    /// pairs cut into chunks of `b`, negatives resampled per epoch. A
    /// batch size above the split size yields one batch sampled with
    /// replacement.
    pub fn epoch(&self, b: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<Triplet>>> {
        self.ensure_train()?;
        if b == 0 {
            return Err(DuetError::Config("batch size must be positive".into()));
        }
        let epoch_seed = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        if b > self.train.len() {
            return Ok(vec![self.train_triplets(b, epoch_seed)?]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        order
            .chunks(b)
            .map(|chunk| chunk.iter().map(|&i| self.triplet(i, &mut rng)).collect())
            .collect()
    }

    pub fn load_batch(&self, triplets: Vec<Triplet>) -> Result<TrainBatch> {
        let sketches: Vec<&Path> = triplets.iter().map(|t| t.sketch.as_path()).collect();
        let positives: Vec<&Path> = triplets.iter().map(|t| t.positive.as_path()).collect();
        let negatives: Vec<&Path> = triplets.iter().map(|t| t.negative.as_path()).collect();
        Ok(TrainBatch {
            sketches: self.store.model_batch(&sketches)?,
            positives: self.store.model_batch(&positives)?,
            negatives: self.store.model_batch(&negatives)?,
            positive_pixels: self.store.pixel_batch(&positives)?,
            triplets,
        })
    }

    /// Evaluation items of `split`, in manifest order.
    pub fn eval_items(&self, split: Split) -> Vec<EvalItem> {
        self.manifest()
            .pairs_in(split)
            .map(|p| EvalItem {
                pair_id: p.id.clone(),
                sketch: self.root().join(&p.sketch),
                photo_id: p.photo_identity().to_string(),
                caption: p.caption.clone(),
                class_label: p.class_label.clone(),
                domain_label: p.domain_label.clone(),
                query_objects: p.query_objects.clone(),
            })
            .collect()
    }

    /// Retrieval candidates for evaluating `split`.
    pub fn gallery(&self, split: Split) -> Vec<PhotoRecord> {
        self.manifest().gallery_photos(self.root(), split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn fixture_dir() -> &'static Path {
        static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
        DIR.get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            fixture::write_shapes_fixture(dir.path()).unwrap();
            dir
        })
        .path()
    }

    fn dataset() -> PairDataset {
        PairDataset::open(
            &fixture_dir().join("manifest.json"),
            16,
            DType::F32,
            &Device::Cpu,
        )
        .unwrap()
    }

    #[test]
    fn fixture_manifest_loads_with_expected_splits() {
        let ds = dataset();
        assert_eq!(ds.train_len(), 32);
        assert_eq!(ds.eval_items(Split::Test).len(), 8);
        assert!(ds
            .eval_items(Split::Test)
            .iter()
            .all(|e| e.caption.is_some()));
        // a few training pairs carry captions; loading is unaffected
        assert!(ds
            .manifest()
            .pairs_in(Split::Train)
            .any(|p| p.caption.is_some()));
    }

    #[test]
    fn batches_are_deterministic_and_negatives_differ() {
        let ds = dataset();
        let a = ds.train_triplets(8, 3).unwrap();
        let b = ds.train_triplets(8, 3).unwrap();
        assert_eq!(a, b);
        for e in 0..5 {
            for batch in ds.epoch(8, 1, e).unwrap() {
                for t in batch {
                    assert_ne!(t.positive_id, t.negative_id);
                }
            }
        }
        let batch = ds.load_batch(a).unwrap();
        assert_eq!(batch.sketches.dims(), &[8, 3, 16, 16]);
        let px = batch
            .positive_pixels
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn epoch_covers_each_pair_once() {
        let ds = dataset();
        let batches = ds.epoch(5, 9, 2).unwrap();
        assert_eq!(batches.len(), 7);
        let mut ids: Vec<String> = batches.into_iter().flatten().map(|t| t.pair_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 32);
        assert_ne!(ds.epoch(5, 9, 2).unwrap(), ds.epoch(5, 9, 3).unwrap());
    }

    #[test]
    fn oversized_batch_samples_with_replacement() {
        let ds = dataset();
        assert_eq!(ds.train_triplets(100, 0).unwrap().len(), 100);
    }

    #[test]
    fn image_loading_is_idempotent() {
        let ds = dataset();
        let p = fixture_dir().join("photos/train_000.png");
        let store = ImageStore::new(16, DType::F32, &Device::Cpu);
        let a = store
            .model_batch(&[&p])
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let b = ds
            .store()
            .model_batch(&[&p])
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ambiguous_gallery_holds_every_color_variant() {
        let ds = PairDataset::open(
            &fixture_dir().join("ambiguous.json"),
            16,
            DType::F32,
            &Device::Cpu,
        )
        .unwrap();
        assert_eq!(ds.gallery(Split::Test).len(), 256);
        assert_eq!(ds.eval_items(Split::Test).len(), 32);
    }
}
