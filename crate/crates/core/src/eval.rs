//! Evaluation protocols over a manifest split.
//!
//! * `fine_grained`: sketch + caption against the gallery, Acc@{1,5,10}.
//!   Without any captions this is the sketch-only probe.
//! * `scene`: sketch + caption, Acc@{1,5,10}; when every query lists its
//!   objects and every gallery photo lists its own, also r@{10,50} where a
//!   photo is relevant if it contains all queried objects.
//! * `domain_transfer`: sketch composed with `in <domain>`, r@{10,50}; a
//!   photo is relevant if both its class and domain match.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{EvalItem, PairDataset, Split};
use crate::error::{DuetError, Result};
use crate::index::{acc_at_q, recall_at_q, GalleryIndex, PhotoMeta, QueryEcho, RetrievalResult};
use crate::model::{l2_normalize, DuetModel};

const QUERY_BATCH: usize = 32;
const DUMP_TOP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    FineGrained,
    Scene,
    DomainTransfer,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FineGrained => "fine_grained",
            Self::Scene => "scene",
            Self::DomainTransfer => "domain_transfer",
        }
    }
}

impl FromStr for Protocol {
    type Err = DuetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine_grained" => Ok(Self::FineGrained),
            "scene" => Ok(Self::Scene),
            "domain_transfer" => Ok(Self::DomainTransfer),
            other => Err(DuetError::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

/// One query ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuery {
    pub pair_id: String,
    pub sketch: PathBuf,
    pub text: Option<String>,
    pub connector: Option<String>,
    pub truth: String,
    pub relevant: Option<HashSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub pair_id: String,
    pub truth: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub connector: Option<String>,
    /// 1-based rank of the true photo, absent if it is not in the gallery.
    pub rank: Option<usize>,
    pub top: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    /// `composed` or `sketch_only`.
    pub mode: String,
    pub queries: usize,
    pub gallery_size: usize,
    pub metrics: BTreeMap<String, f64>,
    pub per_query: Vec<QueryRecord>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn missing(protocol: Protocol, missing: Vec<String>) -> Result<()> {
    if missing.is_empty() {
        Ok(())
    } else {
        Err(DuetError::Protocol {
            protocol: protocol.as_str().to_string(),
            missing,
        })
    }
}

/// Builds the queries for `protocol`. `sketch_only` drops all text.
/// Returns the mode name and the queries.
pub fn prepare(
    protocol: Protocol,
    items: &[EvalItem],
    gallery: &[PhotoMeta],
    sketch_only: bool,
) -> Result<(String, Vec<PreparedQuery>)> {
    if items.is_empty() {
        return Err(DuetError::Validation(
            "no evaluation queries in this split".into(),
        ));
    }
    let plain = |it: &EvalItem| PreparedQuery {
        pair_id: it.pair_id.clone(),
        sketch: it.sketch.clone(),
        text: None,
        connector: None,
        truth: it.photo_id.clone(),
        relevant: None,
    };
    match protocol {
        Protocol::FineGrained => {
            let captioned = items.iter().filter(|i| i.caption.is_some()).count();
            if sketch_only || captioned == 0 {
                return Ok(("sketch_only".into(), items.iter().map(plain).collect()));
            }
            missing(
                protocol,
                items
                    .iter()
                    .filter(|i| i.caption.is_none())
                    .map(|i| format!("caption ({})", i.pair_id))
                    .collect(),
            )?;
            let queries = items
                .iter()
                .map(|it| PreparedQuery {
                    text: it.caption.clone(),
                    ..plain(it)
                })
                .collect();
            Ok(("composed".into(), queries))
        }
        Protocol::Scene => {
            let mut absent: Vec<String> = Vec::new();
            if !sketch_only {
                absent.extend(
                    items
                        .iter()
                        .filter(|i| i.caption.is_none())
                        .map(|i| format!("caption ({})", i.pair_id)),
                );
            }
            missing(protocol, absent)?;
            let with_objects = items.iter().all(|i| i.query_objects.is_some())
                && gallery.iter().all(|g| g.objects.is_some());
            let queries = items
                .iter()
                .map(|it| {
                    let relevant = with_objects.then(|| {
                        let wanted = it.query_objects.as_deref().unwrap_or_default();
                        gallery
                            .iter()
                            .filter(|g| {
                                let have = g.objects.as_deref().unwrap_or_default();
                                wanted.iter().all(|o| have.contains(o))
                            })
                            .map(|g| g.id.clone())
                            .collect()
                    });
                    PreparedQuery {
                        text: if sketch_only {
                            None
                        } else {
                            it.caption.clone()
                        },
                        relevant,
                        ..plain(it)
                    }
                })
                .collect();
            Ok((
                if sketch_only {
                    "sketch_only"
                } else {
                    "composed"
                }
                .into(),
                queries,
            ))
        }
        Protocol::DomainTransfer => {
            let mut absent: Vec<String> = Vec::new();
            for it in items {
                if it.class_label.is_none() {
                    absent.push(format!("class_label ({})", it.pair_id));
                }
                if it.domain_label.is_none() {
                    absent.push(format!("domain_label ({})", it.pair_id));
                }
            }
            for g in gallery {
                if g.class_label.is_none() {
                    absent.push(format!("class_label (gallery {})", g.id));
                }
                if g.domain_label.is_none() {
                    absent.push(format!("domain_label (gallery {})", g.id));
                }
            }
            missing(protocol, absent)?;
            let queries = items
                .iter()
                .map(|it| {
                    let relevant = gallery
                        .iter()
                        .filter(|g| {
                            g.class_label == it.class_label && g.domain_label == it.domain_label
                        })
                        .map(|g| g.id.clone())
                        .collect();
                    PreparedQuery {
                        text: if sketch_only {
                            None
                        } else {
                            it.domain_label.clone()
                        },
                        connector: (!sketch_only).then(|| "in".to_string()),
                        relevant: Some(relevant),
                        ..plain(it)
                    }
                })
                .collect();
            Ok((
                if sketch_only {
                    "sketch_only"
                } else {
                    "composed"
                }
                .into(),
                queries,
            ))
        }
    }
}

/// Unit-normalized query features, computed in batches.
pub fn query_features(model: &DuetModel, queries: &[PreparedQuery]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(QUERY_BATCH) {
        let images = chunk
            .iter()
            .map(|q| {
                let img = image::open(&q.sketch).map_err(|e| DuetError::load(&q.sketch, e))?;
                model.image_tensor(&img)
            })
            .collect::<Result<Vec<_>>>()?;
        let globals = model.encode_images(&Tensor::stack(&images, 0)?)?.global;
        let tails = chunk
            .iter()
            .map(
                |q| match model.query_tail(q.text.as_deref(), q.connector.as_deref()) {
                    Some(t) => Ok(Some(model.encoder().embed_words(&t)?)),
                    None => Ok(None),
                },
            )
            .collect::<Result<Vec<_>>>()?;
        let feats = l2_normalize(&model.compose_queries(&globals, &tails)?)?;
        out.extend(feats.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?);
    }
    Ok(out)
}

/// Full rankings for precomputed query features.
pub fn rank_queries(
    index: &GalleryIndex,
    queries: &[PreparedQuery],
    features: &[Vec<f32>],
) -> Result<Vec<RetrievalResult>> {
    queries
        .iter()
        .zip(features)
        .map(|(q, f)| {
            index.query_vector(
                f,
                index.len(),
                QueryEcho {
                    sketch_sha256: None,
                    text: q.text.clone(),
                    connector: q.connector.clone(),
                },
            )
        })
        .collect()
}

/// Metric names for a protocol.
pub fn metric_names(protocol: Protocol, queries: &[PreparedQuery]) -> Vec<String> {
    let acc = ["acc@1", "acc@5", "acc@10"].map(String::from).to_vec();
    let rec = ["r@10", "r@50"].map(String::from).to_vec();
    match protocol {
        Protocol::FineGrained => acc,
        Protocol::Scene if queries.iter().all(|q| q.relevant.is_some()) => [acc, rec].concat(),
        Protocol::Scene => acc,
        Protocol::DomainTransfer => rec,
    }
}

pub fn report(
    protocol: Protocol,
    mode: &str,
    index: &GalleryIndex,
    queries: &[PreparedQuery],
    results: &[RetrievalResult],
) -> Result<MetricReport> {
    for q in queries {
        if !index.contains(&q.truth) {
            log::warn!(
                "truth {} of {} is not in the gallery; counted as a miss",
                q.truth,
                q.pair_id
            );
        }
    }
    let truths: Vec<&str> = queries.iter().map(|q| q.truth.as_str()).collect();
    let mut metrics = BTreeMap::new();
    for name in metric_names(protocol, queries) {
        let value = if let Some(q) = name.strip_prefix("acc@") {
            acc_at_q(results, &truths, q.parse().expect("metric name"))?
        } else {
            let q: usize = name.trim_start_matches("r@").parse().expect("metric name");
            let rel: Vec<HashSet<String>> = queries
                .iter()
                .map(|x| x.relevant.clone().unwrap_or_default())
                .collect();
            recall_at_q(results, &rel, q)?
        };
        metrics.insert(name, value);
    }
    let per_query = queries
        .iter()
        .zip(results)
        .map(|(q, r)| QueryRecord {
            pair_id: q.pair_id.clone(),
            truth: q.truth.clone(),
            text: q.text.clone(),
            connector: q.connector.clone(),
            rank: r.rank_of(&q.truth),
            top: r.ids.iter().take(DUMP_TOP).cloned().collect(),
        })
        .collect();
    Ok(MetricReport {
        protocol: protocol.as_str().to_string(),
        mode: mode.to_string(),
        queries: queries.len(),
        gallery_size: index.len(),
        metrics,
        per_query,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub split: Split,
    pub sketch_only: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            sketch_only: false,
        }
    }
}

/// Builds the split's gallery index and runs `protocol` against it.
pub fn evaluate(
    protocol: Protocol,
    dataset: &PairDataset,
    model: &DuetModel,
    options: EvalOptions,
) -> Result<MetricReport> {
    let photos = dataset.gallery(options.split);
    let index = GalleryIndex::build(model, &photos, QUERY_BATCH)?;
    evaluate_with_index(protocol, dataset, model, &index, options)
}

pub fn evaluate_with_index(
    protocol: Protocol,
    dataset: &PairDataset,
    model: &DuetModel,
    index: &GalleryIndex,
    options: EvalOptions,
) -> Result<MetricReport> {
    index.check_fingerprint(&model.fingerprint()?)?;
    let items = dataset.eval_items(options.split);
    let (mode, queries) = prepare(protocol, &items, index.photos(), options.sketch_only)?;
    let features = query_features(model, &queries)?;
    let results = rank_queries(index, &queries, &features)?;
    report(protocol, &mode, index, &queries, &results)
}

/// Sketch-only Acc@q of `split`'s pairs against that split's photos.
pub fn sketch_only_accuracy(
    dataset: &PairDataset,
    model: &DuetModel,
    split: Split,
    q: usize,
) -> Result<f64> {
    let report = evaluate(
        Protocol::FineGrained,
        dataset,
        model,
        EvalOptions {
            split,
            sketch_only: true,
        },
    )?;
    let truths: Vec<&str> = report.per_query.iter().map(|r| r.truth.as_str()).collect();
    let hits = report
        .per_query
        .iter()
        .filter(|r| r.rank.is_some_and(|k| k <= q))
        .count();
    Ok(if truths.is_empty() {
        0.0
    } else {
        100.0 * hits as f64 / truths.len() as f64
    })
}

/// Acc@q of finding each sketch of `split` from its own pseudo-word query
/// (learned prompt and pseudo-word, no text) among the visual features of
/// all the split's sketches. Measures how much of the sketch the token keeps.
pub fn pseudo_word_self_retrieval(
    dataset: &PairDataset,
    model: &DuetModel,
    split: Split,
    q: usize,
) -> Result<f64> {
    let items = dataset.eval_items(split);
    let mut rows = Vec::with_capacity(items.len());
    let mut queries = Vec::with_capacity(items.len());
    for chunk in items.chunks(QUERY_BATCH) {
        let paths: Vec<&std::path::Path> = chunk.iter().map(|i| i.sketch.as_path()).collect();
        let globals = model
            .encode_images(&dataset.store().model_batch(&paths)?)?
            .global;
        let tails = vec![None; chunk.len()];
        let composed = l2_normalize(&model.compose_queries(&globals, &tails)?)?;
        rows.extend(
            globals
                .to_dtype(candle_core::DType::F32)?
                .to_vec2::<f32>()?,
        );
        queries.extend(
            composed
                .to_dtype(candle_core::DType::F32)?
                .to_vec2::<f32>()?,
        );
    }
    let metas = items
        .iter()
        .map(|i| PhotoMeta {
            id: i.pair_id.clone(),
            path: i.sketch.clone(),
            class_label: None,
            domain_label: None,
            objects: None,
        })
        .collect();
    let index = GalleryIndex::from_rows(
        metas,
        rows,
        &model.fingerprint()?,
        &model.encoder().config().backbone_id,
    )?;
    let results = queries
        .iter()
        .map(|v| index.query_vector(v, q, QueryEcho::default()))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<&str> = items.iter().map(|i| i.pair_id.as_str()).collect();
    acc_at_q(&results, &truths, q)
}
