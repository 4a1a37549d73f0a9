//! Training configuration, loop and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ModelCard, TrainState};
use crate::composer::{ComposerConfig, InversionComposer, Prompt};
use crate::data::phrases::PhraseKind;
use crate::data::{PairDataset, Split, TrainBatch, Triplet};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{DualEncoder, TokenSequence};
use crate::error::{DuetError, Result};
use crate::eval;
use crate::index::{publish_dir, sibling};
use crate::model::DuetModel;
use crate::objectives::{loss_total, Ablation, BatchBundle, LossName, LossOutput, ObjectiveConfig};
use crate::optim::{AdamW, AdamWConfig, ParamGroup};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATEST: &str = "latest";
pub const BEST: &str = "best";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Learned prompt and vision layer norms.
    pub lr_prompt: f64,
    pub lr_converter: f64,
    pub lr_decoder: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_prompt: 1e-5,
            lr_converter: 1e-3,
            lr_decoder: 1e-4,
            weight_decay: 0.09,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Backbone directory (`config.json`, `model.safetensors`, `merges.txt`).
    pub backbone: PathBuf,
    pub manifest: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    #[serde(default = "default_ablation")]
    pub ablation: Ablation,
    /// Save `latest/` every this many steps as well as at epoch ends; zero
    /// means epoch ends only.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Validate (sketch-only Acc@1 on the test split) every this many
    /// epochs and keep the best checkpoint; zero disables validation.
    #[serde(default = "default_validate_every")]
    pub validate_every: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub objectives: ObjectiveConfig,
    #[serde(default)]
    pub composer: ComposerConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
}

fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    128
}
fn default_dtype() -> String {
    "f32".into()
}
fn default_ablation() -> Ablation {
    Ablation::Full
}
fn default_validate_every() -> usize {
    1
}

/// Sets `dotted.key` in a TOML table. The value is parsed as TOML and
/// taken as a bare string when that fails.
fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| DuetError::Config(format!("bad key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| DuetError::Config(format!("{p} in {key} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl TrainConfig {
    /// Parses TOML text and applies `key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| DuetError::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| DuetError::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, k.trim(), v.trim())?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| DuetError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative paths in it resolve against the file's
    /// directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DuetError::load(path, e))?;
        let mut config = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.backbone, &mut self.manifest, &mut self.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DuetError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DuetError::Config("batch_size must be positive".into()));
        }
        if self.optimizer.clip_norm < 0.0 {
            return Err(DuetError::Config(
                "optimizer.clip_norm must not be negative".into(),
            ));
        }
        checkpoint::parse_dtype(&self.dtype)?;
        self.objectives.validate()?;
        self.effective_objectives().validate()
    }

    /// Objective settings with the ablation applied.
    pub fn effective_objectives(&self) -> ObjectiveConfig {
        let mut o = self.objectives;
        self.ablation.apply(&mut o.toggles);
        o
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub global_step: u64,
    pub loss: f64,
    pub parts: BTreeMap<String, f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_acc1: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub enum TrainEvent {
    Step(StepReport),
    Epoch(EpochReport),
}

/// Per-step stream for the neutral phrases and fixed prompts.
fn step_rng(seed: u64, global_step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ global_step.wrapping_add(0x5851_F42D),
    )
}

pub struct Trainer {
    config: TrainConfig,
    objectives: ObjectiveConfig,
    dataset: PairDataset,
    model: DuetModel,
    decoder: Decoder,
    optimizer: AdamW,
    state: TrainState,
    metrics: Option<File>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("state", &self.state)
            .field("optimizer", &self.optimizer)
            .finish()
    }
}

fn groups(model: &DuetModel, decoder: &Decoder, cfg: &OptimizerConfig) -> Vec<ParamGroup> {
    let vars = |it: &mut dyn Iterator<Item = (&str, &Var)>| -> Vec<(String, Var)> {
        it.map(|(n, v)| (n.to_string(), v.clone())).collect()
    };
    let composer = model.composer().params();
    let mut prompt = vars(
        &mut composer
            .trainable()
            .filter(|(n, _)| n.starts_with("prompt.")),
    );
    prompt.extend(vars(&mut model.encoder().params().trainable()));
    vec![
        ParamGroup {
            name: "prompt".into(),
            lr: cfg.lr_prompt,
            params: prompt,
        },
        ParamGroup {
            name: "converter".into(),
            lr: cfg.lr_converter,
            params: vars(
                &mut composer
                    .trainable()
                    .filter(|(n, _)| !n.starts_with("prompt.")),
            ),
        },
        ParamGroup {
            name: "decoder".into(),
            lr: cfg.lr_decoder,
            params: vars(&mut decoder.params().trainable()),
        },
    ]
}

impl Trainer {
    /// A fresh run: loads the frozen backbone and initializes the converter,
    /// prompt and decoder from the seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dtype = checkpoint::parse_dtype(&config.dtype)?;
        let device = Device::Cpu;
        let encoder = DualEncoder::load(&config.backbone, dtype, &device)?;
        let composer = InversionComposer::new(&encoder, config.composer.clone(), config.seed)?;
        let model = DuetModel::new(encoder, composer);
        let enc = model.encoder().config();
        let decoder = Decoder::new(
            enc.embed_dim,
            enc.image_resolution,
            &config.decoder,
            config.seed.wrapping_add(1),
            dtype,
            &device,
        )?;
        Self::assemble(config, model, decoder, TrainState::new(0))
    }

    /// Continues from a checkpoint directory written by [`Trainer::save_checkpoint`].
    pub fn resume(config: TrainConfig, dir: &Path) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let (model, card) = checkpoint::load_model(dir, Some(&config.backbone), &device)?;
        if card.composer != config.composer || card.decoder != config.decoder {
            return Err(DuetError::Config(format!(
                "checkpoint {} was trained with different composer or decoder settings",
                dir.display()
            )));
        }
        let decoder = checkpoint::load_decoder(dir, &model, &card)?;
        let state = checkpoint::read_state(dir)?;
        if state.seed != config.seed {
            log::warn!(
                "resuming a run seeded {} with seed {}",
                state.seed,
                config.seed
            );
        }
        let mut trainer = Self::assemble(config, model, decoder, state)?;
        trainer
            .optimizer
            .load_state(dir, checkpoint::OPTIMIZER_STEM)?;
        log::info!(
            "resumed at epoch {} step {} (global {})",
            trainer.state.epoch,
            trainer.state.step_in_epoch,
            trainer.state.global_step
        );
        Ok(trainer)
    }

    fn assemble(
        config: TrainConfig,
        model: DuetModel,
        decoder: Decoder,
        mut state: TrainState,
    ) -> Result<Self> {
        let enc = model.encoder();
        let dataset = PairDataset::open(
            &config.manifest,
            enc.config().image_resolution,
            enc.dtype(),
            enc.device(),
        )?;
        let o = &config.optimizer;
        let optimizer = AdamW::new(
            groups(&model, &decoder, o),
            AdamWConfig {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            },
        )?;
        state.seed = config.seed;
        Ok(Self {
            objectives: config.effective_objectives(),
            config,
            dataset,
            model,
            decoder,
            optimizer,
            state,
            metrics: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn objectives(&self) -> &ObjectiveConfig {
        &self.objectives
    }

    pub fn model(&self) -> &DuetModel {
        &self.model
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn dataset(&self) -> &PairDataset {
        &self.dataset
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    /// Forward pass of one batch: every query variant the enabled losses
    /// need, and the loss breakdown. Phrases are drawn from `rng`.
    pub fn forward(&self, batch: &TrainBatch, rng: &mut ChaCha8Rng) -> Result<LossOutput> {
        let b = batch.len();
        let toggles = &self.objectives.toggles;
        let on = |n: LossName| toggles.is_enabled(n);
        let need_diff = on(LossName::Comp) || on(LossName::Reg) || on(LossName::Rec);
        let need_neutral = on(LossName::Reg);
        let need_fixed = on(LossName::Tt);
        let need_patches = on(LossName::Rt);

        let enc = self.model.encoder();
        let composer = self.model.composer();
        let images = Tensor::cat(&[&batch.sketches, &batch.positives, &batch.negatives], 0)?;
        let visual = enc.encode_images(&images)?;
        let sketch = visual.global.narrow(0, 0, b)?;
        let positive = visual.global.narrow(0, b, b)?;
        let negative = visual.global.narrow(0, 2 * b, b)?;
        let pseudo = composer.invert_batch(&sketch)?;

        let learned = |i: usize, tail: Option<&TokenSequence>| -> Result<Tensor> {
            Ok(composer
                .compose(Prompt::Learned, &pseudo.get(i)?, tail)?
                .body
                .embeddings)
        };
        let mut bodies = (0..b)
            .map(|i| learned(i, None))
            .collect::<Result<Vec<_>>>()?;
        if need_diff {
            let diff = composer.difference_batch(&positive, &sketch)?;
            for i in 0..b {
                bodies.push(learned(i, Some(&TokenSequence::new(diff.get(i)?)))?);
            }
        }
        let phrases = self.model.phrases();
        if need_neutral {
            let neutral = phrases.get(PhraseKind::NeutralText);
            for i in 0..b {
                bodies.push(learned(i, Some(&enc.embed_words(neutral.sample(rng))?))?);
            }
        }
        if need_fixed {
            let prompts = phrases.get(PhraseKind::HandcraftedPrompt);
            for i in 0..b {
                let fixed = enc.embed_words(prompts.sample(rng))?;
                bodies.push(
                    composer
                        .compose(Prompt::Fixed(&fixed), &pseudo.get(i)?, None)?
                        .body
                        .embeddings,
                );
            }
        }
        let text = enc.encode_bodies(&bodies)?;
        let mut offset = b;
        let mut take = |wanted: bool| -> Result<Option<Tensor>> {
            if !wanted {
                return Ok(None);
            }
            let t = text.narrow(0, offset, b)?;
            offset += b;
            Ok(Some(t))
        };
        let difference_query = take(need_diff)?;
        let neutral_query = take(need_neutral)?;
        let fixed_query = take(need_fixed)?;
        let bundle = BatchBundle {
            sketch_query: text.narrow(0, 0, b)?,
            difference_query,
            neutral_query,
            fixed_query,
            positive,
            negative,
            positive_patches: need_patches
                .then(|| visual.patches.narrow(0, b, b))
                .transpose()?,
            negative_patches: need_patches
                .then(|| visual.patches.narrow(0, 2 * b, b))
                .transpose()?,
            positive_pixels: on(LossName::Rec).then(|| batch.positive_pixels.clone()),
        };
        loss_total(&bundle, &self.objectives, Some(&self.decoder))
    }

    /// One optimizer step on `triplets`.
    pub fn train_step(&mut self, triplets: Vec<Triplet>) -> Result<StepReport> {
        let batch = self.dataset.load_batch(triplets)?;
        let mut rng = step_rng(self.config.seed, self.state.global_step);
        let out = self.forward(&batch, &mut rng)?;
        let loss = out.total_value()?;
        let parts = out.breakdown()?;
        if !loss.is_finite() {
            return Err(DuetError::NonFinite {
                step: self.state.global_step,
                detail: format!("loss {loss}, parts {}", serde_json::to_string(&parts)?),
            });
        }
        let clip =
            (self.config.optimizer.clip_norm > 0.0).then_some(self.config.optimizer.clip_norm);
        let grad_norm = self
            .optimizer
            .step(&out.total.backward()?, clip)
            .map_err(|e| match e {
                DuetError::NonFinite { detail, .. } => DuetError::NonFinite {
                    step: self.state.global_step,
                    detail: format!(
                        "{detail}; loss parts {}",
                        serde_json::to_string(&parts).unwrap_or_default()
                    ),
                },
                other => other,
            })?;
        self.state.global_step += 1;
        self.state.step_in_epoch += 1;
        Ok(StepReport {
            epoch: self.state.epoch,
            global_step: self.state.global_step,
            loss,
            parts,
            grad_norm,
        })
    }

    fn log_metrics(&mut self, value: serde_json::Value) -> Result<()> {
        if self.metrics.is_none() {
            std::fs::create_dir_all(&self.config.output)?;
            self.metrics = Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(self.config.output.join(METRICS_FILE))?,
            );
        }
        let f = self.metrics.as_mut().expect("metrics file");
        writeln!(f, "{value}")?;
        Ok(())
    }

    /// Sketch-only Acc@1 on the test split.
    pub fn validate(&self) -> Result<Option<f64>> {
        if self
            .dataset
            .manifest()
            .pairs_in(Split::Test)
            .next()
            .is_none()
        {
            return Ok(None);
        }
        eval::sketch_only_accuracy(&self.dataset, &self.model, Split::Test, 1).map(Some)
    }

    /// Runs until `config.epochs` epochs are complete, resuming mid-epoch
    /// when the state says so.
    pub fn fit(&mut self, mut on_event: impl FnMut(&TrainEvent)) -> Result<TrainState> {
        let cfg = self.config.clone();
        while self.state.epoch < cfg.epochs {
            let started = std::time::Instant::now();
            let epoch = self.state.epoch;
            let batches = self.dataset.epoch(cfg.batch_size, cfg.seed, epoch)?;
            let skip = self.state.step_in_epoch.min(batches.len());
            let mut losses = Vec::with_capacity(batches.len());
            for triplets in batches.into_iter().skip(skip) {
                let report = self.train_step(triplets)?;
                losses.push(report.loss);
                self.log_metrics(serde_json::json!({"event": "step", "report": &report}))?;
                on_event(&TrainEvent::Step(report));
                if cfg.checkpoint_every > 0
                    && self
                        .state
                        .global_step
                        .is_multiple_of(cfg.checkpoint_every as u64)
                {
                    self.save_checkpoint(LATEST)?;
                }
            }
            self.state.epoch += 1;
            self.state.step_in_epoch = 0;
            let finished = self.state.epoch;
            let val_acc1 = if cfg.validate_every > 0
                && (finished.is_multiple_of(cfg.validate_every) || finished == cfg.epochs)
            {
                self.validate()?
            } else {
                None
            };
            if let Some(acc) = val_acc1 {
                if self.state.best_metric.is_none_or(|b| acc > b) {
                    self.state.best_metric = Some(acc);
                    self.state.best_epoch = Some(epoch);
                    self.save_checkpoint(BEST)?;
                }
            }
            self.save_checkpoint(LATEST)?;
            let report = EpochReport {
                epoch,
                mean_loss: if losses.is_empty() {
                    f64::NAN
                } else {
                    losses.iter().sum::<f64>() / losses.len() as f64
                },
                val_acc1,
                seconds: started.elapsed().as_secs_f64(),
            };
            self.log_metrics(serde_json::json!({"event": "epoch", "report": &report}))?;
            on_event(&TrainEvent::Epoch(report));
        }
        Ok(self.state.clone())
    }

    pub fn card(&self) -> Result<ModelCard> {
        checkpoint::card_for(&self.model, &self.config.backbone, &self.config.decoder)
    }

    /// Writes `output/<name>/` atomically.
    pub fn save_checkpoint(&self, name: &str) -> Result<PathBuf> {
        let dest = self.config.output.join(name);
        std::fs::create_dir_all(&self.config.output)?;
        let tmp = sibling(&dest, "tmp");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        checkpoint::write_model(&tmp, &self.model, &self.card()?)?;
        checkpoint::write_decoder(&tmp, &self.decoder)?;
        self.optimizer.save(&tmp, checkpoint::OPTIMIZER_STEM)?;
        std::fs::write(
            tmp.join(checkpoint::STATE_FILE),
            serde_json::to_string_pretty(&self.state)?,
        )?;
        std::fs::write(tmp.join(checkpoint::CONFIG_FILE), self.config.to_toml()?)?;
        publish_dir(&tmp, &dest)?;
        Ok(dest)
    }
}

/// Flattened f32 copies of named tensors, for comparing parameters before
/// and after training.
pub fn snapshot(
    params: impl Iterator<Item = (String, Tensor)>,
) -> Result<BTreeMap<String, Vec<f32>>> {
    params
        .map(|(n, t)| Ok((n, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)))
        .collect()
}
