//! AdamW with per-group learning rates, global-norm clipping, and
//! serializable moment state.

use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DuetError, Result};

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub params: Vec<(String, Var)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.09,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    config: AdamWConfig,
}

pub struct AdamW {
    groups: Vec<ParamGroup>,
    config: AdamWConfig,
    step: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl std::fmt::Debug for AdamW {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdamW")
            .field(
                "groups",
                &self
                    .groups
                    .iter()
                    .map(|g| (&g.name, g.lr, g.params.len()))
                    .collect::<Vec<_>>(),
            )
            .field("step", &self.step)
            .finish()
    }
}

impl AdamW {
    pub fn new(groups: Vec<ParamGroup>, config: AdamWConfig) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for g in &groups {
            if !(g.lr > 0.0 && g.lr.is_finite()) {
                return Err(DuetError::Config(format!(
                    "learning rate of group {} must be positive",
                    g.name
                )));
            }
            for (name, _) in &g.params {
                if !seen.insert(name.clone()) {
                    return Err(DuetError::Config(format!(
                        "parameter {name} is in two groups"
                    )));
                }
            }
        }
        Ok(Self {
            groups,
            config,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn learning_rates(&self) -> Vec<(String, f64)> {
        self.groups.iter().map(|g| (g.name.clone(), g.lr)).collect()
    }

    /// L2 norm over all gradients of the registered parameters.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0f64;
        for g in &self.groups {
            for (_, var) in &g.params {
                if let Some(grad) = grads.get(var.as_tensor()) {
                    total += grad
                        .to_dtype(DType::F64)?
                        .sqr()?
                        .sum_all()?
                        .to_scalar::<f64>()?;
                }
            }
        }
        Ok(total.sqrt())
    }

    /// One update. Gradients are rescaled so their global norm is at most
    /// `clip` when given. Returns the pre-clip norm.
    pub fn step(&mut self, grads: &GradStore, clip: Option<f64>) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(DuetError::NonFinite {
                step: self.step,
                detail: format!("gradient norm is {norm}"),
            });
        }
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for group in &self.groups {
            for (name, var) in &group.params {
                let Some(grad) = grads.get(var.as_tensor()) else {
                    continue;
                };
                // Detached so the moments do not keep every step's graph alive.
                let grad = (grad.detach() * scale)?;
                let m = match self.m.get(name) {
                    Some(m) => ((m * c.beta1)? + (&grad * (1.0 - c.beta1))?)?,
                    None => (&grad * (1.0 - c.beta1))?,
                };
                let v = match self.v.get(name) {
                    Some(v) => ((v * c.beta2)? + (grad.sqr()? * (1.0 - c.beta2))?)?,
                    None => (grad.sqr()? * (1.0 - c.beta2))?,
                };
                let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
                let theta = var.as_tensor().detach();
                let decayed = (&theta * (1.0 - group.lr * c.weight_decay))?;
                var.set(&(decayed - (update * group.lr)?)?)?;
                self.m.insert(name.clone(), m);
                self.v.insert(name.clone(), v);
            }
        }
        Ok(norm)
    }

    /// Writes moments to `<stem>.safetensors` and counters to `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut map = HashMap::new();
        for (k, t) in &self.m {
            map.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            map.insert(format!("v.{k}"), t.clone());
        }
        if !map.is_empty() {
            candle_core::safetensors::save(&map, dir.join(format!("{stem}.safetensors")))?;
        }
        let meta = StateMeta {
            step: self.step,
            config: self.config,
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }

    pub fn load_state(&mut self, dir: &Path, stem: &str) -> Result<()> {
        let meta_path = dir.join(format!("{stem}.json"));
        let meta: StateMeta = serde_json::from_str(
            &std::fs::read_to_string(&meta_path).map_err(|e| DuetError::load(&meta_path, e))?,
        )?;
        self.step = meta.step;
        self.m.clear();
        self.v.clear();
        let tensors_path = dir.join(format!("{stem}.safetensors"));
        if tensors_path.exists() {
            let device = self
                .groups
                .iter()
                .flat_map(|g| g.params.first())
                .map(|(_, v)| v.device().clone())
                .next()
                .unwrap_or(candle_core::Device::Cpu);
            let map = candle_core::safetensors::load(&tensors_path, &device)
                .map_err(|e| DuetError::load(&tensors_path, e))?;
            for (k, t) in map {
                if let Some(name) = k.strip_prefix("m.") {
                    self.m.insert(name.to_string(), t);
                } else if let Some(name) = k.strip_prefix("v.") {
                    self.v.insert(name.to_string(), t);
                }
            }
        }
        Ok(())
    }
}
