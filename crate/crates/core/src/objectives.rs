//! Training objectives.
//!
//! | name   | form                                                          |
//! |--------|---------------------------------------------------------------|
//! | `trip` | `max(0, μ_trip + δ(s, p⁺) − δ(s, p⁻))`                        |
//! | `comp` | `max(0, μ_comp + δ(s_Δ, p⁺) − δ(s, p⁺))`                      |
//! | `reg`  | `|δ(s_Δ, p⁺) − δ(s_N, p⁺)|`                                   |
//! | `tt`   | `‖s_F − s‖₂`                                                  |
//! | `rt`   | `max(0, μ_RT + δ(s, p⁺_s) − δ(s, p⁻_s))`, region-pooled photos |
//! | `rec`  | `rmse(P⁺, G(s)) + rmse(P⁺, G(s_Δ))`                           |
//!
//! `s` is the sketch query `prompt ‖ pseudo-word`, `s_Δ` appends the
//! difference token, `s_N` a neutral phrase, and `s_F` uses a handcrafted
//! prompt instead of the learned one. Every loss is a per-item value
//! averaged over the batch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::error::{DuetError, Result};
use crate::nn::softmax_last;

/// Added under square roots so gradients stay finite at zero.
const SQRT_EPS: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Trip,
    Comp,
    Reg,
    Tt,
    Rt,
    Rec,
}

impl LossName {
    pub const ALL: [LossName; 6] = [
        Self::Trip,
        Self::Comp,
        Self::Reg,
        Self::Tt,
        Self::Rt,
        Self::Rec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Trip => "trip",
            Self::Comp => "comp",
            Self::Reg => "reg",
            Self::Tt => "tt",
            Self::Rt => "rt",
            Self::Rec => "rec",
        }
    }
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Cosine,
    Euclidean,
}

/// λ₁..λ₆.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub trip: f64,
    pub comp: f64,
    pub reg: f64,
    pub tt: f64,
    pub rt: f64,
    pub rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            trip: 1.0,
            comp: 0.5,
            reg: 0.1,
            tt: 0.1,
            rt: 1.0,
            rec: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, name: LossName) -> f64 {
        match name {
            LossName::Trip => self.trip,
            LossName::Comp => self.comp,
            LossName::Reg => self.reg,
            LossName::Tt => self.tt,
            LossName::Rt => self.rt,
            LossName::Rec => self.rec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = LossName::ALL.map(|n| self.get(n));
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(DuetError::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(DuetError::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Margins {
    pub trip: f64,
    pub comp: f64,
    pub rt: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            trip: 0.2,
            comp: 0.1,
            rt: 0.2,
        }
    }
}

impl Margins {
    pub fn validate(&self) -> Result<()> {
        if [self.trip, self.comp, self.rt]
            .iter()
            .any(|m| !(m.is_finite() && *m > 0.0))
        {
            return Err(DuetError::Config(format!(
                "margins must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub trip: bool,
    pub comp: bool,
    pub reg: bool,
    pub tt: bool,
    pub rt: bool,
    pub rec: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub fn all() -> Self {
        Self {
            trip: true,
            comp: true,
            reg: true,
            tt: true,
            rt: true,
            rec: true,
        }
    }

    pub fn only(name: LossName) -> Self {
        let mut t = Self {
            trip: false,
            comp: false,
            reg: false,
            tt: false,
            rt: false,
            rec: false,
        };
        t.set(name, true);
        t
    }

    pub fn is_enabled(&self, name: LossName) -> bool {
        match name {
            LossName::Trip => self.trip,
            LossName::Comp => self.comp,
            LossName::Reg => self.reg,
            LossName::Tt => self.tt,
            LossName::Rt => self.rt,
            LossName::Rec => self.rec,
        }
    }

    pub fn set(&mut self, name: LossName, on: bool) {
        match name {
            LossName::Trip => self.trip = on,
            LossName::Comp => self.comp = on,
            LossName::Reg => self.reg = on,
            LossName::Tt => self.tt = on,
            LossName::Rt => self.rt = on,
            LossName::Rec => self.rec = on,
        }
    }

    pub fn enabled(&self) -> Vec<LossName> {
        LossName::ALL
            .into_iter()
            .filter(|n| self.is_enabled(*n))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled().is_empty() {
            return Err(DuetError::Config("every loss is disabled".into()));
        }
        Ok(())
    }
}

/// Named ablation presets. Compositionality covers both the constraint
/// and the neutral-text regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    WithoutTt,
    WithoutRec,
    WithoutRt,
    WithoutCompositionality,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Self::Full,
        Self::WithoutTt,
        Self::WithoutRec,
        Self::WithoutRt,
        Self::WithoutCompositionality,
    ];

    pub fn disabled(self) -> &'static [LossName] {
        match self {
            Self::Full => &[],
            Self::WithoutTt => &[LossName::Tt],
            Self::WithoutRec => &[LossName::Rec],
            Self::WithoutRt => &[LossName::Rt],
            Self::WithoutCompositionality => &[LossName::Comp, LossName::Reg],
        }
    }

    pub fn apply(self, toggles: &mut LossToggles) {
        for name in self.disabled() {
            toggles.set(*name, false);
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WithoutTt => "without_tt",
            Self::WithoutRec => "without_rec",
            Self::WithoutRt => "without_rt",
            Self::WithoutCompositionality => "without_compositionality",
        }
    }
}

impl FromStr for Ablation {
    type Err = DuetError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| DuetError::Config(format!("unknown ablation {s:?}")))
    }
}

/// Everything the losses read for one batch. Optional entries are only
/// required by the losses that consume them.
#[derive(Debug, Clone)]
pub struct BatchBundle {
    /// `s^T_L`, `(B, d)`.
    pub sketch_query: Tensor,
    /// `s^{T,Δ}_L`.
    pub difference_query: Option<Tensor>,
    /// `s^{T,N}_L`.
    pub neutral_query: Option<Tensor>,
    /// `s^T_F`.
    pub fixed_query: Option<Tensor>,
    pub positive: Tensor,
    pub negative: Tensor,
    /// `(B, T, d)`.
    pub positive_patches: Option<Tensor>,
    pub negative_patches: Option<Tensor>,
    /// Positive photos in `[0, 1]`, `(B, 3, H, W)`.
    pub positive_pixels: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub margins: Margins,
    pub toggles: LossToggles,
    pub distance: DistanceKind,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            margins: Margins::default(),
            toggles: LossToggles::all(),
            distance: DistanceKind::Cosine,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.margins.validate()?;
        self.toggles.validate()
    }
}

/// Weighted total plus the unweighted value of each enabled loss.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub parts: BTreeMap<LossName, Tensor>,
}

impl LossOutput {
    pub fn breakdown(&self) -> Result<BTreeMap<String, f64>> {
        self.parts
            .iter()
            .map(|(k, v)| Ok((k.as_str().to_string(), scalar(v)?)))
            .collect()
    }

    pub fn total_value(&self) -> Result<f64> {
        scalar(&self.total)
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(DuetError::shape(
            format!("{:?}", a.dims()),
            format!("{:?}", b.dims()),
        ));
    }
    Ok(())
}

fn row_norms(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?
        .sum_keepdim(D::Minus1)?
        .sqrt()?
        .squeeze(D::Minus1)?)
}

/// Cosine distance `1 − ⟨a,b⟩ / (‖a‖‖b‖)` over the last dimension. Vectors
/// give a scalar, `(B, d)` matrices give `(B,)`.
pub fn distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair(a, b)?;
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    let smallest = na
        .flatten_all()?
        .min(0)?
        .minimum(&nb.flatten_all()?.min(0)?)?;
    if scalar(&smallest)? == 0.0 {
        return Err(DuetError::Input(
            "cosine distance of a zero vector is undefined".into(),
        ));
    }
    let dot = (a * b)?.sum_keepdim(D::Minus1)?.squeeze(D::Minus1)?;
    Ok((1.0 - (dot / (na * nb)?)?)?)
}

/// Euclidean distance over the last dimension.
pub fn euclidean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair(a, b)?;
    Ok(((a - b)?.sqr()?.sum_keepdim(D::Minus1)?.squeeze(D::Minus1)? + SQRT_EPS)?.sqrt()?)
}

pub fn distance_with(kind: DistanceKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match kind {
        DistanceKind::Cosine => distance(a, b),
        DistanceKind::Euclidean => euclidean(a, b),
    }
}

/// `mean(max(0, margin + pos − neg))` over per-item distances.
pub fn hinge(margin: f64, pos: &Tensor, neg: &Tensor) -> Result<Tensor> {
    Ok(((pos - neg)? + margin)?.relu()?.mean_all()?)
}

pub fn loss_trip(
    kind: DistanceKind,
    margin: f64,
    query: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
) -> Result<Tensor> {
    hinge(
        margin,
        &distance_with(kind, query, positive)?,
        &distance_with(kind, query, negative)?,
    )
}

pub fn loss_comp(
    kind: DistanceKind,
    margin: f64,
    difference_query: &Tensor,
    query: &Tensor,
    positive: &Tensor,
) -> Result<Tensor> {
    hinge(
        margin,
        &distance_with(kind, difference_query, positive)?,
        &distance_with(kind, query, positive)?,
    )
}

pub fn loss_reg(
    kind: DistanceKind,
    difference_query: &Tensor,
    neutral_query: &Tensor,
    positive: &Tensor,
) -> Result<Tensor> {
    let gap = (distance_with(kind, difference_query, positive)?
        - distance_with(kind, neutral_query, positive)?)?;
    Ok(gap.abs()?.mean_all()?)
}

pub fn loss_tt(fixed_query: &Tensor, query: &Tensor) -> Result<Tensor> {
    Ok(euclidean(fixed_query, query)?.mean_all()?)
}

/// Softmax attention of `query` over patch rows. `query` is `(B, d)` and
/// `patches` `(B, T, d)`; returns weights `(B, T)` and pooled `(B, d)`.
/// Unbatched `(d)` / `(T, d)` inputs give `(T)` / `(d)`.
pub fn region_attention(query: &Tensor, patches: &Tensor) -> Result<(Tensor, Tensor)> {
    if query.rank() == 1 && patches.rank() == 2 {
        let (w, p) = region_attention(&query.unsqueeze(0)?, &patches.unsqueeze(0)?)?;
        return Ok((w.squeeze(0)?, p.squeeze(0)?));
    }
    let (b, t, d) = patches.dims3()?;
    if t == 0 {
        return Err(DuetError::Input(
            "region attention needs at least one patch".into(),
        ));
    }
    if query.dims() != [b, d] {
        return Err(DuetError::shape(
            format!("({b}, {d})"),
            format!("{:?}", query.dims()),
        ));
    }
    let scores = patches.matmul(&query.unsqueeze(2)?)?.squeeze(2)?;
    let weights = softmax_last(&scores)?;
    let pooled = weights.unsqueeze(1)?.matmul(patches)?.squeeze(1)?;
    Ok((weights, pooled))
}

pub fn loss_rt(
    kind: DistanceKind,
    margin: f64,
    query: &Tensor,
    positive_patches: &Tensor,
    negative_patches: &Tensor,
) -> Result<Tensor> {
    let (_, pos) = region_attention(query, positive_patches)?;
    let (_, neg) = region_attention(query, negative_patches)?;
    loss_trip(kind, margin, query, &pos, &neg)
}

/// Per-item root-mean-square pixel error, `(B,)`.
pub fn rmse(target: &Tensor, output: &Tensor) -> Result<Tensor> {
    check_pair(target, output)?;
    let b = target.dims()[0];
    let sq = (target - output)?.sqr()?.reshape((b, ()))?;
    Ok((sq.mean_keepdim(1)?.squeeze(1)? + SQRT_EPS)?.sqrt()?)
}

/// Two reconstruction terms, one per query variant.
pub fn loss_rec(target: &Tensor, from_query: &Tensor, from_difference: &Tensor) -> Result<Tensor> {
    Ok((rmse(target, from_query)? + rmse(target, from_difference)?)?.mean_all()?)
}

fn need<'a>(t: &'a Option<Tensor>, what: &str, loss: LossName) -> Result<&'a Tensor> {
    t.as_ref().ok_or_else(|| {
        DuetError::Config(format!(
            "loss {loss} is enabled but the batch has no {what}"
        ))
    })
}

/// Evaluates the enabled losses and their weighted sum. Disabled losses
/// are not computed and do not appear in the breakdown.
pub fn loss_total(
    bundle: &BatchBundle,
    config: &ObjectiveConfig,
    decoder: Option<&Decoder>,
) -> Result<LossOutput> {
    config.validate()?;
    let k = config.distance;
    let m = &config.margins;
    let s = &bundle.sketch_query;
    let mut parts = BTreeMap::new();
    for name in config.toggles.enabled() {
        let value = match name {
            LossName::Trip => loss_trip(k, m.trip, s, &bundle.positive, &bundle.negative)?,
            LossName::Comp => loss_comp(
                k,
                m.comp,
                need(&bundle.difference_query, "difference query", name)?,
                s,
                &bundle.positive,
            )?,
            LossName::Reg => loss_reg(
                k,
                need(&bundle.difference_query, "difference query", name)?,
                need(&bundle.neutral_query, "neutral query", name)?,
                &bundle.positive,
            )?,
            LossName::Tt => loss_tt(need(&bundle.fixed_query, "fixed-prompt query", name)?, s)?,
            LossName::Rt => loss_rt(
                k,
                m.rt,
                s,
                need(&bundle.positive_patches, "positive patches", name)?,
                need(&bundle.negative_patches, "negative patches", name)?,
            )?,
            LossName::Rec => {
                let decoder = decoder.ok_or_else(|| {
                    DuetError::Config("loss rec is enabled but no decoder was given".into())
                })?;
                let target = need(&bundle.positive_pixels, "positive pixels", name)?;
                let diff = need(&bundle.difference_query, "difference query", name)?;
                loss_rec(target, &decoder.forward(s)?, &decoder.forward(diff)?)?
            }
        };
        parts.insert(name, value);
    }
    let mut total: Option<Tensor> = None;
    for (name, value) in &parts {
        let term = (value * config.weights.get(*name))?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| DuetError::Config("every loss is disabled".into()))?;
    Ok(LossOutput { total, parts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn t2(v: &[[f64; 2]]) -> Tensor {
        let flat: Vec<f64> = v.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (v.len(), 2), &Device::Cpu).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn distance_identity_antipode_and_zero() {
        let x = t1(&[0.3, -1.2, 2.0]);
        assert!(s(&distance(&x, &x).unwrap()).abs() < 1e-12);
        assert!((s(&distance(&x, &x.neg().unwrap()).unwrap()) - 2.0).abs() < 1e-12);
        assert!(distance(&x, &t1(&[0.0, 0.0, 0.0])).is_err());
        assert!(distance(&x, &t1(&[1.0])).is_err());
    }

    #[test]
    fn hinge_values_by_hand() {
        assert!((s(&hinge(0.2, &t1(&[0.1]), &t1(&[0.9])).unwrap())).abs() < 1e-12);
        assert!((s(&hinge(0.2, &t1(&[0.5]), &t1(&[0.4])).unwrap()) - 0.3).abs() < 1e-12);
        assert!((s(&hinge(0.2, &t1(&[0.7]), &t1(&[0.7])).unwrap()) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn region_attention_handles_unbatched_and_empty() {
        let q = t1(&[1.0, 0.0]);
        let p = t2(&[[0.0, 1.0], [3f64.ln(), 0.0]]);
        let (w, _) = region_attention(&q, &p).unwrap();
        let w = w.to_vec1::<f64>().unwrap();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
        let empty = Tensor::zeros((1, 0, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(region_attention(&t2(&[[1.0, 0.0]]), &empty).is_err());
    }

    #[test]
    fn toggles_and_ablations() {
        let mut t = LossToggles::all();
        Ablation::WithoutCompositionality.apply(&mut t);
        assert_eq!(
            t.enabled(),
            vec![LossName::Trip, LossName::Tt, LossName::Rt, LossName::Rec]
        );
        assert!(LossToggles::only(LossName::Rec).validate().is_ok());
        let mut none = LossToggles::only(LossName::Trip);
        none.trip = false;
        assert!(none.validate().is_err());
        assert_eq!(
            "without_rt".parse::<Ablation>().unwrap(),
            Ablation::WithoutRt
        );
        assert!("without_everything".parse::<Ablation>().is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights {
            trip: 0.0,
            comp: 0.0,
            reg: 0.0,
            tt: 0.0,
            rt: 0.0,
            rec: 0.0,
        };
        assert!(zero.validate().is_err());
        assert!(LossWeights {
            trip: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(Margins {
            comp: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
