//! The open-vocabulary class head.
//!
//! Each class is represented by the normalized average of its prompt
//! embeddings. A region embedding is scored by cosine similarity against every
//! class row, divided by a temperature, optionally joined by a weighted
//! background logit, and pushed through a softmax.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::ClassId;

/// Row-norm tolerance for bank rows and freshly normalized embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// How far a region embedding may drift from unit norm before scoring
/// refuses it.
pub const REGION_NORM_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassifyError {
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("embedding is not unit norm (norm {0})")]
    NotUnit(f64),
    #[error("embedding dimension {actual} does not match {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("class {0} has no prompt embeddings")]
    NoPrompts(ClassId),
    #[error("prompt embeddings of class {0} average to zero")]
    ZeroNormClass(ClassId),
    #[error("class {0} appears twice in the bank")]
    DuplicateClass(ClassId),
    #[error("class {0} is not in the bank")]
    UnknownClass(ClassId),
    #[error("embedding bank is empty")]
    EmptyBank,
    #[error("background weight must be positive and finite, got {0}")]
    InvalidBackgroundWeight(f64),
    #[error("background logit must be finite, got {0}")]
    InvalidBackgroundLogit(f64),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("crop factors must be positive and finite")]
    InvalidCropFactor,
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Scale `v` to unit length.
    pub fn normalize(v: Vec<f32>) -> Result<Self, ClassifyError> {
        Self::normalize_f64(v.into_iter().map(f64::from).collect())
    }

    pub fn normalize_f64(v: Vec<f64>) -> Result<Self, ClassifyError> {
        let n = math::sqrt(v.iter().map(|x| x * x).sum());
        if !(n > 0.0 && n.is_finite()) {
            return Err(ClassifyError::ZeroNorm);
        }
        Ok(Embedding(v.into_iter().map(|x| (x / n) as f32).collect()))
    }

    /// Wrap a vector that is already unit norm within `tol`.
    pub fn from_unit(v: Vec<f32>, tol: f64) -> Result<Self, ClassifyError> {
        let n = math::norm_f32(&v);
        if !(math::abs(n - 1.0) <= tol) {
            return Err(ClassifyError::NotUnit(n));
        }
        Ok(Embedding(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        math::norm_f32(&self.0)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&x| f64::from(x)).collect()
    }

    pub fn dot(&self, other: &[f32]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }
}

/// All prompt embeddings of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub class_id: ClassId,
    pub name: String,
    pub prompts: Vec<Vec<f32>>,
}

/// Ordered class-id to text-embedding table acting as the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    class_ids: Vec<ClassId>,
    names: Vec<String>,
    dim: usize,
    rows: Vec<f32>,
    background_logit: f64,
    background_weight: f64,
}

impl EmbeddingBank {
    /// Assemble from already-normalized rows.
    pub fn from_rows(
        class_ids: Vec<ClassId>,
        names: Vec<String>,
        dim: usize,
        rows: Vec<f32>,
    ) -> Result<Self, ClassifyError> {
        if class_ids.is_empty() {
            return Err(ClassifyError::EmptyBank);
        }
        if rows.len() != class_ids.len() * dim || names.len() != class_ids.len() {
            return Err(ClassifyError::DimMismatch {
                expected: class_ids.len() * dim,
                actual: rows.len(),
            });
        }
        for (i, id) in class_ids.iter().enumerate() {
            if class_ids[..i].contains(id) {
                return Err(ClassifyError::DuplicateClass(*id));
            }
            let n = math::norm_f32(&rows[i * dim..(i + 1) * dim]);
            if !(math::abs(n - 1.0) <= UNIT_NORM_TOL) {
                return Err(ClassifyError::NotUnit(n));
            }
        }
        Ok(EmbeddingBank {
            class_ids,
            names,
            dim,
            rows,
            background_logit: 0.0,
            background_weight: 1.0,
        })
    }

    /// Set the background logit `b` and its weight `w`; the background
    /// competes in the softmax with logit `w * b`.
    pub fn with_background(mut self, logit: f64, weight: f64) -> Result<Self, ClassifyError> {
        if !logit.is_finite() {
            return Err(ClassifyError::InvalidBackgroundLogit(logit));
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(ClassifyError::InvalidBackgroundWeight(weight));
        }
        self.background_logit = logit;
        self.background_weight = weight;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn background_logit(&self) -> f64 {
        self.background_logit
    }

    pub fn background_weight(&self) -> f64 {
        self.background_weight
    }

    pub fn index_of(&self, id: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == id)
    }

    /// A bank restricted to `ids`, in the given order; background settings
    /// carry over.
    pub fn select(&self, ids: &[ClassId]) -> Result<EmbeddingBank, ClassifyError> {
        let mut rows = Vec::with_capacity(ids.len() * self.dim);
        let mut names = Vec::with_capacity(ids.len());
        for &id in ids {
            let i = self.index_of(id).ok_or(ClassifyError::UnknownClass(id))?;
            rows.extend_from_slice(self.row(i));
            names.push(self.names[i].clone());
        }
        let bank = EmbeddingBank::from_rows(ids.to_vec(), names, self.dim, rows)?;
        Ok(EmbeddingBank {
            background_logit: self.background_logit,
            background_weight: self.background_weight,
            ..bank
        })
    }
}

/// Normalize every prompt embedding, average per class, normalize again.
pub fn build_bank(classes: &[PromptSet]) -> Result<EmbeddingBank, ClassifyError> {
    let dim = classes
        .iter()
        .flat_map(|c| c.prompts.first())
        .map(Vec::len)
        .next()
        .ok_or(ClassifyError::EmptyBank)?;
    let mut rows = Vec::with_capacity(classes.len() * dim);
    for class in classes {
        if class.prompts.is_empty() {
            return Err(ClassifyError::NoPrompts(class.class_id));
        }
        let mut mean = alloc::vec![0.0f64; dim];
        for p in &class.prompts {
            if p.len() != dim {
                return Err(ClassifyError::DimMismatch {
                    expected: dim,
                    actual: p.len(),
                });
            }
            let unit = Embedding::normalize(p.clone())?;
            for (m, &v) in mean.iter_mut().zip(unit.as_slice()) {
                *m += f64::from(v);
            }
        }
        let row = Embedding::normalize_f64(mean).map_err(|_| ClassifyError::ZeroNormClass(class.class_id))?;
        rows.extend_from_slice(row.as_slice());
    }
    EmbeddingBank::from_rows(
        classes.iter().map(|c| c.class_id).collect(),
        classes.iter().map(|c| c.name.clone()).collect(),
        dim,
        rows,
    )
}

/// Normalized mean of the 1x and expanded crop embeddings. Falls back to
/// `e1` when the expanded crop is missing or the mean vanishes.
pub fn ensemble_embeddings(e1: &Embedding, e15: Option<&Embedding>) -> Result<Embedding, ClassifyError> {
    match e15 {
        None => Ok(e1.clone()),
        Some(e) => ensemble_all(core::slice::from_ref(e1).iter().chain(core::iter::once(e))),
    }
}

/// Normalized mean of several crop embeddings; the first one is the
/// fallback when the mean vanishes.
pub fn ensemble_all<'a>(embeddings: impl IntoIterator<Item = &'a Embedding>) -> Result<Embedding, ClassifyError> {
    let mut iter = embeddings.into_iter();
    let first = iter.next().ok_or(ClassifyError::ZeroNorm)?;
    let mut sum = first.to_f64();
    let mut all_same = true;
    for e in iter {
        if e.dim() != first.dim() {
            return Err(ClassifyError::DimMismatch {
                expected: first.dim(),
                actual: e.dim(),
            });
        }
        all_same &= e == first;
        for (s, &v) in sum.iter_mut().zip(e.as_slice()) {
            *s += f64::from(v);
        }
    }
    if all_same {
        // The mean of identical unit vectors is the vector itself.
        return Ok(first.clone());
    }
    Ok(Embedding::normalize_f64(sum).unwrap_or_else(|_| first.clone()))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ClassifyConfig {
    /// Softmax temperature in cosine space.
    pub temperature: f64,
    /// Crop scale factors whose embeddings are averaged (vanilla only). The
    /// first factor must succeed; the rest fall back when degenerate.
    pub crop_factors: Vec<f64>,
    pub background: bool,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            temperature: 0.01,
            crop_factors: alloc::vec![1.0, 1.5],
            background: true,
        }
    }
}

impl ClassifyConfig {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ClassifyError::InvalidTemperature(self.temperature));
        }
        if self.crop_factors.is_empty() || self.crop_factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(ClassifyError::InvalidCropFactor);
        }
        Ok(())
    }
}

/// Per-class probabilities in bank order plus the background share.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub probs: Vec<f64>,
    pub background: Option<f64>,
}

impl ClassScores {
    /// Index and probability of the most likely foreground class; ties go to
    /// the lower index.
    pub fn argmax(&self) -> Option<(usize, f64)> {
        argmax(&self.probs)
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum::<f64>() + self.background.unwrap_or(0.0)
    }
}

pub(crate) fn argmax(v: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in v.iter().enumerate() {
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    best
}

/// Cosine similarities divided by the temperature, in bank order.
pub fn class_logits(region: &Embedding, bank: &EmbeddingBank, cfg: &ClassifyConfig) -> Result<Vec<f64>, ClassifyError> {
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(ClassifyError::InvalidTemperature(cfg.temperature));
    }
    if region.dim() != bank.dim() {
        return Err(ClassifyError::DimMismatch {
            expected: bank.dim(),
            actual: region.dim(),
        });
    }
    let n = region.norm();
    if !(math::abs(n - 1.0) <= REGION_NORM_TOL) {
        return Err(ClassifyError::NotUnit(n));
    }
    Ok((0..bank.len())
        .map(|i| region.dot(bank.row(i)) / cfg.temperature)
        .collect())
}

/// Softmax over the class logits (and the weighted background logit).
pub fn class_scores(region: &Embedding, bank: &EmbeddingBank, cfg: &ClassifyConfig) -> Result<ClassScores, ClassifyError> {
    let mut logits = class_logits(region, bank, cfg)?;
    if cfg.background {
        logits.push(bank.background_weight * bank.background_logit);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| math::exp(l - max)).collect();
    let z: f64 = exps.iter().sum();
    let mut probs: Vec<f64> = exps.into_iter().map(|e| e / z).collect();
    let background = if cfg.background { probs.pop() } else { None };
    Ok(ClassScores { probs, background })
}
