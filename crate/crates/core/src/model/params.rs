use std::ops::{Deref, DerefMut, Range};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    TokenEmbedding,
    KeyEmbedding,
    VisualProjection,
    HiddenWeight,
    HiddenBias,
    HeadWeight,
    HeadBias,
    CopyGate,
}

impl Segment {
    pub const ALL: [Segment; 8] = [
        Segment::TokenEmbedding,
        Segment::KeyEmbedding,
        Segment::VisualProjection,
        Segment::HiddenWeight,
        Segment::HiddenBias,
        Segment::HeadWeight,
        Segment::HeadBias,
        Segment::CopyGate,
    ];
}

/// Shape of the QA model's flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    /// Token vocabulary size including the out-of-vocabulary row.
    pub n_tokens: usize,
    /// One slot per key plus a trailing slot for the empty question.
    pub n_key_slots: usize,
    pub visual_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_answers: usize,
    #[serde(default)]
    pub frozen: Vec<Segment>,
}

impl ModelLayout {
    pub fn segment_len(&self, s: Segment) -> usize {
        match s {
            Segment::TokenEmbedding => self.n_tokens * self.embed_dim,
            Segment::KeyEmbedding => self.n_key_slots * self.embed_dim,
            Segment::VisualProjection => self.embed_dim * self.visual_dim,
            Segment::HiddenWeight => self.hidden_dim * self.embed_dim,
            Segment::HiddenBias => self.hidden_dim,
            Segment::HeadWeight => self.n_answers * self.hidden_dim,
            Segment::HeadBias => self.n_answers,
            Segment::CopyGate => self.n_key_slots,
        }
    }

    pub fn range(&self, s: Segment) -> Range<usize> {
        let mut start = 0;
        for seg in Segment::ALL {
            let len = self.segment_len(seg);
            if seg == s {
                return start..start + len;
            }
            start += len;
        }
        unreachable!()
    }

    pub fn dim(&self) -> usize {
        Segment::ALL.iter().map(|&s| self.segment_len(s)).sum()
    }

    pub fn is_trainable(&self, s: Segment) -> bool {
        !self.frozen.contains(&s)
    }

    pub fn trainable_count(&self) -> usize {
        Segment::ALL.iter().filter(|s| self.is_trainable(**s)).map(|&s| self.segment_len(s)).sum()
    }

    /// Per-coordinate trainability mask.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.dim()];
        for &s in &self.frozen {
            for m in &mut mask[self.range(s)] {
                *m = false;
            }
        }
        mask
    }
}

/// Flat model weights together with the layout that names their segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub layout: ModelLayout,
    pub values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: ModelLayout) -> Self {
        let values = vec![0.0; layout.dim()];
        Self { layout, values }
    }

    pub fn from_values(layout: ModelLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::Dimension { expected: layout.dim(), actual: values.len() });
        }
        Ok(Self { layout, values })
    }

    pub fn segment(&self, s: Segment) -> &[f64] {
        &self.values[self.layout.range(s)]
    }

    pub fn segment_mut(&mut self, s: Segment) -> &mut [f64] {
        let r = self.layout.range(s);
        &mut self.values[r]
    }

    /// `self - other`, element-wise.
    pub fn delta_from(&self, other: &ParameterVector) -> Vec<f64> {
        self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect()
    }

    pub fn add_assign(&mut self, update: &[f64]) {
        for (w, u) in self.values.iter_mut().zip(update) {
            *w += u;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
