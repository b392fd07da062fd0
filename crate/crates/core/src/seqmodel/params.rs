use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};
use crate::hash::{Digest, Hasher};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered segment table describing a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub segments: Vec<Segment>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    layout: Layout,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment and returns its offset.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.layout.len();
        self.layout.segments.push(Segment {
            name: name.into(),
            offset,
            shape: shape.to_vec(),
        });
        offset
    }

    pub fn finish(self) -> Layout {
        self.layout
    }
}

/// Flat array of all trainable scalars of a model, tagged with its layout and
/// the lineage of the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    layout: Layout,
    lineage: Digest,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Layout, lineage: Digest) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(structural("parameter count does not match the layout"));
        }
        Ok(ParamVector {
            values,
            layout,
            lineage,
        })
    }

    pub fn zeros(layout: Layout, lineage: Digest) -> Self {
        ParamVector {
            values: vec![0.0; layout.len()],
            layout,
            lineage,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn lineage(&self) -> Digest {
        self.lineage
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let s = self.layout.segment(name)?;
        Some(&self.values[s.offset..s.offset + s.len()])
    }

    /// Hash of lineage and exact parameter bits.
    pub fn content_hash(&self) -> Digest {
        let mut h = Hasher::new();
        h.update(&self.lineage.0);
        h.u64(self.values.len() as u64);
        for &v in &self.values {
            h.f64(v);
        }
        h.finish()
    }

    pub fn norm(&self) -> f64 {
        crate::math::norm(&self.values)
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn zero_grad(&self) -> GradBuffer {
        GradBuffer::zeros(self.len())
    }
}

/// Gradient aligned with a [`ParamVector`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub values: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(n: usize) -> Self {
        GradBuffer { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) -> Result<()> {
        if other.len() != self.len() {
            return Err(structural("gradient buffers differ in length"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        crate::math::norm(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }
}
