//! Flat parameter vectors with a named segment layout.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{DgmError, Result};
use crate::linalg::Matrix;

/// Which weight-decay coefficient applies to a segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayGroup {
    /// Smoother network weights (core, mean head, feature heads).
    Smoother,
    /// Dynamics network weights and parametric coefficients.
    Dynamics,
    /// Kernel lengthscales, noise scales: never decayed.
    Exempt,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub decay: DecayGroup,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Segments are contiguous, disjoint, in order, and uniquely named.
    pub fn is_consistent(&self) -> bool {
        let mut expected = 0;
        let mut names = std::collections::HashSet::new();
        for s in &self.segments {
            if s.offset != expected || !names.insert(s.name.as_str()) {
                return false;
            }
            expected += s.len();
        }
        true
    }
}

/// One structured parameter block before flattening.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
    pub decay: DecayGroup,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, value: Matrix, decay: DecayGroup) -> Self {
        Self {
            name: name.into(),
            value,
            decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

/// Concatenates named blocks in the given order.
///
/// Panics on duplicate names: two blocks with one name cannot be told apart
/// after flattening.
pub fn flatten_params(tensors: &[NamedTensor]) -> ParamVector {
    let mut values = Vec::new();
    let mut segments = Vec::with_capacity(tensors.len());
    for t in tensors {
        assert!(
            segments.iter().all(|s: &Segment| s.name != t.name),
            "duplicate parameter segment `{}`",
            t.name
        );
        segments.push(Segment {
            name: t.name.clone(),
            offset: values.len(),
            rows: t.value.rows(),
            cols: t.value.cols(),
            decay: t.decay,
        });
        values.extend_from_slice(t.value.as_slice());
    }
    ParamVector {
        values,
        layout: Layout { segments },
    }
}

impl ParamVector {
    pub fn empty() -> Self {
        flatten_params(&[])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn unflatten(&self) -> Vec<NamedTensor> {
        self.layout
            .segments
            .iter()
            .map(|s| NamedTensor {
                name: s.name.clone(),
                value: Matrix::from_vec(s.rows, s.cols, self.values[s.range()].to_vec()),
                decay: s.decay,
            })
            .collect()
    }

    pub fn segment(&self, name: &str) -> Result<&[f64]> {
        let s = self
            .layout
            .get(name)
            .ok_or_else(|| DgmError::UnknownSegment(name.to_string()))?;
        Ok(&self.values[s.range()])
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let s = self
            .layout
            .get(name)
            .ok_or_else(|| DgmError::UnknownSegment(name.to_string()))?;
        Ok(Matrix::from_vec(s.rows, s.cols, self.values[s.range()].to_vec()))
    }

    pub fn set_segment(&mut self, name: &str, value: &Matrix) -> Result<()> {
        let s = self
            .layout
            .get(name)
            .ok_or_else(|| DgmError::UnknownSegment(name.to_string()))?
            .clone();
        if (s.rows, s.cols) != value.shape() {
            return Err(DgmError::Shape(format!(
                "segment `{name}` is {}x{}, got {:?}",
                s.rows,
                s.cols,
                value.shape()
            )));
        }
        self.values[s.range()].copy_from_slice(value.as_slice());
        Ok(())
    }

    /// Same layout with every value replaced.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            layout: self.layout.clone(),
        }
    }

    /// Appends `other`'s segments after this vector's.
    pub fn concat(&self, other: &ParamVector) -> ParamVector {
        let mut tensors = self.unflatten();
        tensors.extend(other.unflatten());
        flatten_params(&tensors)
    }

    /// Segment names mapped to decay group, one entry per coordinate.
    pub fn decay_groups(&self) -> Vec<DecayGroup> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.layout.segments {
            out.extend(std::iter::repeat_n(s.decay, s.len()));
        }
        out
    }

    /// Squared norm of the coordinates belonging to `group`.
    pub fn group_norm_sq(&self, group: DecayGroup) -> f64 {
        self.layout
            .segments
            .iter()
            .filter(|s| s.decay == group)
            .flat_map(|s| self.values[s.range()].iter())
            .map(|v| v * v)
            .sum()
    }

    pub fn index_by_name(&self) -> HashMap<String, Segment> {
        self.layout
            .segments
            .iter()
            .map(|s| (s.name.clone(), s.clone()))
            .collect()
    }
}
