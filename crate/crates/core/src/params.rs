//! Flat parameter storage with a named layer layout.
//!
//! All model parameters live in one `Vec<f64>`; the layout records where each
//! named layer sits. Gradients, Fisher statistics, and optimizer state all use
//! the same flat indexing, so "the k-th parameter" means the same thing
//! everywhere.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named layer inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    /// (rows, cols); vectors are (len, 1).
    pub shape: (usize, usize),
    /// Start offset into the flat vector.
    pub offset: usize,
}

impl LayerSpec {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered layer table; total length is the parameter count P.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    layers: Vec<LayerSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn new(shapes: &[(&str, (usize, usize))]) -> Self {
        let mut layers = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, shape) in shapes {
            let spec = LayerSpec { name: (*name).to_string(), shape: *shape, offset };
            offset += spec.len();
            layers.push(spec);
        }
        Self { layers, total: offset }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Structural(format!("unknown layer {:?}", name)))
    }
}

/// A flat vector tied to a layout: parameters, a gradient, or a Fisher
/// diagonal all share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.total_len();
        Self { values: vec![0.0; n], layout }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Structural(format!(
                "parameter vector length {} does not match layout length {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, name: &str) -> Result<&[f64]> {
        let spec = self.layout.layer(name)?;
        Ok(&self.values[spec.range()])
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let spec = self.layout.layer(name)?;
        Ok(&mut self.values[spec.range()])
    }

    /// Name of the layer containing flat index `idx` (for error messages).
    pub fn layer_of(&self, idx: usize) -> Option<&str> {
        self.layout
            .layers()
            .iter()
            .find(|l| l.range().contains(&idx))
            .map(|l| l.name.as_str())
    }

    /// First non-finite entry, reported as (layer name, flat index).
    pub fn first_non_finite(&self) -> Option<(String, usize)> {
        self.values.iter().position(|v| !v.is_finite()).map(|idx| {
            let name = self.layer_of(idx).unwrap_or("<unknown>").to_string();
            (name, idx)
        })
    }

    pub fn add_assign(&mut self, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for i in 0..self.values.len() {
            self.values[i] += other.values[i];
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for i in 0..self.values.len() {
            self.values[i] += alpha * other.values[i];
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.values.iter_mut() {
            *v *= alpha;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        crate::linalg::dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new(&[
            ("a.weight", (2, 3)),
            ("a.bias", (2, 1)),
            ("b.weight", (1, 2)),
        ]))
    }

    #[test]
    fn offsets_are_contiguous() {
        let l = layout();
        assert_eq!(l.total_len(), 6 + 2 + 2);
        assert_eq!(l.layer("a.weight").unwrap().offset, 0);
        assert_eq!(l.layer("a.bias").unwrap().offset, 6);
        assert_eq!(l.layer("b.weight").unwrap().offset, 8);
    }

    #[test]
    fn layer_views_alias_flat_storage() {
        let l = layout();
        let mut p = ParamVector::zeros(l);
        p.layer_mut("a.bias").unwrap()[1] = 7.5;
        assert_eq!(p.values[7], 7.5);
        assert_eq!(p.layer("a.bias").unwrap(), &[0.0, 7.5]);
        assert_eq!(p.layer_of(7), Some("a.bias"));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let l = layout();
        assert!(ParamVector::from_values(l, vec![0.0; 3]).is_err());
    }

    #[test]
    fn non_finite_entry_names_its_layer() {
        let l = layout();
        let mut p = ParamVector::zeros(l);
        p.layer_mut("b.weight").unwrap()[0] = f64::NAN;
        let (name, idx) = p.first_non_finite().unwrap();
        assert_eq!(name, "b.weight");
        assert_eq!(idx, 8);
    }

    #[test]
    fn unknown_layer_is_an_error() {
        let l = layout();
        let p = ParamVector::zeros(l);
        assert!(p.layer("missing").is_err());
    }
}
