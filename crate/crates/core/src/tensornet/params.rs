use std::sync::Arc;

use crate::{Error, Result};

/// Dense row-major `f32` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        LayoutEntry {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of named tensors making up a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    pub fn new(entries: Vec<LayoutEntry>) -> Self {
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0;
        for entry in &entries {
            offsets.push(total);
            total += entry.numel();
        }
        Layout {
            entries,
            offsets,
            total,
        }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn range(&self, index: usize) -> std::ops::Range<usize> {
        let start = self.offsets[index];
        start..start + self.entries[index].numel()
    }
}

/// Flat parameter vector plus the layout that gives it structure.
///
/// This is the unit exchanged between server and clients and the input to
/// model hashing.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: Arc<Layout>,
    values: Vec<f32>,
}

impl ModelParams {
    pub fn new(layout: Arc<Layout>, values: Vec<f32>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::invalid(format!(
                "layout holds {} values, got {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(ModelParams { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.total()];
        ModelParams { layout, values }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    /// Values of the `index`-th tensor in layout order.
    pub fn tensor(&self, index: usize) -> &[f32] {
        &self.values[self.layout.range(index)]
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&[f32]> {
        let index = self.layout.entries().iter().position(|e| e.name == name)?;
        Some(self.tensor(index))
    }

    /// Disjoint mutable views of every tensor, in layout order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::with_capacity(self.layout.entries().len());
        let mut rest = self.values.as_mut_slice();
        for entry in self.layout.entries() {
            let (head, tail) = rest.split_at_mut(entry.numel());
            out.push(head);
            rest = tail;
        }
        out
    }
}
