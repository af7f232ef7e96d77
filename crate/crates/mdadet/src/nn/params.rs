//! Named parameter storage with per-image gradient buffers.

use ndarray::{ArrayD, ArrayViewD};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat registry of named parameter arrays. Layers hold `ParamId`s; the
/// optimizer and checkpoint code walk the registry by index.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, array: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.arrays.push(array);
        ParamId(self.arrays.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.arrays[id.0]
    }

    /// Positional access, aligned with `GradStore` iteration order.
    pub fn at_mut(&mut self, index: usize) -> &mut ArrayD<f64> {
        &mut self.arrays[index]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.arrays.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.arrays.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    /// Copy every scalar into one flat vector (registry order).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for a in &self.arrays {
            out.extend(a.iter().copied());
        }
        out
    }

    /// Overwrite all parameters from a flat vector (inverse of `flatten`).
    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for a in &mut self.arrays {
            for v in a.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
    }

    /// Read/modify/write a single scalar by flat offset. Used by the
    /// finite-difference harness.
    pub fn nudge_scalar(&mut self, flat_index: usize, delta: f64) -> f64 {
        let mut off = 0;
        for a in &mut self.arrays {
            if flat_index < off + a.len() {
                let v = a.iter_mut().nth(flat_index - off).expect("index in range");
                *v += delta;
                return *v;
            }
            off += a.len();
        }
        panic!("flat index {flat_index} out of range");
    }
}

/// Gradient buffers aligned with a `ParamStore`, one array per parameter.
#[derive(Debug, Clone)]
pub struct GradStore {
    arrays: Vec<ArrayD<f64>>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        GradStore {
            arrays: params
                .arrays
                .iter()
                .map(|a| ArrayD::zeros(a.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.arrays[id.0]
    }

    pub fn view(&self, id: ParamId) -> ArrayViewD<'_, f64> {
        self.arrays[id.0].view()
    }

    /// Accumulate `other` into `self`, element-wise.
    pub fn add_assign(&mut self, other: &GradStore) {
        assert_eq!(self.arrays.len(), other.arrays.len());
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            *a += b;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for a in &self.arrays {
            out.extend(a.iter().copied());
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<f64>> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<f64>> {
        self.arrays.iter_mut()
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.arrays {
            a.mapv_inplace(|v| v * factor);
        }
    }
}
