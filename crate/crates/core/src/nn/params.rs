use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NnError;

/// Index of a tensor inside its [`ModuleParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A learnable tensor stored row-major, with a gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of columns for a matrix (the last dimension), or the length of a vector.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }
}

/// A named collection of tensors belonging to one model.
///
/// Initialization draws from a ChaCha stream seeded with `seed`; tensors are
/// initialized in registration order, so building the same model twice with
/// the same seed reproduces the values bit for bit.
#[derive(Debug, Clone)]
pub struct ModuleParams {
    tensors: Vec<ParamTensor>,
    index: BTreeMap<String, ParamId>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for ModuleParams {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.tensors == other.tensors
    }
}

impl ModuleParams {
    pub fn new(seed: u64) -> Self {
        Self {
            tensors: Vec::new(),
            index: BTreeMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<ParamId, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.tensors.len());
        let grad = vec![0.0; values.len()];
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape,
            values,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a `rows x cols` weight matrix drawn uniformly from
    /// `[-a, a]`, `a = sqrt(6 / (rows + cols))`.
    pub fn add_weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, NnError> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| self.rng.random_range(-a..=a)).collect();
        self.insert(name, vec![rows, cols], values)
    }

    /// Registers a zero-initialized bias vector.
    pub fn add_bias(&mut self, name: &str, len: usize) -> Result<ParamId, NnError> {
        self.insert(name, vec![len], vec![0.0; len])
    }

    /// Registers a tensor with explicit values.
    pub fn add_tensor(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<ParamId, NnError> {
        let n: usize = shape.iter().product();
        super::check_dim(name, n, values.len())?;
        self.insert(name, shape, values)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NnError> {
        self.index.get(name).copied().ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&ParamTensor, NnError> {
        Ok(self.get(self.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut ParamTensor, NnError> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds per-tensor gradients (as returned by [`super::Gradients::store`]) into the grad buffers.
    pub fn accumulate(&mut self, grads: &[Vec<f64>]) {
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if g.is_empty() {
                continue;
            }
            for (acc, v) in t.grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    /// Multiplies every gradient by `factor` (used to average over a batch).
    pub fn scale_grad(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.grad.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rebuilds the name index after tensors were replaced wholesale (checkpoint load).
    pub(crate) fn from_tensors(seed: u64, tensors: Vec<ParamTensor>) -> Result<Self, NnError> {
        let mut out = Self::new(seed);
        for mut t in tensors {
            t.grad = vec![0.0; t.values.len()];
            let name = t.name.clone();
            if out.index.contains_key(&name) {
                return Err(NnError::DuplicateParam(name));
            }
            out.index.insert(name, ParamId(out.tensors.len()));
            out.tensors.push(t);
        }
        Ok(out)
    }

    /// Copies values from `other` for every tensor whose name and shape match.
    pub fn load_values_from(&mut self, other: &ModuleParams) -> Result<(), NnError> {
        for t in &mut self.tensors {
            let src = other.by_name(&t.name)?;
            super::check_dim(&t.name, t.values.len(), src.values.len())?;
            t.values.copy_from_slice(&src.values);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_values() {
        let build = |seed| {
            let mut p = ModuleParams::new(seed);
            p.add_weight("w", 4, 3).unwrap();
            p.add_bias("b", 4).unwrap();
            p.add_weight("v", 2, 2).unwrap();
            p
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7).tensors()[0].values, build(8).tensors()[0].values);
    }

    #[test]
    fn init_is_bounded_and_biases_zero() {
        let mut p = ModuleParams::new(1);
        let w = p.add_weight("w", 10, 6).unwrap();
        let b = p.add_bias("b", 10).unwrap();
        let a = (6.0f64 / 16.0).sqrt();
        assert!(p.get(w).values.iter().all(|v| v.abs() <= a));
        assert!(p.get(b).values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ModuleParams::new(0);
        p.add_bias("b", 2).unwrap();
        assert_eq!(p.add_bias("b", 3), Err(NnError::DuplicateParam("b".into())));
    }
}
