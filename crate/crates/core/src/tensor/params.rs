use rand::Rng;

use super::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum ParamInit {
    Zeros,
    Ones,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
}

/// Named, ordered collection of trainable tensors.
///
/// Names are hierarchical (`qwgt.0.w_q`) and unique; order of insertion is
/// the order used by optimizers and checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn create(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: ParamInit,
        rng: &mut impl Rng,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = match init {
            ParamInit::Zeros => vec![0.0; numel],
            ParamInit::Ones => vec![1.0; numel],
            ParamInit::Glorot { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        self.insert(name, Tensor::new(shape, data))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Zero buffers shaped like every parameter, indexed by `ParamId`.
    pub fn zero_buffers(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect()
    }
}
