//! Parameter and buffer storage with stable hierarchical names.
//!
//! Trainable parameters (conv weights, biases, batch-norm affine pairs) live
//! in a [`ParamStore`]; non-trainable state (batch-norm running statistics)
//! lives in a [`BufferStore`]. Names follow the module tree
//! (`encoder.rgb.stage2.block0.conv1.weight`) so checkpoints and parameter
//! audits can address components by prefix.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct BufId(pub(crate) usize);

#[derive(Clone)]
struct Entry {
    name: String,
    value: ArrayD<f64>,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Number of trainable scalars across all parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Number of trainable scalars under a name prefix.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    fn insert(&mut self, name: String, value: ArrayD<f64>) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name, value });
        ParamId(self.entries.len() - 1)
    }
}

#[derive(Clone, Default)]
pub struct BufferStore {
    entries: Vec<Entry>,
}

impl BufferStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: BufId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: BufId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: BufId) -> &str {
        &self.entries[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn find(&self, name: &str) -> Option<BufId> {
        self.entries.iter().position(|e| e.name == name).map(BufId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert(&mut self, name: String, value: ArrayD<f64>) -> BufId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate buffer name {name}"
        );
        self.entries.push(Entry { name, value });
        BufId(self.entries.len() - 1)
    }
}

/// Registers parameters under a hierarchical path while a model is built.
pub struct Builder<'a> {
    pub ps: &'a mut ParamStore,
    pub bufs: &'a mut BufferStore,
    pub rng: &'a mut ChaCha8Rng,
    path: String,
}

impl<'a> Builder<'a> {
    pub fn new(
        ps: &'a mut ParamStore,
        bufs: &'a mut BufferStore,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        Builder { ps, bufs, rng, path: String::new() }
    }

    pub fn child(&mut self, name: &str) -> Builder<'_> {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        };
        Builder { ps: self.ps, bufs: self.bufs, rng: self.rng, path }
    }

    fn full(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        }
    }

    /// Convolution weight `(out, in, k, k)` from a fan-in-scaled truncated
    /// normal: sigma = sqrt(2 / fan_in), resampled beyond two sigma.
    pub fn conv_weight(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) -> ParamId {
        let fan_in = (in_c * k * k) as f64;
        let sigma = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, sigma).unwrap();
        let n = out_c * in_c * k * k;
        let mut vals = Vec::with_capacity(n);
        while vals.len() < n {
            let v = normal.sample(self.rng);
            if v.abs() <= 2.0 * sigma {
                vals.push(v);
            }
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&[out_c, in_c, k, k]), vals).unwrap();
        self.ps.insert(self.full(name), arr)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.ps.insert(self.full(name), ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.ps.insert(self.full(name), ArrayD::from_elem(IxDyn(shape), 1.0))
    }

    pub fn buffer_zeros(&mut self, name: &str, shape: &[usize]) -> BufId {
        self.bufs.insert(self.full(name), ArrayD::zeros(IxDyn(shape)))
    }

    pub fn buffer_ones(&mut self, name: &str, shape: &[usize]) -> BufId {
        self.bufs.insert(self.full(name), ArrayD::from_elem(IxDyn(shape), 1.0))
    }

    /// Uniform sample used where truncated-normal scaling does not apply.
    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        self.ps.insert(self.full(name), ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap())
    }
}
