//! Named parameter and normalization-state storage.
//!
//! Blocks register their weights here once at construction and hold on to
//! [`ParamId`]s; a fresh tape leafs the current values in at every step and
//! gradients are exported back after `backward`. Generator and discriminator
//! each own a separate store, which keeps their parameter sets disjoint by
//! construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<E: Scalar> {
    pub name: String,
    pub value: Tensor<E>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Scalar> {
    params: Vec<Param<E>>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Register a tensor under a unique name. Registering the same name twice
    /// is a wiring bug.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "parameter `{name}` registered twice"
        );
        let mut value = value;
        value.requires_grad = true;
        let id = ParamId(self.params.len());
        self.params.push(Param { name, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<E> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<E>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<E>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<E>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Sum of |grad| over every parameter; zero means nothing flowed here.
    pub fn grad_l1(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.value.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64().abs())
            .sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, contrib: &[E]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.numel() != contrib.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.value.shape.clone(),
                rhs: vec![contrib.len()],
            });
        }
        let g = p.value.grad_mut();
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi = *gi + *ci;
        }
        Ok(())
    }
}

/// Running statistics for one batch-norm site.
#[derive(Debug, Clone)]
pub struct BnState<E: Scalar> {
    pub name: String,
    pub mean: Vec<E>,
    pub var: Vec<E>,
    pub batches_seen: u64,
}

impl<E: Scalar> BnState<E> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BnState {
            name: name.into(),
            mean: vec![E::zero(); channels],
            var: vec![E::one(); channels],
            batches_seen: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateId(pub(crate) usize);

/// Store for all batch-norm running statistics of one network.
#[derive(Debug, Clone, Default)]
pub struct StateStore<E: Scalar> {
    states: Vec<BnState<E>>,
}

impl<E: Scalar> StateStore<E> {
    pub fn new() -> Self {
        StateStore { states: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, channels: usize) -> StateId {
        let name = name.into();
        assert!(
            self.states.iter().all(|s| s.name != name),
            "bn state `{name}` registered twice"
        );
        let id = StateId(self.states.len());
        self.states.push(BnState::new(name, channels));
        id
    }

    pub fn get(&self, id: StateId) -> &BnState<E> {
        &self.states[id.0]
    }

    pub fn get_mut(&mut self, id: StateId) -> &mut BnState<E> {
        &mut self.states[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &BnState<E>> {
        self.states.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut BnState<E>> {
        self.states.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Truncated normal init (std 0.02, resampled beyond two sigma), the default
/// for attention and MLP weights.
pub fn trunc_normal<E: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<E> {
    let n = crate::tensor::numel(shape);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v: f64 = rng.sample(rand_distr::StandardNormal);
        while v.abs() > 2.0 {
            v = rng.sample(rand_distr::StandardNormal);
        }
        data.push(E::of_f64(v * std));
    }
    Tensor {
        shape: shape.to_vec(),
        data,
        requires_grad: false,
        grad: None,
    }
}

/// Fan-in-scaled uniform init for conv kernels: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_fanin<E: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = crate::tensor::numel(shape);
    let data = (0..n)
        .map(|_| E::of_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
        requires_grad: false,
        grad: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_name_panics() {
        let mut store = ParamStore::<f32>::new();
        store.register("w", Tensor::zeros(vec![2]));
        store.register("w", Tensor::zeros(vec![2]));
    }

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = trunc_normal::<f64>(&mut rng, &[1000], 0.02);
        assert!(t.data.iter().all(|v| v.abs() <= 0.04 + 1e-12));
    }

    #[test]
    fn grad_accumulation_adds() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::zeros(vec![2]));
        store.accumulate_grad(id, &[1.0, 2.0]).unwrap();
        store.accumulate_grad(id, &[1.0, 2.0]).unwrap();
        assert_eq!(store.get(id).value.grad.as_ref().unwrap(), &vec![2.0, 4.0]);
    }
}
