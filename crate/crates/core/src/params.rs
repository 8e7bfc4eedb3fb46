//! Named parameter storage shared by the model, optimizer, and checkpoints.
//!
//! Parameters live here as `f32` master copies. Each training or inference
//! pass binds them onto a fresh [`Tape`](crate::Tape) as leaves (casting to
//! the tape's scalar type), runs the graph, and reads gradients back out by
//! the same handles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Tape, Tensor, TensorId};

/// Stable handle for one named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named `f32` parameter tensors.
///
/// Registration order is the canonical order: binding, optimizer state, and
/// checkpoint serialization all iterate in it, so it must be deterministic
/// for a given model configuration.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    /// Registers a parameter under a unique name and returns its handle.
    ///
    /// Panics on duplicate names: parameter names key checkpoint blobs, so a
    /// collision is a wiring bug, not a runtime condition.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.iter().any(|n| *n == name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.values[id.0]
    }

    /// Replaces a parameter's value. The shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<f32>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "parameter {} shape changed on set",
            self.names[id.0]
        );
        self.values[id.0] = value;
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Iterates `(name, value)` pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Handles for every parameter in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Inserts every parameter into `tape` as a leaf (cast to `T`) and
    /// returns the handle-to-tape mapping. `trainable` controls whether the
    /// leaves track gradients.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let ids = self
            .values
            .iter()
            .map(|v| tape.leaf(&v.cast::<T>(), trainable))
            .collect();
        Bound { ids }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Mapping from [`ParamId`] handles to the leaf nodes of one particular tape.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<TensorId>,
}

impl Bound {
    pub fn tensor(&self, id: ParamId) -> TensorId {
        self.ids[id.0]
    }

    /// Assembles a binding from pre-pushed tensor ids in registration
    /// order. Lets a finite-difference harness bind every parameter as its
    /// own differentiable leaf instead of going through [`ParamStore::bind`].
    pub fn from_ids(ids: Vec<TensorId>) -> Bound {
        Bound { ids }
    }
}

/// Uniform init in `[-limit, limit)`.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| (rng.gen_range(-limit..limit)) as f32)
        .collect();
    Tensor::new(shape, data)
}

/// Uniform init scaled by `1/sqrt(fan_in)`, the usual dense/conv default.
pub fn fan_in_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    assert!(fan_in > 0, "fan_in must be positive");
    uniform_init(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn register_get_set_roundtrip() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(store.name(id), "w");
        assert_eq!(store.get(id).data(), &[1.0, 2.0, 3.0, 4.0]);
        store.set(id, Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        assert_eq!(store.get(id).data(), &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(store.by_name("w"), Some(id));
        assert_eq!(store.by_name("missing"), None);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[1]));
        store.register("w", Tensor::zeros(&[1]));
    }

    #[test]
    fn bind_casts_and_tracks_gradients() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::new(&[2], vec![1.5, -2.0]));
        let mut tape: Tape<f64> = Tape::new();
        let bound = store.bind(&mut tape, true);
        let w = bound.tensor(id);
        assert_eq!(tape.data(w), &[1.5, -2.0]);
        let sq = tape.mul(w, w);
        let y = tape.sum_all(sq);
        tape.backward(y);
        let g = tape.grad(w).expect("leaf gradient");
        assert_eq!(g.data(), &[3.0, -4.0]);
    }

    #[test]
    fn fan_in_init_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = fan_in_init(&mut rng, &[64, 16], 16);
        let limit = 1.0 / 4.0 + 1e-6;
        assert!(t.data().iter().all(|v| (v.abs() as f64) < limit));
        // Not degenerate: values spread across the range.
        assert!(t.data().iter().any(|v| *v > 0.1));
        assert!(t.data().iter().any(|v| *v < -0.1));
    }
}
