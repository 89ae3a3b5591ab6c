//! Named parameter storage.
//!
//! Parameters live host-side in registration order; each training step binds
//! them onto a fresh tape as `requires_grad` leaves. Registration order is
//! also initialization order (the init stream is consumed exactly once per
//! parameter) and checkpoint order.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::StreamRng;
use crate::tensor::{Element, Result as TResult, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Element> Param<T> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub enum Init {
    Zeros,
    Const(f64),
    /// Zero-mean normal with the given standard deviation. Draws f64 and
    /// converts, so f32 and f64 models see identical values.
    Normal { std: f64 },
    Data(Vec<f64>),
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Param<T>)>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init, rng: &mut StreamRng) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Const(v) => vec![T::from_f64(v); numel],
            Init::Normal { std } => (0..numel)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    T::from_f64(z * std)
                })
                .collect(),
            Init::Data(values) => {
                assert_eq!(values.len(), numel, "init data length for {name}");
                values.into_iter().map(T::from_f64).collect()
            }
        };
        let id = ParamId(self.entries.len());
        self.entries.push((name.to_string(), Param { data, shape }));
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0].1
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, p))| (ParamId(i), n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.numel()).sum()
    }

    /// Register every parameter on `tape` as a gradient-tracked leaf, in
    /// store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> TResult<BoundParams> {
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (_, p) in &self.entries {
            tensors.push(tape.leaf(p.data.clone(), p.shape.clone(), true)?);
        }
        Ok(BoundParams { tensors })
    }
}

/// Tape handles for every parameter of one bind call.
pub struct BoundParams {
    tensors: Vec<Tensor>,
}

impl BoundParams {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn init_order_is_deterministic() {
        let build = || {
            let mut rng = StreamRng::new(5, Stream::ParamInit);
            let mut store: ParamStore<f32> = ParamStore::new();
            store.add("a", vec![4], Init::Normal { std: 1.0 }, &mut rng);
            store.add("b", vec![2, 2], Init::Normal { std: 0.1 }, &mut rng);
            store
        };
        let s1 = build();
        let s2 = build();
        for ((_, n1, p1), (_, n2, p2)) in s1.iter().zip(s2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.data, p2.data);
        }
    }

    #[test]
    fn f32_and_f64_see_identical_draws() {
        let mut rng32 = StreamRng::new(9, Stream::ParamInit);
        let mut rng64 = StreamRng::new(9, Stream::ParamInit);
        let mut s32: ParamStore<f32> = ParamStore::new();
        let mut s64: ParamStore<f64> = ParamStore::new();
        let a = s32.add("w", vec![8], Init::Normal { std: 0.5 }, &mut rng32);
        let b = s64.add("w", vec![8], Init::Normal { std: 0.5 }, &mut rng64);
        for (x, y) in s32.get(a).data.iter().zip(&s64.get(b).data) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn bind_registers_leaves_in_order() {
        let mut rng = StreamRng::new(1, Stream::ParamInit);
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add("a", vec![3], Init::Const(2.0), &mut rng);
        let b = store.add("b", vec![2], Init::Zeros, &mut rng);
        let mut tape: Tape<f64> = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        assert_eq!(tape.value(bound.get(a)), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.value(bound.get(b)), &[0.0, 0.0]);
    }
}
