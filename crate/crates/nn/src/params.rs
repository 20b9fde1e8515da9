//! Named parameter storage shared by all modules of a model, plus
//! per-parameter gradient accumulation across a batch of per-sample
//! graphs.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Arr, Gradients, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Copy parameter values from another store by name. Shapes must
    /// match; parameters missing on either side are an error.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), String> {
        if self.names != other.names {
            return Err("parameter name lists differ".into());
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err("parameter shape mismatch".into());
            }
            dst.assign(src);
        }
        Ok(())
    }
}

impl Graph {
    /// Bind a parameter as a leaf of this graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.param_leaf(store.value(id).clone(), id.0)
    }
}

/// Per-parameter gradient accumulator; add one [`Gradients`] per sample.
pub struct GradMap {
    grads: Vec<Option<Arr>>,
}

impl GradMap {
    pub fn zeros(store: &ParamStore) -> Self {
        GradMap {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, g: &Gradients) {
        for (node, pidx) in g.param_of.iter().enumerate() {
            if let (Some(pidx), Some(grad)) = (pidx, &g.node_grads[node]) {
                match &mut self.grads[*pidx] {
                    Some(acc) => *acc += grad,
                    slot @ None => *slot = Some(grad.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= factor;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Arr> {
        self.grads[id.0].as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Parameters that received any gradient in this accumulation.
    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }
}

/// He-normal initialization for convolution weights (Cout, Cin, k, k) or
/// transposed weights (Cin, Cout, k, k): std = sqrt(2 / fan_in).
pub fn init_conv(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Arr {
    let std = (2.0 / fan_in as f64).sqrt();
    normal(shape, std, rng)
}

/// Scaled-normal initialization for linear weights (in, out).
pub fn init_linear(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Arr {
    let std = (1.0 / fan_in as f64).sqrt();
    normal(shape, std, rng)
}

pub fn zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

pub fn full(shape: &[usize], v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(shape), v)
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Arr {
    let n: usize = shape.iter().product();
    // Box-Muller, deterministic under the seeded generator
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        out.push(r * (2.0 * std::f64::consts::PI * u2).cos() * std);
        if out.len() < n {
            out.push(r * (2.0 * std::f64::consts::PI * u2).sin() * std);
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), out).unwrap()
}

/// Deterministic RNG for model initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_accumulate_across_graphs() {
        let mut store = ParamStore::new();
        let w = store.register("w", full(&[2], 3.0));

        let mut gm = GradMap::zeros(&store);
        for _ in 0..2 {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let sq = g.mul(wv, wv);
            let loss = g.sum_all(sq);
            gm.accumulate(&g.backward(loss));
        }
        // d(w^2)/dw = 2w = 6, twice -> 12
        let gw = gm.get(w).unwrap();
        assert_eq!(gw.as_slice().unwrap(), &[12.0, 12.0]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_conv(&[4, 3, 3, 3], 27, &mut init_rng(5));
        let b = init_conv(&[4, 3, 3, 3], 27, &mut init_rng(5));
        assert_eq!(a, b);
    }
}
