//! Reverse-mode automatic differentiation on a per-sample tape.
//!
//! A [`Graph`] owns the values of every node created during one forward
//! pass. Operations append nodes together with a backward closure; cached
//! closures only capture node indices and small auxiliary data, reading
//! values back from the tape during [`Graph::backward`]. Graphs are cheap
//! to build and are dropped after each sample, so parameters enter as
//! fresh leaves bound to their [`crate::params::ParamId`] every pass.

use ndarray::{ArrayD, IxDyn};

pub type Arr = ArrayD<f64>;

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Accumulates gradient contributions per node during backward.
pub struct Accum {
    grads: Vec<Option<Arr>>,
}

impl Accum {
    pub fn add(&mut self, node: Var, g: Arr) {
        match &mut self.grads[node.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

type BackFn = Box<dyn Fn(&[Arr], &Arr, &mut Accum)>;

pub struct Graph {
    values: Vec<Arr>,
    backs: Vec<Option<BackFn>>,
    param_of: Vec<Option<usize>>,
}

/// Gradients of one backward pass, indexed by node; parameter gradients
/// are extracted per [`crate::params::ParamId`] by the caller.
pub struct Gradients {
    pub(crate) node_grads: Vec<Option<Arr>>,
    pub(crate) param_of: Vec<Option<usize>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Arr> {
        self.node_grads[v.0].as_ref()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            backs: Vec::new(),
            param_of: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.values[v.0];
        debug_assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
        a.iter().next().copied().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub(crate) fn push(&mut self, value: Arr, back: Option<BackFn>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        self.param_of.push(None);
        Var(self.values.len() - 1)
    }

    /// Insert a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Arr::from_elem(IxDyn(&[]), v))
    }

    /// Insert a differentiable leaf (an input we want gradients for).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, None)
    }

    /// Insert a leaf bound to a parameter slot so its gradient can be
    /// collected into a [`crate::params::GradMap`].
    pub fn param_leaf(&mut self, value: Arr, param_index: usize) -> Var {
        let v = self.push(value, None);
        self.param_of[v.0] = Some(param_index);
        v
    }

    /// Run reverse-mode accumulation from `root` (any shape; the seed
    /// gradient is all ones). Keeps every node's gradient so tests can
    /// inspect intermediates.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut acc = Accum {
            grads: vec![None; self.values.len()],
        };
        acc.add(root, Arr::from_elem(self.values[root.0].raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            if acc.grads[i].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[i] {
                let g = acc.grads[i].clone().unwrap();
                back(&self.values, &g, &mut acc);
            }
        }
        Gradients {
            node_grads: acc.grads,
            param_of: self.param_of.clone(),
        }
    }

    // ---- elementwise arithmetic -------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.values[a.0] + &self.values[b.0];
        self.push(
            value,
            Some(Box::new(move |_, g, acc| {
                acc.add(a, g.clone());
                acc.add(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = &self.values[a.0] - &self.values[b.0];
        self.push(
            value,
            Some(Box::new(move |_, g, acc| {
                acc.add(a, g.clone());
                acc.add(b, -g.clone());
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = -self.values[a.0].clone();
        self.push(value, Some(Box::new(move |_, g, acc| acc.add(a, -g.clone()))))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = &self.values[a.0] * &self.values[b.0];
        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                acc.add(a, g * &vals[b.0]);
                acc.add(b, g * &vals[a.0]);
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div: shape mismatch");
        let value = &self.values[a.0] / &self.values[b.0];
        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                acc.add(a, g / &vals[b.0]);
                acc.add(b, -(g * &vals[a.0] / (&vals[b.0] * &vals[b.0])));
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.values[a.0] + c;
        self.push(value, Some(Box::new(move |_, g, acc| acc.add(a, g.clone()))))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.values[a.0] * c;
        self.push(value, Some(Box::new(move |_, g, acc| acc.add(a, g * c))))
    }

    /// Add a constant array (no gradient into the constant).
    pub fn add_const(&mut self, a: Var, c: Arr) -> Var {
        assert_eq!(self.shape(a), c.shape(), "add_const: shape mismatch");
        let value = &self.values[a.0] + &c;
        self.push(value, Some(Box::new(move |_, g, acc| acc.add(a, g.clone()))))
    }

    /// Multiply by a constant array elementwise.
    pub fn mul_const(&mut self, a: Var, c: Arr) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const: shape mismatch");
        let value = &self.values[a.0] * &c;
        self.push(value, Some(Box::new(move |_, g, acc| acc.add(a, g * &c))))
    }

    // ---- nonlinearities ----------------------------------------------

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                let mut d = g.clone();
                d.zip_mut_with(&vals[a.0], |gi, &x| {
                    if x <= 0.0 {
                        *gi = 0.0;
                    }
                });
                acc.add(a, d);
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.values[a.0].mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                let mut d = g.clone();
                d.zip_mut_with(&vals[a.0], |gi, &x| {
                    if x <= 0.0 {
                        *gi *= slope;
                    }
                });
                acc.add(a, d);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let out = self.push(value, None);
        self.backs[out.0] = Some(Box::new(move |vals, g, acc| {
            let s = &vals[out.0];
            acc.add(a, g * &(s * &(1.0 - s)));
        }));
        out
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(f64::ln);
        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                acc.add(a, g / &vals[a.0]);
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(f64::exp);
        let out = self.push(value, None);
        self.backs[out.0] = Some(Box::new(move |vals, g, acc| {
            acc.add(a, g * &vals[out.0]);
        }));
        out
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(f64::abs);
        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                let mut d = g.clone();
                d.zip_mut_with(&vals[a.0], |gi, &x| *gi *= sign(x));
                acc.add(a, d);
            })),
        )
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "max_elem: shape mismatch");
        let value = ndarray::Zip::from(&self.values[a.0])
            .and(&self.values[b.0])
            .map_collect(|&x, &y| x.max(y));
        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                let take_a = ndarray::Zip::from(g)
                    .and(&vals[a.0])
                    .and(&vals[b.0])
                    .map_collect(|&gi, &x, &y| if x >= y { gi } else { 0.0 });
                let take_b = ndarray::Zip::from(g)
                    .and(&vals[a.0])
                    .and(&vals[b.0])
                    .map_collect(|&gi, &x, &y| if x < y { gi } else { 0.0 });
                acc.add(a, take_a);
                acc.add(b, take_b);
            })),
        )
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "min_elem: shape mismatch");
        let value = ndarray::Zip::from(&self.values[a.0])
            .and(&self.values[b.0])
            .map_collect(|&x, &y| x.min(y));
        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                let take_a = ndarray::Zip::from(g)
                    .and(&vals[a.0])
                    .and(&vals[b.0])
                    .map_collect(|&gi, &x, &y| if x <= y { gi } else { 0.0 });
                let take_b = ndarray::Zip::from(g)
                    .and(&vals[a.0])
                    .and(&vals[b.0])
                    .map_collect(|&gi, &x, &y| if x > y { gi } else { 0.0 });
                acc.add(a, take_a);
                acc.add(b, take_b);
            })),
        )
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Arr::from_elem(IxDyn(&[]), self.values[a.0].sum());
        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                let gv = g.iter().next().copied().unwrap();
                acc.add(a, Arr::from_elem(vals[a.0].raw_dim(), gv));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let value = Arr::from_elem(IxDyn(&[]), self.values[a.0].sum() / n);
        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                let gv = g.iter().next().copied().unwrap() / n;
                acc.add(a, Arr::from_elem(vals[a.0].raw_dim(), gv));
            })),
        )
    }

    // ---- shape plumbing -------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let orig: Vec<usize> = self.shape(a).to_vec();
        let value = self.values[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            value,
            Some(Box::new(move |_, g, acc| {
                acc.add(
                    a,
                    g.clone()
                        .into_shape_with_order(IxDyn(&orig))
                        .expect("reshape backward"),
                );
            })),
        )
    }

    /// Identity forward; backward multiplies the gradient by `-lambda`.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Var {
        let value = self.values[a.0].clone();
        self.push(value, Some(Box::new(move |_, g, acc| acc.add(a, g * (-lambda)))))
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
