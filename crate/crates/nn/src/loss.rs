//! Fused, numerically stable loss primitives.

use ndarray::IxDyn;

use crate::graph::{Arr, Graph, Var};

/// How a weighted elementwise loss collapses to a scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Divide by the sum of the weights; with all-ones weights this is
    /// exactly `Mean`.
    WeightedMean,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    /// Binary cross-entropy on logits with optional per-element weights:
    /// per element `softplus(z) - t*z`, reduced per `reduction`.
    pub fn bce_with_logits(&mut self, z: Var, targets: Arr, weights: Option<Arr>, reduction: Reduction) -> Var {
        assert_eq!(self.shape(z), targets.shape(), "bce: target shape mismatch");
        if let Some(w) = &weights {
            assert_eq!(self.shape(z), w.shape(), "bce: weight shape mismatch");
        }
        let n = targets.len() as f64;
        let zs = self.value(z);
        let mut total = 0.0;
        let mut weight_sum = 0.0;
        for (i, (&zv, &tv)) in zs.iter().zip(targets.iter()).enumerate() {
            let w = weights.as_ref().map_or(1.0, |ws| ws.as_slice().unwrap()[i]);
            total += w * (softplus(zv) - tv * zv);
            weight_sum += w;
        }
        let norm = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => n,
            Reduction::WeightedMean => weight_sum,
        };
        let value = Arr::from_elem(IxDyn(&[]), total / norm);
        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                let gv = g.iter().next().copied().unwrap() / norm;
                let mut dz = vals[z.0].clone();
                for (i, (d, &tv)) in dz.iter_mut().zip(targets.iter()).enumerate() {
                    let w = weights.as_ref().map_or(1.0, |ws| ws.as_slice().unwrap()[i]);
                    *d = gv * w * (sigmoid(*d) - tv);
                }
                acc.add(z, dz);
            })),
        )
    }
}
