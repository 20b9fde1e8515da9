//! Dense matrix ops for the token paths: matmul, transpose, last-axis
//! slicing/concatenation, softmax and layer normalization.

use ndarray::{Array2, ArrayD, Ix2, IxDyn};

use crate::graph::{Arr, Graph, Var};

fn as2(a: &Arr) -> Array2<f64> {
    let s = a.shape();
    assert_eq!(s.len(), 2, "expected a matrix, got shape {s:?}");
    a.clone().into_shape_with_order(Ix2(s[0], s[1])).unwrap()
}

impl Graph {
    /// (N, K) x (K, M) -> (N, M)
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[0], "matmul: inner dimensions differ");
        let value = as2(self.value(a)).dot(&as2(self.value(b))).into_dyn();
        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                let g2 = as2(g);
                acc.add(a, g2.dot(&as2(&vals[b.0]).t()).into_dyn());
                acc.add(b, as2(&vals[a.0]).t().dot(&g2).into_dyn());
            })),
        )
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let value = as2(self.value(a)).t().to_owned().into_dyn();
        self.push(
            value,
            Some(Box::new(move |_, g, acc| {
                acc.add(a, as2(g).t().to_owned().into_dyn());
            })),
        )
    }

    /// Columns [start, start+len) of an (N, D) matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        assert!(start + len <= s[1], "slice_cols out of range");
        let (n, d) = (s[0], s[1]);
        let src = self.values[a.0].as_slice().unwrap();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, len]), out).unwrap();
        self.push(
            value,
            Some(Box::new(move |_, g, acc| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len].copy_from_slice(&gs[r * len..(r + 1) * len]);
                }
                acc.add(a, ArrayD::from_shape_vec(IxDyn(&[n, d]), dx).unwrap());
            })),
        )
    }

    /// Concatenate (N, Di) matrices along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s[0], n, "concat_cols: row count mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = self.values[p.0].as_slice().unwrap();
            for r in 0..n {
                out[r * total + offset..r * total + offset + wd]
                    .copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            offset += wd;
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, total]), out).unwrap();
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            value,
            Some(Box::new(move |_, g, acc| {
                let gs = g.as_slice().unwrap();
                let mut offset = 0;
                for (&p, &wd) in parts.iter().zip(&widths) {
                    let mut dp = vec![0.0; n * wd];
                    for r in 0..n {
                        dp[r * wd..(r + 1) * wd]
                            .copy_from_slice(&gs[r * total + offset..r * total + offset + wd]);
                    }
                    acc.add(p, ArrayD::from_shape_vec(IxDyn(&[n, wd]), dp).unwrap());
                    offset += wd;
                }
            })),
        )
    }

    /// Row-wise softmax of an (N, D) matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        let src = self.values[a.0].as_slice().unwrap();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in &mut out[r * d..(r + 1) * d] {
                *o /= z;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, d]), out).unwrap();
        let out_var = self.push(value, None);
        self.backs[out_var.0] = Some(Box::new(move |vals, g, acc| {
            let y = vals[out_var.0].as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dx = vec![0.0; n * d];
            for r in 0..n {
                let dot: f64 = (0..d).map(|j| gs[r * d + j] * y[r * d + j]).sum();
                for j in 0..d {
                    dx[r * d + j] = y[r * d + j] * (gs[r * d + j] - dot);
                }
            }
            acc.add(a, ArrayD::from_shape_vec(IxDyn(&[n, d]), dx).unwrap());
        }));
        out_var
    }

    /// Layer normalization over the last axis of (N, D) with learnable
    /// gain (D,) and bias (D,).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        assert_eq!(self.shape(gamma), &[d]);
        assert_eq!(self.shape(beta), &[d]);

        let src = self.values[x.0].as_slice().unwrap();
        let gm = self.values[gamma.0].as_slice().unwrap();
        let bt = self.values[beta.0].as_slice().unwrap();
        let mut normed = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                normed[r * d + j] = (row[j] - mean) * istd;
            }
        }
        let out: Vec<f64> = (0..n * d).map(|i| normed[i] * gm[i % d] + bt[i % d]).collect();
        let value = ArrayD::from_shape_vec(IxDyn(&[n, d]), out).unwrap();
        let normed = ArrayD::from_shape_vec(IxDyn(&[n, d]), normed).unwrap();

        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                let gs = g.as_slice().unwrap();
                let gm = vals[gamma.0].as_slice().unwrap();
                let y = normed.as_slice().unwrap();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let mut mean_h = 0.0;
                    let mut mean_hy = 0.0;
                    for j in 0..d {
                        let h = gs[r * d + j] * gm[j];
                        mean_h += h;
                        mean_hy += h * y[r * d + j];
                        dgamma[j] += gs[r * d + j] * y[r * d + j];
                        dbeta[j] += gs[r * d + j];
                    }
                    mean_h /= d as f64;
                    mean_hy /= d as f64;
                    for j in 0..d {
                        let h = gs[r * d + j] * gm[j];
                        dx[r * d + j] = (h - mean_h - y[r * d + j] * mean_hy) * inv_std[r];
                    }
                }
                acc.add(x, ArrayD::from_shape_vec(IxDyn(&[n, d]), dx).unwrap());
                acc.add(gamma, ArrayD::from_shape_vec(IxDyn(&[d]), dgamma).unwrap());
                acc.add(beta, ArrayD::from_shape_vec(IxDyn(&[d]), dbeta).unwrap());
            })),
        )
    }

    /// Add a per-column bias (D,) to an (N, D) matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        assert_eq!(self.shape(b), &[d]);
        let mut value = self.values[x.0].clone();
        {
            let bs = self.values[b.0].as_slice().unwrap().to_vec();
            let vs = value.as_slice_mut().unwrap();
            for r in 0..n {
                for j in 0..d {
                    vs[r * d + j] += bs[j];
                }
            }
        }
        self.push(
            value,
            Some(Box::new(move |_, g, acc| {
                acc.add(x, g.clone());
                let gs = g.as_slice().unwrap();
                let db: Vec<f64> = (0..d).map(|j| (0..n).map(|r| gs[r * d + j]).sum()).collect();
                acc.add(b, ArrayD::from_shape_vec(IxDyn(&[d]), db).unwrap());
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn arr(shape: &[usize], v: Vec<f64>) -> Arr {
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn matmul_forward_backward() {
        let mut g = Graph::new();
        let a = g.leaf(arr(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(arr(&[2, 1], vec![5.0, 6.0]));
        let y = g.matmul(a, b);
        assert_eq!(g.value(y).as_slice().unwrap(), &[17.0, 39.0]);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.of(a).unwrap().as_slice().unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(grads.of(b).unwrap().as_slice().unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.leaf(arr(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let y = g.softmax_rows(a);
        let v = g.value(y);
        for r in 0..2 {
            let s: f64 = (0..3).map(|j| v[[r, j]]).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(arr(&[2, 4], (0..8).map(f64::from).collect()));
        let left = g.slice_cols(a, 0, 2);
        let right = g.slice_cols(a, 2, 2);
        let back = g.concat_cols(&[left, right]);
        assert_eq!(g.value(back), g.value(a));
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut g = Graph::new();
        let x = g.leaf(arr(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let gamma = g.leaf(arr(&[4], vec![1.0; 4]));
        let beta = g.leaf(arr(&[4], vec![0.0; 4]));
        let y = g.layer_norm(x, gamma, beta, 1e-6);
        let v = g.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
    }
}
