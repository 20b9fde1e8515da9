//! Convolution-family operations: conv2d and conv_transpose2d built on a
//! shared im2col/col2im pair, channel bias, bilinear resizing and the
//! gather/scatter ops used by the detection loss.

use ndarray::{Array2, ArrayD, Ix2, Ix3, IxDyn};

use crate::graph::{Arr, Graph, Var};

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output size of the transposed direction.
    pub fn transpose_out_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel - 2 * self.pad
    }
}

/// Unfold (C, H, W) into (C*k*k, OH*OW) patch columns.
fn im2col(x: &Arr, geom: ConvGeom) -> Array2<f64> {
    let shp = x.shape();
    let (c_in, h, w) = (shp[0], shp[1], shp[2]);
    let (oh, ow) = (geom.out_size(h), geom.out_size(w));
    let k = geom.kernel;
    let xs = x.as_slice().expect("im2col: non-contiguous input");
    let mut cols = Array2::<f64>::zeros((c_in * k * k, oh * ow));
    {
        let cs = cols.as_slice_mut().unwrap();
        let l = oh * ow;
        for c in 0..c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * l;
                    for o_r in 0..oh {
                        let ih = (o_r * geom.stride + ki) as isize - geom.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_base = (c * h + ih as usize) * w;
                        let dst_base = row + o_r * ow;
                        for o_c in 0..ow {
                            let iw = (o_c * geom.stride + kj) as isize - geom.pad as isize;
                            if iw >= 0 && iw < w as isize {
                                cs[dst_base + o_c] = xs[src_base + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold (C*k*k, OH*OW) columns back into (C, H, W) with scatter-add.
fn col2im(cols: &Array2<f64>, c_in: usize, h: usize, w: usize, geom: ConvGeom) -> Arr {
    let (oh, ow) = (geom.out_size(h), geom.out_size(w));
    let k = geom.kernel;
    let cs = cols.as_slice().expect("col2im: non-contiguous columns");
    let mut out = vec![0.0; c_in * h * w];
    let l = oh * ow;
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * l;
                for o_r in 0..oh {
                    let ih = (o_r * geom.stride + ki) as isize - geom.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_base = (c * h + ih as usize) * w;
                    let src_base = row + o_r * ow;
                    for o_c in 0..ow {
                        let iw = (o_c * geom.stride + kj) as isize - geom.pad as isize;
                        if iw >= 0 && iw < w as isize {
                            out[dst_base + iw as usize] += cs[src_base + o_c];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c_in, h, w]), out).unwrap()
}

fn as2(a: &Arr, rows: usize, cols: usize) -> Array2<f64> {
    a.clone()
        .into_shape_with_order(Ix2(rows, cols))
        .expect("matrix view reshape")
}

impl Graph {
    /// 2D convolution of (Cin, H, W) with weights (Cout, Cin, k, k).
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d expects CHW input");
        assert_eq!(ws.len(), 4, "conv2d expects OIkk weights");
        assert_eq!(ws[1], xs[0], "conv2d: channel mismatch");
        assert_eq!(ws[2], geom.kernel);
        let (c_in, h, w_in) = (xs[0], xs[1], xs[2]);
        let c_out = ws[0];
        let (oh, ow) = (geom.out_size(h), geom.out_size(w_in));

        let cols = im2col(self.value(x), geom);
        let w2 = as2(self.value(w), c_out, c_in * geom.kernel * geom.kernel);
        let out2 = w2.dot(&cols);
        let value = out2
            .into_shape_with_order(Ix3(c_out, oh, ow))
            .unwrap()
            .into_dyn();

        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                let g2 = as2(g, c_out, oh * ow);
                let w2 = as2(&vals[w.0], c_out, c_in * geom.kernel * geom.kernel);
                // dX = col2im(W^T G)
                let dcols = w2.t().dot(&g2);
                acc.add(x, col2im(&dcols, c_in, h, w_in, geom));
                // dW = G cols^T (im2col recomputed to avoid caching)
                let cols = im2col(&vals[x.0], geom);
                let dw2 = g2.dot(&cols.t());
                acc.add(
                    w,
                    dw2.into_shape_with_order(IxDyn(&[c_out, c_in, geom.kernel, geom.kernel]))
                        .unwrap(),
                );
            })),
        )
    }

    /// Transposed convolution of (Cin, H, W) with weights
    /// (Cin, Cout, k, k); the exact adjoint of `conv2d` with the same
    /// geometry.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv_transpose2d expects CHW input");
        assert_eq!(ws.len(), 4, "conv_transpose2d expects IOkk weights");
        assert_eq!(ws[0], xs[0], "conv_transpose2d: channel mismatch");
        let (c_in, h, w_in) = (xs[0], xs[1], xs[2]);
        let c_out = ws[1];
        let (oh, ow) = (geom.transpose_out_size(h), geom.transpose_out_size(w_in));
        debug_assert_eq!(geom.out_size(oh), h, "transpose geometry must invert the conv");

        let kk = geom.kernel * geom.kernel;
        let w2 = as2(self.value(w), c_in, c_out * kk);
        let x2 = as2(self.value(x), c_in, h * w_in);
        // forward = data-backward of the mirror conv (Cout,OH,OW)->(Cin,H,W)
        let cols = w2.t().dot(&x2);
        let value = col2im(&cols, c_out, oh, ow, geom);

        self.push(
            value,
            Some(Box::new(move |vals, g, acc| {
                let w2 = as2(&vals[w.0], c_in, c_out * kk);
                // dX = mirror-conv forward over the output gradient
                let gcols = im2col(g, geom);
                let dx2 = w2.dot(&gcols);
                acc.add(
                    x,
                    dx2.into_shape_with_order(IxDyn(&[c_in, h, w_in])).unwrap(),
                );
                // dW = X gcols^T
                let x2 = as2(&vals[x.0], c_in, h * w_in);
                let dw2 = x2.dot(&gcols.t());
                acc.add(
                    w,
                    dw2.into_shape_with_order(IxDyn(&[c_in, c_out, geom.kernel, geom.kernel]))
                        .unwrap(),
                );
            })),
        )
    }

    /// Add a per-channel bias (C,) to a (C, H, W) map.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(self.shape(b), &[xs[0]]);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut value = self.values[x.0].clone();
        {
            let bs = self.values[b.0].as_slice().unwrap().to_vec();
            let vs = value.as_slice_mut().unwrap();
            for (ci, bv) in bs.iter().enumerate() {
                for v in &mut vs[ci * h * w..(ci + 1) * h * w] {
                    *v += bv;
                }
            }
        }
        self.push(
            value,
            Some(Box::new(move |_, g, acc| {
                acc.add(x, g.clone());
                let gs = g.as_slice().unwrap();
                let db: Vec<f64> = (0..c).map(|ci| gs[ci * h * w..(ci + 1) * h * w].iter().sum()).collect();
                acc.add(b, ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap());
            })),
        )
    }

    /// Bilinear spatial resize of (C, H, W) to (C, oh, ow) with half-pixel
    /// centers; an exact identity when the size is unchanged.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ys, xsamp) = (sample_axis(h, oh), sample_axis(w, ow));

        let src = self.values[x.0].as_slice().unwrap();
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for i in 0..oh {
                let (y0, y1, fy) = ys[i];
                for j in 0..ow {
                    let (x0, x1, fx) = xsamp[j];
                    let v00 = src[(ci * h + y0) * w + x0];
                    let v01 = src[(ci * h + y0) * w + x1];
                    let v10 = src[(ci * h + y1) * w + x0];
                    let v11 = src[(ci * h + y1) * w + x1];
                    out[(ci * oh + i) * ow + j] = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, oh, ow]), out).unwrap();

        self.push(
            value,
            Some(Box::new(move |_, g, acc| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; c * h * w];
                let (ys, xsamp) = (sample_axis(h, oh), sample_axis(w, ow));
                for ci in 0..c {
                    for i in 0..oh {
                        let (y0, y1, fy) = ys[i];
                        for j in 0..ow {
                            let (x0, x1, fx) = xsamp[j];
                            let gv = gs[(ci * oh + i) * ow + j];
                            dx[(ci * h + y0) * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dx[(ci * h + y0) * w + x1] += gv * (1.0 - fy) * fx;
                            dx[(ci * h + y1) * w + x0] += gv * fy * (1.0 - fx);
                            dx[(ci * h + y1) * w + x1] += gv * fy * fx;
                        }
                    }
                }
                acc.add(x, ArrayD::from_shape_vec(IxDyn(&[c, h, w]), dx).unwrap());
            })),
        )
    }

    /// Select channels of a (C, H, W) map: output (len(idx), H, W).
    pub fn gather_channels(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let src = self.values[x.0].as_slice().unwrap();
        let mut out = Vec::with_capacity(idx.len() * h * w);
        for &ci in &idx {
            assert!(ci < c, "gather_channels: index out of range");
            out.extend_from_slice(&src[ci * h * w..(ci + 1) * h * w]);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[idx.len(), h, w]), out).unwrap();
        self.push(
            value,
            Some(Box::new(move |_, g, acc| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; c * h * w];
                for (k, &ci) in idx.iter().enumerate() {
                    for p in 0..h * w {
                        dx[ci * h * w + p] += gs[k * h * w + p];
                    }
                }
                acc.add(x, ArrayD::from_shape_vec(IxDyn(&[c, h, w]), dx).unwrap());
            })),
        )
    }

    /// Select individual cells of a (C, H, W) map into a vector.
    pub fn gather_cells(&mut self, x: Var, cells: Vec<(usize, usize, usize)>) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let src = self.values[x.0].as_slice().unwrap();
        let out: Vec<f64> = cells
            .iter()
            .map(|&(ci, r, col)| {
                assert!(ci < c && r < h && col < w, "gather_cells: index out of range");
                src[(ci * h + r) * w + col]
            })
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(&[cells.len()]), out).unwrap();
        self.push(
            value,
            Some(Box::new(move |_, g, acc| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; c * h * w];
                for (k, &(ci, r, col)) in cells.iter().enumerate() {
                    dx[(ci * h + r) * w + col] += gs[k];
                }
                acc.add(x, ArrayD::from_shape_vec(IxDyn(&[c, h, w]), dx).unwrap());
            })),
        )
    }

    /// Concatenate (Ci, H, W) maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (h, w) = {
            let s = self.shape(parts[0]);
            (s[1], s[2])
        };
        let mut chans = Vec::new();
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p).to_vec();
            assert_eq!(&s[1..], &[h, w], "concat_channels: spatial mismatch");
            chans.push(s[0]);
            data.extend_from_slice(self.values[p.0].as_slice().unwrap());
        }
        let total: usize = chans.iter().sum();
        let value = ArrayD::from_shape_vec(IxDyn(&[total, h, w]), data).unwrap();
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            value,
            Some(Box::new(move |_, g, acc| {
                let gs = g.as_slice().unwrap();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(&chans) {
                    let chunk = gs[offset * h * w..(offset + c) * h * w].to_vec();
                    acc.add(p, ArrayD::from_shape_vec(IxDyn(&[c, h, w]), chunk).unwrap());
                    offset += c;
                }
            })),
        )
    }
}

/// Precompute (low index, high index, fraction) per output coordinate for
/// half-pixel bilinear sampling.
fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn arr(shape: &[usize], v: Vec<f64>) -> Arr {
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn conv2d_known_values() {
        // 1x1 input channel, 3x3 image, 2x2 kernel, stride 1, no pad
        let mut g = Graph::new();
        let x = g.leaf(arr(&[1, 3, 3], (1..=9).map(f64::from).collect()));
        let w = g.leaf(arr(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let y = g.conv2d(x, w, ConvGeom { kernel: 2, stride: 1, pad: 0 });
        assert_eq!(g.shape(y), &[1, 2, 2]);
        // out[i,j] = x[i,j] + x[i+1,j+1]
        assert_eq!(g.value(y).as_slice().unwrap(), &[6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn conv2d_stride_and_pad_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(Arr::zeros(IxDyn(&[3, 8, 8])));
        let w = g.leaf(Arr::zeros(IxDyn(&[5, 3, 3, 3])));
        let y = g.conv2d(x, w, ConvGeom { kernel: 3, stride: 2, pad: 1 });
        assert_eq!(g.shape(y), &[5, 4, 4]);
    }

    #[test]
    fn conv_transpose_doubles_size() {
        let mut g = Graph::new();
        let x = g.leaf(Arr::zeros(IxDyn(&[4, 6, 6])));
        let w = g.leaf(Arr::zeros(IxDyn(&[4, 2, 4, 4])));
        let y = g.conv_transpose2d(x, w, ConvGeom { kernel: 4, stride: 2, pad: 1 });
        assert_eq!(g.shape(y), &[2, 12, 12]);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights
        let geom = ConvGeom { kernel: 3, stride: 2, pad: 1 };
        let mut rng = 0u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let x_data: Vec<f64> = (0..2 * 9 * 9).map(|_| next()).collect();
        let w_data: Vec<f64> = (0..3 * 2 * 9).map(|_| next()).collect();
        let y_data: Vec<f64> = (0..3 * 5 * 5).map(|_| next()).collect();

        let mut g = Graph::new();
        let x = g.leaf(arr(&[2, 9, 9], x_data.clone()));
        let w_conv = g.leaf(arr(&[3, 2, 3, 3], w_data.clone()));
        let cx = g.conv2d(x, w_conv, geom);
        let lhs: f64 = g
            .value(cx)
            .iter()
            .zip(&y_data)
            .map(|(a, b)| a * b)
            .sum();

        let mut g2 = Graph::new();
        let y = g2.leaf(arr(&[3, 5, 5], y_data));
        // conv weights (Cout=3, Cin=2, k, k) reinterpreted as transposed
        // weights (Cin'=3, Cout'=2, k, k)
        let w_t = g2.leaf(arr(&[3, 2, 3, 3], w_data));
        let ty = g2.conv_transpose2d(y, w_t, geom);
        assert_eq!(g2.shape(ty), &[2, 9, 9]);
        let rhs: f64 = g2.value(ty).iter().zip(&x_data).map(|(a, b)| a * b).sum();

        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut g = Graph::new();
        let x = g.leaf(arr(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let same = g.bilinear_resize(x, 2, 2);
        assert_eq!(g.value(same), g.value(x));

        let c = g.leaf(Arr::from_elem(IxDyn(&[2, 3, 3]), 0.7));
        let up = g.bilinear_resize(c, 7, 5);
        assert!(g.value(up).iter().all(|v| (*v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn bilinear_2x2_to_4x4_hand_stencil() {
        let mut g = Graph::new();
        let x = g.leaf(arr(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]));
        let y = g.bilinear_resize(x, 4, 4);
        // half-pixel sampling positions: -0.25, 0.25, 0.75, 1.25 clamped
        // to [0,1] -> fractions 0, 0.25, 0.75, 1
        let row0 = [0.0, 0.25, 0.75, 1.0];
        for (i, fy) in row0.iter().enumerate() {
            for (j, fx) in row0.iter().enumerate() {
                let expect = (1.0 - fy) * ((1.0 - fx) * 0.0 + fx * 1.0) + fy * ((1.0 - fx) * 2.0 + fx * 3.0);
                assert_abs_diff_eq!(g.value(y)[[0, i, j]], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gather_cells_roundtrip() {
        let mut g = Graph::new();
        let x = g.leaf(arr(&[2, 2, 2], (0..8).map(f64::from).collect()));
        let v = g.gather_cells(x, vec![(1, 0, 1), (0, 1, 0)]);
        assert_eq!(g.value(v).as_slice().unwrap(), &[5.0, 2.0]);
        let s = g.sum_all(v);
        let grads = g.backward(s);
        let dx = grads.of(x).unwrap();
        assert_eq!(dx[[1, 0, 1]], 1.0);
        assert_eq!(dx[[0, 1, 0]], 1.0);
        assert_eq!(dx.sum(), 2.0);
    }
}
