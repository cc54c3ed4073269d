use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView3, ArrayViewMut3, Axis, Ix4, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};

/// Geometry of a 2-D convolution over `[B, C, H, W]` tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output spatial size of a forward convolution.
    pub fn conv_out(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize, k: usize, s: usize, p: usize| {
            assert!(n + 2 * p >= k, "input {n} too small for kernel {k}");
            (n + 2 * p - k) / s + 1
        };
        (
            f(h, self.kernel.0, self.stride.0, self.padding.0),
            f(w, self.kernel.1, self.stride.1, self.padding.1),
        )
    }

    /// Output spatial size of a transposed convolution.
    pub fn transpose_out(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize, k: usize, s: usize, p: usize| (n - 1) * s + k - 2 * p;
        (
            f(h, self.kernel.0, self.stride.0, self.padding.0),
            f(w, self.kernel.1, self.stride.1, self.padding.1),
        )
    }
}

/// Unfolds `[C, H, W]` into `[C * kh * kw, Ho * Wo]`.
fn im2col(x: ArrayView3<f64>, spec: &Conv2dSpec, ho: usize, wo: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let mut cols = Array2::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().unwrap();
                for oh in 0..ho {
                    let ih = (oh * sh + ki) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = x.index_axis(Axis(0), ci);
                    let src = src.index_axis(Axis(0), ih as usize);
                    for ow in 0..wo {
                        let iw = (ow * sw + kj) as isize - pw as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[oh * wo + ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into `[C, H, W]`.
fn col2im(cols: &Array2<f64>, spec: &Conv2dSpec, ho: usize, wo: usize, mut out: ArrayViewMut3<f64>) {
    let (c, h, w) = out.dim();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = cols.row(row);
                let src = src.as_slice().unwrap();
                for oh in 0..ho {
                    let ih = (oh * sh + ki) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let mut dst = out.index_axis_mut(Axis(0), ci);
                    let mut dst = dst.index_axis_mut(Axis(0), ih as usize);
                    for ow in 0..wo {
                        let iw = (ow * sw + kj) as isize - pw as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn bias_grad(g: &Tensor) -> Tensor {
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn()
}

impl Graph {
    /// Cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, cin, h, wd) = x4.dim();
        let sw = vw.shape().to_vec();
        assert_eq!(sw[1], cin, "conv2d: weight expects {} channels, got {cin}", sw[1]);
        assert_eq!((sw[2], sw[3]), spec.kernel);
        let cout = sw[0];
        let (ho, wo) = spec.conv_out(h, wd);
        let wm = vw
            .view()
            .into_shape_with_order((cout, cin * spec.kernel.0 * spec.kernel.1))
            .unwrap();
        let bias = b.map(|b| self.value(b));
        let mut out = Array3::<f64>::zeros((bsz, cout, ho * wo));
        let mut cols_all = Vec::with_capacity(bsz);
        for bi in 0..bsz {
            let cols = im2col(x4.index_axis(Axis(0), bi), &spec, ho, wo);
            let mut dst = out.index_axis_mut(Axis(0), bi);
            general_mat_mul(1.0, &wm, &cols, 0.0, &mut dst);
            if let Some(bv) = &bias {
                for (co, mut row) in dst.rows_mut().into_iter().enumerate() {
                    row += bv[co];
                }
            }
            cols_all.push(cols);
        }
        let out = out
            .into_shape_with_order(IxDyn(&[bsz, cout, ho, wo]))
            .unwrap();
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        self.push(
            out,
            &parents,
            Some(Box::new(move |g, need| {
                let g3 = g.view().into_shape_with_order((bsz, cout, ho * wo)).unwrap();
                let wm = vw
                    .view()
                    .into_shape_with_order((cout, cin * spec.kernel.0 * spec.kernel.1))
                    .unwrap();
                let gx = need[0].then(|| {
                    let mut gx = ndarray::Array4::<f64>::zeros((bsz, cin, h, wd));
                    for bi in 0..bsz {
                        let gcols = wm.t().dot(&g3.index_axis(Axis(0), bi));
                        col2im(&gcols, &spec, ho, wo, gx.index_axis_mut(Axis(0), bi));
                    }
                    gx.into_dyn()
                });
                let gw = need[1].then(|| {
                    let mut gw = Array2::<f64>::zeros(wm.raw_dim());
                    for (bi, cols) in cols_all.iter().enumerate() {
                        general_mat_mul(1.0, &g3.index_axis(Axis(0), bi), &cols.t(), 1.0, &mut gw);
                    }
                    gw.into_shape_with_order(IxDyn(vw.shape())).unwrap()
                });
                let mut v = vec![gx, gw];
                if has_bias {
                    v.push(need[2].then(|| bias_grad(g)));
                }
                v
            })),
        )
    }

    /// Transposed convolution of `x: [B, Cin, H, W]` with `w: [Cin, Cout, kh, kw]`;
    /// the adjoint of [`Graph::conv2d`] with respect to its input.
    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, cin, h, wd) = x4.dim();
        let sw = vw.shape().to_vec();
        assert_eq!(sw[0], cin, "conv_transpose2d: weight expects {} channels, got {cin}", sw[0]);
        assert_eq!((sw[2], sw[3]), spec.kernel);
        let cout = sw[1];
        let (ho, wo) = spec.transpose_out(h, wd);
        let kk = spec.kernel.0 * spec.kernel.1;
        let wm = vw.view().into_shape_with_order((cin, cout * kk)).unwrap();
        let bias = b.map(|b| self.value(b));
        let mut out = ndarray::Array4::<f64>::zeros((bsz, cout, ho, wo));
        for bi in 0..bsz {
            let xb = x4
                .index_axis(Axis(0), bi)
                .into_shape_with_order((cin, h * wd))
                .unwrap();
            let cols = wm.t().dot(&xb);
            col2im(&cols, &spec, h, wd, out.index_axis_mut(Axis(0), bi));
        }
        if let Some(bv) = &bias {
            for mut ob in out.outer_iter_mut() {
                for (co, mut plane) in ob.outer_iter_mut().enumerate() {
                    plane += bv[co];
                }
            }
        }
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        self.push(
            out.into_dyn(),
            &parents,
            Some(Box::new(move |g, need| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
                let wm = vw.view().into_shape_with_order((cin, cout * kk)).unwrap();
                let mut gx = need[0].then(|| ndarray::Array3::<f64>::zeros((bsz, cin, h * wd)));
                let mut gw = need[1].then(|| Array2::<f64>::zeros((cin, cout * kk)));
                for bi in 0..bsz {
                    let gcols = im2col(g4.index_axis(Axis(0), bi), &spec, h, wd);
                    if let Some(gx) = gx.as_mut() {
                        general_mat_mul(1.0, &wm, &gcols, 0.0, &mut gx.index_axis_mut(Axis(0), bi));
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xb = x4
                            .index_axis(Axis(0), bi)
                            .into_shape_with_order((cin, h * wd))
                            .unwrap();
                        general_mat_mul(1.0, &xb, &gcols.t(), 1.0, gw);
                    }
                }
                let mut v = vec![
                    gx.map(|t| t.into_shape_with_order(IxDyn(&[bsz, cin, h, wd])).unwrap()),
                    gw.map(|t| t.into_shape_with_order(IxDyn(vw.shape())).unwrap()),
                ];
                if has_bias {
                    v.push(need[2].then(|| bias_grad(g)));
                }
                v
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::Mode;
    use super::*;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as a reference.
    fn naive_conv(x: &Tensor, w: &Tensor, spec: &Conv2dSpec) -> Tensor {
        let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let cout = w.shape()[0];
        let (ho, wo) = spec.conv_out(h, wd);
        let mut out = Tensor::zeros(IxDyn(&[b, cout, ho, wo]));
        for bi in 0..b {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..spec.kernel.0 {
                                for kj in 0..spec.kernel.1 {
                                    let ih = (oh * spec.stride.0 + ki) as isize - spec.padding.0 as isize;
                                    let iw = (ow * spec.stride.1 + kj) as isize - spec.padding.1 as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x[[bi, ci, ih as usize, iw as usize]] * w[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[bi, co, oh, ow]] = acc;
                    }
                }
            }
        }
        out
    }

    fn spec() -> Conv2dSpec {
        Conv2dSpec::new((3, 3), (1, 2), (1, 1))
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = rand_tensor(&[2, 3, 5, 9], 1);
        let w = rand_tensor(&[4, 3, 3, 3], 2);
        let g = Graph::new(Mode::Eval);
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, spec());
        assert_eq!(g.shape(y), vec![2, 4, 5, 5]);
        let diff = (&*g.value(y) - &naive_conv(&x, &w, &spec())).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-12));
    }

    #[test]
    fn transposed_conv_is_the_input_adjoint() {
        // <conv(x), y> == <x, conv_t(y)> for the same weights.
        let x = rand_tensor(&[2, 3, 5, 9], 3);
        let w = rand_tensor(&[4, 3, 3, 3], 4);
        let y = rand_tensor(&[2, 4, 5, 5], 5);
        let g = Graph::new(Mode::Eval);
        let cx = g.conv2d(g.constant(x.clone()), g.constant(w.clone()), None, spec());
        let ty = g.conv_transpose2d(g.constant(y.clone()), g.constant(w.clone()), None, spec());
        assert_eq!(g.shape(ty), vec![2, 3, 5, 9]);
        let lhs = (&*g.value(cx) * &y).sum();
        let rhs = (&*g.value(ty) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn frequency_sizes_follow_the_stride() {
        let s = spec();
        let mut f = 129;
        for expect in [65, 33, 17, 9] {
            f = s.conv_out(10, f).1;
            assert_eq!(f, expect);
        }
        for expect in [17, 33, 65, 129] {
            f = s.transpose_out(10, f).1;
            assert_eq!(f, expect);
        }
    }

    fn fd_check(f: impl Fn(&Graph, Var, Var, Var) -> Var, xs: &[usize], ws: &[usize], bs: usize) {
        let x0 = rand_tensor(xs, 6);
        let w0 = rand_tensor(ws, 7);
        let b0 = rand_tensor(&[bs], 8);
        let g = Graph::new(Mode::Train);
        let (x, w, b) = (g.input(x0.clone()), g.input(w0.clone()), g.input(b0.clone()));
        let y = f(&g, x, w, b);
        let r = rand_tensor(&g.shape(y), 9);
        let loss = g.sum(g.mul(y, g.constant(r.clone())));
        let grads = g.backward(loss);
        let eval = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let g = Graph::new(Mode::Eval);
            let y = f(&g, g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            (&*g.value(y) * &r).sum()
        };
        let h = 1e-6;
        for which in 0..3 {
            let base = [&x0, &w0, &b0][which];
            let an = grads.of([x, w, b][which]).unwrap();
            for i in (0..base.len()).step_by(7) {
                let bump = |d: f64| {
                    let mut t = base.clone();
                    t.as_slice_mut().unwrap()[i] += d;
                    match which {
                        0 => eval(&t, &w0, &b0),
                        1 => eval(&x0, &t, &b0),
                        _ => eval(&x0, &w0, &t),
                    }
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let a = an.as_slice().unwrap()[i];
                assert!((fd - a).abs() < 1e-6 * (1.0 + fd.abs()), "input {which} elem {i}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn conv_grads() {
        fd_check(|g, x, w, b| g.conv2d(x, w, Some(b), spec()), &[2, 3, 4, 9], &[4, 3, 3, 3], 4);
    }

    #[test]
    fn transposed_conv_grads() {
        fd_check(
            |g, x, w, b| g.conv_transpose2d(x, w, Some(b), spec()),
            &[2, 3, 4, 5],
            &[3, 2, 3, 3],
            2,
        );
    }
}
