use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Ix2, Ix3, IxDyn, Zip};

use super::{shape_of, Graph, NormStats, ParamId, Tensor, Var};

pub(super) fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

/// Sums `grad` down to `shape` by reversing numpy-style broadcasting.
pub(super) fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    standard(g)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            assert!(
                da == db || da == 1 || db == 1,
                "shapes {a:?} and {b:?} do not broadcast"
            );
            da.max(db)
        })
        .collect()
}

fn mat_view(v: ndarray::ArrayView3<'_, f64>, i: usize, t: bool) -> ArrayView2<'_, f64> {
    let m = v.index_axis_move(Axis(0), i);
    if t {
        m.reversed_axes()
    } else {
        m
    }
}

fn as_2d(t: &Tensor, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    t.view()
        .into_shape_with_order((rows, cols))
        .expect("contiguous tensor")
}

impl Graph {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape());
        let out = if va.shape() == vb.shape() {
            &*va + &*vb
        } else {
            let mut o = va.broadcast(shape_of(&shape)).unwrap().to_owned();
            o += &vb.broadcast(shape_of(&shape)).unwrap();
            o
        };
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            standard(out),
            &[a, b],
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_to_shape(g, &sa)),
                    need[1].then(|| reduce_to_shape(g, &sb)),
                ]
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape());
        let out = if va.shape() == vb.shape() {
            &*va * &*vb
        } else {
            let mut o = va.broadcast(shape_of(&shape)).unwrap().to_owned();
            o *= &vb.broadcast(shape_of(&shape)).unwrap();
            o
        };
        self.push(
            standard(out),
            &[a, b],
            Some(Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let full = g * &*vb;
                    reduce_to_shape(&full, va.shape())
                });
                let gb = need[1].then(|| {
                    let full = g * &*va;
                    reduce_to_shape(&full, vb.shape())
                });
                vec![ga, gb]
            })),
        )
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let out = self.value(x).mapv(|v| v * c);
        self.push(
            out,
            &[x],
            Some(Box::new(move |g, _| vec![Some(g.mapv(|v| v * c))])),
        )
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let out = self.value(x).mapv(|v| v + c);
        self.push(out, &[x], Some(Box::new(|g, _| vec![Some(g.clone())])))
    }

    pub fn relu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.mapv(|v| v.max(0.0));
        self.push(
            out,
            &[x],
            Some(Box::new(move |g, _| {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&*vx)
                    .for_each(|d, &v| if v <= 0.0 { *d = 0.0 });
                vec![Some(d)]
            })),
        )
    }

    /// `x @ w (+ b)` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let in_dim = *vx.shape().last().unwrap();
        let (wi, wo) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(in_dim, wi, "linear: input width {in_dim} vs weight {wi}");
        let rows = vx.len() / in_dim;
        let x2 = as_2d(&vx, rows, in_dim);
        let w2 = vw.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = x2.dot(&w2);
        if let Some(b) = b {
            let vb = self.value(b);
            out += &vb.view().into_shape_with_order(wo).unwrap();
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = wo;
        let out = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        self.push(
            out,
            &parents,
            Some(Box::new(move |g, need| {
                let g2 = as_2d(g, rows, wo);
                let x2 = as_2d(&vx, rows, in_dim);
                let w2 = vw.view().into_dimensionality::<Ix2>().unwrap();
                let gx = need[0].then(|| {
                    g2.dot(&w2.t())
                        .into_shape_with_order(IxDyn(vx.shape()))
                        .unwrap()
                });
                let gw = need[1].then(|| x2.t().dot(&g2).into_dyn());
                let mut v = vec![gx, gw];
                if has_bias {
                    v.push(need[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
                }
                v
            })),
        )
    }

    /// Batched matrix product of `[B, M, K]` and `[B, K, N]`, optionally
    /// transposing the trailing two axes of either operand first.
    pub fn bmm(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a3 = va.view().into_dimensionality::<Ix3>().unwrap();
        let b3 = vb.view().into_dimensionality::<Ix3>().unwrap();
        let batch = a3.shape()[0];
        assert_eq!(batch, b3.shape()[0]);
        let m = if trans_a { a3.shape()[2] } else { a3.shape()[1] };
        let n = if trans_b { b3.shape()[1] } else { b3.shape()[2] };
        let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
        for i in 0..batch {
            let am = mat_view(a3, i, trans_a);
            let bm = mat_view(b3, i, trans_b);
            general_mat_mul(1.0, &am, &bm, 0.0, &mut out.index_axis_mut(Axis(0), i));
        }
        self.push(
            out.into_dyn(),
            &[a, b],
            Some(Box::new(move |g, need| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = va.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = vb.view().into_dimensionality::<Ix3>().unwrap();
                let ga = need[0].then(|| {
                    let mut ga = ndarray::Array3::<f64>::zeros(a3.raw_dim());
                    for i in 0..batch {
                        let gi = g3.index_axis(Axis(0), i);
                        let bi = mat_view(b3, i, trans_b);
                        // dA' = G B'^T, and dA = dA'^T when A was transposed
                        let mut dst = ga.index_axis_mut(Axis(0), i);
                        if trans_a {
                            general_mat_mul(1.0, &bi, &gi.t(), 0.0, &mut dst);
                        } else {
                            general_mat_mul(1.0, &gi, &bi.t(), 0.0, &mut dst);
                        }
                    }
                    ga.into_dyn()
                });
                let gb = need[1].then(|| {
                    let mut gb = ndarray::Array3::<f64>::zeros(b3.raw_dim());
                    for i in 0..batch {
                        let gi = g3.index_axis(Axis(0), i);
                        let ai = mat_view(a3, i, trans_a);
                        let mut dst = gb.index_axis_mut(Axis(0), i);
                        if trans_b {
                            general_mat_mul(1.0, &gi.t(), &ai, 0.0, &mut dst);
                        } else {
                            general_mat_mul(1.0, &ai.t(), &gi, 0.0, &mut dst);
                        }
                    }
                    gb.into_dyn()
                });
                vec![ga, gb]
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        let rows = vx.len() / d;
        let mut out = as_2d(&vx, rows, d).to_owned();
        for mut r in out.rows_mut() {
            let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            r.mapv_inplace(|v| (v - m).exp());
            let s = r.sum();
            r.mapv_inplace(|v| v / s);
        }
        let out = Arc::new(out.into_shape_with_order(IxDyn(vx.shape())).unwrap());
        let y = out.clone();
        self.push(
            (*out).clone(),
            &[x],
            Some(Box::new(move |g, _| {
                let y2 = as_2d(&y, rows, d);
                let g2 = as_2d(g, rows, d);
                let mut dx = Array2::<f64>::zeros((rows, d));
                Zip::from(dx.rows_mut())
                    .and(y2.rows())
                    .and(g2.rows())
                    .for_each(|mut dr, yr, gr| {
                        let dot = yr.dot(&gr);
                        Zip::from(&mut dr)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|o, &yv, &gv| *o = yv * (gv - dot));
                    });
                vec![Some(dx.into_shape_with_order(IxDyn(y.shape())).unwrap())]
            })),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *vx.shape().last().unwrap();
        let rows = vx.len() / d;
        let x2 = as_2d(&vx, rows, d);
        let mut xhat = Array2::<f64>::zeros((rows, d));
        let mut inv_std = vec![0.0; rows];
        for (i, (xr, mut hr)) in x2.rows().into_iter().zip(xhat.rows_mut()).enumerate() {
            let mean = xr.sum() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            Zip::from(&mut hr).and(&xr).for_each(|h, &v| *h = (v - mean) * is);
        }
        let g1 = vg.view().into_shape_with_order(d).unwrap();
        let b1 = vb.view().into_shape_with_order(d).unwrap();
        let mut out = xhat.clone();
        for mut r in out.rows_mut() {
            Zip::from(&mut r)
                .and(&g1)
                .and(&b1)
                .for_each(|o, &gv, &bv| *o = *o * gv + bv);
        }
        let shape = vx.shape().to_vec();
        let out = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(
            out,
            &[x, gamma, beta],
            Some(Box::new(move |g, need| {
                let g2 = as_2d(g, rows, d);
                let g1 = vg.view().into_shape_with_order(d).unwrap();
                let gx = need[0].then(|| {
                    let mut dx = Array2::<f64>::zeros((rows, d));
                    for i in 0..rows {
                        let gr = g2.row(i);
                        let hr = xhat.row(i);
                        let dxhat: Vec<f64> = gr.iter().zip(&g1).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let is = inv_std[i] / d as f64;
                        for j in 0..d {
                            dx[[i, j]] = is * (d as f64 * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                    dx.into_shape_with_order(IxDyn(&shape)).unwrap()
                });
                let ggamma = need[1].then(|| {
                    let prod = &g2 * &xhat;
                    prod.sum_axis(Axis(0))
                        .into_shape_with_order(IxDyn(vg.shape()))
                        .unwrap()
                });
                let gbeta = need[2].then(|| {
                    g2.sum_axis(Axis(0))
                        .into_shape_with_order(IxDyn(vg.shape()))
                        .unwrap()
                });
                vec![gx, ggamma, gbeta]
            })),
        )
    }

    /// Batch normalization of `[B, C, H, W]` over `(B, H, W)` per channel.
    ///
    /// Training graphs use batch statistics and record them for the running
    /// buffers; evaluation graphs use the buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: (ParamId, &Tensor),
        running_var: (ParamId, &Tensor),
        eps: f64,
    ) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let sh = vx.shape().to_vec();
        assert_eq!(sh.len(), 4, "batch_norm2d expects [B, C, H, W]");
        let (b, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
        let m = (b * hw) as f64;
        let x3 = vx
            .view()
            .into_shape_with_order((b, c, hw))
            .expect("contiguous");
        let (mean, var) = match self.mode() {
            super::Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let plane = x3.slice(s![.., ch, ..]);
                    let mu = plane.sum() / m;
                    mean[ch] = mu;
                    var[ch] = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                }
                let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                self.record_norm_stats(NormStats {
                    mean_buffer: running_mean.0,
                    var_buffer: running_var.0,
                    mean: Tensor::from_shape_vec(IxDyn(&[c]), mean.clone()).unwrap(),
                    var: Tensor::from_shape_vec(
                        IxDyn(&[c]),
                        var.iter().map(|v| v * unbiased).collect(),
                    )
                    .unwrap(),
                });
                (mean, var)
            }
            super::Mode::Eval => (
                running_mean.1.iter().copied().collect(),
                running_var.1.iter().copied().collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = ndarray::Array3::<f64>::zeros((b, c, hw));
        Zip::indexed(&mut xhat)
            .and(&x3)
            .for_each(|(_, ch, _), h, &v| *h = (v - mean[ch]) * inv_std[ch]);
        let gv: Vec<f64> = vg.iter().copied().collect();
        let bv: Vec<f64> = vb.iter().copied().collect();
        let mut out = xhat.clone();
        Zip::indexed(&mut out).for_each(|(_, ch, _), o| *o = *o * gv[ch] + bv[ch]);
        let out = out.into_shape_with_order(IxDyn(&sh)).unwrap();
        let batch_stats = self.mode() == super::Mode::Train;
        self.push(
            out,
            &[x, gamma, beta],
            Some(Box::new(move |g, need| {
                let g3 = g.view().into_shape_with_order((b, c, hw)).unwrap();
                let gx = need[0].then(|| {
                    let mut dx = ndarray::Array3::<f64>::zeros((b, c, hw));
                    for ch in 0..c {
                        let gp = g3.slice(s![.., ch, ..]);
                        let hp = xhat.slice(s![.., ch, ..]);
                        let scale = gv[ch] * inv_std[ch];
                        let mut dp = dx.slice_mut(s![.., ch, ..]);
                        if batch_stats {
                            let s1 = gp.sum();
                            let s2 = (&gp * &hp).sum();
                            Zip::from(&mut dp).and(&gp).and(&hp).for_each(|d, &gv, &hv| {
                                *d = scale * (gv - s1 / m - hv * s2 / m);
                            });
                        } else {
                            Zip::from(&mut dp).and(&gp).for_each(|d, &gv| *d = scale * gv);
                        }
                    }
                    dx.into_shape_with_order(IxDyn(&sh)).unwrap()
                });
                let ggamma = need[1].then(|| {
                    let v: Vec<f64> = (0..c)
                        .map(|ch| (&g3.slice(s![.., ch, ..]) * &xhat.slice(s![.., ch, ..])).sum())
                        .collect();
                    Tensor::from_shape_vec(IxDyn(&[c]), v).unwrap()
                });
                let gbeta = need[2].then(|| {
                    let v: Vec<f64> = (0..c).map(|ch| g3.slice(s![.., ch, ..]).sum()).collect();
                    Tensor::from_shape_vec(IxDyn(&[c]), v).unwrap()
                });
                vec![gx, ggamma, gbeta]
            })),
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let old = vx.shape().to_vec();
        let out = vx
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {old:?} -> {shape:?}: {e}"));
        self.push(
            out,
            &[x],
            Some(Box::new(move |g, _| {
                vec![Some(g.clone().into_shape_with_order(IxDyn(&old)).unwrap())]
            })),
        )
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let vx = self.value(x);
        let out = standard(vx.view().permuted_axes(IxDyn(axes)).to_owned());
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.push(
            out,
            &[x],
            Some(Box::new(move |g, _| {
                vec![Some(standard(
                    g.view().permuted_axes(IxDyn(&inverse)).to_owned(),
                ))]
            })),
        )
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Var {
        let vals: Vec<Arc<Tensor>> = xs.iter().map(|&v| self.value(v)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = standard(ndarray::concatenate(Axis(axis), &views).expect("concat shapes"));
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            out,
            xs,
            Some(Box::new(move |g, need| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(need)
                    .map(|(&n, &nd)| {
                        let piece = nd.then(|| {
                            standard(
                                g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + n))
                                    .to_owned(),
                            )
                        });
                        start += n;
                        piece
                    })
                    .collect()
            })),
        )
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let full = vx.shape().to_vec();
        let out = standard(
            vx.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                .to_owned(),
        );
        self.push(
            out,
            &[x],
            Some(Box::new(move |g, _| {
                let mut gx = Tensor::zeros(IxDyn(&full));
                gx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![Some(gx)]
            })),
        )
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Var {
        let vx = self.value(x);
        let n = vx.shape()[axis];
        let out = standard(vx.mean_axis(Axis(axis)).expect("non-empty axis"));
        let full = vx.shape().to_vec();
        self.push(
            out,
            &[x],
            Some(Box::new(move |g, _| {
                let gx = g
                    .mapv(|v| v / n as f64)
                    .insert_axis(Axis(axis))
                    .broadcast(IxDyn(&full))
                    .unwrap()
                    .to_owned();
                vec![Some(standard(gx))]
            })),
        )
    }

    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let full = vx.shape().to_vec();
        let out = Tensor::from_elem(IxDyn(&[]), vx.sum());
        self.push(
            out,
            &[x],
            Some(Box::new(move |g, _| {
                let v = g.iter().next().copied().unwrap_or(0.0);
                vec![Some(Tensor::from_elem(IxDyn(&full), v))]
            })),
        )
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Divides each item (index along axis 0) by its root-mean-square value.
    pub fn rms_normalize(&self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let b = vx.shape()[0];
        let m = vx.len() / b.max(1);
        let x2 = as_2d(&vx, b, m);
        let r: Vec<f64> = x2
            .rows()
            .into_iter()
            .map(|row| (row.dot(&row) / m as f64 + eps).sqrt())
            .collect();
        let mut out = x2.to_owned();
        for (mut row, &ri) in out.rows_mut().into_iter().zip(&r) {
            row /= ri;
        }
        let shape = vx.shape().to_vec();
        self.push(
            out.into_shape_with_order(IxDyn(&shape)).unwrap(),
            &[x],
            Some(Box::new(move |g, _| {
                let x2 = as_2d(&vx, b, m);
                let g2 = as_2d(g, b, m);
                let mut dx = Array2::<f64>::zeros((b, m));
                for i in 0..b {
                    let gx = g2.row(i).dot(&x2.row(i));
                    let c = gx / (m as f64 * r[i].powi(3));
                    Zip::from(dx.row_mut(i))
                        .and(g2.row(i))
                        .and(x2.row(i))
                        .for_each(|d, &gv, &xv| *d = gv / r[i] - c * xv);
                }
                vec![Some(dx.into_shape_with_order(IxDyn(&shape)).unwrap())]
            })),
        )
    }

    /// Rows of `x` along axis 0 in the order given by `index`.
    pub fn select(&self, x: Var, index: &[usize]) -> Var {
        let vx = self.value(x);
        let out = standard(vx.select(Axis(0), index));
        let full = vx.shape().to_vec();
        let index = index.to_vec();
        self.push(
            out,
            &[x],
            Some(Box::new(move |g, _| {
                let mut gx = Tensor::zeros(IxDyn(&full));
                for (o, &i) in index.iter().enumerate() {
                    let mut dst = gx.index_axis_mut(Axis(0), i);
                    dst += &g.index_axis(Axis(0), o);
                }
                vec![Some(gx)]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Graph, Mode, ParamStore};
    use super::*;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(w * f(x)))/dx for a random weight w.
    fn check_grad(shape: &[usize], f: impl Fn(&Graph, Var) -> Var) {
        let x0 = rand_tensor(shape, 11);
        let g = Graph::new(Mode::Train);
        let x = g.input(x0.clone());
        let y = f(&g, x);
        let w = rand_tensor(&g.shape(y), 12);
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let analytic = grads.of(x).unwrap().clone();
        let eval = |xv: &Tensor| {
            let g = Graph::new(Mode::Train);
            let x = g.input(xv.clone());
            let y = f(&g, x);
            (&*g.value(y) * &w).sum()
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.as_slice_mut().unwrap()[i] += h;
            let mut m = x0.clone();
            m.as_slice_mut().unwrap()[i] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())),
                "element {i}: analytic {a} vs numeric {fd}"
            );
        }
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        let b = rand_tensor(&[1, 4], 3);
        check_grad(&[3, 4], |g, x| {
            let c = g.constant(b.clone());
            let y = g.mul(x, c);
            let z = g.add(y, x);
            let w = g.mul(z, z);
            g.relu(w)
        });
        check_grad(&[1, 4], |g, x| {
            let c = g.constant(rand_tensor(&[3, 4], 4));
            g.mul(c, x)
        });
    }

    #[test]
    fn linear_grads() {
        let w = rand_tensor(&[4, 3], 5);
        let b = rand_tensor(&[3], 6);
        check_grad(&[2, 5, 4], |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            g.linear(x, wv, Some(bv))
        });
        let x = rand_tensor(&[2, 5, 4], 7);
        check_grad(&[4, 3], |g, w| {
            let xv = g.constant(x.clone());
            g.linear(xv, w, None)
        });
    }

    #[test]
    fn bmm_grads_all_transpose_modes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
            let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
            let b = rand_tensor(&b_shape, 8);
            check_grad(&a_shape, |g, a| {
                let bv = g.constant(b.clone());
                g.bmm(a, bv, ta, tb)
            });
            let a = rand_tensor(&a_shape, 9);
            check_grad(&b_shape, |g, b| {
                let av = g.constant(a.clone());
                g.bmm(av, b, ta, tb)
            });
        }
    }

    #[test]
    fn softmax_and_layer_norm_grads() {
        check_grad(&[3, 5], |g, x| g.softmax(x));
        let gm = rand_tensor(&[5], 10);
        let bt = rand_tensor(&[5], 11);
        check_grad(&[2, 3, 5], |g, x| {
            let a = g.constant(gm.clone());
            let b = g.constant(bt.clone());
            g.layer_norm(x, a, b, 1e-5)
        });
    }

    #[test]
    fn batch_norm_grads_and_stats() {
        let mut store = ParamStore::new();
        let rm = store.add_buffer("rm", Tensor::zeros(IxDyn(&[3])));
        let rv = store.add_buffer("rv", Tensor::ones(IxDyn(&[3])));
        let gm = rand_tensor(&[3], 12);
        let bt = rand_tensor(&[3], 13);
        let store2 = store.clone();
        check_grad(&[2, 3, 2, 4], move |g, x| {
            let a = g.constant(gm.clone());
            let b = g.constant(bt.clone());
            g.batch_norm2d(x, a, b, (rm, store2.get(rm)), (rv, store2.get(rv)), 1e-5)
        });
        let g = Graph::new(Mode::Train);
        let x = g.input(rand_tensor(&[2, 3, 2, 4], 14));
        let one = g.constant(Tensor::ones(IxDyn(&[3])));
        let zero = g.constant(Tensor::zeros(IxDyn(&[3])));
        let y = g.batch_norm2d(x, one, zero, (rm, store.get(rm)), (rv, store.get(rv)), 1e-5);
        let yv = g.value(y);
        for ch in 0..3 {
            let plane = yv.slice(s![.., ch, .., ..]);
            assert!(plane.mean().unwrap().abs() < 1e-12);
        }
        let stats = g.take_norm_stats();
        assert_eq!(stats.len(), 1);
        store.apply_norm_stats(&stats, 0.1);
        assert!(store.get(rm).iter().zip(stats[0].mean.iter()).all(|(r, m)| (r - 0.1 * m).abs() < 1e-15));
    }

    #[test]
    fn shape_op_grads() {
        check_grad(&[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]));
        check_grad(&[2, 3, 4], |g, x| g.reshape(x, &[6, 4]));
        check_grad(&[2, 3, 4], |g, x| {
            let y = g.scale(x, 2.0);
            g.concat(&[x, y], 1)
        });
        check_grad(&[2, 3, 4], |g, x| g.narrow(x, 2, 1, 2));
        check_grad(&[2, 3, 4], |g, x| g.mean_axis(x, 1));
        check_grad(&[3, 4], |g, x| g.select(x, &[2, 0, 2, 1]));
        check_grad(&[2, 3, 4], |g, x| g.rms_normalize(x, 1e-8));
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("p", rand_tensor(&[3], 15));
        let g = Graph::new(Mode::Train);
        let a = g.param(&store, p);
        let b = g.param(&store, p);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        let expect = store.get(p).mapv(|v| 2.0 * v);
        assert_eq!(grads.param(p).unwrap(), &expect);
    }

    #[test]
    fn eval_graph_records_no_gradients() {
        let g = Graph::new(Mode::Eval);
        let x = g.input(rand_tensor(&[3], 16));
        let y = g.relu(x);
        assert!(!g.requires_grad(y));
    }
}
