use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, IxDyn, Slice};

use super::{standard, Tape, Tensor, Var};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Views a contiguous tensor as `[rows, last]`.
pub(crate) fn rows_view(t: &Tensor) -> ArrayView2<'_, f64> {
    let last = *t.shape().last().expect("tensor needs at least one axis");
    let rows = if last == 0 { 0 } else { t.len() / last };
    t.view()
        .into_shape_with_order((rows, last))
        .expect("standard layout")
}

fn from_rows(a: Array2<f64>, shape: &[usize]) -> Tensor {
    a.into_shape_with_order(IxDyn(shape)).expect("element count")
}

fn sum_to_last(t: &Tensor) -> Tensor {
    rows_view(t).sum_axis(Axis(0)).into_dyn()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            vec![a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            vec![a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(-g)]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            vec![a, b],
            Box::new(|g, p, _, need| {
                vec![
                    need[0].then(|| g * p[1]),
                    need[1].then(|| g * p[0]),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, vec![a], Box::new(move |g, _, _, _| vec![Some(g * c)]))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| 1.0 - v);
        self.push(value, vec![a], Box::new(|g, _, _, _| vec![Some(-g)]))
    }

    /// Adds a vector along the last axis.
    pub fn add_last(&mut self, x: Var, v: Var) -> Var {
        let last = *self.shape(x).last().expect("add_last on a scalar");
        assert_eq!(self.shape(v), &[last], "add_last: vector length");
        let mut value = self.value(x).clone();
        {
            let v1 = self.value(v).view().into_shape_with_order(last).unwrap();
            for mut row in value
                .view_mut()
                .into_shape_with_order((self.value(x).len() / last.max(1), last))
                .unwrap()
                .rows_mut()
            {
                row += &v1;
            }
        }
        self.push(
            value,
            vec![x, v],
            Box::new(|g, _, _, need| vec![Some(g.clone()), need[1].then(|| sum_to_last(g))]),
        )
    }

    /// Multiplies by a vector along the last axis.
    pub fn mul_last(&mut self, x: Var, v: Var) -> Var {
        let last = *self.shape(x).last().expect("mul_last on a scalar");
        assert_eq!(self.shape(v), &[last], "mul_last: vector length");
        let shape = self.shape(x).to_vec();
        let v1 = self.value(v).view().into_shape_with_order(last).unwrap();
        let value = from_rows(&rows_view(self.value(x)) * &v1, &shape);
        self.push(
            value,
            vec![x, v],
            Box::new(move |g, p, _, need| {
                let last = p[1].len();
                let v1 = p[1].view().into_shape_with_order(last).unwrap();
                let gx = need[0].then(|| from_rows(&rows_view(g) * &v1, g.shape()));
                let gv = need[1].then(|| {
                    (&rows_view(g) * &rows_view(p[0]))
                        .sum_axis(Axis(0))
                        .into_dyn()
                });
                vec![gx, gv]
            }),
        )
    }

    /// `x[..., in] · w[in, out]`
    pub fn matmul_last(&mut self, x: Var, w: Var) -> Var {
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "matmul_last: weight must be 2-D");
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.last(), Some(&ws[0]), "matmul_last: inner dims {xs:?} x {ws:?}");
        let w2 = self.value(w).view().into_shape_with_order((ws[0], ws[1])).unwrap();
        let out = rows_view(self.value(x)).dot(&w2);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = ws[1];
        let value = from_rows(out, &out_shape);
        self.push(
            value,
            vec![x, w],
            Box::new(move |g, p, _, need| {
                let (din, dout) = (ws[0], ws[1]);
                let w2 = p[1].view().into_shape_with_order((din, dout)).unwrap();
                let g2 = rows_view(g);
                let gx = need[0].then(|| from_rows(g2.dot(&w2.t()), &xs));
                let gw = need[1].then(|| rows_view(p[0]).t().dot(&g2).into_dyn());
                vec![gx, gw]
            }),
        )
    }

    /// Affine map over the last axis; `w` is stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul_last(x, w);
        match b {
            Some(b) => self.add_last(y, b),
            None => y,
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(
            value,
            vec![x],
            Box::new(|g, p, _, _| {
                let mut gx = g.clone();
                gx.zip_mut_with(p[0], |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0
                    }
                });
                vec![Some(gx)]
            }),
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.push(
            value,
            vec![x],
            Box::new(|g, p, _, _| {
                let mut gx = g.clone();
                gx.zip_mut_with(p[0], |gv, &xv| *gv *= gelu_grad(xv));
                vec![Some(gx)]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(
            value,
            vec![x],
            Box::new(|g, _, y, _| {
                let mut gx = g.clone();
                gx.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                vec![Some(gx)]
            }),
        )
    }

    /// Elementwise absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        self.push(
            value,
            vec![x],
            Box::new(|g, p, _, _| {
                let mut gx = g.clone();
                gx.zip_mut_with(p[0], |gv, &xv| *gv *= xv.signum() * (xv != 0.0) as u8 as f64);
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalization over the last axis with a per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let (xhat, _) = normalize_rows(rows_view(self.value(x)), eps);
        let gm = self.value(gamma).view().into_shape_with_order(c).unwrap();
        let bt = self.value(beta).view().into_shape_with_order(c).unwrap();
        let value = from_rows(&xhat * &gm + &bt, &shape);
        self.push(
            value,
            vec![x, gamma, beta],
            Box::new(move |g, p, _, need| {
                let c = shape[shape.len() - 1];
                let (xhat, inv_std) = normalize_rows(rows_view(p[0]), eps);
                let g2 = rows_view(g);
                let gm = p[1].view().into_shape_with_order(c).unwrap();
                let gx = need[0].then(|| {
                    let dxhat = &g2 * &gm;
                    let mut dx = Array2::<f64>::zeros(dxhat.raw_dim());
                    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let m1 = dh.mean().unwrap_or(0.0);
                        let m2 = (&dh * &xh).mean().unwrap_or(0.0);
                        for j in 0..c {
                            out[j] = inv_std[r] * (dh[j] - m1 - xh[j] * m2);
                        }
                    }
                    from_rows(dx, &shape)
                });
                let ggamma = need[1].then(|| (&g2 * &xhat).sum_axis(Axis(0)).into_dyn());
                let gbeta = need[2].then(|| g2.sum_axis(Axis(0)).into_dyn());
                vec![gx, ggamma, gbeta]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let mut out = rows_view(self.value(x)).to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        let value = from_rows(out, &shape);
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, y, _| {
                let g2 = rows_view(g);
                let y2 = rows_view(y);
                let mut dx = &g2 * &y2;
                for (mut row, yr) in dx.rows_mut().into_iter().zip(y2.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&yr, |d, &yv| *d -= yv * dot);
                }
                vec![Some(from_rows(dx, &shape))]
            }),
        )
    }

    /// Batched matmul of `[n, m, k]` with `[n, k, p]`, or with `[n, p, k]`
    /// when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let value = bmm_raw(self.value(a), self.value(b), false, transpose_b);
        self.push(
            value,
            vec![a, b],
            Box::new(move |g, p, _, need| {
                let ga = need[0].then(|| bmm_raw(g, p[1], false, !transpose_b));
                let gb = need[1].then(|| {
                    if transpose_b {
                        // out = a bᵀ  ⇒  db = gᵀ a
                        bmm_raw(g, p[0], true, false)
                    } else {
                        bmm_raw(p[0], g, true, false)
                    }
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let old = self.shape(x).to_vec();
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {old:?} -> {shape:?}"));
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _, _| {
                vec![Some(g.clone().into_shape_with_order(IxDyn(&old)).unwrap())]
            }),
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = standard(self.value(x).clone().permuted_axes(IxDyn(axes)));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _, _| {
                vec![Some(standard(g.clone().permuted_axes(IxDyn(&inverse))))]
            }),
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let views: Vec<_> = xs.iter().map(|&v| self.value(v).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let widths: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis]).collect();
        self.push(
            value,
            xs.to_vec(),
            Box::new(move |g, _, _, need| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(need)
                    .map(|(&w, &n)| {
                        let piece = n.then(|| {
                            g.slice_axis(Axis(axis), Slice::from(start..start + w))
                                .to_owned()
                        });
                        start += w;
                        piece
                    })
                    .collect()
            }),
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let full = self.shape(x).to_vec();
        let value = self
            .value(x)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _, _| {
                let mut gx = ArrayD::zeros(IxDyn(&full));
                gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(gx)]
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum());
        let shape = self.shape(x).to_vec();
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _, _| {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ x ⊙ w` for a constant weighting `w`, a convenient probe loss.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Var {
        let wv = self.constant(w.clone());
        let m = self.mul(x, wv);
        self.sum(m)
    }
}

/// Row-wise standardization; returns `(x̂, 1/σ)`.
fn normalize_rows(x: ArrayView2<'_, f64>, eps: f64) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut inv = Vec::with_capacity(out.nrows());
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mu = row.sum() / n;
        let var = row.fold(0.0, |a, &v| a + (v - mu) * (v - mu)) / n;
        let is = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mu) * is);
        inv.push(is);
    }
    (out, inv)
}

/// `a[i]ᵀ?` times `b[i]ᵀ?` for each batch index.
pub(crate) fn bmm_raw(a: &Tensor, b: &Tensor, transpose_a: bool, transpose_b: bool) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm: {sa:?} x {sb:?}");
    let (m, ka) = if transpose_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let (kb, p) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    assert_eq!(ka, kb, "bmm inner dims: {sa:?} x {sb:?}");
    let mut out = ArrayD::zeros(IxDyn(&[sa[0], m, p]));
    for i in 0..sa[0] {
        let ai = a.slice(s![i, .., ..]);
        let bi = b.slice(s![i, .., ..]);
        let ai = if transpose_a { ai.reversed_axes() } else { ai };
        let bi = if transpose_b { bi.reversed_axes() } else { bi };
        out.slice_mut(s![i, .., ..]).assign(&ai.dot(&bi));
    }
    out
}
