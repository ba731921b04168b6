//! Channel-first (`[B, C, H, W]`) operations: 1×1 and 3×3 convolutions,
//! group normalization, separable resampling and pixel-wise cross-entropy.

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, Axis, IxDyn};

use super::{Tape, Tensor, Var};

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a [B, C, H, W] tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// `[B, C, H, W]` viewed as `B` matrices of `[C, H·W]`.
fn batch_mats(t: &Tensor) -> ndarray::ArrayView3<'_, f64> {
    let (b, c, h, w) = dims4(t);
    t.view().into_shape_with_order((b, c, h * w)).unwrap()
}

impl Tape {
    /// 1×1 convolution; `w` is stored `[C_in, C_out]`, `b` is `[C_out]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (bn, c, h, wd) = dims4(self.value(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws, vec![c, ws[1]], "conv1x1: weight {ws:?} for {c} input channels");
        let o = ws[1];
        let wm = self.value(w).view().into_shape_with_order((c, o)).unwrap();
        let xm = batch_mats(self.value(x));
        let mut out = ArrayD::zeros(IxDyn(&[bn, o, h, wd]));
        {
            let mut om = out.view_mut().into_shape_with_order((bn, o, h * wd)).unwrap();
            for i in 0..bn {
                om.slice_mut(s![i, .., ..])
                    .assign(&wm.t().dot(&xm.slice(s![i, .., ..])));
            }
            if let Some(b) = b {
                let bv = self.value(b);
                assert_eq!(bv.shape(), &[o], "conv1x1: bias length");
                for i in 0..bn {
                    for k in 0..o {
                        om.slice_mut(s![i, k, ..]).mapv_inplace(|v| v + bv[[k]]);
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            out,
            parents,
            Box::new(move |g, p, _, need| {
                let (bn, c, _, _) = dims4(p[0]);
                let gm = batch_mats(g);
                let xm = batch_mats(p[0]);
                let wm = p[1].view().into_shape_with_order((c, o)).unwrap();
                let gx = need[0].then(|| {
                    let mut gx = ArrayD::zeros(p[0].raw_dim());
                    let mut gxm = gx.view_mut().into_shape_with_order(xm.raw_dim()).unwrap();
                    for i in 0..bn {
                        gxm.slice_mut(s![i, .., ..])
                            .assign(&wm.dot(&gm.slice(s![i, .., ..])));
                    }
                    gx
                });
                let gw = need[1].then(|| {
                    let mut gw = Array2::<f64>::zeros((c, o));
                    for i in 0..bn {
                        gw += &xm.slice(s![i, .., ..]).dot(&gm.slice(s![i, .., ..]).t());
                    }
                    gw.into_dyn()
                });
                let mut grads = vec![gx, gw];
                if need.len() == 3 {
                    grads.push(need[2].then(|| gm.sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn()));
                }
                grads
            }),
        )
    }

    /// 3×3 convolution, stride 1, zero padding 1; `w` is `[C_out, C_in, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (bn, c, h, wd) = dims4(self.value(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(&ws[1..], &[c, 3, 3], "conv3x3: weight {ws:?} for {c} input channels");
        let o = ws[0];
        let wm = self.value(w).view().into_shape_with_order((o, c * 9)).unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[bn, o, h, wd]));
        {
            let xm = batch_mats(self.value(x));
            let mut om = out.view_mut().into_shape_with_order((bn, o, h * wd)).unwrap();
            for i in 0..bn {
                let cols = im2col(xm.slice(s![i, .., ..]), h, wd);
                om.slice_mut(s![i, .., ..]).assign(&wm.dot(&cols));
            }
            if let Some(b) = b {
                let bv = self.value(b);
                for i in 0..bn {
                    for k in 0..o {
                        om.slice_mut(s![i, k, ..]).mapv_inplace(|v| v + bv[[k]]);
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            out,
            parents,
            Box::new(move |g, p, _, need| {
                let (bn, c, h, wd) = dims4(p[0]);
                let gm = batch_mats(g);
                let xm = batch_mats(p[0]);
                let wm = p[1].view().into_shape_with_order((o, c * 9)).unwrap();
                let mut gx = need[0].then(|| ArrayD::<f64>::zeros(p[0].raw_dim()));
                let mut gw = need[1].then(|| Array2::<f64>::zeros((o, c * 9)));
                for i in 0..bn {
                    let gi = gm.slice(s![i, .., ..]);
                    if let Some(gw) = gw.as_mut() {
                        let cols = im2col(xm.slice(s![i, .., ..]), h, wd);
                        *gw += &gi.dot(&cols.t());
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gcols = wm.t().dot(&gi);
                        let mut gxm = gx.view_mut().into_shape_with_order((bn, c, h * wd)).unwrap();
                        col2im_add(&gcols, gxm.slice_mut(s![i, .., ..]), h, wd);
                    }
                }
                let mut grads = vec![gx, gw.map(|g| g.into_shape_with_order(IxDyn(&[o, c, 3, 3])).unwrap())];
                if need.len() == 3 {
                    grads.push(need[2].then(|| gm.sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn()));
                }
                grads
            }),
        )
    }

    /// Group normalization of a `[B, C, H, W]` tensor with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Var {
        let (bn, c, h, wd) = dims4(self.value(x));
        assert!(groups >= 1 && c % groups == 0, "group_norm: {groups} groups for {c} channels");
        let hw = h * wd;
        let (xhat, _) = group_standardize(self.value(x), groups, eps);
        let mut out = xhat.clone();
        {
            let gm = self.value(gamma);
            let bt = self.value(beta);
            let mut om = out.view_mut().into_shape_with_order((bn, c, hw)).unwrap();
            for k in 0..c {
                let (gk, bk) = (gm[[k]], bt[[k]]);
                om.slice_mut(s![.., k, ..]).mapv_inplace(|v| v * gk + bk);
            }
        }
        self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, p, _, need| {
                let (bn, c, h, wd) = dims4(p[0]);
                let hw = h * wd;
                let (xhat, inv_std) = group_standardize(p[0], groups, eps);
                let gm = g.view().into_shape_with_order((bn, c, hw)).unwrap();
                let xh = xhat.view().into_shape_with_order((bn, c, hw)).unwrap();
                let gx = need[0].then(|| {
                    let mut dxhat = gm.to_owned();
                    for k in 0..c {
                        let gk = p[1][[k]];
                        dxhat.slice_mut(s![.., k, ..]).mapv_inplace(|v| v * gk);
                    }
                    let cg = c / groups;
                    let n = (cg * hw) as f64;
                    let dr = dxhat.into_shape_with_order((bn * groups, cg * hw)).unwrap();
                    let xr = xh.into_shape_with_order((bn * groups, cg * hw)).unwrap();
                    let mut dx = Array2::<f64>::zeros(dr.raw_dim());
                    for r in 0..dr.nrows() {
                        let (dh, xrow) = (dr.row(r), xr.row(r));
                        let m1 = dh.sum() / n;
                        let m2 = (&dh * &xrow).sum() / n;
                        let mut out = dx.row_mut(r);
                        for j in 0..dh.len() {
                            out[j] = inv_std[r] * (dh[j] - m1 - xrow[j] * m2);
                        }
                    }
                    dx.into_shape_with_order(IxDyn(&[bn, c, h, wd])).unwrap()
                });
                let ggamma = need[1].then(|| (&gm * &xh).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn());
                let gbeta = need[2].then(|| gm.sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn());
                vec![gx, ggamma, gbeta]
            }),
        )
    }

    /// Separable linear resampling: `out[b, c] = ry · x[b, c] · rxᵀ` with
    /// `ry: [H_out, H]` and `rx: [W_out, W]`. Bilinear and bicubic
    /// interpolation and adaptive average pooling are all of this form.
    pub fn resize2d(&mut self, x: Var, ry: &Array2<f64>, rx: &Array2<f64>) -> Var {
        let value = resize_raw(self.value(x), ry.view(), rx.view());
        let (ry, rx) = (ry.clone(), rx.clone());
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _, _| {
                vec![Some(resize_raw(g, ry.t(), rx.t()))]
            }),
        )
    }

    /// Mean cross-entropy of `[B, K, H, W]` logits over the pixels whose
    /// target is `Some`. `targets` is indexed `(b, h, w)` row-major. With no
    /// selected pixel the loss is exactly zero and so is its gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (bn, k, h, wd) = dims4(self.value(logits));
        assert_eq!(targets.len(), bn * h * wd, "cross_entropy: target count");
        let lm = self.value(logits);
        let count = targets.iter().filter(|t| t.is_some()).count();
        let mut total = 0.0;
        for b in 0..bn {
            for y in 0..h {
                for x in 0..wd {
                    let Some(t) = targets[(b * h + y) * wd + x] else { continue };
                    assert!(t < k, "cross_entropy: target {t} >= {k} classes");
                    let col = lm.slice(s![b, .., y, x]);
                    let m = col.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                    let lse = m + col.fold(0.0, |a, &v| a + (v - m).exp()).ln();
                    total += lse - col[t];
                }
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let targets = targets.to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![logits],
            Box::new(move |g, p, _, _| {
                let (bn, k, h, wd) = dims4(p[0]);
                let mut gx = ArrayD::<f64>::zeros(p[0].raw_dim());
                if count == 0 {
                    return vec![Some(gx)];
                }
                let scale = g.iter().next().copied().unwrap_or(0.0) / count as f64;
                for b in 0..bn {
                    for y in 0..h {
                        for x in 0..wd {
                            let Some(t) = targets[(b * h + y) * wd + x] else { continue };
                            let col = p[0].slice(s![b, .., y, x]);
                            let m = col.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                            let z = col.fold(0.0, |a, &v| a + (v - m).exp());
                            for c in 0..k {
                                let prob = (col[c] - m).exp() / z;
                                gx[[b, c, y, x]] = scale * (prob - (c == t) as u8 as f64);
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

/// Standardizes each `(batch, group)` slab; returns `x̂` and per-slab `1/σ`.
fn group_standardize(x: &Tensor, groups: usize, eps: f64) -> (Tensor, Vec<f64>) {
    let (bn, c, h, wd) = dims4(x);
    let rows = x
        .view()
        .into_shape_with_order((bn * groups, c / groups * h * wd))
        .unwrap();
    let mut out = rows.to_owned();
    let mut inv = Vec::with_capacity(out.nrows());
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mu = row.sum() / n;
        let var = row.fold(0.0, |a, &v| a + (v - mu) * (v - mu)) / n;
        let is = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mu) * is);
        inv.push(is);
    }
    (out.into_shape_with_order(IxDyn(&[bn, c, h, wd])).unwrap(), inv)
}

pub(crate) fn resize_raw(x: &Tensor, ry: ArrayView2<'_, f64>, rx: ArrayView2<'_, f64>) -> Tensor {
    let (bn, c, h, wd) = dims4(x);
    assert_eq!(ry.ncols(), h, "resize: row matrix {:?} for height {h}", ry.dim());
    assert_eq!(rx.ncols(), wd, "resize: col matrix {:?} for width {wd}", rx.dim());
    let (ho, wo) = (ry.nrows(), rx.nrows());
    // Columns first: [B·C·H, W] · rxᵀ.
    let x = x.as_standard_layout();
    let t = x
        .view()
        .into_shape_with_order((bn * c * h, wd))
        .unwrap()
        .dot(&rx.t());
    let t = t.as_standard_layout().into_owned().into_shape_with_order((bn * c, h, wo)).unwrap();
    let mut out = Array3::<f64>::zeros((bn * c, ho, wo));
    for i in 0..bn * c {
        out.slice_mut(s![i, .., ..]).assign(&ry.dot(&t.slice(s![i, .., ..])));
    }
    out.into_shape_with_order(IxDyn(&[bn, c, ho, wo])).unwrap()
}

/// `[C, H·W]` → `[C·9, H·W]` patches for a padded 3×3 kernel.
fn im2col(x: ArrayView2<'_, f64>, h: usize, w: usize) -> Array2<f64> {
    let c = x.nrows();
    let mut cols = Array2::<f64>::zeros((c * 9, h * w));
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ch * 9 + ky * 3 + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[[r, y * w + xx]] = x[[ch, sy as usize * w + sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &Array2<f64>, mut out: ndarray::ArrayViewMut2<'_, f64>, h: usize, w: usize) {
    let c = out.nrows();
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ch * 9 + ky * 3 + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[[ch, sy as usize * w + sx as usize]] += cols[[r, y * w + xx]];
                    }
                }
            }
        }
    }
}

