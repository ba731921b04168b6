//! Full-tile inference by averaging overlapping window predictions.

use ndarray::{s, Array3, Axis};

use crate::autograd::Tensor;
use crate::error::{config_err, shape_err, Result};

/// Anything that maps normalized `rgb [N, 3, H, W]` and `aux [N, C_a, H, W]`
/// to logits `[N, K, H, W]`.
pub trait Segmenter {
    fn num_classes(&self) -> usize;
    fn predict(&self, rgb: &Tensor, aux: &Tensor) -> Result<Tensor>;
}

/// Window offsets along one axis: every `stride`, plus a final window
/// shifted inward so the far edge is covered.
pub fn window_starts(len: usize, crop: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || stride > crop {
        return Err(config_err!("eval.stride must lie in 1..={crop}, got {stride}"));
    }
    if len < crop {
        return Err(shape_err!("axis of length {len} is shorter than the window {crop}"));
    }
    let mut starts: Vec<usize> = (0..=len - crop).step_by(stride).collect();
    if *starts.last().expect("non-empty") != len - crop {
        starts.push(len - crop);
    }
    Ok(starts)
}

/// Per-pixel mean of window logits over a `[C, H, W]` tile, `[K, H, W]`
/// out. Tiles smaller than `crop` are zero-padded and the padding is cut
/// from the result. Windows are sent to the model `batch` at a time.
pub fn sliding_window_inference<S: Segmenter + ?Sized>(
    model: &S,
    rgb: &Array3<f64>,
    aux: &Array3<f64>,
    crop: usize,
    stride: usize,
    batch: usize,
) -> Result<Array3<f64>> {
    let (_, h, w) = rgb.dim();
    if aux.dim().1 != h || aux.dim().2 != w {
        return Err(shape_err!("rgb {:?} and aux {:?} differ in size", rgb.dim(), aux.dim()));
    }
    let (ph, pw) = (h.max(crop), w.max(crop));
    let pad = |t: &Array3<f64>| {
        let mut p = Array3::zeros((t.dim().0, ph, pw));
        p.slice_mut(s![.., ..h, ..w]).assign(t);
        p
    };
    let (rgb_p, aux_p) = (pad(rgb), pad(aux));
    let ys = window_starts(ph, crop, stride)?;
    let xs = window_starts(pw, crop, stride)?;
    let windows: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    let k = model.num_classes();
    let mut sum = Array3::<f64>::zeros((k, ph, pw));
    let mut hits = ndarray::Array2::<f64>::zeros((ph, pw));
    for chunk in windows.chunks(batch.max(1)) {
        let cut = |t: &Array3<f64>| -> Tensor {
            let views: Vec<_> = chunk
                .iter()
                .map(|&(y, x)| t.slice(s![.., y..y + crop, x..x + crop]))
                .collect();
            ndarray::stack(Axis(0), &views).expect("equal windows").into_dyn()
        };
        let logits = model.predict(&cut(&rgb_p), &cut(&aux_p))?;
        if logits.shape() != [chunk.len(), k, crop, crop] {
            return Err(shape_err!(
                "model returned {:?} for {} windows of {crop}x{crop} with {k} classes",
                logits.shape(),
                chunk.len()
            ));
        }
        for (i, &(y, x)) in chunk.iter().enumerate() {
            let mut dst = sum.slice_mut(s![.., y..y + crop, x..x + crop]);
            dst += &logits.slice(s![i, .., .., ..]);
            hits.slice_mut(s![y..y + crop, x..x + crop]).mapv_inplace(|v| v + 1.0);
        }
    }
    let mut out = sum.slice(s![.., ..h, ..w]).to_owned();
    for mut plane in out.axis_iter_mut(Axis(0)) {
        plane /= &hits.slice(s![..h, ..w]);
    }
    Ok(out)
}
