mod common;

use common::{check_params, randn, randomize, rng, GRAD_TOL};
use ndarray::{Array2, ArrayD, IxDyn};
use symfuse::backbone::{Modality, TokenGrid};
use symfuse::decoder::{AuxHeads, DecoderConfig, DecoderWeights};
use symfuse::dgfm::StageBundle;
use symfuse::graph::Graph;
use symfuse::params::ParamStore;
use symfuse::Error;

/// Wraps `[B, H, W, C]` tokens as a stage whose fused features are the tokens.
fn bundle(g: &mut Graph, tokens: &ArrayD<f64>) -> StageBundle {
    let s = tokens.shape().to_vec();
    let flat = tokens.clone().into_shape_with_order(IxDyn(&[s[0], s[1] * s[2], s[3]])).unwrap();
    let v = g.input(flat);
    StageBundle { x_feat: v, y_feat: v, fused: v, gate: None, height: s[1], width: s[2], channels: s[3] }
}

fn cfg(channels: usize, bins: &[usize]) -> DecoderConfig {
    DecoderConfig { channels, ppm_bins: bins.to_vec() }
}

/// Corner-aligned bilinear sample of `m` (rows × cols) at output `(oy, ox)`.
fn bilinear_at(m: &Array2<f64>, out: (usize, usize), oy: usize, ox: usize) -> f64 {
    let coord = |o: usize, n_out: usize, n_in: usize| {
        if n_out == 1 {
            0.0
        } else {
            o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let (h, w) = m.dim();
    let (sy, sx) = (coord(oy, out.0, h), coord(ox, out.1, w));
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
    (1.0 - ty) * ((1.0 - tx) * m[[y0, x0]] + tx * m[[y0, x1]]) + ty * ((1.0 - tx) * m[[y1, x0]] + tx * m[[y1, x1]])
}

#[test]
fn param_count_matches_registration() {
    for (stages, k, c) in [
        (vec![8, 8, 8, 8], 6, cfg(16, &[1, 2, 4])),
        (vec![8, 8, 8, 8], 6, cfg(16, &[])),
        (vec![12], 3, cfg(5, &[])),
        (vec![12], 3, cfg(5, &[1])),
        (vec![4, 6], 2, cfg(3, &[1, 3])),
        (vec![384; 4], 6, cfg(64, &[1, 2, 4])),
    ] {
        let mut store = ParamStore::layout_only();
        DecoderWeights::new(&mut store, &stages, k, &c);
        assert_eq!(store.count(|_| true), DecoderWeights::param_count(&stages, k, &c), "{stages:?} {c:?}");
    }
    for (ch, k) in [(32, 6), (384, 6), (1, 1)] {
        let mut store = ParamStore::layout_only();
        AuxHeads::new(&mut store, ch, k);
        assert_eq!(store.count(|_| true), 2 * (ch * k + k));
        assert_eq!(AuxHeads::param_count(ch, k), 2 * (ch * k + k));
    }
}

#[test]
fn zero_classifier_gives_zero_logits() {
    let mut store = ParamStore::new(1);
    let dec = DecoderWeights::new(&mut store, &[6, 6, 6], 4, &cfg(8, &[1, 2]));
    store.value_mut(dec.classifier.weight).fill(0.0);
    store.value_mut(dec.classifier.bias.unwrap()).fill(0.0);
    let mut g = Graph::eval(&store);
    let mut r = rng(2);
    let stages: Vec<StageBundle> = (0..3).map(|_| bundle(&mut g, &randn(&mut r, &[2, 3, 3, 6], 1.0))).collect();
    let out = dec.decode_fused(&mut g, &stages, (12, 12)).unwrap();
    assert_eq!(g.value(out).shape(), &[2, 4, 12, 12]);
    assert!(g.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn output_matches_requested_size() {
    let mut store = ParamStore::new(3);
    let dec = DecoderWeights::new(&mut store, &[6, 6], 5, &cfg(4, &[1, 2]));
    for (grid, out) in [(2, (16, 16)), (4, (32, 32)), (3, (24, 17)), (5, (5, 5))] {
        let mut g = Graph::eval(&store);
        let mut r = rng(grid as u64);
        let stages: Vec<StageBundle> = (0..2).map(|_| bundle(&mut g, &randn(&mut r, &[1, grid, grid, 6], 1.0))).collect();
        let v = dec.decode_fused(&mut g, &stages, out).unwrap();
        assert_eq!(g.value(v).shape(), &[1, 5, out.0, out.1]);
        assert!(g.value(v).iter().all(|x| x.is_finite()));
    }
    let mut g = Graph::eval(&store);
    let one = bundle(&mut g, &ArrayD::zeros(IxDyn(&[1, 2, 2, 6])));
    assert!(dec.decode_fused(&mut g, &[one], (8, 8)).is_err());
}

#[test]
fn single_stage_without_pooling_by_hand() {
    let (c, cd, k, h, w) = (3, 2, 2, 2, 3);
    let mut store = ParamStore::new(4);
    let dec = DecoderWeights::new(&mut store, &[c], k, &cfg(cd, &[]));
    assert!(dec.merge.is_none() && dec.ppm.is_none());
    randomize(&mut store, "decoder", 0.7, &mut rng(5));
    let tokens = randn(&mut rng(6), &[1, h, w, c], 1.0);
    let mut g = Graph::eval(&store);
    let st = bundle(&mut g, &tokens);
    let out_hw = (5, 7);
    let out = dec.decode_fused(&mut g, &[st], out_hw).unwrap();
    let got = g.value(out).clone();

    let lat = dec.laterals[0].as_ref().unwrap();
    let (lw, lb) = (store.value(lat.weight), store.value(lat.bias.unwrap()));
    let (cw, cb) = (store.value(dec.classifier.weight), store.value(dec.classifier.bias.unwrap()));
    for class in 0..k {
        let coarse = Array2::from_shape_fn((h, w), |(y, x)| {
            let hidden: Vec<f64> = (0..cd)
                .map(|o| lb[[o]] + (0..c).map(|i| tokens[[0, y, x, i]] * lw[[i, o]]).sum::<f64>())
                .collect();
            cb[[class]] + (0..cd).map(|o| hidden[o] * cw[[o, class]]).sum::<f64>()
        });
        for oy in 0..out_hw.0 {
            for ox in 0..out_hw.1 {
                let want = bilinear_at(&coarse, out_hw, oy, ox);
                assert!((got[[0, class, oy, ox]] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let mut store = ParamStore::new(7);
    let dec = DecoderWeights::new(&mut store, &[3, 3], 2, &cfg(2, &[1, 2]));
    randomize(&mut store, "decoder", 0.6, &mut rng(8));
    let a = randn(&mut rng(9), &[1, 4, 4, 3], 1.0);
    let b = randn(&mut rng(10), &[1, 2, 2, 3], 1.0);
    let wts = randn(&mut rng(11), &[1, 2, 6, 6], 1.0);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let errs = check_params(&mut store, &ids, |g| {
        let s = [bundle(g, &a), bundle(g, &b)];
        let out = dec.decode_fused(g, &s, (6, 6)).unwrap();
        g.tape.weighted_sum(out, &wts)
    });
    assert_eq!(errs.len(), ids.len());
    for (name, e) in errs {
        assert!(e < GRAD_TOL, "{name}: {e:.3e}");
    }
}

#[test]
fn aux_heads_refuse_to_run_at_inference() {
    let mut store = ParamStore::new(12);
    let heads = AuxHeads::new(&mut store, 4, 3);
    let tokens = randn(&mut rng(13), &[1, 2, 2, 4], 1.0);
    let grid_of = |g: &mut Graph| {
        let var = g.input(tokens.clone());
        TokenGrid { var, modality: Modality::Rgb, batch: 1, height: 2, width: 2, channels: 4 }
    };
    let mut g = Graph::eval(&store);
    let t = grid_of(&mut g);
    assert!(matches!(heads.decode_aux(&mut g, &t, Modality::Rgb, (8, 8)), Err(Error::Contract(_))));

    let mut g = Graph::train(&store, 0);
    let t = grid_of(&mut g);
    let p = heads.decode_aux(&mut g, &t, Modality::Aux, (8, 8)).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 3, 8, 8]);
}
