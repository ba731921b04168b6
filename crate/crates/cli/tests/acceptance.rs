//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Run with `cargo test -p symfuse-cli --test acceptance -- --nocapture` to
//! see the report.

use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symfuse::autograd::{Tape, Tensor, Var};
use symfuse::backbone::{Modality, TokenGrid};
use symfuse::cpia::{cpia_forward, CpiaDims, CpiaStage};
use symfuse::data::{sample_batch, Segmenter};
use symfuse::dgfm::{fuse_stage, DgfmConfig, DgfmWeights};
use symfuse::graph::Graph;
use symfuse::losses::{aux_loss, hard_pixel_set, HardPixelMask};
use symfuse::mcrm::{apply_masking, plan_masking, Assignment, MaskPlan, McrmConfig};
use symfuse::metrics::ConfusionMatrix;
use symfuse::params::{ParamId, ParamStore};
use symfuse::schedule::{lr_at, ScheduleSpec};
use symfuse::train::{load_dataset, partition_parameters, AblationVariant, Trainer};
use symfuse::{Model, ParamCounts, Preset, RunConfig};

type Outcome = Result<String, String>;

const FD_STEP: f64 = 1e-3;
const FD_TOL: f64 = 1e-4;
const FRACTION_TOL: f64 = 1e-12;
const SCHEDULE_TOL: f64 = 1e-12;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || r.random_range(-scale..scale))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= limit, || format!("took {took:.1?}, limit {limit:?}"))
}

fn grid(g: &mut Graph, x: Tensor, modality: Modality) -> TokenGrid {
    let s = x.shape().to_vec();
    let var = g.input(x);
    TokenGrid { var, modality, batch: s[0], height: s[1], width: s[2], channels: s[3] }
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// The model the robustness comparison trains: four blocks at width 32.
fn small_config() -> RunConfig {
    RunConfig::default()
        .with_overrides(&[
            "backbone.depth=4".into(),
            "backbone.embed_dim=32".into(),
            "backbone.num_heads=2".into(),
            "backbone.taps=[1,2,3,4]".into(),
            "data.crop=32".into(),
            "decoder.channels=32".into(),
            "decoder.ppm_bins=[1,2]".into(),
            "eval.stride=32".into(),
        ])
        .expect("valid overrides")
}

fn frozen_backbone_invariance() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::preset(Preset::Desk);
    let data = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(Model::new(&cfg).map_err(|e| e.to_string())?);
    let initial = trainer.model.store.clone();
    let mut r = rng(1);
    for _ in 0..100 {
        let batch = sample_batch(&data.train, cfg.data.batch, cfg.data.crop, &mut r).map_err(|e| e.to_string())?;
        trainer.train_step(&batch).map_err(|e| e.to_string())?;
    }
    let (frozen, _) = partition_parameters(&initial);
    let changed: Vec<&str> = frozen
        .iter()
        .filter(|&&id| !same_bits(initial.value(id), trainer.model.store.value(id)))
        .map(|&id| initial.param(id).name.as_str())
        .collect();
    ensure(changed.is_empty(), || format!("frozen tensors changed: {changed:?}"))?;
    within(Duration::from_secs(120), start)?;
    let n: usize = frozen.iter().map(|&id| initial.param(id).numel()).sum();
    Ok(format!("{} tensors / {n} values unchanged after 100 steps (batch {})", frozen.len(), cfg.data.batch))
}

fn identity_at_init() -> Outcome {
    let cfg = RunConfig::preset(Preset::Desk);
    let model = Model::new(&cfg).map_err(|e| e.to_string())?;
    let st = &model.cpia[0];
    for id in [
        st.tft.gamma_rgb,
        st.tft.beta_rgb,
        st.tft.gamma_aux,
        st.tft.beta_aux,
        st.rgb_adapter.up,
        st.aux_adapter.up,
    ] {
        ensure(model.store.value(id).iter().all(|&v| v == 0.0), || {
            format!("{} is not zero at init", model.store.param(id).name)
        })?;
    }
    let crop = cfg.data.crop;
    let mut r = rng(2);
    for i in 0..10 {
        let rgb = uniform(&mut r, &[2, 3, crop, crop], 2.0);
        let aux = uniform(&mut r, &[2, 1, crop, crop], 2.0);
        // Training mode so that adapter dropout is live.
        let mut g = Graph::train(&model.store, i);
        let x = model.backbone.embed_rgb(&mut g, &rgb).map_err(|e| e.to_string())?;
        let y = model.backbone.embed_aux(&mut g, &aux).map_err(|e| e.to_string())?;
        let (x, y) = model.backbone.run_stage(&mut g, 1, x, y).map_err(|e| e.to_string())?;
        let (xo, yo) = cpia_forward(&mut g, x, y, st).map_err(|e| e.to_string())?;
        ensure(g.value(xo.var) == g.value(x.var) && g.value(yo.var) == g.value(y.var), || {
            format!("batch {i}: stage-1 output differs from its input")
        })?;
    }
    Ok("10 batches, exact equality for both streams".into())
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` per parameter tensor.
fn fd_relative_errors(store: &mut ParamStore, ids: &[ParamId], build: &dyn Fn(&mut Graph) -> Var) -> Vec<(String, f64)> {
    let loss = |store: &ParamStore| {
        let mut g = Graph::train(store, 0).without_dropout().without_grads();
        let v = build(&mut g);
        g.tape.item(v)
    };
    let grads = {
        let mut g = Graph::train(store, 0).without_dropout();
        let v = build(&mut g);
        g.backward(v)
    };
    ids.iter()
        .map(|&id| {
            let shape = store.value(id).raw_dim();
            let analytic = grads
                .iter()
                .find(|(p, _)| *p == id)
                .map(|(_, t)| t.clone())
                .unwrap_or_else(|| Tensor::zeros(shape.clone()));
            let mut numeric = Tensor::zeros(shape);
            for j in 0..numeric.len() {
                let orig = store.value(id).as_slice().unwrap()[j];
                store.value_mut(id).as_slice_mut().unwrap()[j] = orig + FD_STEP;
                let up = loss(store);
                store.value_mut(id).as_slice_mut().unwrap()[j] = orig - FD_STEP;
                let down = loss(store);
                store.value_mut(id).as_slice_mut().unwrap()[j] = orig;
                numeric.as_slice_mut().unwrap()[j] = (up - down) / (2.0 * FD_STEP);
            }
            let norm = |t: &Tensor| t.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = norm(&(&analytic - &numeric)) / norm(&analytic).max(norm(&numeric));
            (store.param(id).name.clone(), err)
        })
        .collect()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    // Eight groups of two channels in the gate's normalization, so no bias
    // is cancelled outright and every gradient is generically nonzero.
    let c = 32;
    let mut store = ParamStore::new(3);
    let cpia = CpiaStage::new(&mut store, "cpia", CpiaDims::new(c, 0.25, 0.25).map_err(|e| e.to_string())?, 0.1);
    let dgfm_cfg = DgfmConfig { enabled: true, reduction: 2, groups: 8 };
    let dgfm = DgfmWeights::new(&mut store, "dgfm", c, &dgfm_cfg);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    // Central differences are only meaningful away from the adapters' ReLU
    // kinks. Other draws can put a ReLU input within one step of zero, where
    // the ±1e-3 quotient no longer approximates the derivative.
    let mut r = rng(4);
    for &id in &ids {
        let shape = store.param(id).shape.clone();
        *store.value_mut(id) = uniform(&mut r, &shape, 0.4);
    }
    // One sample on a 2×4 grid: eight tokens.
    let a = uniform(&mut r, &[1, 2, 4, c], 1.5);
    let b = uniform(&mut r, &[1, 2, 4, c], 1.5);
    let w1 = uniform(&mut r, &[1, 2, 4, c], 1.0);
    let w2 = uniform(&mut r, &[1, 8, c], 1.0);
    let build = |g: &mut Graph| {
        let x = grid(g, a.clone(), Modality::Rgb);
        let y = grid(g, b.clone(), Modality::Aux);
        let (xo, yo) = cpia_forward(g, x, y, &cpia).expect("cpia");
        let fused = fuse_stage(g, &xo, &yo, &dgfm).expect("dgfm");
        let s = g.tape.add(xo.var, yo.var);
        let p = g.tape.weighted_sum(s, &w1);
        let q = g.tape.weighted_sum(fused.fused, &w2);
        g.tape.add(p, q)
    };
    let errs = fd_relative_errors(&mut store, &ids, &build);
    let (worst_name, worst) = errs
        .iter()
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap_or_default();
    let failing: Vec<String> = errs.iter().filter(|(_, e)| !(*e < FD_TOL)).map(|(n, e)| format!("{n} {e:.2e}")).collect();
    ensure(failing.is_empty(), || format!("relative error ≥ {FD_TOL:e}: {failing:?}"))?;
    within(Duration::from_secs(30), start)?;
    Ok(format!("{} tensors, worst {worst:.2e} ({worst_name})", errs.len()))
}

fn dgfm_convexity() -> Outcome {
    let mut r = rng(5);
    let (mut entries, mut gates) = (0usize, 0usize);
    let (mut gmin, mut gmax) = (1.0f64, 0.0f64);
    for i in 0..1000 {
        let c = [4, 8, 16, 32][i % 4];
        let cfg = DgfmConfig { enabled: true, reduction: [1, 2, 4][i % 3], groups: 8 };
        let mut store = ParamStore::new(i as u64);
        let w = DgfmWeights::new(&mut store, "dgfm", c, &cfg);
        let scale = r.random_range(0.05..1.0);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.param(id).shape.clone();
            *store.value_mut(id) = uniform(&mut r, &shape, scale);
        }
        let (bsz, h, wd) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
        let amp = r.random_range(0.1..5.0);
        let a = uniform(&mut r, &[bsz, h, wd, c], amp);
        let b = uniform(&mut r, &[bsz, h, wd, c], amp);
        let mut g = Graph::eval(&store);
        let x = grid(&mut g, a.clone(), Modality::Rgb);
        let y = grid(&mut g, b.clone(), Modality::Aux);
        let out = fuse_stage(&mut g, &x, &y, &w).map_err(|e| e.to_string())?;
        let gate = g.value(out.gate.expect("gated fusion"));
        for &v in gate.iter() {
            ensure(v > 0.0 && v < 1.0, || format!("input {i}: gate {v} outside (0, 1)"))?;
            gmin = gmin.min(v);
            gmax = gmax.max(v);
        }
        gates += gate.len();
        for ((&f, &p), &q) in g.value(out.fused).iter().zip(&a).zip(&b) {
            // g·x + (1 − g)·y is evaluated in floating point, which may
            // overshoot the hull by a few units in the last place.
            let slack = 4.0 * f64::EPSILON * p.abs().max(q.abs());
            ensure(f >= p.min(q) - slack && f <= p.max(q) + slack, || {
                format!("input {i}: fused {f} outside [{}, {}]", p.min(q), p.max(q))
            })?;
        }
        entries += a.len();
    }
    Ok(format!("1000 inputs, {entries} fused entries in hull, {gates} gates in [{gmin:.3e}, {gmax:.6}]"))
}

fn raster_oracle(input: &Tensor, plan: &MaskPlan, which: Assignment) -> Tensor {
    let mut out = input.clone();
    let s = input.shape().to_vec();
    for b in 0..s[0] {
        if plan.assignments[b] != which {
            continue;
        }
        for y in 0..s[2] {
            for x in 0..s[3] {
                let inside = plan.regions[b]
                    .iter()
                    .any(|q| y >= q.top && y < q.top + q.height && x >= q.left && x < q.left + q.width);
                if inside {
                    for c in 0..s[1] {
                        out[[b, c, y, x]] = 0.0;
                    }
                }
            }
        }
    }
    out
}

fn mcrm_partition_law() -> Outcome {
    let geometry = McrmConfig::default().geometry();
    let mut r = rng(6);
    for i in 0..500 {
        let b = r.random_range(1..=16usize);
        let ratio = [0.0, 0.25, 0.5, 1.0][r.random_range(0..4)];
        let (h, w) = (r.random_range(8..33), r.random_range(8..33));
        let plan = plan_masking(b, ratio, &geometry, h, w, &mut r).map_err(|e| e.to_string())?;
        let n = (ratio * b as f64).floor() as usize;
        let counts = (plan.count(Assignment::MaskRgb), plan.count(Assignment::MaskAux));
        ensure(counts == (n / 2, n - n / 2), || format!("batch {i}: B {b} r {ratio} gave {counts:?}"))?;
        // Strictly positive inputs so any zeroed pixel is visible.
        let rgb = uniform(&mut r, &[b, 3, h, w], 1.0).mapv(|v| v.abs() + 0.5);
        let aux = uniform(&mut r, &[b, 1, h, w], 1.0).mapv(|v| v.abs() + 0.5);
        let (mr, ma) = apply_masking(&rgb, &aux, &plan).map_err(|e| e.to_string())?;
        ensure(same_bits(&mr, &raster_oracle(&rgb, &plan, Assignment::MaskRgb)), || format!("batch {i}: rgb"))?;
        ensure(same_bits(&ma, &raster_oracle(&aux, &plan, Assignment::MaskAux)), || format!("batch {i}: aux"))?;
    }
    Ok("500 batches: counts exact, untouched rasters bit-identical, edits confined to rectangles".into())
}

fn omega_brute_force(logits: &Tensor, labels: &Array3<usize>, ignore: usize) -> Array3<bool> {
    let k = logits.shape()[1];
    Array3::from_shape_fn(labels.dim(), |(b, y, x)| {
        let l = labels[[b, y, x]];
        if l == ignore {
            return false;
        }
        let mut best = 0;
        for c in 1..k {
            if logits[[b, c, y, x]] > logits[[b, best, y, x]] {
                best = c;
            }
        }
        best != l
    })
}

fn hard_pixel_law() -> Outcome {
    let (bsz, k, h, w) = (2, 6, 8, 8);
    let ignore = k;
    let mut r = rng(7);
    let mut sizes = Vec::new();
    for i in 0..100 {
        // Half-integer logits so argmax ties occur.
        let logits = uniform(&mut r, &[bsz, k, h, w], 2.0).mapv(|v| (v * 2.0).round() / 2.0);
        let labels = Array3::from_shape_fn((bsz, h, w), |_| r.random_range(0..=k));
        let omega = hard_pixel_set(&logits, &labels, Some(ignore)).map_err(|e| e.to_string())?;
        ensure(omega.mask == omega_brute_force(&logits, &labels, ignore), || format!("instance {i}: Ω differs"))?;
        sizes.push(omega.count());

        let mut t = Tape::new();
        let pr = t.leaf(uniform(&mut r, &[bsz, k, h, w], 3.0), true);
        let pa = t.leaf(uniform(&mut r, &[bsz, k, h, w], 3.0), true);
        let (lr, la) = aux_loss(&mut t, pr, pa, &labels.mapv(|l| l.min(k - 1)), &omega).map_err(|e| e.to_string())?;
        let s = t.add(lr, la);
        let grads = t.backward(s);
        for v in [pr, pa] {
            let Some(gr) = grads.get(v) else { continue };
            for ((b, c, y, x), &gv) in gr.clone().into_dimensionality::<ndarray::Ix4>().unwrap().indexed_iter() {
                ensure(omega.mask[[b, y, x]] || gv == 0.0, || {
                    format!("instance {i}: gradient {gv} at ({b}, {c}, {y}, {x}) outside Ω")
                })?;
            }
        }
    }
    let mut t = Tape::new();
    let labels = Array3::from_shape_fn((bsz, h, w), |_| r.random_range(0..k));
    let empty = HardPixelMask { mask: Array3::from_elem((bsz, h, w), false) };
    let pr = t.leaf(uniform(&mut r, &[bsz, k, h, w], 3.0), true);
    let pa = t.leaf(uniform(&mut r, &[bsz, k, h, w], 3.0), true);
    let (lr, la) = aux_loss(&mut t, pr, pa, &labels, &empty).map_err(|e| e.to_string())?;
    ensure(t.item(lr) == 0.0 && t.item(la) == 0.0, || "aux loss nonzero with empty Ω".into())?;
    let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
    Ok(format!("100 instances, |Ω| in [{lo}, {hi}]; empty Ω gives exactly 0"))
}

fn metrics_oracle() -> Outcome {
    let mut r = rng(8);
    for i in 0..100 {
        let k = r.random_range(2..9usize);
        let background = r.random_bool(0.5).then(|| r.random_range(0..k));
        let ignore = r.random_bool(0.5).then_some(k);
        let n = r.random_range(1..400usize);
        let gt: Vec<usize> = (0..n).map(|_| r.random_range(0..k + ignore.is_some() as usize)).collect();
        let pred: Vec<usize> = gt
            .iter()
            .map(|&g| if g < k && r.random_bool(0.6) { g } else { r.random_range(0..k) })
            .collect();
        let mut cm = ConfusionMatrix::with_background(k, background);
        cm.accumulate(&pred, &gt, ignore).map_err(|e| e.to_string())?;

        let kept: Vec<(usize, usize)> = pred.iter().zip(&gt).filter(|(_, g)| Some(**g) != ignore).map(|(p, g)| (*p, *g)).collect();
        for gi in 0..k {
            for pi in 0..k {
                let want = kept.iter().filter(|&&(p, g)| p == pi && g == gi).count() as u64;
                ensure(cm.counts[[gi, pi]] == want, || format!("map {i}: count ({gi}, {pi})"))?;
            }
        }
        let close = |a: f64, b: f64| (a - b).abs() <= FRACTION_TOL * a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
        let oa = if kept.is_empty() { 0.0 } else { kept.iter().filter(|(p, g)| p == g).count() as f64 / kept.len() as f64 };
        let (mut f1s, mut ious) = (Vec::new(), Vec::new());
        for c in (0..k).filter(|&c| Some(c) != background) {
            let tp = kept.iter().filter(|&&(p, g)| p == c && g == c).count() as f64;
            let fp = kept.iter().filter(|&&(p, g)| p == c && g != c).count() as f64;
            let fneg = kept.iter().filter(|&&(p, g)| p != c && g == c).count() as f64;
            if tp + fp + fneg == 0.0 {
                continue;
            }
            let f1 = 2.0 * tp / (2.0 * tp + fp + fneg);
            let iou = tp / (tp + fp + fneg);
            ensure(close(iou, f1 / (2.0 - f1)), || format!("map {i}: IoU ≠ F1/(2 − F1) for class {c}"))?;
            let (cf, ci) = (cm.class_f1(c).unwrap(), cm.class_iou(c).unwrap());
            ensure(close(cf, f1) && close(ci, iou), || format!("map {i}: class {c} scores"))?;
            ensure(close(ci, cf / (2.0 - cf)), || format!("map {i}: reported IoU ≠ F1/(2 − F1) for class {c}"))?;
            f1s.push(f1);
            ious.push(iou);
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        ensure(close(cm.overall_accuracy(), oa), || format!("map {i}: OA"))?;
        ensure(close(cm.mean_f1(), mean(&f1s)), || format!("map {i}: mF1"))?;
        ensure(close(cm.mean_iou(), mean(&ious)), || format!("map {i}: mIoU"))?;
    }
    Ok(format!("100 maps, counts exact, ratios within {FRACTION_TOL:e} relative"))
}

fn ablation_monotonicity() -> Outcome {
    let desk = RunConfig::preset(Preset::Desk);
    let mut counts = Vec::new();
    for v in AblationVariant::ALL {
        let model = Model::layout(&v.configure(&desk)).map_err(|e| e.to_string())?;
        counts.push((v.label(), ParamCounts::of(&model.store).trainable));
    }
    ensure(counts.windows(2).all(|w| w[0].1 < w[1].1), || format!("{counts:?}"))?;
    Ok(counts.iter().map(|(l, n)| format!("{l} {n}")).collect::<Vec<_>>().join(" < "))
}

fn robustness_direction() -> Outcome {
    let start = Instant::now();
    let cfg = small_config()
        .with_overrides(&[
            "schedule.base_lr=1e-3".into(),
            "schedule.warmup_epochs=1".into(),
            "schedule.epochs=12".into(),
            "schedule.steps_per_epoch=50".into(),
            "data.batch=8".into(),
        ])
        .map_err(|e| e.to_string())?;
    let pairs = symfuse_cli::paired_robustness(&cfg, &[42, 43, 44]).map_err(|e| e.to_string())?;
    let wins = pairs.iter().filter(|p| p.masking_helps()).count();
    let detail: Vec<String> = pairs
        .iter()
        .map(|p| {
            format!(
                "seed {}: {:.2} vs {:.2}",
                p.seed,
                100.0 * p.mcrm_on.rgb_only_drop.miou,
                100.0 * p.mcrm_off.rgb_only_drop.miou
            )
        })
        .collect();
    ensure(wins >= 2, || format!("masking helped in {wins} of 3 seeds ({})", detail.join("; ")))?;
    within(Duration::from_secs(20 * 60), start)?;
    Ok(format!("{wins}/3 seeds, rgb_only mIoU drop on vs off: {}", detail.join("; ")))
}

fn schedule_reproduction() -> Outcome {
    let cfg = RunConfig::preset(Preset::Desk);
    let s = ScheduleSpec::from_config(&cfg.schedule);
    let w = s.warmup_steps;
    let last = s.final_step();
    ensure(lr_at(0, &s) == 0.0, || format!("lr(0) = {}", lr_at(0, &s)))?;
    ensure((lr_at(w, &s) - 3e-4).abs() <= SCHEDULE_TOL, || format!("lr({w}) = {}", lr_at(w, &s)))?;
    ensure((lr_at(last, &s) - s.lr_min).abs() <= SCHEDULE_TOL, || format!("lr({last}) = {}", lr_at(last, &s)))?;
    // Closed forms of the two phases, evaluated independently.
    for step in 0..=last {
        let want = if step < w {
            s.base_lr * step as f64 / w as f64
        } else {
            let t = (step - w) as f64 / (last - w) as f64;
            s.lr_min + 0.5 * (s.base_lr - s.lr_min) * (1.0 + (PI * t).cos())
        };
        ensure((lr_at(step, &s) - want).abs() <= SCHEDULE_TOL, || format!("step {step}"))?;
    }
    // Continuity: no step moves further than the steeper phase allows.
    let bound = (s.base_lr / w as f64).max(0.5 * PI * (s.base_lr - s.lr_min) / (last - w) as f64);
    for step in 0..last {
        let jump = (lr_at(step + 1, &s) - lr_at(step, &s)).abs();
        ensure(jump <= bound + SCHEDULE_TOL, || format!("jump {jump:e} at step {step}"))?;
    }
    Ok(format!("W = {w}, final step {last}, base {:e}, min {:e}", s.base_lr, s.lr_min))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train = || -> Result<PathBuf, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_symfuse"))
            .args(["train", "--seed", "42", "--schedule.epochs=2", "--schedule.steps_per_epoch=10", "--schedule.warmup_epochs=1"])
            .arg("--out")
            .arg(tmp.path())
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        Ok(PathBuf::from(stdout.lines().next().unwrap_or_default()))
    };
    let (a, b) = (train()?, train()?);
    let read = |p: &PathBuf| fs::read(p.join("metrics.json")).map_err(|e| e.to_string());
    let (ma, mb) = (read(&a)?, read(&b)?);
    ensure(ma == mb, || "metrics.json differs between runs".into())?;
    Ok(format!("two desk runs (20 steps each), metrics.json identical ({} bytes)", ma.len()))
}

fn inference_purity() -> Outcome {
    let cfg = small_config().with_overrides(&["data.batch=4".into()]).map_err(|e| e.to_string())?;
    let data = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(Model::new(&cfg).map_err(|e| e.to_string())?);
    ensure(trainer.model.aux_heads.is_some(), || "training model lacks auxiliary heads".into())?;
    let mut r = rng(9);
    for _ in 0..5 {
        let batch = sample_batch(&data.train, 4, cfg.data.crop, &mut r).map_err(|e| e.to_string())?;
        trainer.train_step(&batch).map_err(|e| e.to_string())?;
    }
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("checkpoint");
    trainer.model.save_checkpoint(&path).map_err(|e| e.to_string())?;
    let restored = Model::from_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure(restored.aux_heads.is_none(), || "restored model kept auxiliary heads".into())?;

    let mut compared = 0;
    for _ in 0..3 {
        let batch = sample_batch(&data.test, 2, cfg.data.crop, &mut r).map_err(|e| e.to_string())?;
        // The fused branch of the training-time model, run without dropout.
        let mut g = Graph::train(&trainer.model.store, 0).without_dropout().without_grads();
        let out = trainer.model.forward(&mut g, &batch.rgb, &batch.aux).map_err(|e| e.to_string())?;
        let train_logits = g.value(out.logits).clone();
        let eval_logits = restored.predict(&batch.rgb, &batch.aux).map_err(|e| e.to_string())?;
        ensure(same_bits(&train_logits, &eval_logits), || "logits differ".into())?;
        compared += eval_logits.len();
    }
    Ok(format!("{compared} logits bit-identical after a checkpoint round trip"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("C1 frozen-backbone invariance", frozen_backbone_invariance),
        ("C2 identity at init", identity_at_init),
        ("C3 gradient correctness", gradient_correctness),
        ("C4 fusion convexity", dgfm_convexity),
        ("C5 masking partition law", mcrm_partition_law),
        ("C6 hard-pixel loss law", hard_pixel_law),
        ("C7 metrics oracle", metrics_oracle),
        ("C8 ablation monotonicity", ablation_monotonicity),
        ("C9 modality-robustness direction", robustness_direction),
        ("C10 schedule reproduction", schedule_reproduction),
        ("C11 determinism", determinism),
        ("C12 inference purity", inference_purity),
    ];
    // Start on a fresh line; libtest has already printed "test acceptance ... ".
    println!();
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                println!("[FAIL] {name} ({secs:.1}s): {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
