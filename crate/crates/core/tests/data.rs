mod common;

use std::collections::HashMap;

use common::rng;
use ndarray::{array, Array2, Array3, Axis};
use symfuse::autograd::Tensor;
use symfuse::data::{
    denormalize_rgb, normalize_dsm, normalize_rgb, random_crop_flip, read_classes, read_dsm, read_split,
    sample_batch, sliding_window_inference, synth_dataset, synth_tiles, window_starts, write_classes,
    write_dsm_bin, write_tile, BackboneFamily, Dependence, NormalizedTile, Segmenter, SynthSpec, TilePair,
    IMAGENET_MEAN, IMAGENET_STD,
};

#[test]
fn dsm_min_max_scaling() {
    let dsm = Array3::from_shape_vec((1, 1, 3), vec![10.0, 20.0, 30.0]).unwrap();
    assert_eq!(normalize_dsm(&dsm), Array3::from_shape_vec((1, 1, 3), vec![0.0, 0.5, 1.0]).unwrap());
    let flat = Array3::from_elem((2, 2, 2), 7.5);
    assert!(normalize_dsm(&flat).iter().all(|&v| v == 0.0));
}

#[test]
fn rgb_normalization_per_family() {
    let mut rgb = Array3::zeros((3, 1, 2));
    rgb[[0, 0, 0]] = 255.0;
    rgb[[1, 0, 0]] = 0.456 * 255.0;
    let sam = normalize_rgb(&rgb, BackboneFamily::Sam);
    assert_eq!(sam[[0, 0, 0]], 1.0);
    assert_eq!(sam[[2, 0, 1]], 0.0);
    let dino = normalize_rgb(&rgb, BackboneFamily::Dinov2);
    assert!((dino[[0, 0, 0]] - (1.0 - IMAGENET_MEAN[0]) / IMAGENET_STD[0]).abs() < 1e-12);
    assert!(dino[[1, 0, 0]].abs() < 1e-12);
    assert!((dino[[2, 0, 1]] + IMAGENET_MEAN[2] / IMAGENET_STD[2]).abs() < 1e-12);
    let mut r = rng(1);
    let any = Array3::from_shape_simple_fn((3, 4, 4), || rand::Rng::random_range(&mut r, 0.0..255.0));
    for family in [BackboneFamily::Dinov2, BackboneFamily::Sam] {
        let back = denormalize_rgb(&normalize_rgb(&any, family), family);
        assert!(back.iter().zip(any.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}

/// A tile whose every raster stores the pixel's own linear index, so any
/// crop or flip can be traced back to its source.
fn marker_tile(h: usize, w: usize) -> NormalizedTile {
    let idx = |y: usize, x: usize| (y * w + x) as f64;
    NormalizedTile {
        tile_id: "m".into(),
        rgb: Array3::from_shape_fn((3, h, w), |(c, y, x)| idx(y, x) + 1000.0 * c as f64),
        aux: Array3::from_shape_fn((1, h, w), |(_, y, x)| idx(y, x)),
        labels: Array2::from_shape_fn((h, w), |(y, x)| y * w + x),
    }
}

#[test]
fn crop_and_flips_move_all_rasters_together() {
    let (h, w, crop) = (9, 11, 5);
    let tile = marker_tile(h, w);
    let mut r = rng(2);
    let mut seen = HashMap::new();
    for _ in 0..200 {
        let p = random_crop_flip(&tile, crop, &mut r).unwrap();
        *seen.entry((p.flip_h, p.flip_v)).or_insert(0) += 1;
        for i in 0..crop {
            for j in 0..crop {
                let sy = p.top + if p.flip_v { crop - 1 - i } else { i };
                let sx = p.left + if p.flip_h { crop - 1 - j } else { j };
                let src = sy * w + sx;
                assert_eq!(p.labels[[i, j]], src);
                assert_eq!(p.aux[[0, i, j]], src as f64);
                assert_eq!(p.rgb[[2, i, j]], src as f64 + 2000.0);
            }
        }
    }
    assert_eq!(seen.len(), 4, "all flip combinations occur");
}

#[test]
fn crop_equal_to_tile_keeps_every_pixel() {
    let tile = marker_tile(6, 6);
    let p = random_crop_flip(&tile, 6, &mut rng(3)).unwrap();
    assert_eq!((p.top, p.left), (0, 0));
    let mut ids: Vec<usize> = p.labels.iter().copied().collect();
    ids.sort();
    assert_eq!(ids, (0..36).collect::<Vec<_>>());
    assert!(random_crop_flip(&tile, 7, &mut rng(3)).is_err());
    assert!(random_crop_flip(&tile, 0, &mut rng(3)).is_err());
}

#[test]
fn batches_stack_crops() {
    let tiles = vec![marker_tile(8, 8), marker_tile(10, 12)];
    let b = sample_batch(&tiles, 5, 4, &mut rng(4)).unwrap();
    assert_eq!(b.size(), 5);
    assert_eq!(b.rgb.shape(), &[5, 3, 4, 4]);
    assert_eq!(b.aux.shape(), &[5, 1, 4, 4]);
    assert_eq!(b.labels.dim(), (5, 4, 4));
    assert!(sample_batch(&[], 2, 4, &mut rng(4)).is_err());
}

#[test]
fn synthetic_tiles_are_deterministic_and_independent_of_count() {
    let spec = SynthSpec::default();
    assert_eq!(synth_dataset(&spec, 9).unwrap(), synth_dataset(&spec, 9).unwrap());
    assert_ne!(synth_dataset(&spec, 9).unwrap().train[0], synth_dataset(&spec, 10).unwrap().train[0]);
    let three = synth_tiles(&spec, 3, "train", 5).unwrap();
    let two = synth_tiles(&spec, 2, "train", 5).unwrap();
    assert_eq!(&three[..2], &two[..]);
    assert_eq!(three[2].tile_id, "train_002");
    let t = &three[0];
    assert_eq!((t.rgb.dim(), t.dsm.dim(), t.labels.dim()), ((3, 64, 64), (1, 64, 64), (64, 64)));
    assert!(t.validate(6).is_ok());
}

/// Cell-level observations: (label, optical appearance guess, DSM value).
fn cells(spec: &SynthSpec, tiles: usize, seed: u64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for t in synth_tiles(spec, tiles, "train", seed).unwrap() {
        let c = spec.cell_size;
        for cy in 0..spec.tile_size / c {
            for cx in 0..spec.tile_size / c {
                let (y, x) = (cy * c + c / 2, cx * c + c / 2);
                let mean_r: f64 = (0..c).map(|i| t.rgb[[0, cy * c + i, cx * c + i]]).sum::<f64>() / c as f64;
                out.push((t.labels[[y, x]], usize::from(mean_r > 120.0), t.dsm[[0, y, x]]));
            }
        }
    }
    out
}

fn mutual_information(pairs: &[(usize, usize)]) -> f64 {
    let n = pairs.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pa: HashMap<usize, f64> = HashMap::new();
    let mut pb: HashMap<usize, f64> = HashMap::new();
    for &(a, b) in pairs {
        *joint.entry((a, b)).or_default() += 1.0 / n;
        *pa.entry(a).or_default() += 1.0 / n;
        *pb.entry(b).or_default() += 1.0 / n;
    }
    joint.iter().map(|(&(a, b), &p)| p * (p / (pa[&a] * pb[&b])).log2()).sum()
}

#[test]
fn aux_only_labels_ignore_the_optical_image() {
    let spec = SynthSpec { mode: Dependence::AuxOnly, ..SynthSpec::default() };
    let obs = cells(&spec, 120, 11);
    let mi = mutual_information(&obs.iter().map(|&(l, a, _)| (l, a)).collect::<Vec<_>>());
    assert!(mi < 0.02, "optical appearance carries {mi:.4} bits about the label");
    // Levels sit 6 apart with unit noise; the nearest level recovers the class.
    let hits = obs.iter().filter(|&&(l, _, z)| (((z - 10.0) / 6.0).round().clamp(0.0, 5.0) as usize) == l).count();
    assert!(hits as f64 / obs.len() as f64 > 0.97);
}

#[test]
fn joint_labels_need_both_modalities() {
    let spec = SynthSpec::default();
    let obs = cells(&spec, 120, 12);
    let appearance = obs.iter().filter(|&&(l, a, _)| l / 3 == a).count() as f64 / obs.len() as f64;
    let height = obs.iter().filter(|&&(l, _, z)| (((z - 10.0) / 10.0).round().clamp(0.0, 2.0) as usize) == l % 3).count() as f64
        / obs.len() as f64;
    assert!(appearance > 0.99 && height > 0.99, "{appearance} {height}");
    let mi_rgb = mutual_information(&obs.iter().map(|&(l, a, _)| (l, a)).collect::<Vec<_>>());
    // Appearance alone resolves one bit of the log2(6) ≈ 2.585.
    assert!((mi_rgb - 1.0).abs() < 0.05, "{mi_rgb}");
}

#[test]
fn window_offsets() {
    assert_eq!(window_starts(10, 4, 4).unwrap(), vec![0, 4, 6]);
    assert_eq!(window_starts(8, 4, 4).unwrap(), vec![0, 4]);
    assert_eq!(window_starts(4, 4, 2).unwrap(), vec![0]);
    assert_eq!(window_starts(7, 4, 1).unwrap(), vec![0, 1, 2, 3]);
    assert!(window_starts(8, 4, 0).is_err());
    assert!(window_starts(8, 4, 5).is_err());
    assert!(window_starts(3, 4, 4).is_err());
}

/// Logit `k` at a pixel is `(k + 1) × aux`, so averaging any set of
/// overlapping windows must reproduce it exactly.
struct Echo;

impl Segmenter for Echo {
    fn num_classes(&self) -> usize {
        2
    }

    fn predict(&self, _rgb: &Tensor, aux: &Tensor) -> symfuse::Result<Tensor> {
        let a = aux.index_axis(Axis(1), 0).to_owned();
        Ok(ndarray::stack(Axis(1), &[a.view(), (&a * 2.0).view()]).unwrap())
    }
}

#[test]
fn sliding_windows_average_back_to_the_pixel() {
    for (h, w, crop, stride, batch) in [(10, 13, 4, 3, 2), (5, 5, 8, 8, 1), (8, 8, 4, 4, 16)] {
        let aux = Array3::from_shape_fn((1, h, w), |(_, y, x)| (y * 31 + x * 7) as f64 * 0.1);
        let rgb = Array3::zeros((3, h, w));
        let out = sliding_window_inference(&Echo, &rgb, &aux, crop, stride, batch).unwrap();
        assert_eq!(out.dim(), (2, h, w));
        for y in 0..h {
            for x in 0..w {
                assert!((out[[0, y, x]] - aux[[0, y, x]]).abs() < 1e-12);
                assert!((out[[1, y, x]] - 2.0 * aux[[0, y, x]]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn tiles_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { tile_size: 16, cell_size: 4, ..SynthSpec::default() };
    let tiles = synth_tiles(&spec, 3, "train", 3).unwrap();
    for t in &tiles {
        write_tile(dir.path(), "train", t).unwrap();
    }
    let classes = SynthSpec::classes();
    write_classes(&dir.path().join("classes.txt"), &classes).unwrap();
    assert_eq!(read_classes(&dir.path().join("classes.txt")).unwrap(), classes);
    let back = read_split(dir.path(), "train", &classes).unwrap();
    assert_eq!(back, tiles);
}

#[test]
fn dsm_binary_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.dsm.bin");
    let dsm = array![[1.5, -2.25, 3.0], [0.0, 1e3, 7.125]];
    write_dsm_bin(&p, &dsm).unwrap();
    assert_eq!(read_dsm(&p).unwrap(), dsm);
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.pop();
    std::fs::write(&p, &bytes).unwrap();
    assert!(read_dsm(&p).is_err());
    std::fs::write(&p, b"NOPE00000000").unwrap();
    assert!(read_dsm(&p).is_err());
}

#[test]
fn palette_labels_and_sixteen_bit_dsm() {
    let dir = tempfile::tempdir().unwrap();
    let split = dir.path().join("test");
    std::fs::create_dir_all(&split).unwrap();
    let classes = SynthSpec::classes();
    let ids = [[0usize, 5], [3, 1]];
    image::RgbImage::from_fn(2, 2, |x, y| image::Rgb(classes[ids[y as usize][x as usize]].color))
        .save(split.join("t.labels.png"))
        .unwrap();
    image::RgbImage::from_pixel(2, 2, image::Rgb([1, 2, 3])).save(split.join("t.rgb.png")).unwrap();
    image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(2, 2, |x, y| image::Luma([(1000 * (y * 2 + x)) as u16]))
        .save(split.join("t.dsm.png"))
        .unwrap();
    let tiles: Vec<TilePair> = read_split(dir.path(), "test", &classes).unwrap();
    assert_eq!(tiles[0].labels, array![[0, 5], [3, 1]]);
    assert_eq!(tiles[0].dsm.index_axis(Axis(0), 0), array![[0.0, 1000.0], [2000.0, 3000.0]]);
    assert_eq!(tiles[0].rgb[[2, 1, 1]], 3.0);

    image::RgbImage::from_pixel(2, 2, image::Rgb([9, 9, 9])).save(split.join("t.labels.png")).unwrap();
    let err = read_split(dir.path(), "test", &classes).unwrap_err().to_string();
    assert!(err.contains("not in classes.txt"), "{err}");
}

#[test]
fn malformed_class_lists_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("classes.txt");
    for bad in ["", "0 a 1 2\n", "1 a 1 2 3\n", "0 a 1 2 300\n"] {
        std::fs::write(&p, bad).unwrap();
        assert!(read_classes(&p).is_err(), "{bad:?}");
    }
    std::fs::write(&p, "# header\n\n0 road 1 2 3\n1 tree 4 5 6\n").unwrap();
    assert_eq!(read_classes(&p).unwrap().len(), 2);
}
