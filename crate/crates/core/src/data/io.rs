//! Dataset directory layout and file formats.
//!
//! ```text
//! <root>/classes.txt
//! <root>/{train,test}/<tile_id>.rgb.png      8-bit RGB (alpha dropped)
//! <root>/{train,test}/<tile_id>.dsm.bin      see below, or .dsm.png (16-bit gray)
//! <root>/{train,test}/<tile_id>.labels.png   8-bit gray ids, or RGB palette colors
//! ```
//!
//! `classes.txt` holds one class per line, `id name r g b`; blank lines and
//! lines starting with `#` are skipped. Palette labels must match a listed
//! color exactly.
//!
//! `.dsm.bin` layout, all little-endian: the 4 bytes `DSM1`, `u32` height,
//! `u32` width, then `height * width` row-major `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};

use super::TilePair;
use crate::error::{Error, Result};

pub const DSM_MAGIC: &[u8; 4] = b"DSM1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub color: [u8; 3],
}

pub fn read_classes(path: &Path) -> Result<Vec<ClassInfo>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut classes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |why: &str| Error::format(path, format!("line {}: {why}", n + 1));
        if f.len() != 5 {
            return Err(bad("expected `id name r g b`"));
        }
        let id: usize = f[0].parse().map_err(|_| bad("id is not an integer"))?;
        let mut color = [0u8; 3];
        for (c, s) in color.iter_mut().zip(&f[2..]) {
            *c = s.parse().map_err(|_| bad("color component is not in 0..=255"))?;
        }
        if id != classes.len() {
            return Err(bad("class ids must be listed densely from 0"));
        }
        classes.push(ClassInfo {
            id,
            name: f[1].to_string(),
            color,
        });
    }
    if classes.is_empty() {
        return Err(Error::format(path, "no classes listed"));
    }
    Ok(classes)
}

pub fn write_classes(path: &Path, classes: &[ClassInfo]) -> Result<()> {
    let mut text = String::from("# id name r g b\n");
    for c in classes {
        text.push_str(&format!("{} {} {} {} {}\n", c.id, c.name, c.color[0], c.color[1], c.color[2]));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64
    }))
}

fn read_labels(path: &Path, classes: &[ClassInfo]) -> Result<Array2<usize>> {
    match open_image(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                img.get_pixel(x as u32, y as u32)[0] as usize
            }))
        }
        DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            let mut out = Array2::zeros((h as usize, w as usize));
            for (x, y, p) in img.enumerate_pixels() {
                let id = classes
                    .iter()
                    .find(|c| c.color == p.0)
                    .ok_or_else(|| {
                        Error::format(path, format!("pixel ({y}, {x}) has color {:?} not in classes.txt", p.0))
                    })?
                    .id;
                out[[y as usize, x as usize]] = id;
            }
            Ok(out)
        }
        other => Err(Error::format(
            path,
            format!("labels must be 8-bit gray ids or 8-bit RGB palette, got {:?}", other.color()),
        )),
    }
}

/// Reads a `.dsm.bin` or 16-bit `.dsm.png` height raster.
pub fn read_dsm(path: &Path) -> Result<Array2<f64>> {
    if path.extension().is_some_and(|e| e == "png") {
        return match open_image(path)? {
            DynamicImage::ImageLuma16(img) => {
                let (w, h) = img.dimensions();
                Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                    img.get_pixel(x as u32, y as u32)[0] as f64
                }))
            }
            other => Err(Error::format(path, format!("DSM png must be 16-bit gray, got {:?}", other.color()))),
        };
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != DSM_MAGIC {
        return Err(Error::format(path, "missing DSM1 header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (u32_at(4), u32_at(8));
    if bytes.len() != 12 + 4 * h * w {
        return Err(Error::format(
            path,
            format!("header says {h}x{w} but payload holds {} bytes", bytes.len() - 12),
        ));
    }
    let vals: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Array2::from_shape_vec((h, w), vals).expect("size checked"))
}

pub fn write_dsm_bin(path: &Path, dsm: &Array2<f64>) -> Result<()> {
    let (h, w) = dsm.dim();
    let mut bytes = Vec::with_capacity(12 + 4 * h * w);
    bytes.extend_from_slice(DSM_MAGIC);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in dsm.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn tile_path(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}.{suffix}"))
}

/// Loads every tile of `<root>/<split>`, ordered by tile id.
pub fn read_split(root: &Path, split: &str, classes: &[ClassInfo]) -> Result<Vec<TilePair>> {
    let dir = root.join(split);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".rgb.png") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    let mut tiles = Vec::with_capacity(ids.len());
    for id in ids {
        let rgb = read_rgb(&tile_path(&dir, &id, "rgb.png"))?;
        let bin = tile_path(&dir, &id, "dsm.bin");
        let png = tile_path(&dir, &id, "dsm.png");
        let dsm_path = if bin.exists() { bin } else { png };
        if !dsm_path.exists() {
            return Err(Error::format(&dir, format!("tile {id} has no .dsm.bin or .dsm.png")));
        }
        let dsm = read_dsm(&dsm_path)?.insert_axis(ndarray::Axis(0));
        let labels = read_labels(&tile_path(&dir, &id, "labels.png"), classes)?;
        let pair = TilePair {
            tile_id: id,
            rgb,
            dsm,
            labels,
        };
        pair.validate(classes.len())?;
        tiles.push(pair);
    }
    Ok(tiles)
}

/// Writes one tile in the layout [`read_split`] expects (gray-id labels,
/// binary DSM of the first aux channel).
pub fn write_tile(root: &Path, split: &str, pair: &TilePair) -> Result<()> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (h, w) = pair.labels.dim();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| pair.rgb[[c, y as usize, x as usize]].round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    let save = |img: DynamicImage, p: PathBuf| {
        img.save(&p).map_err(|source| Error::Image { path: p, source })
    };
    save(DynamicImage::ImageRgb8(rgb), tile_path(&dir, &pair.tile_id, "rgb.png"))?;
    let labels: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([pair.labels[[y as usize, x as usize]].min(255) as u8])
    });
    save(DynamicImage::ImageLuma8(labels), tile_path(&dir, &pair.tile_id, "labels.png"))?;
    let dsm = pair.dsm.index_axis(ndarray::Axis(0), 0).to_owned();
    write_dsm_bin(&tile_path(&dir, &pair.tile_id, "dsm.bin"), &dsm)
}
