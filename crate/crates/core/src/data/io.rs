use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mask pixels at or above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 128;

/// Suffixes of the two grayscale files that make up a two-channel case.
pub const TWO_CHANNEL_SUFFIXES: [&str; 2] = ["_eadc", "_dwi"];

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.push((stem.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

fn open(stem: &str, path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Data(format!("{stem}: cannot read {}: {e}", path.display())))
}

/// Reads one image as `[channels, H, W]` in `[0, 1]`. One channel reads
/// luma, three read RGB.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("?");
    let img = open(stem, path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planar = match channels {
        1 => img.to_luma8().into_raw(),
        3 => {
            let rgb = img.to_rgb8().into_raw();
            (0..3)
                .flat_map(|c| rgb.iter().skip(c).step_by(3).copied().collect::<Vec<_>>())
                .collect()
        }
        c => {
            return Err(Error::Config(format!(
                "single-file images have 1 or 3 channels, not {c}"
            )))
        }
    };
    Tensor::new(&[channels, h, w], planar.iter().map(|&v| v as f32 / 255.0).collect())
}

fn load_mask(stem: &str, path: &Path) -> Result<Tensor<f32>> {
    let m = open(stem, path)?.to_luma8();
    let (w, h) = (m.width() as usize, m.height() as usize);
    let data = m
        .into_raw()
        .into_iter()
        .map(|v| (v >= MASK_THRESHOLD) as u8 as f32)
        .collect();
    Tensor::new(&[1, h, w], data)
}

/// Loads `images_dir/*.png` paired with `masks_dir/*.png` by file stem, in
/// lexicographic stem order.
///
/// With `channels == 2` every case is two grayscale images,
/// `{stem}_eadc.png` and `{stem}_dwi.png`, stacked in that order, and the
/// mask is `{stem}.png`.
pub fn load_dir(images_dir: &Path, masks_dir: &Path, channels: usize) -> Result<Vec<Sample>> {
    let masks: BTreeMap<String, PathBuf> = png_stems(masks_dir)?.into_iter().collect();
    let mut cases: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for (stem, path) in png_stems(images_dir)? {
        if channels == 2 {
            let hit = TWO_CHANNEL_SUFFIXES
                .iter()
                .enumerate()
                .find_map(|(i, sfx)| stem.strip_suffix(sfx).map(|base| (i, base.to_string())));
            let (slot, base) = hit.ok_or_else(|| {
                Error::Data(format!("{stem}: two-channel images must end in _eadc or _dwi"))
            })?;
            let entry = cases.entry(base).or_insert_with(|| vec![PathBuf::new(); 2]);
            entry[slot] = path;
        } else {
            cases.insert(stem, vec![path]);
        }
    }

    let mut out = Vec::with_capacity(cases.len());
    for (stem, files) in &cases {
        if files.iter().any(|p| p.as_os_str().is_empty()) {
            return Err(Error::Data(format!("{stem}: missing one of the _eadc/_dwi images")));
        }
        let mask_path = masks
            .get(stem)
            .ok_or_else(|| Error::Data(format!("{stem}: no matching mask")))?;
        let image = if channels == 2 {
            let planes: Vec<Tensor<f32>> = files
                .iter()
                .map(|p| load_image(p, 1))
                .collect::<Result<_>>()?;
            if planes[0].shape() != planes[1].shape() {
                return Err(Error::Data(format!("{stem}: _eadc and _dwi sizes differ")));
            }
            let s = planes[0].shape();
            let data = planes.iter().flat_map(|p| p.data().iter().copied()).collect();
            Tensor::new(&[2, s[1], s[2]], data)?
        } else {
            load_image(&files[0], channels)?
        };
        let mask = load_mask(stem, mask_path)?;
        if image.shape()[1..] != mask.shape()[1..] {
            return Err(Error::Data(format!(
                "{stem}: image is {}x{} but mask is {}x{}",
                image.shape()[2],
                image.shape()[1],
                mask.shape()[2],
                mask.shape()[1]
            )));
        }
        out.push(Sample::new(stem.clone(), image, mask)?);
    }
    if let Some(orphan) = masks.keys().find(|k| !cases.contains_key(*k)) {
        return Err(Error::Data(format!("{orphan}: mask has no matching image")));
    }
    Ok(out)
}

/// [`load_dir`] on `<root>/images` and `<root>/masks`.
pub fn load_root(root: &Path, channels: usize) -> Result<Vec<Sample>> {
    load_dir(&root.join("images"), &root.join("masks"), channels)
}

/// Rounds `[0, 1]` values to 8-bit.
pub fn to_u8(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn save_gray(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Data(format!("{}: pixel buffer does not match size", path.display())))?;
    img.save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Writes a sample in the layout [`load_dir`] reads. Masks are stored as
/// 0/255.
pub fn save_sample(sample: &Sample, images_dir: &Path, masks_dir: &Path) -> Result<()> {
    let (c, h, w) = (sample.channels(), sample.height(), sample.width());
    let plane = h * w;
    let pixels = to_u8(sample.image.data());
    match c {
        1 => save_gray(&images_dir.join(format!("{}.png", sample.id)), w, h, pixels)?,
        2 => {
            for (i, sfx) in TWO_CHANNEL_SUFFIXES.iter().enumerate() {
                let p = pixels[i * plane..(i + 1) * plane].to_vec();
                save_gray(&images_dir.join(format!("{}{sfx}.png", sample.id)), w, h, p)?;
            }
        }
        3 => {
            let interleaved = (0..plane)
                .flat_map(|i| (0..3).map(move |ch| (ch, i)))
                .map(|(ch, i)| pixels[ch * plane + i])
                .collect();
            let img = image::RgbImage::from_raw(w as u32, h as u32, interleaved)
                .ok_or_else(|| Error::Data(format!("{}: bad RGB buffer", sample.id)))?;
            let path = images_dir.join(format!("{}.png", sample.id));
            img.save(&path)
                .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        }
        c => return Err(Error::Data(format!("{}: cannot save {c}-channel image", sample.id))),
    }
    let mask = sample.mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    save_gray(&masks_dir.join(format!("{}.png", sample.id)), w, h, mask)
}
