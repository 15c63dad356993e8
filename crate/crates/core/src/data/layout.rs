use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{natural_key, resize, Label, ResizeMode, SegmentationSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub masks: Vec<PathBuf>,
    pub label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Normal-class images found and left out.
    pub excluded: usize,
}

enum Class {
    Label(Label),
    Normal,
    Unknown,
}

fn classify(name: &str) -> Class {
    let n = name.to_ascii_lowercase();
    if n.starts_with("benign") {
        Class::Label(Label::Benign)
    } else if n.starts_with("malignant") {
        Class::Label(Label::Malignant)
    } else if n.starts_with("normal") {
        Class::Normal
    } else {
        Class::Unknown
    }
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn find_dir(root: &Path, name: &str) -> Option<PathBuf> {
    fs::read_dir(root).ok()?.flatten().map(|e| e.path()).find(|p| {
        p.is_dir() && p.file_name().is_some_and(|f| f.to_string_lossy().eq_ignore_ascii_case(name))
    })
}

/// Reads either the BUSI layout (`<name>.png` beside `<name>_mask.png`,
/// `<name>_mask_1.png`, ...) or a paired `original/` + `GT/` layout with
/// matching file names.
pub fn scan_manifest(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory")));
    }
    let mut manifest = match (find_dir(root, "original"), find_dir(root, "gt")) {
        (Some(images), Some(masks)) => scan_paired(root, &images, &masks)?,
        _ => scan_busi(root)?,
    };
    manifest.entries.sort_by_key(|e| natural_key(&e.id));
    Ok(manifest)
}

fn scan_busi(root: &Path) -> Result<DatasetManifest> {
    let mask_re = Regex::new(r"^(.*)_mask(_\d+)?$").expect("static pattern");
    let mut images: BTreeMap<PathBuf, PathBuf> = BTreeMap::new();
    let mut masks: BTreeMap<PathBuf, Vec<PathBuf>> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        let p = entry.path();
        if !entry.file_type().is_file() || !is_png(p) {
            continue;
        }
        let stem = p.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let dir = p.parent().unwrap_or(root);
        match mask_re.captures(&stem) {
            Some(c) => masks.entry(dir.join(&c[1])).or_default().push(p.to_path_buf()),
            None => {
                images.insert(dir.join(&stem), p.to_path_buf());
            }
        }
    }
    let orphans: Vec<String> = masks
        .iter()
        .filter(|(k, _)| !images.contains_key(*k))
        .flat_map(|(_, v)| v.iter().map(|p| p.display().to_string()))
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Manifest(format!("masks without an image: {}", orphans.join(", "))));
    }
    let mut entries = Vec::new();
    let mut missing = Vec::new();
    let mut excluded = 0;
    for (key, image) in images {
        let stem = key.file_name().unwrap_or_default().to_string_lossy().to_string();
        let parent = key
            .parent()
            .and_then(|d| d.file_name())
            .map(|d| d.to_string_lossy().to_string())
            .unwrap_or_default();
        let label = match (classify(&stem), classify(&parent)) {
            (Class::Normal, _) | (Class::Unknown, Class::Normal) => {
                excluded += 1;
                continue;
            }
            (Class::Label(l), _) | (Class::Unknown, Class::Label(l)) => Some(l),
            (Class::Unknown, Class::Unknown) => None,
        };
        let Some(mut m) = masks.get(&key).cloned() else {
            missing.push(image.display().to_string());
            continue;
        };
        m.sort_by_key(|p| natural_key(&p.to_string_lossy()));
        let id = image
            .strip_prefix(root)
            .unwrap_or(&image)
            .with_extension("")
            .to_string_lossy()
            .replace('\\', "/");
        entries.push(ManifestEntry { id, image, masks: m, label });
    }
    if !missing.is_empty() {
        return Err(Error::Manifest(format!("images without a mask: {}", missing.join(", "))));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        excluded,
    })
}

fn pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_png(&p) {
            out.insert(p.file_stem().unwrap_or_default().to_string_lossy().to_string(), p);
        }
    }
    Ok(out)
}

fn scan_paired(root: &Path, images: &Path, masks: &Path) -> Result<DatasetManifest> {
    let (imgs, gts) = (pngs(images)?, pngs(masks)?);
    let missing: Vec<String> = imgs
        .iter()
        .filter(|(k, _)| !gts.contains_key(*k))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Manifest(format!("images without a mask: {}", missing.join(", "))));
    }
    let entries = imgs
        .into_iter()
        .map(|(id, image)| ManifestEntry {
            masks: vec![gts[&id].clone()],
            label: match classify(&id) {
                Class::Label(l) => Some(l),
                _ => None,
            },
            id,
            image,
        })
        .collect();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        excluded: 0,
    })
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_luma8())
}

fn to_tensor(img: &GrayImage, f: impl Fn(u8) -> f64) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| f(p.0[0])).collect();
    Tensor::from_vec(&[1, h as usize, w as usize], data).expect("dimensions match")
}

fn load_entry(e: &ManifestEntry, size: usize) -> Result<SegmentationSample> {
    let img = read_gray(&e.image)?;
    let mut union: Option<Tensor> = None;
    for m in &e.masks {
        let mask = to_tensor(&read_gray(m)?, |v| if v > 127 { 1.0 } else { 0.0 });
        union = Some(match union {
            None => mask,
            Some(u) if u.shape() == mask.shape() => {
                Tensor::from_vec(u.shape(), u.data().iter().zip(mask.data()).map(|(a, b)| a.max(*b)).collect())?
            }
            Some(u) => {
                return Err(Error::Manifest(format!(
                    "{}: mask {} is {:?}, expected {:?}",
                    e.id,
                    m.display(),
                    &mask.shape()[1..],
                    &u.shape()[1..]
                )))
            }
        });
    }
    let mask = union.ok_or_else(|| Error::Manifest(format!("{} has no mask", e.id)))?;
    let image = to_tensor(&img, |v| v as f64 / 255.0);
    if image.shape() != mask.shape() {
        return Err(Error::Manifest(format!("{}: image and mask sizes differ", e.id)));
    }
    let image = resize(&image, size, size, ResizeMode::Bilinear)?;
    let mask = resize(&mask, size, size, ResizeMode::Nearest)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    SegmentationSample::new(e.id.clone(), image, mask, e.label)
}

/// Binary mask (luma above 127) from a PNG, optionally resized to
/// `size x size` by nearest neighbour.
pub fn read_mask(path: &Path, size: Option<usize>) -> Result<Tensor> {
    let mask = to_tensor(&read_gray(path)?, |v| if v > 127 { 1.0 } else { 0.0 });
    match size {
        Some(s) => Ok(resize(&mask, s, s, ResizeMode::Nearest)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })),
        None => Ok(mask),
    }
}

/// Writes the first plane of a `[C, H, W]` binary mask as 0/255 PNG.
pub fn write_mask_png(mask: &Tensor, path: &Path) -> Result<()> {
    if mask.shape().len() != 3 {
        return Err(Error::shape("write_mask_png", mask.shape(), &[1, 0, 0]));
    }
    save_png(&to_gray(mask, 255.0), path)
}

pub fn write_rgb_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Decodes every entry (in parallel) and returns samples in manifest order.
pub fn load_manifest(manifest: &DatasetManifest, size: usize) -> Result<Vec<SegmentationSample>> {
    if size == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    manifest.entries.par_iter().map(|e| load_entry(e, size)).collect()
}

pub fn load_dataset(root: &Path, size: usize) -> Result<Vec<SegmentationSample>> {
    load_manifest(&scan_manifest(root)?, size)
}

/// First plane of a `[C, H, W]` tensor.
fn to_gray(t: &Tensor, scale: f64) -> GrayImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = t.data()[y as usize * w + x as usize];
        Luma([(v * scale).round().clamp(0.0, 255.0) as u8])
    })
}

fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `<label>/<label> (k).png` and `<label>/<label> (k)_mask.png`,
/// numbering from 1 within each label; unlabeled samples go under `benign`.
pub fn write_busi_layout(samples: &[SegmentationSample], root: &Path) -> Result<()> {
    let mut counters = [0usize; 2];
    for s in samples {
        let (slot, name) = match s.label {
            Some(Label::Malignant) => (1, "malignant"),
            _ => (0, "benign"),
        };
        counters[slot] += 1;
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stem = format!("{name} ({})", counters[slot]);
        save_png(&to_gray(&s.image, 255.0), &dir.join(format!("{stem}.png")))?;
        save_png(&to_gray(&s.mask, 255.0), &dir.join(format!("{stem}_mask.png")))?;
    }
    Ok(())
}
