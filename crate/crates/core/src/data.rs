//! Labelled image datasets: the synthetic shapes generator and PNG folders.
//!
//! Images are stored as one `[N, 3, H, W]` `f32` tensor in `[0, 1]`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, ids: Vec<String>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() || ids.len() != labels.len() {
            return Err(Error::Data(format!(
                "inconsistent dataset: images {:?}, {} labels, {} ids",
                images.shape(),
                labels.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset { images, labels, ids, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.images.index0(i)
    }

    /// Stacks the selected images into `[B, C, H, W]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(&[idx.len(), c, h, w], data)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            classes: self.classes,
        }
    }

    /// Seeded shuffle split; the first part holds `1 - frac` of the data.
    pub fn split(&self, frac: f64, rng: &mut Rng) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let held = ((self.len() as f64) * frac).round() as usize;
        let (a, b) = idx.split_at(self.len() - held);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        (self.subset(&a), self.subset(&b))
    }

    /// First `n` items after a seeded shuffle.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        self.subset(&idx)
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Coloured shapes on textured backgrounds; the class is the shape.
    Synthetic {
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_train")]
        train: usize,
        #[serde(default = "default_test")]
        test: usize,
    },
    /// `root/<class>/*.png`, classes in lexical order. Without a test
    /// folder a seeded 20% split of the training folder is held out.
    Folder {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default = "default_size")]
        size: usize,
    },
}

fn default_size() -> usize {
    32
}
fn default_classes() -> usize {
    4
}
fn default_train() -> usize {
    2000
}
fn default_test() -> usize {
    500
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            size: default_size(),
            classes: default_classes(),
            train: default_train(),
            test: default_test(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Synthetic { size, classes, train, test } => {
                if !(2..=MAX_CLASSES).contains(classes) {
                    return Err(Error::Config(format!("synthetic classes must be in 2..={MAX_CLASSES}")));
                }
                if *size < 8 || *train == 0 || *test == 0 {
                    return Err(Error::Config("synthetic dataset needs size >= 8 and non-empty splits".into()));
                }
            }
            DatasetSpec::Folder { size, .. } => {
                if *size < 8 {
                    return Err(Error::Config("image size must be at least 8".into()));
                }
            }
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { size, .. } | DatasetSpec::Folder { size, .. } => *size,
        }
    }

    /// Loads `(train, test)`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        match self {
            DatasetSpec::Synthetic { size, classes, train, test } => Ok((
                synthetic(*train, *size, *classes, rng::derive(seed, &[rng::tag("train")])),
                synthetic(*test, *size, *classes, rng::derive(seed, &[rng::tag("test")])),
            )),
            DatasetSpec::Folder { train, test, size } => {
                let tr = load_folder(train, *size)?;
                match test {
                    Some(t) => {
                        let te = load_folder(t, *size)?;
                        if te.classes != tr.classes {
                            return Err(Error::Data("train and test folders disagree on classes".into()));
                        }
                        Ok((tr, te))
                    }
                    None => Ok(tr.split(0.2, &mut rng::stream(seed, &[rng::tag("folder-split")]))),
                }
            }
        }
    }
}

pub const MAX_CLASSES: usize = 10;

/// Shape membership in unit coordinates centred on the shape.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r <= 1.0,
        1 => au <= 0.8 && av <= 0.8,
        2 => v <= 0.8 && v >= -0.8 && au <= (0.8 - v) * 0.55,
        3 => (au <= 0.28 && av <= 1.0) || (av <= 0.28 && au <= 1.0),
        4 => (0.55..=1.0).contains(&r),
        5 => au <= 1.0 && av <= 0.35,
        6 => av <= 1.0 && au <= 0.35,
        7 => au + av <= 1.0,
        8 => ((u - v).abs() <= 0.38 || (u + v).abs() <= 0.38) && r <= 1.05,
        _ => ((u - 0.5).powi(2) + v * v).sqrt() <= 0.42 || ((u + 0.5).powi(2) + v * v).sqrt() <= 0.42,
    }
}

fn render(class: usize, size: usize, rng: &mut Rng) -> Vec<f32> {
    let base: [f64; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let fg = loop {
        let c: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let dist: f64 = c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
        if dist > 0.8 {
            break c;
        }
    };
    let freq = rng.gen_range(0.5..3.0) * 2.0 * PI / size as f64;
    let orient = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let amp = rng.gen_range(0.03..0.12);
    let s = size as f64;
    let radius = rng.gen_range(0.25..0.38) * s;
    let cy = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let cx = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let rot = rng.gen_range(-0.3..0.3f64);
    let (sin, cos) = rot.sin_cos();
    let mut out = vec![0f32; 3 * size * size];
    for i in 0..size {
        for j in 0..size {
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let (y, x) = ((i as f64 + oy - cy) / radius, (j as f64 + ox - cx) / radius);
                let (v, u) = (cos * y - sin * x, sin * y + cos * x);
                if inside(class, u, v) {
                    cover += 0.25;
                }
            }
            let t = (i as f64 * orient.sin() + j as f64 * orient.cos()) * freq + phase;
            let tex = amp * t.sin();
            for c in 0..3 {
                let bg = base[c] + tex + rng.gen_range(-0.03..0.03);
                let val = cover * fg[c] + (1.0 - cover) * bg;
                out[(c * size + i) * size + j] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Balanced synthetic set; item `i` depends only on `(seed, i)`.
pub fn synthetic(n: usize, size: usize, classes: usize, seed: u64) -> Dataset {
    let mut data = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng::stream(seed, &[i as u64]);
        let class = i % classes;
        data.extend(render(class, size, &mut rng));
        labels.push(class);
    }
    let ids = (0..n).map(|i| format!("synthetic-{i}")).collect();
    Dataset {
        images: Tensor::new(&[n, 3, size, size], data),
        labels,
        ids,
        classes,
    }
}

/// Loads an 8-bit image as a `[3, size, size]` tensor in `[0, 1]`.
pub fn load_png(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let mut data = vec![0f32; 3 * size * size];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * size + y as usize) * size + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, size, size], data))
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = img.data()[(c * h + y as usize) * w + x as usize];
            px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_folder(root: &Path, size: usize) -> Result<Dataset> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::Data(format!("{}: need at least two class folders", root.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            data.extend_from_slice(load_png(&f, size)?.data());
            labels.push(label);
            ids.push(f.strip_prefix(root).unwrap_or(&f).display().to_string());
        }
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no PNG images found", root.display())));
    }
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, 3, size, size], data), labels, ids, class_dirs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_balanced_and_in_range() {
        let a = synthetic(40, 16, 4, 9);
        let b = synthetic(40, 16, 4, 9);
        assert_eq!(a.images, b.images);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        assert_ne!(synthetic(40, 16, 4, 10).images, a.images);
    }

    #[test]
    fn every_shape_covers_some_pixels() {
        for class in 0..MAX_CLASSES {
            let mut rng = rng::stream(1, &[class as u64]);
            let img = render(class, 16, &mut rng);
            let distinct = img.iter().map(|v| (v * 50.0) as i32).collect::<std::collections::BTreeSet<_>>();
            assert!(distinct.len() > 3, "class {class}");
        }
    }

    #[test]
    fn png_folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic(6, 8, 2, 3);
        for i in 0..ds.len() {
            let cdir = dir.path().join(format!("class{}", ds.labels[i]));
            std::fs::create_dir_all(&cdir).unwrap();
            save_png(&cdir.join(format!("{i}.png")), &ds.image(i)).unwrap();
        }
        let back = load_folder(dir.path(), 8).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back.classes, 2);
        let diff = back
            .images
            .data()
            .iter()
            .zip(ds.subset(&[0, 2, 4, 1, 3, 5]).images.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(diff <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let ds = synthetic(50, 8, 5, 1);
        let (a, b) = ds.split(0.1, &mut rng::stream(0, &[]));
        assert_eq!(a.len(), 45);
        assert_eq!(b.len(), 5);
        let mut all: Vec<String> = a.ids.iter().chain(&b.ids).cloned().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 50);
    }
}
