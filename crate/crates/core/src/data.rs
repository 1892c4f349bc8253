//! Datasets: folder ingestion, patch extraction, resizing and a synthetic
//! oriented-shape generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One image with its mask. The image is channel-major (`[C, H, W]`) with
/// values in `[0, 1]`; the mask holds a class index per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// Identifier of the original image this sample was cut from.
    pub source: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, channels: usize, height: usize, width: usize, image: Vec<f32>, mask: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if image.len() != channels * height * width || mask.len() != height * width {
            return Err(Error::shape(
                "sample_pair",
                format!("{id}: image {} values, mask {} for {channels}x{height}x{width}", image.len(), mask.len()),
            ));
        }
        Ok(SamplePair {
            source: id.clone(),
            id,
            channels,
            height,
            width,
            image,
            mask,
        })
    }

    /// Crop `[top, top+h) × [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> SamplePair {
        let mut image = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for i in top..top + h {
                let row = (c * self.height + i) * self.width;
                image.extend_from_slice(&self.image[row + left..row + left + w]);
            }
        }
        let mut mask = Vec::with_capacity(h * w);
        for i in top..top + h {
            mask.extend_from_slice(&self.mask[i * self.width + left..i * self.width + left + w]);
        }
        SamplePair {
            id: format!("{}@{top},{left}", self.id),
            source: self.source.clone(),
            channels: self.channels,
            height: h,
            width: w,
            image,
            mask,
        }
    }
}

/// How stored mask values map to class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum ClassMap {
    /// Zero is background, any nonzero value is foreground.
    Binary,
    /// Explicit gray value → class index table.
    Palette { values: Vec<u8> },
}

impl ClassMap {
    pub fn n_classes(&self) -> usize {
        match self {
            ClassMap::Binary => 2,
            ClassMap::Palette { values } => values.len(),
        }
    }

    fn map(&self, id: &str, value: u8) -> Result<u8> {
        match self {
            ClassMap::Binary => Ok(u8::from(value != 0)),
            ClassMap::Palette { values } => values
                .iter()
                .position(|&v| v == value)
                .map(|p| p as u8)
                .ok_or(Error::UnknownClass {
                    id: id.to_string(),
                    value,
                }),
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 2] = ["png", "bmp"];

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Load image/mask pairs matched by file stem, sorted by id.
pub fn load_folder_dataset(images_dir: &Path, masks_dir: &Path, class_map: &ClassMap) -> Result<Vec<SamplePair>> {
    let images = stems(images_dir)?;
    let masks = stems(masks_dir)?;
    let mut out = Vec::with_capacity(images.len());
    for (stem, path) in images {
        let mask_path = masks.get(&stem).ok_or_else(|| Error::MissingMask { stem: stem.clone() })?;
        let img = open(&path)?.to_rgb8();
        let mask = open(mask_path)?.to_luma8();
        if img.dimensions() != mask.dimensions() {
            let (iw, ih) = img.dimensions();
            let (mw, mh) = mask.dimensions();
            return Err(Error::SizeMismatch {
                id: stem,
                image: (ih as usize, iw as usize),
                mask: (mh as usize, mw as usize),
            });
        }
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
            }
        }
        let labels = mask
            .as_raw()
            .iter()
            .map(|&v| class_map.map(&stem, v))
            .collect::<Result<Vec<_>>>()?;
        out.push(SamplePair::new(stem, 3, h, w, data, labels)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub seed: u64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_size: 448,
            patches_per_image: 30,
            seed: 0,
        }
    }
}

/// Top-left corners, uniform over valid positions, drawn with replacement.
pub fn patch_offsets(height: usize, width: usize, spec: &PatchSpec) -> Result<Vec<(usize, usize)>> {
    let p = spec.patch_size;
    if p == 0 || height < p || width < p {
        return Err(Error::PatchTooLarge {
            source_hw: (height, width),
            patch: p,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.patches_per_image)
        .map(|_| (rng.gen_range(0..=height - p), rng.gen_range(0..=width - p)))
        .collect())
}

pub fn extract_patches(pair: &SamplePair, spec: &PatchSpec) -> Result<Vec<SamplePair>> {
    let offsets = patch_offsets(pair.height, pair.width, spec)?;
    Ok(offsets
        .into_iter()
        .enumerate()
        .map(|(i, (t, l))| {
            let mut s = pair.crop(t, l, spec.patch_size, spec.patch_size);
            s.id = format!("{}#{i:02}", pair.id);
            s
        })
        .collect())
}

/// Half-pixel-centred source coordinate and blend weight.
fn bilinear_axis(dst: usize, scale: f64, n: usize) -> (usize, usize, f32) {
    let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

/// Resize to `target × target`: bilinear for the image, nearest for the mask.
pub fn resize_to_input(pair: &SamplePair, target: usize) -> Result<SamplePair> {
    if target == 0 || target % 16 != 0 {
        return Err(Error::InvalidArgument(format!("input size {target} is not a positive multiple of 16")));
    }
    if pair.height == target && pair.width == target {
        return Ok(pair.clone());
    }
    let (h, w) = (pair.height, pair.width);
    let sy = h as f64 / target as f64;
    let sx = w as f64 / target as f64;
    let ys: Vec<_> = (0..target).map(|i| bilinear_axis(i, sy, h)).collect();
    let xs: Vec<_> = (0..target).map(|j| bilinear_axis(j, sx, w)).collect();
    let mut image = Vec::with_capacity(pair.channels * target * target);
    for c in 0..pair.channels {
        let plane = &pair.image[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                image.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let near = |d: usize, scale: f64, n: usize| (((d as f64 + 0.5) * scale) as usize).min(n - 1);
    let mut mask = Vec::with_capacity(target * target);
    for i in 0..target {
        let si = near(i, sy, h);
        for j in 0..target {
            mask.push(pair.mask[si * w + near(j, sx, w)]);
        }
    }
    Ok(SamplePair {
        id: pair.id.clone(),
        source: pair.source.clone(),
        channels: pair.channels,
        height: target,
        width: target,
        image,
        mask,
    })
}

/// Asymmetric polyomino outlines, as (row, col) unit cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    L,
    F,
    P,
}

impl Template {
    pub fn cells(self) -> &'static [(i32, i32)] {
        match self {
            Template::L => &[(0, 0), (1, 0), (2, 0), (2, 1)],
            Template::F => &[(0, 1), (0, 2), (1, 0), (1, 1), (2, 1)],
            Template::P => &[(0, 0), (0, 1), (1, 0), (1, 1), (2, 0)],
        }
    }

    fn extent(self) -> (f64, f64) {
        let cells = self.cells();
        let rows = cells.iter().map(|c| c.0).max().unwrap() + 1;
        let cols = cells.iter().map(|c| c.1).max().unwrap() + 1;
        (rows as f64, cols as f64)
    }

    fn contains(self, r: f64, c: f64) -> bool {
        let (r, c) = (r.floor(), c.floor());
        self.cells().iter().any(|&(i, j)| i as f64 == r && j as f64 == c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "degrees")]
pub enum Orientation {
    Uniform,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub templates: Vec<Template>,
    /// Side of one polyomino cell in pixels.
    pub cell: usize,
    pub orientation: Orientation,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_images: usize, image_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_images,
            image_size,
            templates: vec![Template::L, Template::F, Template::P],
            cell: (image_size / 8).max(1),
            orientation: Orientation::Uniform,
            noise: 0.1,
            seed,
        }
    }
}

/// Rendering record of one synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub template: Template,
    pub degrees: f64,
    /// Shape centre in pixel coordinates (row, col).
    pub centre: (f64, f64),
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<SamplePair>> {
    Ok(synth_generate_with_placements(spec)?.into_iter().map(|(s, _)| s).collect())
}

pub fn synth_generate_with_placements(spec: &SyntheticSpec) -> Result<Vec<(SamplePair, Placement)>> {
    if spec.templates.is_empty() || spec.cell == 0 || spec.image_size == 0 {
        return Err(Error::InvalidArgument("synthetic spec needs templates, cell size and image size".into()));
    }
    let n = spec.image_size;
    let mut out = Vec::with_capacity(spec.n_images);
    for idx in 0..spec.n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(idx as u64);
        let template = spec.templates[rng.gen_range(0..spec.templates.len())];
        let (rows, cols) = template.extent();
        let cell = spec.cell as f64;
        // Radius of the circle swept by the shape's bounding box.
        let radius = 0.5 * cell * (rows * rows + cols * cols).sqrt();
        if 2.0 * radius > n as f64 {
            return Err(Error::InvalidArgument(format!(
                "{template:?} shape with {}px cells does not fit in {n}px images",
                spec.cell
            )));
        }
        let degrees = match spec.orientation {
            Orientation::Uniform => rng.gen_range(0.0..360.0),
            Orientation::Fixed(d) => d,
        };
        let lo = radius;
        let hi = n as f64 - radius;
        let centre = if hi > lo {
            (rng.gen_range(lo..hi), rng.gen_range(lo..hi))
        } else {
            (lo, lo)
        };
        let (sin, cos) = (degrees * PI / 180.0).sin_cos();
        let mut mask = vec![0u8; n * n];
        for i in 0..n {
            for j in 0..n {
                let (dy, dx) = (i as f64 + 0.5 - centre.0, j as f64 + 0.5 - centre.1);
                // Inverse rotation (counter-clockwise shape rotation on screen).
                let r = cos * dy - sin * dx;
                let c = sin * dy + cos * dx;
                if template.contains(r / cell + rows / 2.0, c / cell + cols / 2.0) {
                    mask[i * n + j] = 1;
                }
            }
        }
        let fg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.55..0.8));
        let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.45));
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let a = rng.gen_range(0.0..2.0 * PI);
                let f = rng.gen_range(0.5..3.0) * 2.0 * PI / n as f64;
                (f * a.cos(), f * a.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..1.0))
            })
            .collect();
        let mut image = vec![0f32; 3 * n * n];
        for c in 0..3 {
            for i in 0..n {
                for j in 0..n {
                    let p = i * n + j;
                    let base = if mask[p] == 1 { fg[c] } else { bg[c] };
                    let texture: f64 = waves
                        .iter()
                        .map(|&(ky, kx, ph, amp)| amp * (ky * i as f64 + kx * j as f64 + ph).sin())
                        .sum::<f64>()
                        / 3.0;
                    let grain = rng.gen_range(-1.0..1.0);
                    let v = base + spec.noise * (texture + 0.5 * grain);
                    image[c * n * n + p] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        let sample = SamplePair::new(format!("synth{idx:05}"), 3, n, n, image, mask)?;
        out.push((
            sample,
            Placement {
                template,
                degrees,
                centre,
            },
        ));
    }
    Ok(out)
}

/// Stack samples into an input tensor `[B, C, H, W]` and masks `[B, H, W]`.
pub fn to_batch<T: Scalar>(samples: &[&SamplePair]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut x = Vec::with_capacity(samples.len() * c * h * w);
    let mut m = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.channels, s.height, s.width) != (c, h, w) {
            return Err(Error::shape("to_batch", format!("{} is {}x{}x{}, batch is {c}x{h}x{w}", s.id, s.channels, s.height, s.width)));
        }
        x.extend(s.image.iter().map(|&v| T::from_f64(v as f64)));
        m.extend_from_slice(&s.mask);
    }
    Ok((Tensor::from_vec([samples.len(), c, h, w], x)?, m))
}

/// Dataset manifest for folder-based data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub images: PathBuf,
    pub masks: PathBuf,
    pub classes: ClassMap,
    #[serde(default)]
    pub patches: Option<PatchSpec>,
    #[serde(default)]
    pub split: SplitUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    /// Folds are drawn over original images; all patches of an image share a fold.
    #[default]
    Source,
    Patch,
}

impl DatasetManifest {
    /// Parse a manifest; relative directories resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [&mut m.images, &mut m.masks] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn load(&self) -> Result<Vec<SamplePair>> {
        let pairs = load_folder_dataset(&self.images, &self.masks, &self.classes)?;
        match &self.patches {
            None => Ok(pairs),
            Some(spec) => {
                let mut out = Vec::new();
                for (i, p) in pairs.iter().enumerate() {
                    let spec = PatchSpec {
                        seed: spec.seed.wrapping_add(i as u64),
                        ..*spec
                    };
                    out.extend(extract_patches(p, &spec)?);
                }
                Ok(out)
            }
        }
    }
}
