//! Rasters, patch tiling, dataset splits, the synthetic two-domain generator
//! and the on-disk dataset layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Three-channel 8-bit image, interleaved `H × W × 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RasterImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if pixels.len() != height * width * Self::CHANNELS {
            return Err(shape_err!(
                "{}×{} image needs {} bytes, got {}",
                height,
                width,
                height * width * Self::CHANNELS,
                pixels.len()
            ));
        }
        Ok(RasterImage { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, pixels)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Mean intensity per channel.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width) as f64;
        sums.map(|s| s / n)
    }

    fn crop(&self, y0: usize, x0: usize, size: usize) -> RasterImage {
        let mut pixels = Vec::with_capacity(size * size * 3);
        for y in y0..y0 + size {
            let row = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[row..row + size * 3]);
        }
        RasterImage {
            height: size,
            width: size,
            pixels,
        }
    }
}

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(shape_err!(
                "{}×{} label map needs {} entries, got {}",
                height,
                width,
                height * width,
                classes.len()
            ));
        }
        Ok(LabelMap { height, width, classes })
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.classes.iter().find(|&&c| c as usize >= num_classes) {
            Some(&c) => Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                c, num_classes
            ))),
            None => Ok(()),
        }
    }

    fn crop(&self, y0: usize, x0: usize, size: usize) -> LabelMap {
        let mut classes = Vec::with_capacity(size * size);
        for y in y0..y0 + size {
            let row = y * self.width + x0;
            classes.extend_from_slice(&self.classes[row..row + size]);
        }
        LabelMap {
            height: size,
            width: size,
            classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_size: 512,
            stride: 512,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::InvalidArgument(format!(
                "stride {} must lie in [1, patch size {}]",
                self.stride, self.patch_size
            )));
        }
        Ok(())
    }

    /// Valid offsets along an axis of length `dim`.
    pub fn offsets(&self, dim: usize) -> Vec<usize> {
        if dim < self.patch_size || self.stride == 0 {
            return Vec::new();
        }
        (0..=dim - self.patch_size).step_by(self.stride).collect()
    }

    /// `floor((dim - patch) / stride) + 1`, or 0 when the patch does not fit.
    pub fn count_along(&self, dim: usize) -> usize {
        if dim < self.patch_size || self.stride == 0 {
            0
        } else {
            (dim - self.patch_size) / self.stride + 1
        }
    }

    pub fn count(&self, height: usize, width: usize) -> usize {
        self.count_along(height) * self.count_along(width)
    }
}

pub type Patch = (RasterImage, Option<LabelMap>);

/// Row-major tiling; remainder pixels past the last full patch are dropped.
pub fn crop_patches(image: &RasterImage, label: Option<&LabelMap>, spec: &PatchSpec) -> Result<Vec<Patch>> {
    spec.validate()?;
    if image.height < spec.patch_size || image.width < spec.patch_size {
        return Err(Error::InvalidArgument(format!(
            "image of {}×{} is smaller than the {}-pixel patch",
            image.height, image.width, spec.patch_size
        )));
    }
    if let Some(l) = label {
        if (l.height, l.width) != (image.height, image.width) {
            return Err(shape_err!(
                "label {}×{} does not match image {}×{}",
                l.height,
                l.width,
                image.height,
                image.width
            ));
        }
    }
    let ys = spec.offsets(image.height);
    let xs = spec.offsets(image.width);
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            out.push((
                image.crop(y, x, spec.patch_size),
                label.map(|l| l.crop(y, x, spec.patch_size)),
            ));
        }
    }
    Ok(out)
}

/// Seeded random partition with `round(fraction · N)` training items; both
/// halves keep the input order.
pub fn split_dataset<I: Clone>(items: &[I], train_fraction: f64, seed: u64) -> Result<(Vec<I>, Vec<I>)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty list".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {} must lie strictly between 0 and 1",
            train_fraction
        )));
    }
    let n_train = (train_fraction * items.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; items.len()];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(items.len() - n_train);
    for (item, t) in items.iter().zip(is_train) {
        if t {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok((train, test))
}

/// Target-domain appearance shift: `out[c] = clamp(gain[c] · in[perm[c]] + offset[c] + noise)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub permutation: [usize; 3],
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub noise_std: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec::channel_permutation([2, 0, 1])
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec::channel_permutation([0, 1, 2])
    }

    pub fn channel_permutation(permutation: [usize; 3]) -> Self {
        ShiftSpec {
            permutation,
            gain: [1.0; 3],
            offset: [0.0; 3],
            noise_std: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for &p in &self.permutation {
            if p > 2 || seen[p] {
                return Err(Error::InvalidArgument(format!(
                    "{:?} is not a permutation of (0, 1, 2)",
                    self.permutation
                )));
            }
            seen[p] = true;
        }
        let finite = self.gain.iter().chain(&self.offset).all(|v| v.is_finite());
        if !finite || !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument("shift gains, offsets and noise must be finite, noise non-negative".into()));
        }
        Ok(())
    }

    pub fn apply(&self, image: &RasterImage, rng: &mut impl Rng) -> Result<RasterImage> {
        self.validate()?;
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut pixels = Vec::with_capacity(image.pixels.len());
        for px in image.pixels.chunks_exact(3) {
            for c in 0..3 {
                let mut v = self.gain[c] * px[self.permutation[c]] as f64 + self.offset[c];
                if self.noise_std > 0.0 {
                    v += noise.sample(rng);
                }
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        RasterImage::new(image.height, image.width, pixels)
    }
}

/// Scene generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub size: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub texture_std: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 128,
            min_regions: 4,
            max_regions: 8,
            texture_std: 8.0,
        }
    }
}

/// Class base colors. Channel sums grow with the class index so brightness
/// survives channel permutations while hue does not.
pub fn class_color(class: usize) -> [u8; 3] {
    const TABLE: [[u8; 3]; 8] = [
        [30, 80, 50],
        [150, 55, 95],
        [95, 185, 130],
        [230, 175, 215],
        [60, 140, 20],
        [200, 100, 30],
        [20, 110, 220],
        [240, 240, 120],
    ];
    if class < TABLE.len() {
        TABLE[class]
    } else {
        let v = (class * 37 % 256) as u8;
        [v, v.wrapping_mul(3), v.wrapping_mul(7)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub image: RasterImage,
    pub label: LabelMap,
}

/// One synthetic scene: a class-filled background plus axis-aligned
/// rectangles and ellipses, each painted with its class color and texture noise.
pub fn generate_scene(rng: &mut impl Rng, num_classes: usize, spec: &SceneSpec) -> Result<(RasterImage, LabelMap)> {
    let s = spec.size;
    let n_regions = rng.random_range(spec.min_regions..=spec.max_regions);
    let mut classes = vec![rng.random_range(0..num_classes) as u8; s * s];
    let min_half = (s / 16).max(1) as f64;
    let max_half = (s as f64 / 3.0).max(min_half + 1.0);
    for _ in 0..n_regions {
        let class = rng.random_range(0..num_classes) as u8;
        let cy = rng.random_range(0.0..s as f64);
        let cx = rng.random_range(0.0..s as f64);
        let hy = rng.random_range(min_half..max_half);
        let hx = rng.random_range(min_half..max_half);
        let ellipse = rng.random_bool(0.5);
        for y in 0..s {
            let dy = (y as f64 + 0.5 - cy) / hy;
            if dy.abs() > 1.0 {
                continue;
            }
            for x in 0..s {
                let dx = (x as f64 + 0.5 - cx) / hx;
                let inside = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 };
                if inside {
                    classes[y * s + x] = class;
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.texture_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut pixels = Vec::with_capacity(s * s * 3);
    for &c in &classes {
        let base = class_color(c as usize);
        for &b in &base {
            pixels.push((b as f64 + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((RasterImage::new(s, s, pixels)?, LabelMap::new(s, s, classes)?))
}

/// Source and target datasets of `n_images` scenes each. Target scenes are
/// drawn from an independent stream and passed through `shift`.
pub fn generate_synthetic_pair(
    seed: u64,
    n_images: usize,
    num_classes: usize,
    shift: &ShiftSpec,
    scene: &SceneSpec,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("at least one image is required".into()));
    }
    if !(2..=255).contains(&num_classes) {
        return Err(Error::InvalidArgument(format!("class count {} must lie in [2, 255]", num_classes)));
    }
    if scene.size == 0 || scene.min_regions > scene.max_regions || scene.texture_std < 0.0 {
        return Err(Error::InvalidArgument("invalid scene parameters".into()));
    }
    shift.validate()?;
    let mut src_rng = ChaCha8Rng::seed_from_u64(seed);
    src_rng.set_stream(0);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(seed);
    tgt_rng.set_stream(1);
    let mut source = Vec::with_capacity(n_images);
    let mut target = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let (image, label) = generate_scene(&mut src_rng, num_classes, scene)?;
        source.push(Sample {
            stem: format!("{:05}", i),
            image,
            label,
        });
        let (image, label) = generate_scene(&mut tgt_rng, num_classes, scene)?;
        target.push(Sample {
            stem: format!("{:05}", i),
            image: shift.apply(&image, &mut tgt_rng)?,
            label,
        });
    }
    Ok((source, target))
}

/// `[N, 3, H, W]` tensor with intensities mapped by `(v - 127.5) / 127.5`.
pub fn normalize_images<T: Element>(images: &[&RasterImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let hw = h * w;
    let mut data = vec![T::zero(); images.len() * 3 * hw];
    for (b, img) in images.iter().enumerate() {
        if (img.height, img.width) != (h, w) {
            return Err(shape_err!("batch mixes {}×{} and {}×{} images", h, w, img.height, img.width));
        }
        for (p, px) in img.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[(b * 3 + c) * hw + p] = T::of((px[c] as f64 - 127.5) / 127.5);
            }
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

pub fn images_dir(root: &Path, domain: Domain) -> PathBuf {
    root.join(domain.dir_name()).join("images")
}

pub fn labels_dir(root: &Path, domain: Domain) -> PathBuf {
    root.join(domain.dir_name()).join("labels")
}

pub fn manifest_path(root: &Path, domain: Domain, split: &str) -> PathBuf {
    root.join(domain.dir_name()).join(format!("{}.txt", split))
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_image(path: &Path, img: &RasterImage) -> Result<()> {
    image::save_buffer(
        path,
        &img.pixels,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| image_err(path, e))
}

pub fn load_image(path: &Path) -> Result<RasterImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    RasterImage::new(img.height() as usize, img.width() as usize, img.into_raw())
}

pub fn save_label(path: &Path, label: &LabelMap) -> Result<()> {
    image::save_buffer(
        path,
        &label.classes,
        label.width as u32,
        label.height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| image_err(path, e))
}

pub fn load_label(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::InvalidArgument(format!(
            "{} is not a single-channel 8-bit label image",
            path.display()
        )));
    }
    let img = img.to_luma8();
    LabelMap::new(img.height() as usize, img.width() as usize, img.into_raw())
}

pub fn write_manifest(path: &Path, stems: &[String]) -> Result<()> {
    let mut text = stems.join("\n");
    if !stems.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes images, labels and split manifests for one domain.
pub fn write_domain(root: &Path, domain: Domain, samples: &[Sample], train: &[String], test: &[String]) -> Result<()> {
    let (idir, ldir) = (images_dir(root, domain), labels_dir(root, domain));
    create_dir(&idir)?;
    create_dir(&ldir)?;
    for s in samples {
        save_image(&idir.join(format!("{}.png", s.stem)), &s.image)?;
        save_label(&ldir.join(format!("{}.png", s.stem)), &s.label)?;
    }
    write_manifest(&manifest_path(root, domain, "train"), train)?;
    write_manifest(&manifest_path(root, domain, "test"), test)
}

/// Loads the samples of one split. Labels are optional for unlabeled use.
pub fn load_split(root: &Path, domain: Domain, split: &str, with_labels: bool) -> Result<Vec<(String, RasterImage, Option<LabelMap>)>> {
    let stems = read_manifest(&manifest_path(root, domain, split))?;
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        let image = load_image(&images_dir(root, domain).join(format!("{}.png", stem)))?;
        let label = if with_labels {
            let l = load_label(&labels_dir(root, domain).join(format!("{}.png", stem)))?;
            if (l.height, l.width) != (image.height, image.width) {
                return Err(shape_err!("label for {} does not match its image", stem));
            }
            Some(l)
        } else {
            None
        };
        out.push((stem, image, label));
    }
    Ok(out)
}
