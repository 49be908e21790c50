//! Manifest-driven PNG datasets, one-hot masks and the synthetic blob generator.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::PromptSet;
use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Index 0 is background.
    pub classes: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Images `[B,3,S,S]` in `[0,1]`, their label maps, and one-hot masks `[B,N+1,S,S]`.
#[derive(Clone, Debug)]
pub struct SegmentationBatch<T> {
    pub images: Tensor<T>,
    pub labels: LabelMap,
    pub masks: Tensor<T>,
}

/// One-hot encoding of `labels` over `classes` channels.
pub fn one_hot<T: Scalar>(labels: &LabelMap, classes: usize) -> Result<Tensor<T>> {
    let (h, w) = labels.extents();
    let plane = h * w;
    if let Some(&bad) = labels.labels().iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Dataset(format!("label {bad} out of range for {classes} classes")));
    }
    let mut data = vec![T::zero(); labels.batch() * classes * plane];
    for b in 0..labels.batch() {
        for (px, &l) in labels.sample(b).iter().enumerate() {
            data[(b * classes + l as usize) * plane + px] = T::one();
        }
    }
    Tensor::new(vec![labels.batch(), classes, h, w], data)
}

/// Decoded dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    classes: Vec<String>,
    size: usize,
    /// Per sample, `3*S*S` channel-major values in `[0,1]`.
    images: Vec<Vec<f32>>,
    labels: Vec<Vec<u8>>,
}

fn read_png(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

impl Dataset {
    /// Reads and validates `dir/manifest.json` and every referenced PNG.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        if manifest.classes.len() < 2 {
            return Err(Error::Dataset(
                "manifest must list background plus at least one class".into(),
            ));
        }
        if manifest.samples.is_empty() {
            return Err(Error::Dataset(format!("{} lists no samples", dir.display())));
        }
        let classes = manifest.classes.len();
        let mut size = None;
        let mut images = Vec::with_capacity(manifest.samples.len());
        let mut labels = Vec::with_capacity(manifest.samples.len());
        for rec in &manifest.samples {
            let img_path = dir.join(&rec.image);
            let mask_path = dir.join(&rec.mask);
            let img = read_png(&img_path)?;
            let DynamicImage::ImageRgb8(img) = img else {
                return Err(Error::Dataset(format!(
                    "{} is not an 8-bit RGB image",
                    img_path.display()
                )));
            };
            let DynamicImage::ImageLuma8(mask) = read_png(&mask_path)? else {
                return Err(Error::Dataset(format!(
                    "{} is not an 8-bit grayscale mask",
                    mask_path.display()
                )));
            };
            let (w, h) = img.dimensions();
            if w != h {
                return Err(Error::Dataset(format!(
                    "{} is {w}x{h}; patches must be square",
                    img_path.display()
                )));
            }
            if mask.dimensions() != (w, h) {
                return Err(Error::Dataset(format!(
                    "{} is {:?} but its image is {w}x{h}",
                    mask_path.display(),
                    mask.dimensions()
                )));
            }
            let s = w as usize;
            if *size.get_or_insert(s) != s {
                return Err(Error::Dataset(format!(
                    "{} is {s}x{s}, earlier samples are {}x{}",
                    img_path.display(),
                    size.unwrap(),
                    size.unwrap()
                )));
            }
            if let Some(&bad) = mask.as_raw().iter().find(|&&v| v as usize >= classes) {
                return Err(Error::Dataset(format!(
                    "{} contains class {bad}, manifest has {classes} classes",
                    mask_path.display()
                )));
            }
            let plane = s * s;
            let mut chw = vec![0.0f32; 3 * plane];
            for (i, px) in img.pixels().enumerate() {
                for c in 0..3 {
                    chw[c * plane + i] = px[c] as f32 / 255.0;
                }
            }
            images.push(chw);
            labels.push(mask.into_raw());
        }
        Ok(Self {
            classes: manifest.classes,
            size: size.expect("at least one sample"),
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn patch_size(&self) -> usize {
        self.size
    }

    pub fn labels(&self, i: usize) -> &[u8] {
        &self.labels[i]
    }

    /// Assembles the samples at `indices` into a batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<SegmentationBatch<T>> {
        let s = self.size;
        let mut img = Vec::with_capacity(indices.len() * 3 * s * s);
        let mut lab = Vec::with_capacity(indices.len() * s * s);
        for &i in indices {
            img.extend(self.images[i].iter().map(|&v| T::lit(v as f64)));
            lab.extend_from_slice(&self.labels[i]);
        }
        let labels = LabelMap::new(indices.len(), s, s, lab)?;
        Ok(SegmentationBatch {
            images: Tensor::new(vec![indices.len(), 3, s, s], img)?,
            masks: one_hot(&labels, self.num_classes())?,
            labels,
        })
    }
}

/// Reads one RGB PNG as a `[1,3,H,W]` tensor in `[0,1]`.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = read_png(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::lit(px[c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![1, 3, h as usize, w as usize], data)
}

pub fn save_label_png(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, labels.to_vec())
        .ok_or_else(|| Error::shape("save_label_png", "label count does not match extents"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_rgb_png(path: &Path, rgb: &[u8], h: usize, w: usize) -> Result<()> {
    let img = RgbImage::from_raw(w as u32, h as u32, rgb.to_vec())
        .ok_or_else(|| Error::shape("save_rgb_png", "pixel count does not match extents"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub const MAX_SYNTHETIC_CLASSES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub patches: usize,
    pub size: usize,
    pub foreground_classes: usize,
    pub seed: u64,
    /// Target pixel-share ratio between consecutive foreground classes.
    pub decay: f64,
}

impl SyntheticConfig {
    pub fn new(patches: usize, size: usize, foreground_classes: usize, seed: u64) -> Self {
        Self {
            patches,
            size,
            foreground_classes,
            seed,
            decay: 0.7,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.foreground_classes == 0 || self.foreground_classes > MAX_SYNTHETIC_CLASSES {
            return Err(Error::Config(format!(
                "synthetic data supports 1..={MAX_SYNTHETIC_CLASSES} foreground classes, got {}",
                self.foreground_classes
            )));
        }
        if self.patches == 0 || self.size < 8 {
            return Err(Error::Config("need at least one patch of size >= 8".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} must lie in (0, 1]", self.decay)));
        }
        Ok(())
    }
}

/// Base colour and texture of each foreground class.
const SIGNATURES: [([f64; 3], Texture); MAX_SYNTHETIC_CLASSES] = [
    ([0.45, 0.10, 0.45], Texture::Speckle),
    ([0.85, 0.55, 0.20], Texture::Stripes),
    ([0.15, 0.20, 0.75], Texture::Flat),
    ([0.20, 0.65, 0.30], Texture::Checker),
    ([0.35, 0.35, 0.35], Texture::Rings),
];
const BACKGROUND: [f64; 3] = [0.93, 0.80, 0.85];

#[derive(Clone, Copy, Debug)]
enum Texture {
    Flat,
    Stripes,
    Checker,
    Speckle,
    Rings,
}

impl Texture {
    fn modulation(self, x: usize, y: usize, cx: f64, cy: f64, noise: f64) -> f64 {
        match self {
            Texture::Flat => 0.0,
            Texture::Stripes => {
                if (x + y) % 4 < 2 {
                    0.12
                } else {
                    -0.12
                }
            }
            Texture::Checker => {
                if (x / 2 + y / 2).is_multiple_of(2) {
                    0.12
                } else {
                    -0.12
                }
            }
            Texture::Speckle => 0.25 * noise,
            Texture::Rings => {
                let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                0.15 * (r * 1.6).sin()
            }
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            cx: rng.random_range(0.0..s),
            cy: rng.random_range(0.0..s),
            rx: rng.random_range(s / 14.0..s / 6.0).max(1.5),
            ry: rng.random_range(s / 14.0..s / 6.0).max(1.5),
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Writes `patches` random-ellipse images, masks and a manifest into `out`.
///
/// Each ellipse is given the foreground class furthest below its target pixel
/// share, so shares follow `decay^(k-1)` closely over many patches.
pub fn gen_synthetic(out: &Path, cfg: &SyntheticConfig) -> Result<Manifest> {
    cfg.validate()?;
    let s = cfg.size;
    let k = cfg.foreground_classes;
    let mut classes = vec!["background".to_string()];
    classes.extend(PromptSet::builtin().class_names().into_iter().skip(1).take(k));
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let targets: Vec<f64> = (0..k).map(|i| cfg.decay.powi(i as i32)).collect();
    let mut counts = vec![0u64; k + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.patches);
    let ellipses_per_patch = ((s * s) / 200).max(3);
    for n in 0..cfg.patches {
        let mut labels = vec![0u8; s * s];
        let mut centre = vec![(0.0f64, 0.0f64); s * s];
        for _ in 0..ellipses_per_patch + rng.random_range(0..2usize) {
            let e = Ellipse::random(&mut rng, s);
            let class = 1 + (0..k)
                .min_by(|&a, &b| {
                    let da = counts[a + 1] as f64 / targets[a];
                    let db = counts[b + 1] as f64 / targets[b];
                    da.total_cmp(&db)
                })
                .expect("k >= 1");
            for y in 0..s {
                for x in 0..s {
                    if e.contains(x, y) {
                        let i = y * s + x;
                        counts[labels[i] as usize] -= u64::from(labels[i] != 0);
                        counts[class] += 1;
                        labels[i] = class as u8;
                        centre[i] = (e.cx - 0.5, e.cy - 0.5);
                    }
                }
            }
        }
        let mut rgb = RgbImage::new(s as u32, s as u32);
        for y in 0..s {
            for x in 0..s {
                let i = y * s + x;
                let noise: f64 = rng.random_range(-1.0..1.0);
                let (base, m) = match labels[i] {
                    0 => (BACKGROUND, 0.04 * noise),
                    l => {
                        let (base, tex) = SIGNATURES[l as usize - 1];
                        let (cx, cy) = centre[i];
                        (base, tex.modulation(x, y, cx, cy, noise) + 0.03 * noise)
                    }
                };
                let px = base.map(|c| ((c + m).clamp(0.0, 1.0) * 255.0).round() as u8);
                rgb.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        let rec = SampleRecord {
            image: PathBuf::from(format!("images/{n:04}.png")),
            mask: PathBuf::from(format!("masks/{n:04}.png")),
        };
        let img_path = out.join(&rec.image);
        rgb.save(&img_path).map_err(|source| Error::Image {
            path: img_path.clone(),
            source,
        })?;
        save_label_png(&out.join(&rec.mask), &labels, s, s)?;
        samples.push(rec);
    }
    let manifest = Manifest { classes, samples };
    manifest.save(out)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::predict;

    #[test]
    fn one_hot_round_trip() {
        let labels = LabelMap::new(2, 2, 2, vec![0, 1, 2, 1, 2, 2, 0, 0]).unwrap();
        let masks = one_hot::<f32>(&labels, 3).unwrap();
        for b in 0..2 {
            for px in 0..4 {
                let s: f32 = (0..3).map(|c| masks.data()[(b * 3 + c) * 4 + px]).sum();
                assert_eq!(s, 1.0);
            }
        }
        assert_eq!(predict(&masks).unwrap(), labels);
        assert!(one_hot::<f32>(&labels, 2).is_err());
    }

    #[test]
    fn synthetic_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_synthetic(dir.path(), &SyntheticConfig::new(3, 32, 2, 7)).unwrap();
        assert_eq!(m.classes, ["background", "neoplastic", "epithelial"]);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!((ds.len(), ds.patch_size(), ds.num_classes()), (3, 32, 3));
        let b = ds.batch::<f32>(&[0, 2]).unwrap();
        assert_eq!(b.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(b.masks.shape(), &[2, 3, 32, 32]);
        assert!(b.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn too_many_classes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(gen_synthetic(dir.path(), &SyntheticConfig::new(1, 32, 6, 0)).is_err());
    }

    #[test]
    fn loader_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Dataset::load(dir.path()).is_err());
        Manifest {
            classes: vec!["background".into(), "a".into()],
            samples: vec![],
        }
        .save(dir.path())
        .unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Dataset(_))));

        fs::create_dir_all(dir.path().join("m")).unwrap();
        save_rgb_png(&dir.path().join("m/i.png"), &[0; 12], 2, 2).unwrap();
        save_label_png(&dir.path().join("m/l.png"), &[0, 1, 5, 0], 2, 2).unwrap();
        Manifest {
            classes: vec!["background".into(), "a".into()],
            samples: vec![SampleRecord {
                image: "m/i.png".into(),
                mask: "m/l.png".into(),
            }],
        }
        .save(dir.path())
        .unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("class 5"), "{err}");
    }
}
