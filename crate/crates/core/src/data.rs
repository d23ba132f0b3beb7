//! Synthetic letter-denoising benchmark: rendering, noise, on-disk format
//! and accuracy.
//!
//! Clean images are black with a few white capital letters. Each pixel is
//! then flipped with some probability, perturbed by Gaussian noise and
//! clamped to `[0, 1]`. On disk a split is a directory of PGM files plus a
//! JSON manifest; labels are 8-bit (0/255) and inputs 16-bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::InputImage;
use crate::error::{Error, Result};
use crate::mrf::Assignment;
use crate::pgm;

pub const DEFAULT_HEIGHT: usize = 50;
pub const DEFAULT_WIDTH: usize = 100;
pub const DEFAULT_IMAGES: usize = 50;
pub const DEFAULT_FLIP_P: f64 = 0.1;
pub const DEFAULT_SIGMA: f64 = 0.3;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

#[rustfmt::skip]
const FONT: [[&str; GLYPH_H]; 26] = [
    [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
    [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
    ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."],
    ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
    ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
    [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"],
    ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
    ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
    ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
    ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
    ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
    ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"],
    [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
    [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"],
    ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
    [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
    ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
    ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
    ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."],
    ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
    ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."],
    ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],
];

/// Image size and letter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Integer upscaling of the 5×7 glyphs.
    pub scale: usize,
    pub min_letters: usize,
    pub max_letters: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: DEFAULT_HEIGHT,
            width: DEFAULT_WIDTH,
            scale: 2,
            min_letters: 3,
            max_letters: 8,
        }
    }
}

impl RenderConfig {
    fn glyph_size(&self) -> (usize, usize) {
        (GLYPH_H * self.scale, GLYPH_W * self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        let (gh, gw) = self.glyph_size();
        if self.scale == 0 || self.min_letters == 0 || self.min_letters > self.max_letters {
            return Err(Error::InvalidArgument(format!(
                "bad letter layout {self:?}"
            )));
        }
        // Letters sit side by side with at least one column between them.
        if gh > self.height || self.max_letters * (gw + 1) - 1 > self.width {
            return Err(Error::InvalidArgument(format!(
                "{} letters of {gw}×{gh} pixels do not fit a {}×{} image",
                self.max_letters, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// A clean binary image with uppercase letters at random, horizontally
/// disjoint positions. Row-major, values in `{0, 1}`.
pub fn render_clean(rng: &mut impl Rng, config: &RenderConfig) -> Vec<u8> {
    let (gh, gw) = config.glyph_size();
    let (h, w) = (config.height, config.width);
    let n = rng.random_range(config.min_letters..=config.max_letters);
    // Spread the free columns over the n + 1 gaps uniformly.
    let free = w - (n * (gw + 1) - 1);
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();

    let mut img = vec![0u8; h * w];
    for (i, cut) in cuts.into_iter().enumerate() {
        let x0 = cut + i * (gw + 1);
        let y0 = rng.random_range(0..=h - gh);
        let glyph = &FONT[rng.random_range(0..FONT.len())];
        for (gr, row) in glyph.iter().enumerate() {
            for (gc, cell) in row.bytes().enumerate() {
                if cell != b'#' {
                    continue;
                }
                for dr in 0..config.scale {
                    for dc in 0..config.scale {
                        let (r, c) = (y0 + gr * config.scale + dr, x0 + gc * config.scale + dc);
                        img[r * w + c] = 1;
                    }
                }
            }
        }
    }
    img
}

/// Flips each pixel with probability `flip_p`, adds `N(0, sigma²)` and clamps to `[0, 1]`.
pub fn add_noise(clean: &[u8], rng: &mut impl Rng, flip_p: f64, sigma: f64) -> Result<Vec<f64>> {
    check_noise(flip_p, sigma)?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(clean
        .iter()
        .map(|&v| {
            let mut x = v as f64;
            if rng.random_bool(flip_p) {
                x = 1.0 - x;
            }
            if sigma > 0.0 {
                x += normal.sample(rng);
            }
            x.clamp(0.0, 1.0)
        })
        .collect())
}

fn check_noise(flip_p: f64, sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&flip_p) {
        return Err(Error::InvalidArgument(format!(
            "flip probability {flip_p} not in [0, 1]"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma {sigma} must be ≥ 0"
        )));
    }
    Ok(())
}

/// Noisy input with its ground-truth labels (0 background, 1 foreground).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub input: InputImage,
    pub label: Assignment,
}

impl LabeledImage {
    pub fn new(input: InputImage, label: Assignment) -> Result<Self> {
        if label.len() != input.pixels().len() {
            return Err(Error::ShapeMismatch("label and input sizes differ".into()));
        }
        if label.labels().iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument("labels must be binary".into()));
        }
        Ok(Self { input, label })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub n_images: usize,
    pub seed: u64,
    pub flip_p: f64,
    pub sigma: f64,
    pub render: RenderConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_images: DEFAULT_IMAGES,
            seed: 0,
            flip_p: DEFAULT_FLIP_P,
            sigma: DEFAULT_SIGMA,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self, index: usize) -> u64 {
        let base = match self {
            Split::Train => 0,
            Split::Test => 1 << 32,
        };
        base + index as u64
    }
}

/// Independent generator for one image: the dataset seed plus a stream id
/// derived from the split and index.
pub fn image_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream(index));
    rng
}

pub fn generate_image(config: &DatasetConfig, split: Split, index: usize) -> Result<LabeledImage> {
    let mut rng = image_rng(config.seed, split, index);
    let clean = render_clean(&mut rng, &config.render);
    let noisy = add_noise(&clean, &mut rng, config.flip_p, config.sigma)?;
    let input = InputImage::new(config.render.height, config.render.width, noisy)?;
    let label = Assignment::new(clean.into_iter().map(usize::from).collect());
    LabeledImage::new(input, label)
}

pub fn generate_split(config: &DatasetConfig, split: Split) -> Result<Vec<LabeledImage>> {
    if config.n_images == 0 {
        return Err(Error::InvalidArgument(
            "dataset needs at least one image".into(),
        ));
    }
    config.render.validate()?;
    check_noise(config.flip_p, config.sigma)?;
    (0..config.n_images)
        .into_par_iter()
        .map(|i| generate_image(config, split, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    Ok(Dataset {
        train: generate_split(config, Split::Train)?,
        test: generate_split(config, Split::Test)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageFiles {
    pub input: String,
    pub label: String,
}

/// Per-split index file. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub n_images: usize,
    pub flip_probability: f64,
    pub gaussian_sigma: f64,
    pub files: Vec<ImageFiles>,
}

impl DatasetManifest {
    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self =
            serde_json::from_str(s).map_err(|e| Error::parse("dataset manifest", e.to_string()))?;
        if m.files.len() != m.n_images {
            return Err(Error::parse(
                "dataset manifest",
                format!("{} files listed for {} images", m.files.len(), m.n_images),
            ));
        }
        for f in &m.files {
            for p in [&f.input, &f.label] {
                let path = Path::new(p);
                if path.is_absolute() || path.components().any(|c| c.as_os_str() == "..") {
                    return Err(Error::parse(
                        "dataset manifest",
                        format!("path {p:?} escapes the dataset directory"),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Quantizes an intensity in `[0, 1]` to a 16-bit sample.
pub fn quantize(x: f64) -> u16 {
    (x.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn encode_input(img: &InputImage) -> Vec<u8> {
    let samples: Vec<u16> = img.pixels().iter().map(|&x| quantize(x)).collect();
    pgm::encode16(img.width(), img.height(), &samples)
}

pub fn encode_label(width: usize, height: usize, label: &[usize]) -> Vec<u8> {
    let samples: Vec<u8> = label
        .iter()
        .map(|&l| if l == 0 { 0 } else { 255 })
        .collect();
    pgm::encode8(width, height, 255, &samples)
}

pub fn decode_input(bytes: &[u8]) -> Result<InputImage> {
    let p = pgm::decode(bytes)?;
    let scale = p.maxval as f64;
    InputImage::new(
        p.height,
        p.width,
        p.samples.iter().map(|&s| s as f64 / scale).collect(),
    )
}

/// Label PGMs hold 0 for background and maxval for foreground.
pub fn decode_label(bytes: &[u8]) -> Result<(usize, usize, Assignment)> {
    let p = pgm::decode(bytes)?;
    let labels = p
        .samples
        .iter()
        .map(|&s| match s {
            0 => Ok(0),
            s if s == p.maxval => Ok(1),
            s => Err(Error::parse(
                "label PGM",
                format!("sample {s} is neither 0 nor maxval"),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((p.height, p.width, Assignment::new(labels)))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes one split as `dir/{input,label}_NNN.pgm` plus `dir/manifest.json`.
pub fn write_split(dir: &Path, images: &[LabeledImage], config: &DatasetConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let names = ImageFiles {
            input: format!("input_{i:03}.pgm"),
            label: format!("label_{i:03}.pgm"),
        };
        write_file(&dir.join(&names.input), &encode_input(&img.input))?;
        let (h, w) = (img.input.height(), img.input.width());
        write_file(
            &dir.join(&names.label),
            &encode_label(w, h, img.label.labels()),
        )?;
        files.push(names);
    }
    let manifest = DatasetManifest {
        seed: config.seed,
        height: config.render.height,
        width: config.render.width,
        n_images: images.len(),
        flip_probability: config.flip_p,
        gaussian_sigma: config.sigma,
        files,
    };
    let path = dir.join("manifest.json");
    write_file(&path, manifest.to_json().as_bytes())?;
    Ok(path)
}

/// Generates both splits under `root/train` and `root/test`; returns the two
/// manifest paths.
pub fn write_dataset(root: &Path, config: &DatasetConfig) -> Result<(PathBuf, PathBuf)> {
    let data = generate_dataset(config)?;
    let train = write_split(&root.join(Split::Train.name()), &data.train, config)?;
    let test = write_split(&root.join(Split::Test.name()), &data.test, config)?;
    Ok((train, test))
}

/// Loads every image of a split and checks it against the manifest.
pub fn load_split(manifest_path: &Path) -> Result<(DatasetManifest, Vec<LabeledImage>)> {
    let text = String::from_utf8(read_file(manifest_path)?)
        .map_err(|_| Error::parse("dataset manifest", "not UTF-8"))?;
    let manifest = DatasetManifest::from_json(&text)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut images = Vec::with_capacity(manifest.n_images);
    for f in &manifest.files {
        let input = decode_input(&read_file(&dir.join(&f.input))?)?;
        let (h, w, label) = decode_label(&read_file(&dir.join(&f.label))?)?;
        if (input.height(), input.width()) != (manifest.height, manifest.width)
            || (h, w) != (manifest.height, manifest.width)
        {
            return Err(Error::ShapeMismatch(format!(
                "{} / {} do not match the declared {}×{}",
                f.input, f.label, manifest.height, manifest.width
            )));
        }
        images.push(LabeledImage::new(input, label)?);
    }
    Ok((manifest, images))
}

/// Fraction of positions where the two labelings agree.
pub(crate) fn agreement(a: &[usize], b: &[usize]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    same as f64 / a.len() as f64
}

pub fn pixel_accuracy(pred: &Assignment, truth: &Assignment) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} pixels, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(agreement(pred.labels(), truth.labels()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn font_glyphs_are_well_formed() {
        for glyph in FONT {
            for row in glyph {
                assert_eq!(row.len(), GLYPH_W);
                assert!(row.bytes().all(|b| b == b'#' || b == b'.'));
            }
            assert!(glyph.iter().any(|r| r.contains('#')));
        }
        let distinct: std::collections::HashSet<_> = FONT.iter().collect();
        assert_eq!(distinct.len(), 26);
    }

    #[test]
    fn render_is_binary_and_deterministic() {
        let cfg = RenderConfig::default();
        let a = render_clean(&mut image_rng(3, Split::Train, 0), &cfg);
        let b = render_clean(&mut image_rng(3, Split::Train, 0), &cfg);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v <= 1));
        assert_eq!(a.len(), 50 * 100);
        let c = render_clean(&mut image_rng(3, Split::Train, 1), &cfg);
        assert_ne!(a, c);
    }

    #[test]
    fn default_layout_fits() {
        RenderConfig::default().validate().unwrap();
        let too_many = RenderConfig {
            scale: 3,
            ..Default::default()
        };
        assert!(too_many.validate().is_err());
    }

    #[test]
    fn noise_extremes() {
        let clean = render_clean(&mut image_rng(1, Split::Test, 4), &RenderConfig::default());
        let mut rng = image_rng(9, Split::Train, 0);
        let same = add_noise(&clean, &mut rng, 0.0, 0.0).unwrap();
        assert!(same.iter().zip(&clean).all(|(&x, &c)| x == c as f64));
        let inverted = add_noise(&clean, &mut rng, 1.0, 0.0).unwrap();
        assert!(inverted
            .iter()
            .zip(&clean)
            .all(|(&x, &c)| x == 1.0 - c as f64));
        assert!(add_noise(&clean, &mut rng, 1.5, 0.0).is_err());
        assert!(add_noise(&clean, &mut rng, 0.5, -1.0).is_err());
    }

    #[test]
    fn noisy_values_are_clamped() {
        let clean = [0u8, 1].repeat(500);
        let noisy = add_noise(&clean, &mut image_rng(0, Split::Train, 0), 0.2, 2.0).unwrap();
        assert!(noisy.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn accuracy_examples() {
        let truth: Assignment = vec![0, 1, 1, 0].into();
        assert_eq!(pixel_accuracy(&truth, &truth).unwrap(), 1.0);
        assert_eq!(
            pixel_accuracy(&vec![1, 0, 0, 1].into(), &truth).unwrap(),
            0.0
        );
        assert_eq!(
            pixel_accuracy(&vec![0, 1, 0, 1].into(), &truth).unwrap(),
            0.5
        );
        assert!(pixel_accuracy(&vec![0, 1].into(), &truth).is_err());
    }

    #[test]
    fn label_codec() {
        let bytes = encode_label(2, 2, &[0, 1, 1, 0]);
        let (h, w, l) = decode_label(&bytes).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(l.labels(), &[0, 1, 1, 0]);
        assert!(decode_label(&pgm::encode8(1, 1, 255, &[17])).is_err());
    }

    #[test]
    fn input_codec_quantizes_to_16_bits() {
        let img = InputImage::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let back = decode_input(&encode_input(&img)).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
    }

    #[test]
    fn manifest_rejects_escaping_paths_and_count_mismatch() {
        let mut m = DatasetManifest {
            seed: 1,
            height: 2,
            width: 2,
            n_images: 1,
            flip_probability: 0.1,
            gaussian_sigma: 0.3,
            files: vec![ImageFiles {
                input: "input_000.pgm".into(),
                label: "label_000.pgm".into(),
            }],
        };
        assert_eq!(DatasetManifest::from_json(&m.to_json()).unwrap(), m);
        m.files[0].label = "../secret.pgm".into();
        assert!(DatasetManifest::from_json(&m.to_json()).is_err());
        m.files[0].label = "label_000.pgm".into();
        m.n_images = 2;
        assert!(DatasetManifest::from_json(&m.to_json()).is_err());
        assert!(DatasetManifest::from_json(r#"{"seed":1}"#).is_err());
    }
}
