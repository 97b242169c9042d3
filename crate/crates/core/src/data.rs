//! Synthetic shapes-with-styles dataset, PGM storage and the batch stream.
//!
//! Each image holds a background plus up to three shapes (rectangle, disk,
//! ring), each category drawn from its own disjoint intensity band. A global
//! per-image style `(x - 0.5) * contrast + 0.5 + offset` is then applied,
//! with the labeled split restricted to a narrow band of styles.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::numerics::Tensor;
use crate::seeding::{purpose, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Labeled, Split::Unlabeled, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }

    fn prefix(self) -> char {
        match self {
            Split::Labeled => 'l',
            Split::Unlabeled => 'u',
            Split::Test => 't',
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

/// Ranges for the global per-image style transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleRange {
    pub offset: (f64, f64),
    pub contrast: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    /// Background plus `classes - 1` of rectangle, disk, ring (in that order).
    pub classes: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    /// Intensity band per category, background first.
    pub intensity: Vec<(f64, f64)>,
    pub labeled_style: StyleRange,
    pub unlabeled_style: StyleRange,
    pub test_style: StyleRange,
    pub noise_sigma: f64,
    pub shape_prob: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let full = StyleRange {
            offset: (-0.15, 0.15),
            contrast: (0.5, 1.2),
        };
        Self {
            height: 64,
            width: 64,
            classes: 4,
            labeled: 10,
            unlabeled: 190,
            test: 50,
            intensity: vec![(0.10, 0.25), (0.35, 0.45), (0.55, 0.65), (0.75, 0.90)],
            labeled_style: StyleRange {
                offset: (0.08, 0.15),
                contrast: (1.0, 1.2),
            },
            unlabeled_style: full.clone(),
            test_style: full,
            noise_sigma: 0.02,
            shape_prob: 0.9,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dataset spec: {m}")));
        if !(2..=4).contains(&self.classes) {
            return bad("classes must be between 2 and 4");
        }
        if self.height < 16 || self.width < 16 {
            return bad("images must be at least 16x16");
        }
        if self.labeled == 0 || self.unlabeled < self.labeled {
            return bad("need at least one labeled image and unlabeled >= labeled");
        }
        if self.intensity.len() != self.classes {
            return bad("one intensity band per class is required");
        }
        if self.intensity.iter().any(|(lo, hi)| !(0.0 <= *lo && lo <= hi && *hi <= 1.0)) {
            return bad("intensity bands must satisfy 0 <= lo <= hi <= 1");
        }
        for s in [&self.labeled_style, &self.unlabeled_style, &self.test_style] {
            if s.offset.0 > s.offset.1 || s.contrast.0 > s.contrast.1 || s.contrast.0 <= 0.0 {
                return bad("style ranges must be ordered with positive contrast");
            }
        }
        if self.noise_sigma < 0.0 || !(0.0..=1.0).contains(&self.shape_prob) {
            return bad("noise must be nonnegative and shape_prob a probability");
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Labeled => self.labeled,
            Split::Unlabeled => self.unlabeled,
            Split::Test => self.test,
        }
    }

    pub fn style(&self, split: Split) -> &StyleRange {
        match split {
            Split::Labeled => &self.labeled_style,
            Split::Unlabeled => &self.unlabeled_style,
            Split::Test => &self.test_style,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    /// `H x W`, intensities in `[0, 1]`.
    pub image: Tensor<f64>,
    pub mask: Option<LabelMap>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Labeled => &self.labeled,
            Split::Unlabeled => &self.unlabeled,
            Split::Test => &self.test,
        }
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn generate_sample(spec: &DatasetSpec, split: Split, index: usize) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let mut rng = rng_for(spec.seed, &[purpose::GENERATE, split as u64, index as u64]);
    let mut mask = vec![0u8; h * w];
    let side = h.min(w) as f64;
    for class in 1..spec.classes {
        if !rng.random_bool(spec.shape_prob) {
            continue;
        }
        let cy = rng.random_range(0.2..0.8) * h as f64;
        let cx = rng.random_range(0.2..0.8) * w as f64;
        let inside: Box<dyn Fn(f64, f64) -> bool> = match class {
            1 => {
                let hh = rng.random_range(0.06..0.16) * side;
                let hw = rng.random_range(0.06..0.16) * side;
                Box::new(move |y, x| (y - cy).abs() <= hh && (x - cx).abs() <= hw)
            }
            2 => {
                let r = rng.random_range(0.06..0.14) * side;
                Box::new(move |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
            }
            _ => {
                let outer = rng.random_range(0.10..0.17) * side;
                let inner = outer - rng.random_range(0.035..0.06) * side;
                Box::new(move |y, x| {
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    d2 <= outer * outer && d2 >= inner * inner
                })
            }
        };
        for y in 0..h {
            for x in 0..w {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    mask[y * w + x] = class as u8;
                }
            }
        }
    }
    let level: Vec<f64> = spec.intensity.iter().map(|&r| draw(&mut rng, r)).collect();
    let style = spec.style(split);
    let offset = draw(&mut rng, style.offset);
    let contrast = draw(&mut rng, style.contrast);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let data = mask
        .iter()
        .map(|&l| {
            let v = level[l as usize] + if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            quantize((v - 0.5) * contrast + 0.5 + offset)
        })
        .collect();
    Sample {
        id: format!("{}{index:04}", split.prefix()),
        split,
        image: Tensor::new(vec![h, w], data).expect("consistent shape"),
        mask: Some(LabelMap::new(h, w, mask).expect("consistent shape")),
    }
}

/// Generates all splits in memory; deterministic per `spec.seed`.
///
/// Unlabeled samples keep their masks so the style gap can be analysed;
/// training never reads them.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let make = |split| (0..spec.count(split)).map(|i| generate_sample(spec, split, i)).collect();
    Ok(Dataset {
        labeled: make(Split::Labeled),
        unlabeled: make(Split::Unlabeled),
        test: make(Split::Test),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub counts: BTreeMap<String, usize>,
    /// Relative path to hex sha256.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the dataset under `root` and returns the manifest.
pub fn write_dataset(root: &Path, spec: &DatasetSpec, data: &Dataset) -> Result<Manifest> {
    let mut files = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for split in Split::ALL {
        let samples = data.split(split);
        counts.insert(split.as_str().to_string(), samples.len());
        for sub in ["img", "mask"] {
            let dir = root.join(split.as_str()).join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for s in samples {
            let mut entries = vec![("img", encode_image(&s.image)?)];
            if let Some(m) = &s.mask {
                entries.push(("mask", encode_pgm(m.height(), m.width(), m.data())));
            }
            for (sub, bytes) in entries {
                let rel = format!("{}/{sub}/{}.pgm", split.as_str(), s.id);
                let path = root.join(&rel);
                fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                files.insert(rel, sha256_hex(&bytes));
            }
        }
    }
    let manifest = Manifest {
        spec: spec.clone(),
        counts,
        files,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn generate_to_disk(spec: &DatasetSpec, root: &Path) -> Result<Manifest> {
    let data = generate(spec)?;
    write_dataset(root, spec, &data)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Quantizes `[0, 1]` intensities to 8 bits.
pub fn encode_image(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w) = image.dims2()?;
    let px: Vec<u8> = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(encode_pgm(h, w, &px))
}

/// Parses a binary 8-bit PGM into `(height, width, pixels)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let fail = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(fail("expected binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| fail("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(fail("only 8-bit PGM is supported"));
    }
    pos += 1;
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| fail("truncated pixel data"))?;
    Ok((h, w, body.to_vec()))
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    let (h, w, px) = read_pgm(path)?;
    Tensor::new(vec![h, w], px.iter().map(|&v| v as f64 / 255.0).collect())
}

pub fn read_mask(path: &Path, classes: usize) -> Result<LabelMap> {
    let (h, w, px) = read_pgm(path)?;
    let m = LabelMap::new(h, w, px)?;
    m.validate(classes)?;
    Ok(m)
}

/// Loads one split sorted by id. Labeled and test samples require masks;
/// unlabeled samples are returned without them.
pub fn load_split(root: &Path, split: Split, classes: usize) -> Result<Vec<Sample>> {
    let img_dir = root.join(split.as_str()).join("img");
    let mut ids: Vec<String> = match fs::read_dir(&img_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&img_dir, e)),
    };
    if ids.is_empty() {
        log::warn!("no images found in {}", img_dir.display());
        return Ok(Vec::new());
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let image = read_image(&img_dir.join(format!("{id}.pgm")))?;
            let mask = match split {
                Split::Unlabeled => None,
                _ => {
                    let path: PathBuf = root.join(split.as_str()).join("mask").join(format!("{id}.pgm"));
                    if !path.exists() {
                        return Err(Error::Format {
                            path,
                            msg: format!("missing mask for {split} sample {id}"),
                        });
                    }
                    let m = read_mask(&path, classes)?;
                    if image.shape() != [m.height(), m.width()] {
                        return Err(Error::shape("load_split", image.shape(), &[m.height(), m.width()]));
                    }
                    Some(m)
                }
            };
            Ok(Sample { id, split, image, mask })
        })
        .collect()
}

pub fn load_dataset(root: &Path, classes: usize) -> Result<Dataset> {
    Ok(Dataset {
        labeled: load_split(root, Split::Labeled, classes)?,
        unlabeled: load_split(root, Split::Unlabeled, classes)?,
        test: load_split(root, Split::Test, classes)?,
    })
}

/// Index stream of `(labeled, unlabeled)` halves. Each stream walks through
/// seeded permutations of its split and reshuffles on every pass, and the
/// batch at iteration `t` depends only on `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchStream {
    labeled: usize,
    unlabeled: usize,
    half: usize,
    seed: u64,
}

impl BatchStream {
    pub fn new(labeled: usize, unlabeled: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(Error::InvalidArgument(format!("batch size must be even and positive, got {batch_size}")));
        }
        if labeled == 0 || unlabeled == 0 {
            return Err(Error::Empty("batch stream needs labeled and unlabeled samples".into()));
        }
        Ok(Self {
            labeled,
            unlabeled,
            half: batch_size / 2,
            seed,
        })
    }

    pub fn half(&self) -> usize {
        self.half
    }

    fn take(&self, n: usize, tag: u64, t: u64) -> Vec<usize> {
        let start = t as usize * self.half;
        let mut cache: Option<(usize, Vec<usize>)> = None;
        (start..start + self.half)
            .map(|p| {
                let epoch = p / n;
                if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng_for(self.seed, &[tag, epoch as u64]));
                    cache = Some((epoch, perm));
                }
                cache.as_ref().expect("filled").1[p % n]
            })
            .collect()
    }

    /// Sample indices for iteration `t`.
    pub fn batch(&self, t: u64) -> (Vec<usize>, Vec<usize>) {
        (
            self.take(self.labeled, purpose::LABELED_ORDER, t),
            self.take(self.unlabeled, purpose::UNLABELED_ORDER, t),
        )
    }
}
