//! Datasets: IDX ingestion, seeded synthetic generation, subsampling,
//! batching and standard crop/flip augmentation. Pixels live in `[0, 1]`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_3D: u32 = 0x0000_0803;
const IDX_IMAGES_4D: u32 = 0x0000_0804;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Full,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub name: String,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, name: impl Into<String>, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim(format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Consistency(format!("label {bad} out of range for {classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Consistency("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
            name: name.into(),
            split,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of a single image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            name: self.name.clone(),
            split: self.split,
        })
    }

    /// Images and one-hot labels for `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Batch {
            x: self.images.gather_rows(indices)?,
            y: Tensor::one_hot(&labels, self.classes)?,
            labels,
            indices: indices.to_vec(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    /// One-hot rows.
    pub y: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// Reads an IDX image/label file pair. Images may be 3-d (`N,H,W`, one
/// channel) or 4-d (`N,C,H,W`). `classes` defaults to `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let mut ri = BufReader::new(File::open(images_path)?);
    let magic = read_u32(&mut ri)?;
    let dims = match magic {
        IDX_IMAGES_3D => {
            let (n, h, w) = (read_u32(&mut ri)?, read_u32(&mut ri)?, read_u32(&mut ri)?);
            [n, 1, h, w]
        }
        IDX_IMAGES_4D => [read_u32(&mut ri)?, read_u32(&mut ri)?, read_u32(&mut ri)?, read_u32(&mut ri)?],
        other => return Err(Error::Format(format!("bad image magic {other:#010x}"))),
    };
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    let mut pixels = vec![0u8; shape.iter().product()];
    ri.read_exact(&mut pixels)?;

    let mut rl = BufReader::new(File::open(labels_path)?);
    let magic = read_u32(&mut rl)?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let count = read_u32(&mut rl)? as usize;
    if count != shape[0] {
        return Err(Error::Consistency(format!("{} images but {count} labels", shape[0])));
    }
    let mut raw = vec![0u8; count];
    rl.read_exact(&mut raw)?;
    let labels: Vec<usize> = raw.into_iter().map(usize::from).collect();
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(2, |&m| (m + 1).max(2)));

    let images = Tensor::new(shape, pixels.into_iter().map(|p| p as f64 / 255.0).collect())?;
    let name = images_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(images, labels, classes, name, Split::Full)
}

/// Writes a dataset as an IDX pair; pixels are rounded to the nearest byte.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = dataset.image_shape();
    let mut wi = BufWriter::new(File::create(images_path)?);
    let n = dataset.len() as u32;
    if c == 1 {
        for v in [IDX_IMAGES_3D, n, h as u32, w as u32] {
            wi.write_all(&v.to_be_bytes())?;
        }
    } else {
        for v in [IDX_IMAGES_4D, n, c as u32, h as u32, w as u32] {
            wi.write_all(&v.to_be_bytes())?;
        }
    }
    let bytes: Vec<u8> = dataset.images.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    wi.write_all(&bytes)?;
    wi.flush()?;

    let mut wl = BufWriter::new(File::create(labels_path)?);
    wl.write_all(&IDX_LABELS.to_be_bytes())?;
    wl.write_all(&n.to_be_bytes())?;
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l > 255) {
        return Err(Error::Format(format!("label {bad} does not fit in a byte")));
    }
    let labels: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    wl.write_all(&labels)?;
    wl.flush()?;
    Ok(())
}

/// How the class-defining bright pattern is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    /// Square patch at a class-specific position.
    Blob,
    /// Class-specific glyph at a random position. The first four glyphs
    /// (bars and diagonals) light the same number of pixels; the last two
    /// are too short to contain any of them.
    Glyph,
}

/// Parameters of the synthetic image generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub template: Template,
    pub patch_size: usize,
    pub background: f64,
    pub contrast: f64,
    /// Amplitude of a faint class-specific tiled texture; 0 disables it.
    pub texture_amplitude: f64,
    /// Each sample scales its texture by a factor drawn uniformly from
    /// `[1 − texture_jitter, 1]`.
    pub texture_jitter: f64,
    /// Glyph template only: each glyph not used by any class is drawn at a
    /// random position with this probability, independently of the label.
    pub distractor_prob: f64,
}

impl SynthConfig {
    pub fn blobs(classes: usize, per_class: usize, image_size: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            image_size,
            noise_sigma,
            seed,
            template: Template::Blob,
            patch_size: (image_size / 4).max(2),
            background: 0.2,
            contrast: 0.6,
            texture_amplitude: 0.0,
            texture_jitter: 0.0,
            distractor_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.patch_size == 0 || self.patch_size > self.image_size {
            return Err(Error::config("patch must fit inside the image"));
        }
        if self.template == Template::Glyph && self.classes > GLYPHS {
            return Err(Error::config(format!("glyph template supports at most {GLYPHS} classes")));
        }
        if !(0.0..=1.0).contains(&self.texture_jitter) {
            return Err(Error::config(format!("texture_jitter must lie in [0, 1], got {}", self.texture_jitter)));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::config(format!("distractor_prob must lie in [0, 1], got {}", self.distractor_prob)));
        }
        if self.noise_sigma < 0.0 || self.texture_amplitude < 0.0 {
            return Err(Error::config("noise and texture amplitude must be >= 0"));
        }
        Ok(())
    }

    /// `key=value` lines describing the generator.
    pub fn manifest(&self) -> String {
        format!(
            "generator=synth\nclasses={}\nper_class={}\nimage_size={}\nnoise_sigma={}\nseed={}\ntemplate={}\npatch_size={}\nbackground={}\ncontrast={}\ntexture_amplitude={}\ntexture_jitter={}\ndistractor_prob={}\n",
            self.classes,
            self.per_class,
            self.image_size,
            self.noise_sigma,
            self.seed,
            match self.template {
                Template::Blob => "blob",
                Template::Glyph => "glyph",
            },
            self.patch_size,
            self.background,
            self.contrast,
            self.texture_amplitude,
            self.texture_jitter,
            self.distractor_prob
        )
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest())?;
        Ok(())
    }

    /// Generates one split. Train and test draw from independent streams.
    pub fn generate(&self, split: Split) -> Result<Dataset> {
        self.validate()?;
        let s = self.image_size;
        let plane = s * s;
        let stream = match split {
            Split::Train => 0,
            Split::Test => 1,
            Split::Full => 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let textures = self.textures();
        let noise = Normal::new(0.0, self.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let n = self.classes * self.per_class;
        let mut data = Vec::with_capacity(n * plane);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % self.classes;
            let mut img = vec![self.background; plane];
            let span = s - self.patch_size + 1;
            let mut glyphs = vec![class];
            if self.template == Template::Glyph && self.distractor_prob > 0.0 {
                glyphs.extend((self.classes..GLYPHS).filter(|_| rng.random_bool(self.distractor_prob)));
            }
            for g in glyphs {
                let (oy, ox) = match self.template {
                    Template::Blob => self.blob_origin(g),
                    Template::Glyph => (rng.random_range(0..span), rng.random_range(0..span)),
                };
                for (dy, dx) in self.pattern(g) {
                    let v = &mut img[(oy + dy) * s + ox + dx];
                    *v = v.max(self.background + self.contrast);
                }
            }
            if let Some(tex) = &textures {
                let k = if self.texture_jitter > 0.0 { 1.0 - self.texture_jitter * rng.random::<f64>() } else { 1.0 };
                img.iter_mut().zip(&tex[class]).for_each(|(v, t)| *v += k * t);
            }
            if self.noise_sigma > 0.0 {
                img.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            data.extend(img.into_iter().map(|v| v.clamp(0.0, 1.0)));
            labels.push(class);
        }
        let images = Tensor::new(vec![n, 1, s, s], data)?;
        Dataset::new(images, labels, self.classes, "synth", split)
    }

    fn blob_origin(&self, class: usize) -> (usize, usize) {
        // classes spread over a grid of candidate positions
        let span = self.image_size - self.patch_size;
        let side = (self.classes as f64).sqrt().ceil() as usize;
        let (r, c) = (class / side, class % side);
        let at = |k: usize| if side == 1 { span / 2 } else { k * span / (side - 1) };
        (at(r), at(c))
    }

    /// Pixel offsets lit for `class` inside the patch box.
    fn pattern(&self, class: usize) -> Vec<(usize, usize)> {
        let p = self.patch_size;
        let box_iter = (0..p).flat_map(move |y| (0..p).map(move |x| (y, x)));
        match self.template {
            Template::Blob => box_iter.collect(),
            Template::Glyph => box_iter.filter(|&(y, x)| glyph_lit(class, y, x, p)).collect(),
        }
    }

    /// Per-class ±amplitude texture: a random 3x3 sign tile repeated over
    /// the image. Tiles that are cyclic shifts of an earlier class's tile are
    /// redrawn so no two classes share a texture up to translation.
    fn textures(&self) -> Option<Vec<Vec<f64>>> {
        if self.texture_amplitude == 0.0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7e57_u64);
        let shifts = |t: &[bool; 9]| -> Vec<[bool; 9]> {
            let mut out = Vec::with_capacity(9);
            for sy in 0..3 {
                for sx in 0..3 {
                    out.push(std::array::from_fn(|i| t[((i / 3 + sy) % 3) * 3 + (i % 3 + sx) % 3]));
                }
            }
            out
        };
        let mut tiles: Vec<[bool; 9]> = Vec::with_capacity(self.classes);
        while tiles.len() < self.classes {
            let t: [bool; 9] = std::array::from_fn(|_| rng.random::<bool>());
            let plain = t.iter().all(|&b| b == t[0]);
            if !plain && !tiles.iter().any(|u| shifts(u).contains(&t)) {
                tiles.push(t);
            }
        }
        let s = self.image_size;
        let a = self.texture_amplitude;
        Some(
            tiles
                .iter()
                .map(|t| (0..s * s).map(|i| if t[(i / s % 3) * 3 + i % s % 3] { a } else { -a }).collect())
                .collect(),
        )
    }
}

const GLYPHS: usize = 6;

fn glyph_lit(class: usize, y: usize, x: usize, p: usize) -> bool {
    let mid = p / 2;
    let near = |v: usize| v.abs_diff(mid) <= 1;
    match class {
        0 => y == mid,                                       // horizontal bar
        1 => x == mid,                                       // vertical bar
        2 => y == x,                                         // diagonal
        3 => y + x == p - 1,                                 // anti-diagonal
        4 => near(y) && near(x),                             // small block
        _ => (y == mid && near(x)) || (x == mid && near(y)), // small plus
    }
}

/// Positioned bright patches plus Gaussian noise, one patch location per class.
pub fn synth_blobs(classes: usize, per_class: usize, image_size: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    SynthConfig::blobs(classes, per_class, image_size, noise_sigma, seed).generate(Split::Full)
}

/// Stratified sampling without replacement of `round(fraction * n_k)` per class.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for class in 0..dataset.classes {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let take = (fraction * members.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::config(format!("fraction {fraction} leaves class {class} empty")));
        }
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..take]);
    }
    keep.sort_unstable();
    dataset.select(&keep)
}

/// Seeded shuffled mini-batches covering the dataset once; the last batch may be short.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.dataset.batch(idx))
    }
}

pub fn batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(Batches {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

/// Random crop from a zero-padded image plus random horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropFlip {
    pub enabled: bool,
    pub pad: usize,
}

impl Default for CropFlip {
    fn default() -> Self {
        Self { enabled: false, pad: 4 }
    }
}

impl CropFlip {
    pub fn apply<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<Tensor> {
        if !self.enabled {
            return Ok(x.clone());
        }
        let &[n, c, h, w] = x.shape() else {
            return Err(Error::dim(format!("crop/flip needs NCHW, got {:?}", x.shape())));
        };
        let p = self.pad as i64;
        let mut out = vec![0.0; x.numel()];
        for i in 0..n {
            let dy = rng.random_range(-p..=p);
            let dx = rng.random_range(-p..=p);
            let flip = rng.random::<bool>();
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                for y in 0..h {
                    let sy = y as i64 + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for xx in 0..w {
                        let tx = if flip { w - 1 - xx } else { xx };
                        let sx = tx as i64 + dx;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        out[base + y * w + xx] = x.data()[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}
