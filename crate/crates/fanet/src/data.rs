//! Dataset ingestion: class-per-directory image folders, deterministic
//! stratified splits, on-the-fly augmentation, batching, and split
//! manifests.
//!
//! All randomness is ChaCha8 with explicit streams so that results do
//! not depend on iteration or worker order: the split uses one stream
//! per class, batching one stream per epoch, and augmentation one
//! stream per (epoch, sample) pair.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!(
                "unknown split tag '{other}' (expected train, val, or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub path: PathBuf,
    pub class_id: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub samples: Vec<Sample>,
    /// Lexicographic by directory name; position defines the class id.
    pub class_names: Vec<String>,
    pub split: Split,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Sample counts per class id.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for s in &self.samples {
            counts[s.class_id] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    /// Rotation drawn from [-rotation_degrees, +rotation_degrees].
    pub rotation_degrees: f64,
    /// Shift drawn per axis from [-shift_fraction, +shift_fraction] of the extent.
    pub shift_fraction: f64,
    pub flip_probability: f64,
    /// Zoom factor drawn from [1 - zoom_fraction, 1 + zoom_fraction].
    pub zoom_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_degrees: 15.0,
            shift_fraction: 0.10,
            flip_probability: 0.5,
            zoom_fraction: 0.10,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rotation_degrees < 0.0 || self.shift_fraction < 0.0 || self.zoom_fraction < 0.0 {
            return Err(Error::Invalid(
                "augmentation ranges must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Invalid(format!(
                "flip probability must lie in [0, 1], got {}",
                self.flip_probability
            )));
        }
        if self.zoom_fraction >= 1.0 {
            return Err(Error::Invalid(
                "zoom fraction must be below 1 so the zoom factor stays positive".into(),
            ));
        }
        Ok(())
    }
}

/// Decoded image, H x W x 3 row major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Image> {
        if data.len() != h * w * 3 {
            return Err(Error::Data(format!(
                "image buffer has {} values, expected {} for {h}x{w}x3",
                data.len(),
                h * w * 3
            )));
        }
        Ok(Image { h, w, data })
    }

    fn at(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.w + c) * 3 + ch]
    }
}

fn supported_extension(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg" | "pgm")
    )
}

/// Scan `root/<ClassName>/*.{png,jpg,jpeg,pgm}` into a deterministic index.
pub fn index_dataset(root: &Path, split: Split) -> Result<DatasetIndex> {
    let read = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(p)? {
            out.push(entry?.path());
        }
        out.sort();
        Ok(out)
    };
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root '{}' is not a directory",
            root.display()
        )));
    }
    let class_dirs: Vec<PathBuf> = read(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "dataset root '{}' contains no class directories",
            root.display()
        )));
    }
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut samples = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("unreadable class directory name under '{}'", root.display())))?
            .to_string();
        let files: Vec<PathBuf> = read(dir)?
            .into_iter()
            .filter(|p| p.is_file() && supported_extension(p))
            .collect();
        if files.is_empty() {
            eprintln!("warning: class directory '{name}' contains no supported images");
        }
        for path in files {
            samples.push(Sample { path, class_id });
        }
        class_names.push(name);
    }
    Ok(DatasetIndex {
        samples,
        class_names,
        split,
    })
}

/// Stratified split: per class, seeded shuffle then cut. The val share
/// is round(fraction * count), at least 1, and classes need at least 2
/// samples to be splittable at all.
pub fn split_validation(
    index: &DatasetIndex,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); index.class_count()];
    for (i, s) in index.samples.iter().enumerate() {
        per_class[s.class_id].push(i);
    }
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    for (class_id, ids) in per_class.iter_mut().enumerate() {
        if ids.len() < 2 {
            return Err(Error::Data(format!(
                "class '{}' has {} sample(s); at least 2 are required to split",
                index.class_names[class_id],
                ids.len()
            )));
        }
        // stream domain 01: per-class split shuffles
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((1 << 62) | class_id as u64);
        ids.shuffle(&mut rng);
        let n_val = ((fraction * ids.len() as f64).round() as usize)
            .max(1)
            .min(ids.len());
        val_ids.extend_from_slice(&ids[..n_val]);
        train_ids.extend_from_slice(&ids[n_val..]);
    }
    let subset = |mut ids: Vec<usize>, split: Split| {
        ids.sort_unstable();
        DatasetIndex {
            samples: ids.iter().map(|&i| index.samples[i].clone()).collect(),
            class_names: index.class_names.clone(),
            split,
        }
    };
    Ok((subset(train_ids, Split::Train), subset(val_ids, Split::Val)))
}

/// Decode, replicate grayscale to 3 channels, bilinear-resize to the
/// target extents, and scale to [0, 1].
pub fn load_and_preprocess(path: &Path, out_h: usize, out_w: usize) -> Result<Image> {
    if !supported_extension(path) {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "unsupported extension (expected png, jpg, jpeg, or pgm)".into(),
        });
    }
    let decoded = image::ImageReader::open(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .decode()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data: Vec<f64> = rgb.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
    let img = Image { h, w, data };
    Ok(resize_bilinear(&img, out_h, out_w))
}

/// Lenient variant for batch jobs: failures become a warning and None.
pub fn load_or_warn(path: &Path, out_h: usize, out_w: usize) -> Option<Image> {
    match load_and_preprocess(path, out_h, out_w) {
        Ok(img) => Some(img),
        Err(e) => {
            eprintln!("warning: skipping '{}': {e}", path.display());
            None
        }
    }
}

#[derive(Clone, Copy)]
enum Border {
    Clamp,
    Zero,
}

fn bilinear_sample(img: &Image, y: f64, x: f64, ch: usize, border: Border) -> f64 {
    let (h, w) = (img.h as isize, img.w as isize);
    let (y, x) = match border {
        Border::Clamp => (
            y.clamp(0.0, (h - 1) as f64),
            x.clamp(0.0, (w - 1) as f64),
        ),
        Border::Zero => (y, x),
    };
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let r = y0 as isize + dy;
            let c = x0 as isize + dx;
            let v = if r >= 0 && r < h && c >= 0 && c < w {
                img.at(r as usize, c as usize, ch)
            } else {
                match border {
                    Border::Clamp => img.at(
                        r.clamp(0, h - 1) as usize,
                        c.clamp(0, w - 1) as usize,
                        ch,
                    ),
                    Border::Zero => 0.0,
                }
            };
            acc += wy * wx * v;
        }
    }
    acc
}

/// Half-pixel-center convention: src = (dst + 0.5) * scale - 0.5.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    if img.h == out_h && img.w == out_w {
        return img.clone();
    }
    let sy = img.h as f64 / out_h as f64;
    let sx = img.w as f64 / out_w as f64;
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for r in 0..out_h {
        let y = (r as f64 + 0.5) * sy - 0.5;
        for c in 0..out_w {
            let x = (c as f64 + 0.5) * sx - 0.5;
            for ch in 0..3 {
                data.push(bilinear_sample(img, y, x, ch, Border::Clamp));
            }
        }
    }
    Image {
        h: out_h,
        w: out_w,
        data,
    }
}

/// Rotate about the image center; positive angle maps out[r][c] towards
/// in[c][n-1-r] at 90 degrees. Outside pixels fill with 0.
fn rotate_image(img: &Image, degrees: f64) -> Image {
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = (img.h as f64 - 1.0) / 2.0;
    let cx = (img.w as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(img.data.len());
    for r in 0..img.h {
        for c in 0..img.w {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let sy = sin * dx + cos * dy + cy;
            let sx = cos * dx - sin * dy + cx;
            for ch in 0..3 {
                data.push(bilinear_sample(img, sy, sx, ch, Border::Zero));
            }
        }
    }
    Image {
        h: img.h,
        w: img.w,
        data,
    }
}

fn shift_image(img: &Image, dy_frac: f64, dx_frac: f64) -> Image {
    let dy = dy_frac * img.h as f64;
    let dx = dx_frac * img.w as f64;
    let mut data = Vec::with_capacity(img.data.len());
    for r in 0..img.h {
        for c in 0..img.w {
            for ch in 0..3 {
                data.push(bilinear_sample(img, r as f64 - dy, c as f64 - dx, ch, Border::Zero));
            }
        }
    }
    Image {
        h: img.h,
        w: img.w,
        data,
    }
}

fn zoom_image(img: &Image, factor: f64) -> Image {
    let cy = (img.h as f64 - 1.0) / 2.0;
    let cx = (img.w as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(img.data.len());
    for r in 0..img.h {
        for c in 0..img.w {
            let sy = (r as f64 - cy) / factor + cy;
            let sx = (c as f64 - cx) / factor + cx;
            for ch in 0..3 {
                data.push(bilinear_sample(img, sy, sx, ch, Border::Zero));
            }
        }
    }
    Image {
        h: img.h,
        w: img.w,
        data,
    }
}

fn flip_image(img: &Image) -> Image {
    let mut data = Vec::with_capacity(img.data.len());
    for r in 0..img.h {
        for c in 0..img.w {
            for ch in 0..3 {
                data.push(img.at(r, img.w - 1 - c, ch));
            }
        }
    }
    Image {
        h: img.h,
        w: img.w,
        data,
    }
}

/// RNG stream for one sample of one epoch. Independent of batch order
/// and of how many samples were processed before this one. Stream
/// domain 10, disjoint from the split and batch-shuffle domains.
pub fn augment_rng(seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | ((epoch as u64) << 32) | (sample as u64 & 0xffff_ffff));
    rng
}

/// rotation -> shift -> zoom -> optional horizontal flip; same extents,
/// values clamped to [0, 1]. Draw order is fixed; zero-width ranges
/// leave the image untouched (bitwise).
pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Image {
    let angle = rng.gen_range(-cfg.rotation_degrees..=cfg.rotation_degrees);
    let dy = rng.gen_range(-cfg.shift_fraction..=cfg.shift_fraction);
    let dx = rng.gen_range(-cfg.shift_fraction..=cfg.shift_fraction);
    let zoom = rng.gen_range(1.0 - cfg.zoom_fraction..=1.0 + cfg.zoom_fraction);
    let flip = rng.gen::<f64>() < cfg.flip_probability;

    let mut out = img.clone();
    if angle != 0.0 {
        out = rotate_image(&out, angle);
    }
    if dy != 0.0 || dx != 0.0 {
        out = shift_image(&out, dy, dx);
    }
    if zoom != 1.0 {
        out = zoom_image(&out, zoom);
    }
    if flip {
        out = flip_image(&out);
    }
    if angle != 0.0 || dy != 0.0 || dx != 0.0 || zoom != 1.0 {
        for v in &mut out.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Per-epoch shuffled batch plan; the final partial batch is kept.
pub fn epoch_batches(
    index: &DatasetIndex,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    let mut ids: Vec<usize> = (0..index.len()).collect();
    // stream domain 00: per-epoch batch shuffles
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    ids.shuffle(&mut rng);
    Ok(ids.chunks(batch_size).map(|c| c.to_vec()).collect())
}

pub struct Batch {
    /// N x H x W x 3 row major.
    pub images: Vec<f64>,
    pub n: usize,
    pub labels: Vec<usize>,
}

/// Decode (and optionally augment) one planned batch. `augment_epoch`
/// carries the epoch for the per-sample RNG stream; pass None on val
/// and test splits.
pub fn load_batch(
    index: &DatasetIndex,
    ids: &[usize],
    h: usize,
    w: usize,
    aug: Option<(&AugmentConfig, usize)>,
) -> Result<Batch> {
    let mut images = Vec::with_capacity(ids.len() * h * w * 3);
    let mut labels = Vec::with_capacity(ids.len());
    for &id in ids {
        let sample = &index.samples[id];
        let mut img = load_and_preprocess(&sample.path, h, w)?;
        if let Some((cfg, epoch)) = aug {
            let mut rng = augment_rng(cfg.seed, epoch, id);
            img = augment(&img, cfg, &mut rng);
        }
        images.extend_from_slice(&img.data);
        labels.push(sample.class_id);
    }
    Ok(Batch {
        images,
        n: ids.len(),
        labels,
    })
}

// ── split manifests ──

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub class: String,
    pub split: String,
}

pub fn manifest_rows(index: &DatasetIndex) -> Vec<ManifestRow> {
    index
        .samples
        .iter()
        .map(|s| ManifestRow {
            path: s.path.display().to_string(),
            class: index.class_names[s.class_id].clone(),
            split: index.split.as_str().to_string(),
        })
        .collect()
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["path", "class", "split"]).map_err(csv_err)?;
    for row in rows {
        w.write_record([&row.path, &row.class, &row.split])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(["path", "class", "split"]) {
        return Err(Error::Data(format!(
            "manifest '{}' must have header path,class,split",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(csv_err)?;
        if record.len() != 3 {
            return Err(Error::Data(format!(
                "manifest '{}' has a row with {} fields",
                path.display(),
                record.len()
            )));
        }
        rows.push(ManifestRow {
            path: record[0].to_string(),
            class: record[1].to_string(),
            split: record[2].to_string(),
        });
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Rebuild an index for one split tag of a manifest. Class ids follow
/// the lexicographic order of the class names present in the manifest
/// as a whole, so train and val tags agree on ids.
pub fn index_from_manifest(rows: &[ManifestRow], split: Split) -> Result<DatasetIndex> {
    let mut class_names: Vec<String> = rows.iter().map(|r| r.class.clone()).collect();
    class_names.sort();
    class_names.dedup();
    if class_names.is_empty() {
        return Err(Error::Data("manifest lists no samples".into()));
    }
    let mut samples = Vec::new();
    for row in rows {
        if row.split != split.as_str() {
            continue;
        }
        let class_id = class_names
            .iter()
            .position(|n| *n == row.class)
            .expect("class name collected above");
        let path = PathBuf::from(&row.path);
        if !path.is_file() {
            return Err(Error::Data(format!(
                "manifest entry '{}' does not exist",
                row.path
            )));
        }
        samples.push(Sample { path, class_id });
    }
    samples.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(DatasetIndex {
        samples,
        class_names,
        split,
    })
}
