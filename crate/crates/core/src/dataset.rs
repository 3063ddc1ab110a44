//! Dataset ingestion and analysis: directory scanning, the stratified
//! train/val split, class-imbalance entropy, image-size statistics, and a
//! synthetic fine-grained texture dataset.
//!
//! Layout on disk is `root/<class name>/<image file>`. Record paths are
//! stored relative to `root` with `/` separators so split lists are
//! portable.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageReader, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::Tensor;
use crate::training::LabeledImages;

/// File extensions accepted as images, compared case-insensitively.
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Per-channel normalization applied when images are loaded for training.
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub class: usize,
    pub split: Split,
    /// `(height, width)` read from the file header.
    pub size: (u32, u32),
}

/// A class-labeled image catalog.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Class names; a record's `class` indexes this table.
    pub classes: Vec<String>,
    /// Sorted by class, then file name.
    pub records: Vec<Record>,
    /// Files with an image extension whose header could not be read.
    pub skipped: Vec<PathBuf>,
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort();
    Ok(out)
}

/// `(height, width)` from the image header, without decoding pixels.
pub fn header_size(path: &Path) -> Result<(u32, u32), Error> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((h, w))
}

/// Catalogs `root/<class>/<image>`. Classes and files are sorted by name;
/// non-image files are ignored and unreadable images are skipped and
/// listed in [`DatasetIndex::skipped`]. Every record starts in the train
/// split.
pub fn scan_image_directory(root: &Path) -> Result<DatasetIndex, Error> {
    let entries = sorted_entries(root)?;
    if entries.is_empty() {
        return Err(Error::Dataset(format!("{} is empty", root.display())));
    }
    let mut classes = Vec::new();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for dir in entries.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().and_then(|n| n.to_str()).map(str::to_owned);
        let Some(name) = name else {
            log::warn!(
                "skipping class directory with a non-UTF-8 name: {}",
                dir.display()
            );
            continue;
        };
        let files: Vec<PathBuf> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && has_image_extension(p))
            .collect();
        let sizes: Vec<_> = files.par_iter().map(|p| header_size(p)).collect();
        let class = classes.len();
        let mut any = false;
        for (file, size) in files.iter().zip(sizes) {
            match size {
                Ok(size) => {
                    let file_name = file.file_name().and_then(|n| n.to_str());
                    let Some(file_name) = file_name else {
                        skipped.push(file.clone());
                        continue;
                    };
                    records.push(Record {
                        path: format!("{name}/{file_name}"),
                        class,
                        split: Split::Train,
                        size,
                    });
                    any = true;
                }
                Err(e) => {
                    log::warn!("skipping unreadable image: {e}");
                    skipped.push(file.clone());
                }
            }
        }
        if any {
            classes.push(name);
        } else {
            log::warn!("class directory {} holds no readable images", dir.display());
        }
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!(
            "{} contains no class directories with images",
            root.display()
        )));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes,
        records,
        skipped,
    })
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Images per class over every split.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.class] += 1;
        }
        counts
    }

    /// Images per class within `split`.
    pub fn split_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in self.records.iter().filter(|r| r.split == split) {
            counts[r.class] += 1;
        }
        counts
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Moves every record into `split`.
    pub fn assign_all(mut self, split: Split) -> Self {
        for r in &mut self.records {
            r.split = split;
        }
        self
    }

    /// One `path<TAB>split` line per record, sorted by path.
    pub fn split_list(&self) -> String {
        let sorted: BTreeMap<&str, Split> = self
            .records
            .iter()
            .map(|r| (r.path.as_str(), r.split))
            .collect();
        let mut out = String::new();
        for (path, split) in sorted {
            writeln!(out, "{path}\t{split}").expect("writing to a String");
        }
        out
    }

    pub fn write_split_list(&self, path: &Path) -> Result<(), Error> {
        fs::write(path, self.split_list()).map_err(|e| Error::io(path, e))
    }

    /// Applies a split list. Every record must be listed exactly once and
    /// every listed path must be a record.
    pub fn apply_split_list(mut self, text: &str, source: &Path) -> Result<Self, Error> {
        let mut wanted = BTreeMap::new();
        for (no, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let Some((path, split)) = line.split_once('\t') else {
                return Err(Error::format(
                    source,
                    format!("line {}: expected path<TAB>split", no + 1),
                ));
            };
            let split = split
                .trim()
                .parse::<Split>()
                .map_err(|e| Error::format(source, format!("line {}: {e}", no + 1)))?;
            if wanted.insert(path.to_owned(), split).is_some() {
                return Err(Error::format(
                    source,
                    format!("line {}: duplicate path {path}", no + 1),
                ));
            }
        }
        for r in &mut self.records {
            let Some(split) = wanted.remove(&r.path) else {
                return Err(Error::format(source, format!("no entry for {}", r.path)));
            };
            r.split = split;
        }
        if let Some(extra) = wanted.keys().next() {
            return Err(Error::format(
                source,
                format!("{extra} is not in the dataset"),
            ));
        }
        Ok(self)
    }

    pub fn read_split_list(self, path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_split_list(&text, path)
    }
}

/// Result of [`stratified_split`].
#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub index: DatasetIndex,
    /// Classes with fewer than two non-test images, left entirely in train.
    pub unsplit: Vec<String>,
}

/// Per class, shuffles the non-test records with a generator seeded by
/// `seed` and sends the first `round(ratio · count)` to train and the
/// rest to val. Test records keep their split.
pub fn stratified_split(
    index: &DatasetIndex,
    ratio: f64,
    seed: u64,
) -> Result<SplitOutcome, Error> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let mut index = index.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unsplit = Vec::new();
    for class in 0..index.classes.len() {
        let mut members: Vec<usize> = (0..index.records.len())
            .filter(|&i| index.records[i].class == class && index.records[i].split != Split::Test)
            .collect();
        if members.len() < 2 {
            log::warn!(
                "class {:?} has {} splittable image(s); all go to train",
                index.classes[class],
                members.len()
            );
            unsplit.push(index.classes[class].clone());
            for &i in &members {
                index.records[i].split = Split::Train;
            }
            continue;
        }
        members.shuffle(&mut rng);
        let n_train = (ratio * members.len() as f64).round() as usize;
        for (rank, &i) in members.iter().enumerate() {
            index.records[i].split = if rank < n_train {
                Split::Train
            } else {
                Split::Val
            };
        }
    }
    Ok(SplitOutcome { index, unsplit })
}

/// Shannon entropy of the class distribution over `log2(n)`: 1 for a
/// balanced dataset, approaching 0 as one class dominates.
pub fn normalized_entropy(counts: &[usize]) -> Result<f64, Error> {
    if counts.len() < 2 {
        return Err(Error::Dataset(format!(
            "normalized entropy needs at least two classes, got {}",
            counts.len()
        )));
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Dataset(format!("class {i} has no images")));
    }
    // Equal counts give H = log2(n) exactly; skip the rounding of the sum.
    if counts.iter().all(|&c| c == counts[0]) {
        return Ok(1.0);
    }
    let total = counts.iter().sum::<usize>() as f64;
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    let norm = h / (counts.len() as f64).log2();
    debug_assert!((-1e-12..=1.0 + 1e-12).contains(&norm));
    Ok(norm.clamp(0.0, 1.0))
}

/// Image-size summary in the style of a dataset comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub count: usize,
    pub max_h: u32,
    pub min_h: u32,
    pub max_w: u32,
    pub min_w: u32,
    pub mean_h: f64,
    /// Population standard deviation.
    pub std_h: f64,
    pub mean_w: f64,
    pub std_w: f64,
}

fn mean_std(values: impl Iterator<Item = u32> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().map(f64::from).sum::<f64>() / n;
    let var = values.map(|v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fmt_mean(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

impl SizeStats {
    /// `(height, width)` pairs in; `None` when empty.
    pub fn from_sizes(sizes: &[(u32, u32)]) -> Option<Self> {
        if sizes.is_empty() {
            return None;
        }
        let hs = sizes.iter().map(|s| s.0);
        let ws = sizes.iter().map(|s| s.1);
        let (mean_h, std_h) = mean_std(hs.clone());
        let (mean_w, std_w) = mean_std(ws.clone());
        Some(Self {
            count: sizes.len(),
            max_h: hs.clone().max().expect("non-empty"),
            min_h: hs.min().expect("non-empty"),
            max_w: ws.clone().max().expect("non-empty"),
            min_w: ws.min().expect("non-empty"),
            mean_h,
            std_h,
            mean_w,
            std_w,
        })
    }

    /// `mean±std×mean±std`, e.g. `600±0.00×600±0.00`.
    pub fn mean_std_cell(&self) -> String {
        format!(
            "{}±{:.2}×{}±{:.2}",
            fmt_mean(self.mean_h),
            self.std_h,
            fmt_mean(self.mean_w),
            self.std_w
        )
    }
}

/// Size statistics over every record. Files whose header fails to read
/// at stat time are returned alongside and left out of the numbers.
pub fn image_size_stats(index: &DatasetIndex) -> (Option<SizeStats>, Vec<PathBuf>) {
    let read: Vec<_> = index
        .records
        .par_iter()
        .map(|r| {
            let p = index.root.join(&r.path);
            header_size(&p).map_err(|_| p)
        })
        .collect();
    let mut sizes = Vec::with_capacity(read.len());
    let mut failed = Vec::new();
    for r in read {
        match r {
            Ok(s) => sizes.push(s),
            Err(p) => failed.push(p),
        }
    }
    failed.extend(index.skipped.iter().cloned());
    (SizeStats::from_sizes(&sizes), failed)
}

/// Class counts, imbalance and size statistics of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub root: String,
    pub classes: Vec<(String, usize)>,
    pub total: usize,
    pub normalized_entropy: Option<f64>,
    pub sizes: Option<SizeStats>,
    pub unreadable: Vec<String>,
}

impl AnalysisReport {
    pub fn build(index: &DatasetIndex) -> Self {
        let counts = index.class_counts();
        let (sizes, failed) = image_size_stats(index);
        Self {
            root: index.root.display().to_string(),
            classes: index
                .classes
                .iter()
                .cloned()
                .zip(counts.iter().copied())
                .collect(),
            total: counts.iter().sum(),
            normalized_entropy: normalized_entropy(&counts).ok(),
            sizes,
            unreadable: failed.iter().map(|p| p.display().to_string()).collect(),
        }
    }

    /// Plain-text rendering; identical datasets give identical bytes.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "dataset: {}", self.root);
        let _ = writeln!(w, "classes: {}", self.classes.len());
        let _ = writeln!(w, "images: {}", self.total);
        let entropy = match self.normalized_entropy {
            Some(h) => format!("{h:.4}"),
            None => "n/a (fewer than two classes)".into(),
        };
        let _ = writeln!(w, "normalized entropy: {entropy}");
        if let Some(st) = &self.sizes {
            let _ = writeln!(
                w,
                "max H: {}  min H: {}  max W: {}  min W: {}",
                st.max_h, st.min_h, st.max_w, st.min_w
            );
            let _ = writeln!(w, "mean±std HxW: {}", st.mean_std_cell());
        }
        let _ = writeln!(w, "unreadable: {}", self.unreadable.len());
        for p in &self.unreadable {
            let _ = writeln!(w, "  {p}");
        }
        let _ = writeln!(w, "per-class counts:");
        for (name, n) in &self.classes {
            let _ = writeln!(w, "  {name}\t{n}");
        }
        s
    }
}

/// Parameters of the synthetic texture dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Standard deviation of per-pixel noise, in [0, 1] intensity units.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 64,
            size: 32,
            seed: 0,
            noise: 0.25,
        }
    }
}

/// Grating parameters of class `c`. Neighbouring classes differ by a
/// small step in spatial frequency and a quarter-turn of phase.
fn class_grating(c: usize) -> (f64, f64, f64) {
    let freq = 2.0 + 0.35 * c as f64;
    let angle = std::f64::consts::FRAC_PI_4 + 0.12 * c as f64;
    let phase = std::f64::consts::FRAC_PI_2 * c as f64;
    (freq, angle, phase)
}

/// One `size × size` RGB image of class `c`: an oriented sinusoidal
/// grating with jittered frequency, angle and phase, a per-channel phase
/// offset, and additive Gaussian noise.
fn render_grating<R: Rng + ?Sized>(c: usize, size: usize, noise: f64, rng: &mut R) -> RgbImage {
    let (freq, angle, phase) = class_grating(c);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let freq = freq * (1.0 + 0.04 * jitter.sample(rng));
    let angle = angle + 0.06 * jitter.sample(rng);
    let phase = phase + 0.9 * jitter.sample(rng);
    let pixel_noise = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let (ux, uy) = (angle.cos(), angle.sin());
    let s = size as u32;
    let mut img = RgbImage::new(s, s);
    for y in 0..s {
        for x in 0..s {
            let t = (f64::from(x) * ux + f64::from(y) * uy) / size as f64;
            let arg = std::f64::consts::TAU * freq * t + phase;
            let mut px = [0u8; 3];
            for (ch, out) in px.iter_mut().enumerate() {
                let v = 0.5 + 0.35 * (arg + 0.6 * ch as f64).sin() + pixel_noise.sample(rng);
                *out = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x, y, image::Rgb(px));
        }
    }
    img
}

/// Writes `out/class_XX/img_YYYY.png` and returns the scanned index. The
/// image bytes depend only on `cfg`.
pub fn synth_dataset_generate(cfg: &SynthConfig, out: &Path) -> Result<DatasetIndex, Error> {
    if cfg.size == 0 || !cfg.size.is_multiple_of(32) {
        return Err(Error::Config(format!(
            "synthetic image size must be a positive multiple of 32, got {}",
            cfg.size
        )));
    }
    if cfg.classes == 0 || cfg.per_class == 0 {
        return Err(Error::Config(
            "synthetic dataset needs at least one class and one image".into(),
        ));
    }
    let width = (cfg.classes - 1).to_string().len().max(2);
    let img_width = (cfg.per_class - 1).to_string().len().max(4);
    for c in 0..cfg.classes {
        let dir = out.join(format!("class_{c:0width$}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        // One stream per class keeps classes independent of each other.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(c as u64);
        for i in 0..cfg.per_class {
            let img = render_grating(c, cfg.size, cfg.noise, &mut rng);
            let path = dir.join(format!("img_{i:0img_width$}.png"));
            img.save(&path)
                .map_err(|e| Error::format(&path, e.to_string()))?;
        }
    }
    scan_image_directory(out)
}

/// Decodes every record of `split` into `(N, 3, size, size)` normalized
/// tensors, resizing when an image is not already `size × size`.
pub fn load_images(
    index: &DatasetIndex,
    split: Split,
    size: usize,
) -> Result<LabeledImages, Error> {
    let records: Vec<&Record> = index.records_in(split).collect();
    if records.is_empty() {
        return Err(Error::Dataset(format!("split {split} is empty")));
    }
    let plane = size * size;
    let decoded: Vec<Result<Vec<f32>, Error>> = records
        .par_iter()
        .map(|r| {
            let path = index.root.join(&r.path);
            let img = image::open(&path).map_err(|e| Error::format(&path, e.to_string()))?;
            let mut rgb = img.to_rgb8();
            if rgb.dimensions() != (size as u32, size as u32) {
                rgb = image::imageops::resize(
                    &rgb,
                    size as u32,
                    size as u32,
                    image::imageops::FilterType::Triangle,
                );
            }
            let mut out = vec![0.0f32; 3 * plane];
            for (i, px) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    out[ch * plane + i] =
                        (f32::from(px[ch]) / 255.0 - CHANNEL_MEAN[ch]) / CHANNEL_STD[ch];
                }
            }
            Ok(out)
        })
        .collect();
    let mut data = Vec::with_capacity(records.len() * 3 * plane);
    for d in decoded {
        data.extend(d?);
    }
    Ok(LabeledImages {
        images: Tensor::from_vec([records.len(), 3, size, size], data)?,
        labels: records.iter().map(|r| r.class).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(normalized_entropy(&[5, 5, 5, 5]).unwrap(), 1.0);
        assert_eq!(normalized_entropy(&[7; 241]).unwrap(), 1.0);
        let h = normalized_entropy(&[1, 1, 2]).unwrap();
        assert!((h - 1.5 / 3f64.log2()).abs() < 1e-15);
        assert!((h - 0.946395).abs() < 1e-6);
        assert!(normalized_entropy(&[1, 1000]).unwrap() < 0.1);
        assert!(normalized_entropy(&[3]).is_err());
        assert!(normalized_entropy(&[3, 0]).is_err());
    }

    #[test]
    fn size_cells() {
        let st = SizeStats::from_sizes(&[(600, 600); 3]).unwrap();
        assert_eq!(st.mean_std_cell(), "600±0.00×600±0.00");
        let st = SizeStats::from_sizes(&[(100, 100), (300, 300)]).unwrap();
        assert_eq!(
            (st.mean_h, st.std_h, st.mean_w, st.std_w),
            (200.0, 100.0, 200.0, 100.0)
        );
        let st = SizeStats::from_sizes(&[(240, 320)]).unwrap();
        assert_eq!(
            (st.max_h, st.min_h, st.max_w, st.min_w),
            (240, 240, 320, 320)
        );
        assert_eq!(st.mean_std_cell(), "240±0.00×320±0.00");
        let st = SizeStats::from_sizes(&[(1, 2), (2, 2)]).unwrap();
        assert_eq!(st.mean_std_cell(), "1.50±0.50×2±0.00");
        assert!(SizeStats::from_sizes(&[]).is_none());
    }

    #[test]
    fn split_parses_and_prints() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("dev".parse::<Split>().is_err());
    }
}
