//! Dataset ingestion, landmark heatmaps and the procedural toy dataset.
//!
//! On-disk layout:
//!
//! ```text
//! root/{train,test}/{class_name}/*.png|jpg
//! root/landmarks/{train,test}/{class_name}/{stem}.npy   (optional, K×H×W f32)
//! ```
//!
//! Class directories must be known expression names. When `landmarks/` is
//! absent every sample receives the synthetic five-point template.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::degrade::{apply_lowlight, DegradeParams};
use crate::error::{Error, Result};
use crate::laclip::{caption_for, class_index, CLASS_NAMES};
use crate::raster::Image;

pub const LANDMARK_DIR: &str = "landmarks";
pub const DEFAULT_LANDMARKS: usize = 5;
pub const MIN_TOY_RESOLUTION: usize = 4;
const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Canonical (x, y) positions as fractions of the frame: eyes, nose tip,
/// mouth corners.
const TEMPLATE_POINTS: [(f64, f64); 5] = [(0.35, 0.38), (0.65, 0.38), (0.5, 0.55), (0.38, 0.72), (0.62, 0.72)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// `K×H×W` heatmaps, one channel per landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkMap {
    k: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl LandmarkMap {
    pub fn new(k: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != k * h * w {
            return Err(Error::shape("LandmarkMap", k * h * w, data.len()));
        }
        let map = Self { k, h, w, data };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        for (i, ch) in self.data.chunks_exact(self.h * self.w).enumerate() {
            if ch.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidInput(format!("landmark channel {i} has negative or non-finite values")));
            }
            let peak = ch.iter().copied().fold(0.0f32, f32::max);
            if (peak - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidInput(format!("landmark channel {i} peaks at {peak}, expected 1")));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.k
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Gaussian heatmaps centred on `points` (pixel coordinates `(x, y)`),
    /// each rescaled so its maximum is exactly 1.
    pub fn from_points(points: &[(f64, f64)], h: usize, w: usize, sigma: f64) -> Result<Self> {
        let mut data = Vec::with_capacity(points.len() * h * w);
        for &(px, py) in points {
            let start = data.len();
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                    data.push((-d2 / (2.0 * sigma * sigma)).exp() as f32);
                }
            }
            let ch = &mut data[start..];
            let peak = ch.iter().copied().fold(0.0f32, f32::max);
            if peak > 0.0 {
                ch.iter_mut().for_each(|v| *v /= peak);
            }
        }
        Self::new(points.len(), h, w, data)
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.k, self.h, self.w), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Landmark positions for the synthetic template, `(x, y)` in pixels.
/// Beyond five points, extra landmarks sit on an ellipse around the face.
pub fn template_points(k: usize, resolution: usize, offset: (f64, f64)) -> Vec<(f64, f64)> {
    let r = resolution as f64;
    (0..k)
        .map(|i| {
            let (fx, fy) = if i < TEMPLATE_POINTS.len() {
                TEMPLATE_POINTS[i]
            } else {
                let j = i - TEMPLATE_POINTS.len();
                let n = k - TEMPLATE_POINTS.len();
                let a = std::f64::consts::PI * (0.1 + 0.8 * j as f64 / n.max(1) as f64);
                (0.5 - 0.4 * a.cos(), 0.5 + 0.4 * a.sin())
            };
            (fx * (r - 1.0) + offset.0, fy * (r - 1.0) + offset.1)
        })
        .collect()
}

pub fn synthetic_landmarks(k: usize, resolution: usize) -> Result<LandmarkMap> {
    LandmarkMap::from_points(
        &template_points(k, resolution, (0.0, 0.0)),
        resolution,
        resolution,
        resolution as f64 / 16.0,
    )
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkMap,
    pub label: usize,
    pub caption: String,
    pub split: Split,
    pub source: Option<PathBuf>,
}

impl Sample {
    pub fn new(
        image: Image,
        landmarks: LandmarkMap,
        label: usize,
        caption: String,
        split: Split,
        n_classes: usize,
    ) -> Result<Self> {
        if label >= n_classes {
            return Err(Error::InvalidInput(format!("label {label} out of range for {n_classes} classes")));
        }
        if landmarks.height() != image.height() || landmarks.width() != image.width() {
            return Err(Error::shape(
                "Sample",
                format!("{}×{} landmarks", image.height(), image.width()),
                format!("{}×{}", landmarks.height(), landmarks.width()),
            ));
        }
        Ok(Self { image, landmarks, label, caption, split, source: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkSource {
    Files,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    /// Per split, number of samples in each class (indexed like `class_names`).
    pub counts: BTreeMap<Split, Vec<usize>>,
    pub resolution: usize,
    pub landmark_count: usize,
    pub landmarks: LandmarkSource,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split_total(&self, split: Split) -> usize {
        self.counts.get(&split).map(|c| c.iter().sum()).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes()
    }

    pub fn split(&self, split: Split) -> Dataset {
        let samples: Vec<Sample> = self.samples.iter().filter(|s| s.split == split).cloned().collect();
        let mut manifest = self.manifest.clone();
        manifest.counts.retain(|k, _| *k == split);
        Dataset { samples, manifest }
    }

    /// Same samples with every image passed through the low-light transform.
    pub fn degraded(&self, params: &DegradeParams) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| Ok(Sample { image: apply_lowlight(&s.image, params)?, ..s.clone() }))
            .collect::<Result<_>>()?;
        Ok(Dataset { samples, manifest: self.manifest.clone() })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Writes the directory layout `load_dataset` reads, including `.npy`
    /// landmark files.
    pub fn save(&self, root: &Path) -> Result<()> {
        let mut per_class: BTreeMap<(Split, usize), usize> = BTreeMap::new();
        for s in &self.samples {
            let n = per_class.entry((s.split, s.label)).or_insert(0);
            let class = &self.manifest.class_names[s.label];
            let stem = format!("{:05}", *n);
            *n += 1;
            let dir = root.join(s.split.as_str()).join(class);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            s.image.save_png(&dir.join(format!("{stem}.png")))?;
            let lm_dir = root.join(LANDMARK_DIR).join(s.split.as_str()).join(class);
            std::fs::create_dir_all(&lm_dir).map_err(|e| Error::io(&lm_dir, e))?;
            let lm_path = lm_dir.join(format!("{stem}.npy"));
            s.landmarks.to_tensor(DType::F32)?.write_npy(&lm_path).map_err(Error::from)?;
        }
        self.write_manifest(&root.join("manifest.json"))
    }
}

#[derive(Debug, Clone)]
pub struct LayoutEntry {
    pub split: String,
    pub class_name: String,
    pub path: PathBuf,
}

impl LayoutEntry {
    pub fn file_name(&self) -> String {
        self.path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    pub fn stem(&self) -> String {
        self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    /// `split/class/file`, independent of the root location.
    pub fn rel_key(&self) -> String {
        format!("{}/{}/{}", self.split, self.class_name, self.file_name())
    }
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> =
        std::fs::read_dir(path).map_err(|e| Error::io(path, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Lists every image under `root/{train,test}/{class}/` in lexicographic order.
pub fn scan_layout(root: &Path) -> Result<Vec<LayoutEntry>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut out = Vec::new();
    for split in Split::ALL {
        let split_dir = root.join(split.as_str());
        if !split_dir.is_dir() {
            continue;
        }
        for class_dir in sorted_dir(&split_dir)? {
            if !class_dir.is_dir() {
                continue;
            }
            let class_name = class_dir.file_name().unwrap().to_string_lossy().into_owned();
            if class_index(&class_name).is_none() {
                return Err(Error::Dataset(format!(
                    "unknown class directory {} (expected one of {:?})",
                    class_dir.display(),
                    CLASS_NAMES
                )));
            }
            for path in sorted_dir(&class_dir)? {
                if path.is_file() && is_image(&path) {
                    out.push(LayoutEntry { split: split.as_str().to_string(), class_name: class_name.clone(), path });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub resolution: usize,
    pub landmark_count: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { resolution: 32, landmark_count: DEFAULT_LANDMARKS }
    }
}

/// Loads a dataset directory. Classes are the known expression names present
/// in any split, ordered canonically; images are resized to the requested
/// resolution.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let layout = scan_layout(root)?;
    if layout.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", root.display())));
    }
    let class_names: Vec<String> =
        CLASS_NAMES.iter().filter(|c| layout.iter().any(|e| e.class_name == **c)).map(|c| c.to_string()).collect();
    let lm_root = root.join(LANDMARK_DIR);
    let has_landmarks = lm_root.is_dir();
    if has_landmarks {
        check_landmark_pairing(&layout, &lm_root)?;
    }
    let template = synthetic_landmarks(opts.landmark_count, opts.resolution)?;

    let mut samples = Vec::with_capacity(layout.len());
    let mut counts: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
    for entry in &layout {
        let split = if entry.split == "train" { Split::Train } else { Split::Test };
        let label = class_names.iter().position(|c| *c == entry.class_name).expect("class listed");
        let image = Image::open(&entry.path)?.resized(opts.resolution, opts.resolution);
        let landmarks =
            if has_landmarks { read_landmarks(&landmark_path(&lm_root, entry), opts)? } else { template.clone() };
        let mut sample =
            Sample::new(image, landmarks, label, caption_for(&entry.class_name), split, class_names.len())?;
        sample.source = Some(entry.path.clone());
        counts.entry(split).or_insert_with(|| vec![0; class_names.len()])[label] += 1;
        samples.push(sample);
    }
    Ok(Dataset {
        samples,
        manifest: DatasetManifest {
            class_names,
            counts,
            resolution: opts.resolution,
            landmark_count: opts.landmark_count,
            landmarks: if has_landmarks { LandmarkSource::Files } else { LandmarkSource::Synthetic },
        },
    })
}

fn landmark_path(lm_root: &Path, entry: &LayoutEntry) -> PathBuf {
    lm_root.join(&entry.split).join(&entry.class_name).join(format!("{}.npy", entry.stem()))
}

fn check_landmark_pairing(layout: &[LayoutEntry], lm_root: &Path) -> Result<()> {
    let mut offenders = Vec::new();
    let mut expected = std::collections::BTreeSet::new();
    for e in layout {
        let p = landmark_path(lm_root, e);
        if !p.is_file() {
            offenders.push(format!("missing landmarks for {}", e.rel_key()));
        }
        expected.insert(p);
    }
    for split in Split::ALL {
        let dir = lm_root.join(split.as_str());
        if !dir.is_dir() {
            continue;
        }
        for class_dir in sorted_dir(&dir)? {
            if !class_dir.is_dir() {
                continue;
            }
            for p in sorted_dir(&class_dir)? {
                if p.extension().and_then(|e| e.to_str()) == Some("npy") && !expected.contains(&p) {
                    offenders.push(format!("landmark file without image: {}", p.display()));
                }
            }
        }
    }
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::Dataset(format!(
            "image/landmark count mismatch ({} offenders): {}",
            offenders.len(),
            offenders.join("; ")
        )))
    }
}

fn read_landmarks(path: &Path, opts: &LoadOptions) -> Result<LandmarkMap> {
    let t = Tensor::read_npy(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let dims = t.dims().to_vec();
    let expect = [opts.landmark_count, opts.resolution, opts.resolution];
    if dims != expect {
        return Err(Error::Dataset(format!("{}: landmark array shape {dims:?}, expected {expect:?}", path.display())));
    }
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    LandmarkMap::new(dims[0], dims[1], dims[2], data).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Class-separable procedural faces: each class draws an oriented grating
/// (angle `k·π/n`) over a soft face-shaped blob, with per-sample phase,
/// contrast, tint, noise and a small landmark offset.
pub fn synth_toy_dataset(n_classes: usize, n_per_class: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if !(2..=CLASS_NAMES.len()).contains(&n_classes) {
        return Err(Error::InvalidInput(format!("toy dataset needs 2..=7 classes, got {n_classes}")));
    }
    if resolution < MIN_TOY_RESOLUTION {
        return Err(Error::InvalidInput(format!(
            "resolution {resolution} is below the minimum window size {MIN_TOY_RESOLUTION}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let r = resolution as f64;
    let mut samples = Vec::with_capacity(n_classes * n_per_class);
    for label in 0..n_classes {
        let angle = std::f64::consts::PI * label as f64 / n_classes as f64;
        let (ca, sa) = (angle.cos(), angle.sin());
        for _ in 0..n_per_class {
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = 2.0 * std::f64::consts::PI * rng.random_range(3.0..4.5) / r;
            let contrast: f64 = rng.random_range(0.25..0.4);
            let base: f64 = rng.random_range(0.4..0.6);
            let tint = [rng.random_range(0.9..1.1), rng.random_range(0.9..1.1), rng.random_range(0.9..1.1)];
            let offset = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let mut pix = vec![0f32; resolution * resolution * 3];
            for y in 0..resolution {
                for x in 0..resolution {
                    let (fx, fy) = (x as f64 - r / 2.0, y as f64 - r / 2.0);
                    let blob = (-(fx * fx / (0.35 * r).powi(2) + fy * fy / (0.45 * r).powi(2))).exp();
                    let wave = ((fx * ca + fy * sa) * freq + phase).sin();
                    let v = base * (0.6 + 0.4 * blob) + contrast * wave;
                    for c in 0..3 {
                        let e: f64 = noise.sample(&mut rng);
                        pix[(y * resolution + x) * 3 + c] = (v * tint[c] + e).clamp(0.0, 1.0) as f32;
                    }
                }
            }
            let image = Image::new(resolution, resolution, pix)?;
            let landmarks = LandmarkMap::from_points(
                &template_points(DEFAULT_LANDMARKS, resolution, offset),
                resolution,
                resolution,
                r / 16.0,
            )?;
            samples.push(Sample::new(
                image,
                landmarks,
                label,
                caption_for(CLASS_NAMES[label]),
                Split::Train,
                n_classes,
            )?);
        }
    }
    let mut counts = BTreeMap::new();
    counts.insert(Split::Train, vec![n_per_class; n_classes]);
    Ok(Dataset {
        samples,
        manifest: DatasetManifest {
            class_names: CLASS_NAMES[..n_classes].iter().map(|s| s.to_string()).collect(),
            counts,
            resolution,
            landmark_count: DEFAULT_LANDMARKS,
            landmarks: LandmarkSource::Synthetic,
        },
    })
}

/// Toy train split plus a disjoint test split drawn from a different stream.
pub fn synth_toy_splits(
    n_classes: usize,
    n_train: usize,
    n_test: usize,
    resolution: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut ds = synth_toy_dataset(n_classes, n_train, resolution, seed)?;
    if n_test > 0 {
        let test = synth_toy_dataset(n_classes, n_test, resolution, seed.wrapping_add(0x9e37_79b9))?;
        ds.samples.extend(test.samples.into_iter().map(|s| Sample { split: Split::Test, ..s }));
        ds.manifest.counts.insert(Split::Test, vec![n_test; n_classes]);
    }
    Ok(ds)
}
