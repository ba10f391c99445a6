//! Synthetic low-light degradation and brightness histograms.
//!
//! Every channel value passes through four stages in a fixed order, each
//! clipped to `[0,1]`:
//!
//! 1. exposure: `v · 2^ev`
//! 2. white balance: `v · wb[c]`
//! 3. highlights (`h ∈ [-1,0]`): `v + ½·h·S(0.75, 1, v)·(v − 0.75)`
//! 4. shadows (`s ∈ [-1,0]`): `v · (1 + ½·s·(1 − S(0, 0.25, v)))`
//!
//! where `S(a, b, v)` is the cubic smoothstep. Both tone curves are monotone,
//! fix 0, leave the middle half of the range untouched and reduce to the
//! identity at strength 0, so neutral parameters reproduce the input bit for bit.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{scan_layout, LayoutEntry};
use crate::error::{Error, Result};
use crate::raster::Image;

pub const HIGHLIGHT_KNEE: f32 = 0.75;
pub const SHADOW_KNEE: f32 = 0.25;
pub const HIST_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    /// Stops; negative darkens.
    pub exposure_ev: f64,
    /// Per-channel gains (R, G, B).
    pub white_balance: [f64; 3],
    pub highlights: f64,
    pub shadows: f64,
    /// Half-width of the per-image uniform perturbation applied to the
    /// exposure in batch mode. Zero disables it.
    #[serde(default)]
    pub ev_jitter: f64,
    pub seed: u64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            exposure_ev: -2.0,
            white_balance: [1.0, 0.95, 0.9],
            highlights: -0.5,
            shadows: -0.5,
            ev_jitter: 0.0,
            seed: 0,
        }
    }
}

impl DegradeParams {
    pub fn neutral() -> Self {
        Self { exposure_ev: 0.0, white_balance: [1.0; 3], highlights: 0.0, shadows: 0.0, ev_jitter: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if !self.exposure_ev.is_finite() || self.exposure_ev > 0.0 {
            return bad(format!("exposure_ev must be finite and <= 0, got {}", self.exposure_ev));
        }
        if self.white_balance.iter().any(|g| !g.is_finite() || *g <= 0.0) {
            return bad(format!("white balance gains must be > 0, got {:?}", self.white_balance));
        }
        for (name, v) in [("highlights", self.highlights), ("shadows", self.shadows)] {
            if !(-1.0..=0.0).contains(&v) {
                return bad(format!("{name} must lie in [-1, 0], got {v}"));
            }
        }
        if !self.ev_jitter.is_finite() || self.ev_jitter < 0.0 {
            return bad(format!("ev_jitter must be >= 0, got {}", self.ev_jitter));
        }
        Ok(())
    }

    /// Parameters for one file in a batch run. The exposure jitter is drawn
    /// from a stream keyed by the global seed and the file's relative path,
    /// so the result does not depend on processing order.
    pub fn for_item(&self, rel_path: &str) -> Self {
        let mut p = self.clone();
        if self.ev_jitter > 0.0 {
            let digest = Sha256::digest(rel_path.as_bytes());
            let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ key);
            let delta: f64 = rng.random_range(-self.ev_jitter..=self.ev_jitter);
            p.exposure_ev = (self.exposure_ev + delta).min(0.0);
            p.ev_jitter = 0.0;
        }
        p
    }
}

pub fn smoothstep(edge0: f32, edge1: f32, v: f32) -> f32 {
    let t = ((v - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

pub fn highlight_curve(v: f32, strength: f32) -> f32 {
    v + 0.5 * strength * smoothstep(HIGHLIGHT_KNEE, 1.0, v) * (v - HIGHLIGHT_KNEE)
}

pub fn shadow_curve(v: f32, strength: f32) -> f32 {
    v * (1.0 + 0.5 * strength * (1.0 - smoothstep(0.0, SHADOW_KNEE, v)))
}

pub fn apply_lowlight(image: &Image, params: &DegradeParams) -> Result<Image> {
    params.validate()?;
    if image.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("image contains non-finite pixel values".into()));
    }
    let gain = 2f64.powf(params.exposure_ev) as f32;
    let wb = params.white_balance.map(|g| g as f32);
    let (hl, sh) = (params.highlights as f32, params.shadows as f32);

    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let mut x = (*v * gain).clamp(0.0, 1.0);
        x = (x * wb[i % 3]).clamp(0.0, 1.0);
        x = highlight_curve(x, hl).clamp(0.0, 1.0);
        x = shadow_curve(x, sh).clamp(0.0, 1.0);
        *v = x;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<u64>,
    pub mean_intensity: f64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }
}

/// Brightness histogram over per-pixel intensity (channel mean), 256 bins
/// on `[0,1]`, last bin closed on the right.
pub fn histogram(image: &Image) -> Result<Histogram> {
    if image.is_empty() {
        return Err(Error::InvalidInput("histogram of an empty image".into()));
    }
    let mut bins = vec![0u64; HIST_BINS];
    for px in image.data().chunks_exact(3) {
        let intensity = (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0;
        let idx = ((intensity * HIST_BINS as f64).floor().max(0.0) as usize).min(HIST_BINS - 1);
        bins[idx] += 1;
    }
    Ok(Histogram { bins, mean_intensity: image.mean() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub src: PathBuf,
    pub dst: Option<PathBuf>,
    pub split: String,
    pub class_name: String,
    pub status: EntryStatus,
    pub params: DegradeParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_after: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DegradeManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DegradeManifest {
    pub fn ok_count(&self) -> usize {
        self.entries.iter().filter(|e| e.status == EntryStatus::Ok).count()
    }

    pub fn skipped_count(&self) -> usize {
        self.entries.len() - self.ok_count()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { entries })
    }
}

pub const MANIFEST_FILE: &str = "degrade_manifest.jsonl";

/// Writes a degraded twin of every image under `src_dir` into `dst_dir`
/// (same split/class layout, PNG output) and returns the manifest, which is
/// also written to `dst_dir/degrade_manifest.jsonl`. Landmark files are
/// copied verbatim.
pub fn degrade_dataset(src_dir: &Path, dst_dir: &Path, params: &DegradeParams) -> Result<DegradeManifest> {
    params.validate()?;
    let layout = scan_layout(src_dir)?;
    if layout.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", src_dir.display())));
    }
    std::fs::create_dir_all(dst_dir).map_err(|e| Error::io(dst_dir, e))?;

    let entries: Vec<ManifestEntry> =
        layout.par_iter().map(|item| degrade_one(item, dst_dir, params)).collect::<Result<_>>()?;

    let lm_src = src_dir.join(crate::data::LANDMARK_DIR);
    if lm_src.is_dir() {
        copy_tree(&lm_src, &dst_dir.join(crate::data::LANDMARK_DIR))?;
    }

    let manifest = DegradeManifest { entries };
    manifest.write_jsonl(&dst_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn degrade_one(item: &LayoutEntry, dst_dir: &Path, params: &DegradeParams) -> Result<ManifestEntry> {
    let item_params = params.for_item(&item.rel_key());
    let mut entry = ManifestEntry {
        src: item.path.clone(),
        dst: None,
        split: item.split.clone(),
        class_name: item.class_name.clone(),
        status: EntryStatus::Skipped,
        params: item_params.clone(),
        error: None,
        mean_before: None,
        mean_after: None,
    };
    let img = match Image::open(&item.path) {
        Ok(img) => img,
        Err(e) => {
            entry.error = Some(e.to_string());
            return Ok(entry);
        }
    };
    let out = apply_lowlight(&img, &item_params)?;
    let dir = dst_dir.join(&item.split).join(&item.class_name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let dst = dir.join(format!("{}.png", item.stem()));
    out.save_png(&dst)?;
    entry.dst = Some(dst);
    entry.status = EntryStatus::Ok;
    entry.mean_before = Some(img.mean());
    entry.mean_after = Some(out.mean());
    Ok(entry)
}

fn copy_tree(src: &Path, dst: &Path) -> Result<()> {
    std::fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    let mut items: Vec<_> = std::fs::read_dir(src).map_err(|e| Error::io(src, e))?.filter_map(|e| e.ok()).collect();
    items.sort_by_key(|e| e.file_name());
    for e in items {
        let p = e.path();
        let target = dst.join(e.file_name());
        if p.is_dir() {
            copy_tree(&p, &target)?;
        } else {
            std::fs::copy(&p, &target).map_err(|err| Error::io(&p, err))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| rng.random::<f32>())
    }

    /// Independent per-value reference used by the pixel oracle test.
    fn scalar_reference(v: f32, c: usize, p: &DegradeParams) -> f32 {
        let mut x = v * (2.0f64.powf(p.exposure_ev) as f32);
        x = x.clamp(0.0, 1.0) * p.white_balance[c] as f32;
        x = x.clamp(0.0, 1.0);
        let t = ((x - 0.75) / 0.25).clamp(0.0, 1.0);
        x += 0.5 * p.highlights as f32 * (t * t * (3.0 - 2.0 * t)) * (x - 0.75);
        x = x.clamp(0.0, 1.0);
        let t = (x / 0.25).clamp(0.0, 1.0);
        x *= 1.0 + 0.5 * p.shadows as f32 * (1.0 - t * t * (3.0 - 2.0 * t));
        x.clamp(0.0, 1.0)
    }

    #[test]
    fn exposure_halves_twice() {
        let img = Image::filled(4, 4, 0.5);
        let p = DegradeParams { exposure_ev: -2.0, ..DegradeParams::neutral() };
        let out = apply_lowlight(&img, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.125));
    }

    #[test]
    fn zero_is_fixed_point() {
        let img = Image::filled(5, 3, 0.0);
        let out = apply_lowlight(&img, &DegradeParams::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_reference_per_pixel() {
        let img = random_image(3, 8, 8);
        let p = DegradeParams { exposure_ev: -1.5, white_balance: [1.0, 0.9, 0.8], ..DegradeParams::neutral() };
        let out = apply_lowlight(&img, &p).unwrap();
        for (i, (&a, &b)) in img.data().iter().zip(out.data()).enumerate() {
            assert_eq!(b, scalar_reference(a, i % 3, &p));
        }
        // same oracle with the tone curves active
        let p = DegradeParams {
            exposure_ev: -0.25,
            white_balance: [1.3, 0.9, 1.1],
            highlights: -0.8,
            shadows: -0.6,
            ..DegradeParams::neutral()
        };
        let out = apply_lowlight(&img, &p).unwrap();
        for (i, (&a, &b)) in img.data().iter().zip(out.data()).enumerate() {
            assert_eq!(b, scalar_reference(a, i % 3, &p));
        }
    }

    #[test]
    fn neutral_is_bit_exact_identity() {
        let img = random_image(9, 16, 16);
        let out = apply_lowlight(&img, &DegradeParams::neutral()).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn rejects_bad_input() {
        let mut img = Image::filled(2, 2, 0.5);
        img.data_mut()[3] = f32::NAN;
        assert!(matches!(apply_lowlight(&img, &DegradeParams::default()), Err(Error::InvalidInput(_))));
        let img = Image::filled(2, 2, 0.5);
        let bright = DegradeParams { exposure_ev: 0.5, ..DegradeParams::neutral() };
        assert!(apply_lowlight(&img, &bright).is_err());
        let bad_wb = DegradeParams { white_balance: [1.0, 0.0, 1.0], ..DegradeParams::neutral() };
        assert!(apply_lowlight(&img, &bad_wb).is_err());
    }

    #[test]
    fn tone_curves_are_monotone() {
        for s in [-1.0f32, -0.5, 0.0] {
            let mut prev_h = -1.0;
            let mut prev_s = -1.0;
            for i in 0..=1000 {
                let v = i as f32 / 1000.0;
                let h = highlight_curve(v, s);
                let sh = shadow_curve(v, s);
                assert!(h >= prev_h && sh >= prev_s);
                prev_h = h;
                prev_s = sh;
            }
        }
    }

    #[test]
    fn histogram_edge_cases() {
        let h = histogram(&Image::filled(4, 4, 0.0)).unwrap();
        assert_eq!(h.bins[0], 16);
        assert_eq!(h.mean_intensity, 0.0);

        let h = histogram(&Image::filled(4, 4, 1.0)).unwrap();
        assert_eq!(h.bins[255], 16);
        assert_eq!(h.mean_intensity, 1.0);

        let img = Image::from_fn(4, 4, |y, _, _| if y < 2 { 0.25 } else { 0.75 });
        let h = histogram(&img).unwrap();
        assert_eq!(h.bins[64], 8);
        assert_eq!(h.bins[192], 8);
        assert_eq!(h.total(), 16);
        assert_eq!(h.mean_intensity, 0.5);

        assert!(histogram(&Image::filled(0, 0, 0.0)).is_err());
    }

    #[test]
    fn jitter_depends_on_path_not_order() {
        let p = DegradeParams { ev_jitter: 0.5, seed: 42, ..DegradeParams::default() };
        let a = p.for_item("train/happy/a.png");
        let b = p.for_item("train/happy/b.png");
        assert_eq!(a, p.for_item("train/happy/a.png"));
        assert_ne!(a.exposure_ev, b.exposure_ev);
        assert!(a.exposure_ev <= 0.0 && (a.exposure_ev - p.exposure_ev).abs() <= 0.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn darkening_and_mass_conservation(seed in 0u64..1000, ev in -4.0f64..-0.01) {
                let img = random_image(seed, 6, 7);
                let p = DegradeParams { exposure_ev: ev, ..DegradeParams::neutral() };
                let out = apply_lowlight(&img, &p).unwrap();
                let (hi, ho) = (histogram(&img).unwrap(), histogram(&out).unwrap());
                prop_assert!(ho.mean_intensity <= hi.mean_intensity);
                prop_assert_eq!(hi.total(), 42);
                prop_assert_eq!(ho.total(), 42);
                prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
