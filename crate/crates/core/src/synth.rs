//! Synthetic nested-region dataset generator.
//!
//! Each sample is a multi-channel image with three strictly nested elliptical
//! regions (whole, core, enhanced) whose per-channel intensity offsets differ,
//! plus distractor blobs outside the whole region that mimic the inner
//! regions' intensities. The distractors make pure intensity matching
//! ambiguous: inner-region labels only count inside the outer region, so
//! context is required.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{DatasetEntry, DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::volume::{save_volume, Volume, Voxels};

#[derive(Clone, Debug)]
pub struct SynthSpec {
    /// Square slice edge length.
    pub size: usize,
    /// Axial slices per sample.
    pub depth: usize,
    pub channels: usize,
    /// Nested region count.
    pub classes: usize,
    /// Per-region, per-channel intensity offsets, added cumulatively from the
    /// outermost region inward.
    pub intensity_offsets: Vec<Vec<f32>>,
    pub background: Vec<f32>,
    pub noise_sigma: f32,
    /// Outer-region semi-axis range, as a fraction of `size`.
    pub radius_frac: (f32, f32),
    /// Axis ratio of each nested region relative to its parent.
    pub shrink: (f32, f32),
    /// Center jitter, as a fraction of `size`.
    pub center_jitter_frac: f32,
    /// Distractor blobs per slice, placed outside the whole region.
    pub distractors: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 64,
            depth: 1,
            channels: 3,
            classes: 3,
            intensity_offsets: vec![
                vec![0.50, 0.12, 0.10],
                vec![0.00, 0.45, -0.05],
                vec![0.05, 0.00, 0.45],
            ],
            background: vec![0.15, 0.20, 0.10],
            noise_sigma: 0.08,
            radius_frac: (0.22, 0.34),
            shrink: (0.50, 0.70),
            center_jitter_frac: 0.10,
            distractors: 2,
            train: 200,
            val: 40,
            test: 0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.depth == 0 || self.channels == 0 || self.classes == 0 {
            return Err(Error::config("degenerate synthetic spec".to_string()));
        }
        if self.intensity_offsets.len() != self.classes
            || self.intensity_offsets.iter().any(|row| row.len() != self.channels)
            || self.background.len() != self.channels
        {
            return Err(Error::config(format!(
                "intensity offsets must be {} rows of {} channel values",
                self.classes, self.channels
            )));
        }
        if self.radius_frac.0 <= 0.0 || self.radius_frac.1 < self.radius_frac.0 {
            return Err(Error::config("invalid radius range".to_string()));
        }
        if self.shrink.0 <= 0.0 || self.shrink.1 < self.shrink.0 || self.shrink.1 >= 1.0 {
            return Err(Error::config("shrink ratios must satisfy 0 < lo <= hi < 1".to_string()));
        }
        if self.train + self.val + self.test == 0 {
            return Err(Error::config("empty dataset requested".to_string()));
        }
        Ok(())
    }
}

fn derive_sample_seed(seed: u64, split: Split, idx: usize) -> u64 {
    let split_tag = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    // SplitMix64-style mixing.
    let mut z = seed
        .wrapping_add(split_tag.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add((idx as u64).wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

struct Ellipse {
    cy: f32,
    cx: f32,
    a: f32,
    b: f32,
    theta: f32,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f32 - self.cy;
        let dx = x as f32 - self.cx;
        let (sin, cos) = self.theta.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn rasterize(e: &Ellipse, size: usize, out: &mut [u8]) {
    for y in 0..size {
        for x in 0..size {
            if e.contains(y, x) {
                out[y * size + x] = 1;
            }
        }
    }
}

/// One slice: nested region masks (outermost first) and the image channels.
fn gen_slice(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (Vec<Vec<u8>>, Vec<Vec<f32>>) {
    let size = spec.size;
    let s = size as f32;
    let jitter = s * spec.center_jitter_frac;

    // Nested ellipses, each intersected with its parent mask.
    let mut masks: Vec<Vec<u8>> = Vec::with_capacity(spec.classes);
    let mut parent: Option<Ellipse> = None;
    for k in 0..spec.classes {
        let e = match &parent {
            None => Ellipse {
                cy: s / 2.0 + rng.gen_range(-jitter..=jitter),
                cx: s / 2.0 + rng.gen_range(-jitter..=jitter),
                a: rng.gen_range(spec.radius_frac.0..=spec.radius_frac.1) * s,
                b: rng.gen_range(spec.radius_frac.0..=spec.radius_frac.1) * s,
                theta: rng.gen_range(0.0..std::f32::consts::PI),
            },
            Some(p) => {
                let r = rng.gen_range(spec.shrink.0..=spec.shrink.1);
                let (a, b) = (p.a * r, p.b * r);
                let slack = 0.4 * (p.a.min(p.b) - a.max(b)).max(0.0);
                Ellipse {
                    cy: p.cy + rng.gen_range(-slack..=slack),
                    cx: p.cx + rng.gen_range(-slack..=slack),
                    a,
                    b,
                    theta: rng.gen_range(0.0..std::f32::consts::PI),
                }
            }
        };
        let mut mask = vec![0u8; size * size];
        rasterize(&e, size, &mut mask);
        if k > 0 {
            for (m, p) in mask.iter_mut().zip(&masks[k - 1]) {
                *m &= *p;
            }
        }
        masks.push(mask);
        parent = Some(e);
    }
    debug_assert!((1..spec.classes).all(|k| {
        masks[k]
            .iter()
            .zip(&masks[k - 1])
            .all(|(inner, outer)| *inner == 0 || *outer == 1)
    }));

    // Distractor blobs outside the whole region, mimicking an inner region's
    // intensity signature. They affect the image only, never the labels.
    let mut distractor_intensity = vec![vec![0.0f32; size * size]; spec.channels];
    for _ in 0..spec.distractors {
        let e = Ellipse {
            cy: rng.gen_range(0.0..s),
            cx: rng.gen_range(0.0..s),
            a: rng.gen_range(0.06..0.12) * s,
            b: rng.gen_range(0.06..0.12) * s,
            theta: rng.gen_range(0.0..std::f32::consts::PI),
        };
        let mimic = rng.gen_range(1..spec.classes.max(2));
        let mut mask = vec![0u8; size * size];
        rasterize(&e, size, &mut mask);
        for (m, w) in mask.iter_mut().zip(&masks[0]) {
            *m &= 1 - *w;
        }
        for ch in 0..spec.channels {
            let off = spec
                .intensity_offsets
                .get(mimic)
                .map(|row| row[ch])
                .unwrap_or(0.0);
            for (dst, &m) in distractor_intensity[ch].iter_mut().zip(&mask) {
                if m == 1 {
                    *dst = off;
                }
            }
        }
    }

    let noise = Normal::new(0.0f32, spec.noise_sigma.max(0.0)).expect("valid sigma");
    let mut channels = Vec::with_capacity(spec.channels);
    for ch in 0..spec.channels {
        let mut plane = vec![spec.background[ch]; size * size];
        for (k, mask) in masks.iter().enumerate() {
            let off = spec.intensity_offsets[k][ch];
            for (p, &m) in plane.iter_mut().zip(mask) {
                if m == 1 {
                    *p += off;
                }
            }
        }
        for (p, d) in plane.iter_mut().zip(&distractor_intensity[ch]) {
            *p += *d;
            if spec.noise_sigma > 0.0 {
                *p += noise.sample(rng);
            }
        }
        channels.push(plane);
    }

    (masks, channels)
}

/// Volumes for one sample: (image f32 [C,H,W,D], labels u8 [classes,H,W,D]).
pub fn gen_sample(spec: &SynthSpec, split: Split, idx: usize) -> (Volume, Volume) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_sample_seed(spec.seed, split, idx));
    let (size, depth) = (spec.size, spec.depth);
    let plane = size * size;

    let mut image = vec![0.0f32; spec.channels * plane * depth];
    let mut labels = vec![0u8; spec.classes * plane * depth];
    for d in 0..depth {
        let (masks, channels) = gen_slice(spec, &mut rng);
        for ch in 0..spec.channels {
            for p in 0..plane {
                image[(ch * plane + p) * depth + d] = channels[ch][p];
            }
        }
        for k in 0..spec.classes {
            for p in 0..plane {
                labels[(k * plane + p) * depth + d] = masks[k][p];
            }
        }
    }

    let tag = format!("{}_{idx:04}", split.as_str());
    let img = Volume::new((spec.channels, size, size, depth), Voxels::F32(image))
        .expect("consistent dims")
        .with_meta("kind", "image")
        .with_meta("sample", &tag);
    let lbl = Volume::new((spec.classes, size, size, depth), Voxels::U8(labels))
        .expect("consistent dims")
        .with_meta("kind", "label")
        .with_meta("sample", &tag);
    (img, lbl)
}

/// Write the full dataset and its manifest under `out_dir`.
pub fn gen_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetHandle> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    for (split, count) in [
        (Split::Train, spec.train),
        (Split::Val, spec.val),
        (Split::Test, spec.test),
    ] {
        for idx in 0..count {
            let (img, lbl) = gen_sample(spec, split, idx);
            let img_name = format!("{}_{idx:04}_img.segv", split.as_str());
            let lbl_name = format!("{}_{idx:04}_lbl.segv", split.as_str());
            save_volume(&img, &out_dir.join(&img_name))?;
            save_volume(&lbl, &out_dir.join(&lbl_name))?;
            entries.push(DatasetEntry {
                image: img_name.into(),
                label: lbl_name.into(),
                split,
            });
        }
    }
    let handle = DatasetHandle {
        root: out_dir.to_path_buf(),
        entries,
    };
    handle.save_manifest()?;
    Ok(handle)
}
