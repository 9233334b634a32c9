//! Deterministic synthetic keypoint scenes and multi-resolution pyramids.
//!
//! A [`Scene`] is resolution-free: keypoint positions are stored as
//! fractions of the image extent and every size is proportional to the image
//! height, so one scene can be rendered at any client resolution. Keypoint
//! `k` always uses rendering style `k % 5` (bright dot, dark dot, ring,
//! horizontal bar, vertical bar), which gives each heatmap channel its own
//! visual identity.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::tensor::{resize, Interp, Tensor};

/// Image extent, written `HxW` (rows first).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Resolution {
    pub h: usize,
    pub w: usize,
}

impl Resolution {
    pub const fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn pixels(self) -> usize {
        self.h * self.w
    }

    pub fn divisible_by(self, p: usize) -> bool {
        self.h % p == 0 && self.w % p == 0
    }

    pub fn diagonal(self) -> f64 {
        ((self.h * self.h + self.w * self.w) as f64).sqrt()
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (h, w) = s
            .split_once('x')
            .ok_or_else(|| invalid(format!("resolution `{s}` is not of the form HxW")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| invalid(format!("resolution `{s}` has a bad extent")))
        };
        Ok(Self::new(parse(h)?, parse(w)?))
    }
}

impl Serialize for Resolution {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Resolution {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Rendering parameters shared by every scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Heatmap stride (the model's patch size).
    pub patch: usize,
    /// Target Gaussian width in heatmap cells.
    pub sigma: f64,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    /// Amplitude of each background sinusoid.
    pub texture: f64,
    /// Supersampling factor per axis for anti-aliasing.
    pub supersample: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            sigma: 1.0,
            noise: 0.02,
            texture: 0.08,
            supersample: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
}

/// Resolution-free scene description.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    /// Keypoints as (row, col) fractions of the image extent.
    pub keypoints: Vec<(f64, f64)>,
    waves: Vec<Wave>,
    noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub sample_id: u64,
    /// `[H, W, 1]`
    pub image: Tensor,
    /// (row, col) in native pixel coordinates; pixel `r` is centered at `r`.
    pub keypoints: Vec<(f64, f64)>,
    /// `[H/P, W/P, K]` peak-normalized Gaussian heatmaps.
    pub target: Tensor,
}

impl SyntheticSample {
    pub fn resolution(&self) -> Resolution {
        let s = self.image.shape();
        Resolution::new(s[0], s[1])
    }
}

/// Draw `n` scenes with ids `first_id..first_id + n`. Keypoint fractions are
/// uniform on `[margin, 1 - margin]` in both axes.
pub fn gen_scenes(n: usize, keypoints: usize, seed: u64, margin: (f64, f64), first_id: u64) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let kps = (0..keypoints)
                .map(|_| {
                    (
                        rng.gen_range(margin.0..=1.0 - margin.0),
                        rng.gen_range(margin.1..=1.0 - margin.1),
                    )
                })
                .collect();
            let waves = (0..3)
                .map(|_| Wave {
                    fy: rng.gen_range(0.5..3.0),
                    fx: rng.gen_range(0.5..3.0),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                })
                .collect();
            Scene {
                id: first_id + i as u64,
                keypoints: kps,
                waves,
                noise_seed: rng.gen(),
            }
        })
        .collect()
}

/// Normalized margin that keeps keypoints at least 2 pixels inside every
/// resolution down to `smallest`.
pub fn margin_for(smallest: Resolution) -> (f64, f64) {
    (2.5 / smallest.h as f64, 2.5 / smallest.w as f64)
}

/// Intensity of keypoint style `style` at pixel offset `(dy, dx)`; `s` is
/// the scale factor relative to a 64-pixel-high image.
fn style_intensity(style: usize, dy: f64, dx: f64, s: f64) -> f64 {
    let g = |vy: f64, vx: f64| (-(dy * dy) / (2.0 * vy * vy) - (dx * dx) / (2.0 * vx * vx)).exp();
    match style % 5 {
        0 => g(1.2 * s, 1.2 * s),
        1 => -g(1.2 * s, 1.2 * s),
        2 => {
            let r = (dy * dy + dx * dx).sqrt() - 2.5 * s;
            let t = 0.7 * s;
            (-(r * r) / (2.0 * t * t)).exp()
        }
        3 => g(0.7 * s, 2.5 * s),
        _ => g(2.5 * s, 0.7 * s),
    }
}

/// Render `scene` at `res`.
pub fn render_scene(scene: &Scene, res: Resolution, cfg: &SceneConfig) -> Result<SyntheticSample> {
    if !res.divisible_by(cfg.patch) {
        return Err(invalid(format!(
            "resolution {res} not divisible by patch size {}",
            cfg.patch
        )));
    }
    let (h, w) = (res.h, res.w);
    let s = h as f64 / 64.0;
    let kps: Vec<(f64, f64)> = scene
        .keypoints
        .iter()
        .map(|&(u, v)| (u * h as f64 - 0.5, v * w as f64 - 0.5))
        .collect();
    let ss = cfg.supersample.max(1);
    let reach = 4.0 * s + 2.0;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(scene.noise_seed ^ ((h as u64) << 32 | w as u64));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut img = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let y = r as f64 - 0.5 + (sy as f64 + 0.5) / ss as f64;
                    let x = c as f64 - 0.5 + (sx as f64 + 0.5) / ss as f64;
                    let (fy, fx) = ((y + 0.5) / h as f64, (x + 0.5) / w as f64);
                    let mut v = 0.0;
                    for wave in &scene.waves {
                        v += cfg.texture
                            * (std::f64::consts::TAU * (wave.fy * fy + wave.fx * fx) + wave.phase).sin();
                    }
                    for (k, &(ky, kx)) in kps.iter().enumerate() {
                        let (dy, dx) = (y - ky, x - kx);
                        if dy.abs() < reach && dx.abs() < reach {
                            v += style_intensity(k, dy, dx, s);
                        }
                    }
                    acc += v;
                }
            }
            img[r * w + c] = acc / (ss * ss) as f64 + cfg.noise * normal.sample(&mut noise_rng);
        }
    }
    let image = Tensor::new(vec![h, w, 1], img)?;
    let target = heatmap_targets(&kps, res, cfg.patch, cfg.sigma)?;
    Ok(SyntheticSample {
        sample_id: scene.id,
        image,
        keypoints: kps,
        target,
    })
}

/// Peak-normalized Gaussian heatmaps on the stride-`patch` grid.
pub fn heatmap_targets(kps: &[(f64, f64)], res: Resolution, patch: usize, sigma: f64) -> Result<Tensor> {
    let (gh, gw, k) = (res.h / patch, res.w / patch, kps.len());
    if gh == 0 || gw == 0 || k == 0 {
        return Err(invalid("empty heatmap grid"));
    }
    let mut t = vec![0.0; gh * gw * k];
    for (ch, &(y, x)) in kps.iter().enumerate() {
        let gy = (y + 0.5) / patch as f64 - 0.5;
        let gx = (x + 0.5) / patch as f64 - 0.5;
        let mut peak: f64 = 0.0;
        for r in 0..gh {
            for c in 0..gw {
                let d2 = (r as f64 - gy).powi(2) + (c as f64 - gx).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                t[(r * gw + c) * k + ch] = v;
                peak = peak.max(v);
            }
        }
        for r in 0..gh * gw {
            t[r * k + ch] /= peak;
        }
    }
    Tensor::new(vec![gh, gw, k], t)
}

/// `n` samples rendered at `h×w` with the default scene configuration.
pub fn gen_dataset(n: usize, h: usize, w: usize, k_keypoints: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    gen_dataset_with(n, Resolution::new(h, w), k_keypoints, seed, &SceneConfig::default())
}

pub fn gen_dataset_with(
    n: usize,
    res: Resolution,
    k_keypoints: usize,
    seed: u64,
    cfg: &SceneConfig,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 || k_keypoints == 0 {
        return Err(invalid("dataset needs at least one sample and keypoint"));
    }
    if !res.divisible_by(cfg.patch) {
        return Err(invalid(format!(
            "resolution {res} not divisible by patch size {}",
            cfg.patch
        )));
    }
    gen_scenes(n, k_keypoints, seed, margin_for(res), 0)
        .iter()
        .map(|s| render_scene(s, res, cfg))
        .collect()
}

/// Split a scene pool into consecutive disjoint shards of the given sizes.
pub fn shard(pool: &[Scene], sizes: &[usize]) -> Result<Vec<Vec<Scene>>> {
    if sizes.iter().sum::<usize>() > pool.len() {
        return Err(invalid("scene pool too small for requested shards"));
    }
    let mut off = 0;
    Ok(sizes
        .iter()
        .map(|&n| {
            let s = pool[off..off + n].to_vec();
            off += n;
            s
        })
        .collect())
}

/// Native image plus its downsampled copies, level 0 first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<Tensor>,
}

/// Each level is resized directly from the native image with bilinear
/// interpolation. `resolutions[0]` must be the native extent.
pub fn build_pyramid(img: &Tensor, resolutions: &[Resolution]) -> Result<Pyramid> {
    let (h, w, _) = img.hwc()?;
    check_levels(resolutions)?;
    if resolutions[0] != Resolution::new(h, w) {
        return Err(invalid(format!(
            "first pyramid level {} must be the native {h}x{w}",
            resolutions[0]
        )));
    }
    let mut levels = vec![img.clone()];
    for r in &resolutions[1..] {
        levels.push(resize(img, r.h, r.w, Interp::Bilinear)?);
    }
    Ok(Pyramid { levels })
}

/// Levels must be nonempty and strictly decreasing in both axes.
pub fn check_levels(resolutions: &[Resolution]) -> Result<()> {
    if resolutions.is_empty() {
        return Err(invalid("at least one resolution level is required"));
    }
    for pair in resolutions.windows(2) {
        if pair[1].h >= pair[0].h || pair[1].w >= pair[0].w {
            return Err(invalid(format!(
                "resolution levels must strictly decrease: {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    Ok(())
}
