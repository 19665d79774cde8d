//! Synthetic grayscale nuclei scenes.
//!
//! A scene is a background level plus a set of filled, rotated ellipses
//! ("blobs"), each carrying one of three class labels with its own mean
//! intensity. Gaussian texture noise is added everywhere and the result is
//! clipped to `[0, 1]` and quantized to 8 bits. Everything is a pure
//! function of the [`SceneSpec`] and its seed.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::text::{check_class, splitmix64, PromptError, Task, NUM_CLASSES};

const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("placed {placed} of {requested} blobs without overlap after {PLACEMENT_ATTEMPTS} attempts")]
    Placement { placed: usize, requested: usize },
    #[error("unknown shift preset `{0}` (expected identity, density, size or noise)")]
    UnknownPreset(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Binary `H × W` mask stored as one byte per pixel with values 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_bools(height: usize, width: usize, values: impl IntoIterator<Item = bool>) -> Self {
        let bits: Vec<u8> = values.into_iter().map(u8::from).collect();
        assert_eq!(bits.len(), height * width);
        Self { height, width, bits }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.bits.iter().all(|&b| b <= 1)
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// Parametric description of one synthetic image distribution draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range the blob count is drawn from.
    pub n_blobs: [usize; 2],
    pub class_mix: [f64; NUM_CLASSES],
    /// Inclusive range of ellipse semi-axes, in pixels.
    pub radius_range: [f64; 2],
    pub class_intensity: [f64; NUM_CLASSES],
    pub noise_sigma: f64,
    pub background: f64,
    pub overlap_allowed: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// Training distribution at 64×64.
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_blobs: [4, 10],
            class_mix: [0.5, 0.3, 0.2],
            radius_range: [3.0, 6.0],
            class_intensity: [0.85, 0.62, 0.42],
            noise_sigma: 0.05,
            background: 0.15,
            overlap_allowed: true,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Default distribution at a square resolution.
    pub fn with_size(size: usize) -> Self {
        Self {
            height: size,
            width: size,
            ..Self::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.height < 16 || self.width < 16 {
            return bad(format!("image {}x{} smaller than 16x16", self.height, self.width));
        }
        let mix_sum: f64 = self.class_mix.iter().sum();
        if (mix_sum - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|&p| !(p >= 0.0)) {
            return bad(format!("class mix {:?} is not a probability vector", self.class_mix));
        }
        let [rmin, rmax] = self.radius_range;
        if !(rmin >= 2.0) || !(rmax >= rmin) {
            return bad(format!("radius range {:?} needs 2 <= min <= max", self.radius_range));
        }
        let half = self.height.min(self.width) as f64 / 2.0;
        if rmax >= half {
            return bad(format!("radius max {rmax} must be below half the image extent {half}"));
        }
        if self.n_blobs[0] > self.n_blobs[1] {
            return bad(format!("blob count range {:?} is inverted", self.n_blobs));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!(
                "noise sigma {} must be finite and non-negative",
                self.noise_sigma
            ));
        }
        for &v in self.class_intensity.iter().chain([&self.background]) {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("gray level {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: usize,
    pub mask: Mask,
}

/// Generated image with its instance annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub spec: SceneSpec,
    /// Row-major 8-bit gray levels.
    pub image: Vec<u8>,
    pub instances: Vec<Instance>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    /// Gray levels scaled to `[0, 1]`.
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn classes_present(&self) -> [bool; NUM_CLASSES] {
        let mut out = [false; NUM_CLASSES];
        for inst in &self.instances {
            out[inst.class_id] = true;
        }
        out
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn rasterize(&self, h: usize, w: usize) -> Mask {
        Mask::from_bools(h, w, (0..h * w).map(|i| self.contains((i % w) as f64, (i / w) as f64)))
    }
}

/// Draws one scene. Blobs lie fully inside the image.
pub fn generate_scene(spec: &SceneSpec, id: impl Into<String>) -> Result<Scene, SynthError> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = rng.gen_range(spec.n_blobs[0]..=spec.n_blobs[1]);
    let classes = WeightedIndex::new(spec.class_mix).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let [rmin, rmax] = spec.radius_range;

    let mut occupied = Mask::empty(h, w);
    let mut instances: Vec<Instance> = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = classes.sample(&mut rng);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let a = rng.gen_range(rmin..=rmax);
            let b = rng.gen_range(rmin..=rmax);
            let r = a.max(b);
            let cx = rng.gen_range(r..=(w as f64 - 1.0 - r));
            let cy = rng.gen_range(r..=(h as f64 - 1.0 - r));
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let mask = Ellipse {
                cx,
                cy,
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
            }
            .rasterize(h, w);
            let clash = !spec.overlap_allowed && mask.bits.iter().zip(&occupied.bits).any(|(&m, &o)| m & o != 0);
            if !clash {
                placed = Some(mask);
                break;
            }
        }
        match placed {
            Some(mask) => {
                occupied.union_with(&mask);
                instances.push(Instance { class_id, mask });
            }
            None => {
                return Err(SynthError::Placement {
                    placed: instances.len(),
                    requested: n,
                })
            }
        }
    }

    let mut level = vec![spec.background; h * w];
    for inst in &instances {
        let mu = spec.class_intensity[inst.class_id];
        for (l, &m) in level.iter_mut().zip(&inst.mask.bits) {
            if m != 0 {
                *l = mu;
            }
        }
    }
    let image = if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        level.iter().map(|&l| quantize(l + noise.sample(&mut rng))).collect()
    } else {
        level.iter().map(|&l| quantize(l)).collect()
    };
    Ok(Scene {
        id: id.into(),
        spec: spec.clone(),
        image,
        instances,
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Ground truth for a task: union of all instances (T1) or of one class (T2).
pub fn target_mask(scene: &Scene, task: Task, class_id: Option<usize>) -> Result<Mask, SynthError> {
    check_class(task, class_id)?;
    let mut out = Mask::empty(scene.height(), scene.width());
    for inst in &scene.instances {
        if task == Task::T1 || Some(inst.class_id) == class_id {
            out.union_with(&inst.mask);
        }
    }
    Ok(out)
}

/// Multiplicative (and one additive) change applied to a [`SceneSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub name: String,
    pub n_blobs_scale: f64,
    pub radius_scale: f64,
    pub noise_scale: f64,
    pub background_scale: f64,
    pub background_shift: f64,
}

impl DomainShiftSpec {
    pub fn identity() -> Self {
        Self {
            name: "identity".into(),
            n_blobs_scale: 1.0,
            radius_scale: 1.0,
            noise_scale: 1.0,
            background_scale: 1.0,
            background_shift: 0.0,
        }
    }

    /// Named presets: `identity`, `density` (blobs ×2), `size` (radii ×1.8),
    /// `noise` (σ ×3, background +0.15).
    pub fn preset(name: &str) -> Result<Self, SynthError> {
        let base = Self {
            name: name.to_string(),
            ..Self::identity()
        };
        Ok(match name {
            "identity" => base,
            "density" => Self {
                n_blobs_scale: 2.0,
                ..base
            },
            "size" => Self {
                radius_scale: 1.8,
                ..base
            },
            "noise" => Self {
                noise_scale: 3.0,
                background_shift: 0.15,
                ..base
            },
            other => return Err(SynthError::UnknownPreset(other.to_string())),
        })
    }

    pub const PRESETS: [&'static str; 3] = ["density", "size", "noise"];

    fn fingerprint(&self) -> u64 {
        [
            self.n_blobs_scale,
            self.radius_scale,
            self.noise_scale,
            self.background_scale,
            self.background_shift,
        ]
        .iter()
        .fold(0x5348_4946_5400_0000u64, |acc, v| splitmix64(acc ^ v.to_bits()))
    }
}

/// Applies a shift, clipping gray levels into `[0, 1]`. The result gets a
/// seed derived from the original seed and the shift parameters.
pub fn apply_shift(spec: &SceneSpec, shift: &DomainShiftSpec) -> Result<SceneSpec, SynthError> {
    spec.validate()?;
    let scale_count = |n: usize| (n as f64 * shift.n_blobs_scale).round().max(0.0) as usize;
    let out = SceneSpec {
        n_blobs: [scale_count(spec.n_blobs[0]), scale_count(spec.n_blobs[1])],
        radius_range: [
            spec.radius_range[0] * shift.radius_scale,
            spec.radius_range[1] * shift.radius_scale,
        ],
        noise_sigma: (spec.noise_sigma * shift.noise_scale).max(0.0),
        background: (spec.background * shift.background_scale + shift.background_shift).clamp(0.0, 1.0),
        seed: splitmix64(spec.seed ^ shift.fingerprint()),
        ..spec.clone()
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec {
            seed: 42,
            ..SceneSpec::with_size(32)
        }
    }

    #[test]
    fn empty_scene_is_background_plus_noise() {
        let spec = SceneSpec {
            n_blobs: [0, 0],
            ..small()
        };
        let s = generate_scene(&spec, "e").unwrap();
        assert!(s.instances.is_empty());
        let mean = s.image_f64().iter().sum::<f64>() / s.image.len() as f64;
        assert!((mean - spec.background).abs() < 0.02, "{mean}");
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(&small(), "a").unwrap();
        let b = generate_scene(&small(), "a").unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&small().with_seed(43), "a").unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn instance_areas_within_ellipse_bounds() {
        for seed in 0..30 {
            let spec = small().with_seed(seed);
            let s = generate_scene(&spec, "x").unwrap();
            let [rmin, rmax] = spec.radius_range;
            let lo = std::f64::consts::PI * rmin * rmin * 0.5;
            let hi = std::f64::consts::PI * rmax * rmax * 1.5;
            for inst in &s.instances {
                let n = inst.mask.popcount() as f64;
                assert!(n >= lo && n <= hi, "{n} not in [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn placement_failure_when_crowded() {
        let spec = SceneSpec {
            n_blobs: [60, 60],
            radius_range: [5.0, 6.0],
            overlap_allowed: false,
            ..small()
        };
        assert!(matches!(generate_scene(&spec, "c"), Err(SynthError::Placement { .. })));
    }

    #[test]
    fn non_overlapping_when_disallowed() {
        let spec = SceneSpec {
            overlap_allowed: false,
            ..small()
        };
        let s = generate_scene(&spec, "d").unwrap();
        let t1 = target_mask(&s, Task::T1, None).unwrap();
        let total: usize = s.instances.iter().map(|i| i.mask.popcount()).sum();
        assert_eq!(t1.popcount(), total);
    }

    #[test]
    fn t1_is_pixelwise_or() {
        let spec = SceneSpec {
            n_blobs: [12, 12],
            ..small()
        };
        let s = generate_scene(&spec, "o").unwrap();
        let t1 = target_mask(&s, Task::T1, None).unwrap();
        for p in 0..t1.bits.len() {
            let any = s.instances.iter().any(|i| i.mask.bits[p] == 1);
            assert_eq!(t1.bits[p] == 1, any);
        }
    }

    #[test]
    fn absent_class_gives_empty_mask() {
        let spec = SceneSpec {
            class_mix: [1.0, 0.0, 0.0],
            ..small()
        };
        let s = generate_scene(&spec, "z").unwrap();
        assert_eq!(target_mask(&s, Task::T2, Some(2)).unwrap().popcount(), 0);
        assert!(target_mask(&s, Task::T2, Some(3)).is_err());
        assert!(target_mask(&s, Task::T2, None).is_err());
    }

    #[test]
    fn shifts() {
        let spec = small();
        let same = apply_shift(&spec, &DomainShiftSpec::identity()).unwrap();
        assert_ne!(same.seed, spec.seed);
        assert_eq!(same.with_seed(spec.seed), spec);

        let noisy = apply_shift(&spec, &DomainShiftSpec::preset("noise").unwrap()).unwrap();
        assert!((noisy.noise_sigma - 0.15).abs() < 1e-12);
        let double = DomainShiftSpec {
            noise_scale: 2.0,
            ..DomainShiftSpec::identity()
        };
        assert!((apply_shift(&spec, &double).unwrap().noise_sigma - 0.10).abs() < 1e-15);

        let huge = DomainShiftSpec {
            radius_scale: 3.0,
            ..DomainShiftSpec::identity()
        };
        assert!(matches!(apply_shift(&spec, &huge), Err(SynthError::InvalidSpec(_))));
        assert!(DomainShiftSpec::preset("blur").is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = small();
        s.class_mix = [0.5, 0.5, 0.5];
        assert!(s.validate().is_err());
        let mut s = small();
        s.radius_range = [1.0, 3.0];
        assert!(s.validate().is_err());
        let mut s = small();
        s.height = 8;
        assert!(s.validate().is_err());
    }
}
