//! Seeded synthetic dual-phase cases.
//!
//! A curved ellipsoidal gland (label 1) holds a wandering duct (label 3) and
//! one or two mass blobs (label 2). Both phases share the geometry and differ
//! in enhancement levels, low-frequency field and noise. In split mode the
//! mass is bright in one phase and mean-matched to the gland in the other.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelMap, PairedCase, Phase, Volume, VolumeHeader, BACKGROUND, DUCT, MASS, TISSUE};
use crate::error::{Error, Result};

const MIN_DIM: usize = 12;
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conspicuity {
    /// Mass visible in one phase only; even seeds favor the arterial phase.
    Split,
    /// Mass visible in both phases.
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Gaussian noise in HU.
    pub noise_sigma: f64,
    /// Accepted mass volume fraction.
    pub lesion_fraction: (f64, f64),
    pub lesion_count: (usize, usize),
    pub lesions: bool,
    pub duct: bool,
    pub conspicuity: Conspicuity,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32; 3],
            spacing: [1.0; 3],
            noise_sigma: 10.0,
            lesion_fraction: (0.005, 0.03),
            lesion_count: (1, 2),
            lesions: true,
            duct: true,
            conspicuity: Conspicuity::Split,
        }
    }
}

impl PhantomConfig {
    pub fn with_dims(dims: [usize; 3]) -> Self {
        Self {
            dims,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::config(format!(
                "dims {:?} too small to contain the phantom geometry (need >= {MIN_DIM})",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("spacing must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise sigma must be >= 0"));
        }
        let (lo, hi) = self.lesion_fraction;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(Error::config(format!("bad lesion fraction range {lo}..{hi}")));
        }
        let (a, b) = self.lesion_count;
        if a == 0 || a > b || b > 4 {
            return Err(Error::config(format!("bad lesion count range {a}..{b}")));
        }
        Ok(())
    }
}

/// Phase in which the mass is conspicuous under split mode.
pub fn visible_phase(seed: u64) -> Phase {
    if seed % 2 == 0 {
        Phase::Arterial
    } else {
        Phase::Venous
    }
}

/// Gland frame: rotation about z plus a quadratic bend along the long axis.
struct Frame {
    center: [f64; 3],
    cos: f64,
    sin: f64,
    bend: f64,
    axes: [f64; 3],
}

impl Frame {
    fn local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let u = self.cos * d[0] + self.sin * d[1];
        let v = -self.sin * d[0] + self.cos * d[1];
        [u, v - self.bend * (u / self.axes[0]).powi(2), d[2]]
    }

    fn global(&self, l: [f64; 3]) -> [f64; 3] {
        let v = l[1] + self.bend * (l[0] / self.axes[0]).powi(2);
        [
            self.center[0] + self.cos * l[0] - self.sin * v,
            self.center[1] + self.sin * l[0] + self.cos * v,
            self.center[2] + l[2],
        ]
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        let l = self.local(p);
        (0..3).map(|a| (l[a] / self.axes[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn voxel_center(i: usize, dims: [usize; 3]) -> [f64; 3] {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]
}

fn draw_labels(rng: &mut ChaCha8Rng, cfg: &PhantomConfig) -> Option<Vec<u8>> {
    let dims = cfg.dims;
    let n = dims.iter().product::<usize>();
    let m = (dims.iter().product::<usize>() as f64).cbrt();
    let mut center = [0.0; 3];
    for a in 0..3 {
        center[a] = dims[a] as f64 * (0.5 + rng.random_range(-0.04..0.04));
    }
    let theta: f64 = rng.random_range(-0.5..0.5);
    let axes = [
        rng.random_range(0.34..0.40) * m,
        rng.random_range(0.22..0.26) * m,
        rng.random_range(0.20..0.24) * m,
    ];
    let frame = Frame {
        center,
        cos: theta.cos(),
        sin: theta.sin(),
        bend: rng.random_range(-0.1..0.1) * m,
        axes,
    };

    let mut labels = vec![BACKGROUND; n];
    for (i, l) in labels.iter_mut().enumerate() {
        if frame.inside(voxel_center(i, dims)) {
            *l = TISSUE;
        }
    }

    let mut duct_count = 0;
    if cfg.duct {
        let amp = rng.random_range(0.15..0.3) * axes[1];
        let freq = rng.random_range(1.0..2.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let radius = (0.045 * m).max(1.1);
        let span = 0.8 * axes[0];
        let steps = (2.0 * span / 0.25).ceil() as usize;
        let line: Vec<[f64; 3]> = (0..=steps)
            .map(|k| {
                let t = -span + 2.0 * span * k as f64 / steps as f64;
                let s = PI * freq * t / axes[0] + phase;
                frame.global([t, amp * s.sin(), 0.1 * axes[2] * (0.5 * s).sin()])
            })
            .collect();
        for (i, l) in labels.iter_mut().enumerate() {
            if *l != TISSUE {
                continue;
            }
            let p = voxel_center(i, dims);
            let near = line.iter().any(|q| {
                (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>() <= radius * radius
            });
            if near {
                *l = DUCT;
                duct_count += 1;
            }
        }
    }

    if cfg.lesions {
        let count = rng.random_range(cfg.lesion_count.0..=cfg.lesion_count.1);
        let (rlo, rhi) = if count == 1 { (0.11, 0.14) } else { (0.085, 0.11) };
        for _ in 0..count {
            let u = rng.random_range(-0.6..0.6) * axes[0];
            let c = frame.global([
                u,
                rng.random_range(-0.3..0.3) * axes[1],
                rng.random_range(-0.3..0.3) * axes[2],
            ]);
            let r = rng.random_range(rlo..rhi) * m;
            let radii = [
                r * rng.random_range(0.85..1.15),
                r * rng.random_range(0.85..1.15),
                r * rng.random_range(0.85..1.15),
            ];
            // masses replace gland tissue only: outline and duct stay intact
            for (i, l) in labels.iter_mut().enumerate() {
                let p = voxel_center(i, dims);
                if *l == TISSUE && (0..3).map(|a| ((p[a] - c[a]) / radii[a]).powi(2)).sum::<f64>() <= 1.0 {
                    *l = MASS;
                }
            }
        }
        let frac = labels.iter().filter(|&&l| l == MASS).count() as f64 / n as f64;
        if frac < cfg.lesion_fraction.0 || frac > cfg.lesion_fraction.1 {
            return None;
        }
    }

    if cfg.duct {
        let kept = labels.iter().filter(|&&l| l == DUCT).count();
        if kept < 8 || 2 * kept < duct_count {
            return None;
        }
    }
    let tissue = labels.iter().filter(|&&l| l == TISSUE).count();
    let mass = labels.iter().filter(|&&l| l == MASS).count();
    if tissue < 8 || tissue < mass {
        return None;
    }
    Some(labels)
}

fn smooth_field(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Vec<f64> {
    let comps: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let mut k = [0.0; 3];
            while k.iter().all(|&v| v == 0.0) {
                for v in k.iter_mut() {
                    *v = rng.random_range(0..3) as f64;
                }
            }
            (k, rng.random_range(6.0..12.0), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    (0..dims.iter().product())
        .map(|i| {
            let p = voxel_center(i, dims);
            comps
                .iter()
                .map(|(k, amp, ph)| {
                    let arg: f64 = (0..3).map(|a| k[a] * p[a] / dims[a] as f64).sum();
                    amp * (2.0 * PI * arg + ph).cos()
                })
                .sum()
        })
        .collect()
}

fn mean_of(img: &[f64], labels: &[u8], label: u8) -> Option<f64> {
    let (s, n) = img
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == label)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn render(
    rng: &mut ChaCha8Rng,
    cfg: &PhantomConfig,
    labels: &[u8],
    tissue_hu: f64,
    duct_hu: f64,
    mass_boost: Option<f64>,
) -> Result<Vec<f32>> {
    let field = smooth_field(rng, cfg.dims);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-12))
        .map_err(|e| Error::config(format!("noise: {e}")))?;
    let mut img: Vec<f64> = labels
        .iter()
        .zip(&field)
        .map(|(&l, f)| {
            let base = match l {
                TISSUE => tissue_hu,
                DUCT => duct_hu,
                MASS => tissue_hu + mass_boost.unwrap_or(0.0),
                _ => 0.0,
            };
            let eps = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            base + f + eps
        })
        .collect();
    if mass_boost.is_none() {
        if let (Some(mt), Some(mm)) = (mean_of(&img, labels, TISSUE), mean_of(&img, labels, MASS)) {
            let shift = mt - mm;
            for (v, &l) in img.iter_mut().zip(labels) {
                if l == MASS {
                    *v += shift;
                }
            }
        }
    }
    Ok(img.into_iter().map(|v| v as f32).collect())
}

/// Generates one aligned arterial/venous case in HU.
pub fn gen_phantom(seed: u64, cfg: &PhantomConfig) -> Result<PairedCase> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..MAX_ATTEMPTS)
        .find_map(|_| draw_labels(&mut rng, cfg))
        .ok_or_else(|| {
            Error::config(format!(
                "could not place the phantom geometry in {:?} within the configured fractions",
                cfg.dims
            ))
        })?;

    let art_tissue = 125.0 + rng.random_range(-10.0..10.0);
    let ven_tissue = 105.0 + rng.random_range(-10.0..10.0);
    let duct_hu = 15.0 + rng.random_range(-5.0..5.0);
    let boost = rng.random_range(50.0..75.0);
    let visible = visible_phase(seed);
    let boost_for = |p: Phase| match cfg.conspicuity {
        Conspicuity::Both => Some(boost),
        Conspicuity::Split if p == visible => Some(boost),
        Conspicuity::Split => None,
    };
    let art = render(&mut rng, cfg, &labels, art_tissue, duct_hu, boost_for(Phase::Arterial))?;
    let ven = render(&mut rng, cfg, &labels, ven_tissue, duct_hu, boost_for(Phase::Venous))?;

    let arterial = Volume::new(VolumeHeader::image(cfg.dims, cfg.spacing, Phase::Arterial), art)?;
    let venous = Volume::new(VolumeHeader::image(cfg.dims, cfg.spacing, Phase::Venous), ven)?;
    let labels = LabelMap::from_labels(cfg.dims, cfg.spacing, labels)?;
    PairedCase::new(format!("phantom{seed}"), arterial, venous, labels)
}

/// Seed of the `index`-th corpus case; parity follows `index`, so the
/// conspicuous phase alternates along the corpus.
pub fn corpus_seed(base_seed: u64, index: usize) -> u64 {
    base_seed.wrapping_mul(1 << 20).wrapping_add(index as u64)
}

/// `count` cases with ids `case000`, `case001`, ...
pub fn generate_corpus(base_seed: u64, count: usize, cfg: &PhantomConfig) -> Result<Vec<PairedCase>> {
    (0..count)
        .map(|i| {
            let mut c = gen_phantom(corpus_seed(base_seed, i), cfg)?;
            c.case_id = format!("case{i:03}");
            Ok(c)
        })
        .collect()
}
