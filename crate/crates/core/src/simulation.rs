//! Synthetic moving phantoms, radial trajectories, coil maps and noisy
//! multi-acquisition datasets.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ComplexImage, KSpaceData, Shape};
use crate::operators::{CoilMaps, FourierMode, MeasurementOperator, PhaseSamples, SamplingPattern, SamplingScheme};

/// Golden-angle increment for full-diameter spokes, `pi (sqrt 5 - 1) / 2` (about 111.25 deg).
pub const GOLDEN_ANGLE: f64 = 1.941_611_038_725_466_6;

/// An ellipse in normalized coordinates, `[-1, 1]` across the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    /// `(x, y)` centre.
    pub center: [f64; 2],
    /// Semi-axes before rotation.
    pub axes: [f64; 2],
    /// Rotation in radians.
    pub angle: f64,
    /// Added intensity (may be negative).
    pub intensity: f64,
    /// Peak vertical displacement over the respiratory cycle.
    #[serde(default)]
    pub displacement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub size: usize,
    pub phases: usize,
    pub ellipses: Vec<Ellipse>,
    /// Subsamples per pixel along each axis.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn default_supersample() -> usize {
    4
}

impl PhantomConfig {
    /// A body outline, one large moving organ and five small random
    /// structures, drawn deterministically from `seed`.
    pub fn random(size: usize, phases: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ellipses = vec![
            Ellipse {
                center: [0.0, 0.0],
                axes: [0.85, 0.7],
                angle: 0.0,
                intensity: 0.6,
                displacement: 0.0,
            },
            Ellipse {
                center: [rng.gen_range(-0.2..0.2), rng.gen_range(-0.3..-0.1)],
                axes: [0.45, 0.3],
                angle: rng.gen_range(0.0..PI),
                intensity: 0.3,
                displacement: 0.08,
            },
        ];
        for _ in 0..5 {
            ellipses.push(Ellipse {
                center: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.4..0.4)],
                axes: [rng.gen_range(0.05..0.15), rng.gen_range(0.05..0.15)],
                angle: rng.gen_range(0.0..PI),
                intensity: rng.gen_range(-0.2..0.3),
                displacement: rng.gen_range(0.0..0.06),
            });
        }
        Self {
            size,
            phases,
            ellipses,
            supersample: default_supersample(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.phases == 0 || self.supersample == 0 {
            return Err(Error::param("phantom", "size, phases and supersample must be >= 1"));
        }
        for e in &self.ellipses {
            let finite = e.center.iter().chain(&e.axes).chain([&e.angle, &e.intensity, &e.displacement]).all(|v| v.is_finite());
            if !finite || e.center.iter().any(|c| c.abs() > 1.0) || e.axes.iter().any(|a| *a <= 0.0) {
                return Err(Error::param("ellipses", "centres must lie in [-1, 1] with positive axes"));
            }
        }
        Ok(())
    }
}

/// Rasterizes each phase with `supersample^2` point samples per pixel;
/// ellipse `e` is shifted vertically by `e.displacement * sin(2 pi p / P)`.
pub fn make_phantom(cfg: &PhantomConfig) -> Result<ComplexImage> {
    cfg.validate()?;
    let (n, s, np) = (cfg.size, cfg.supersample, cfg.phases);
    let shape = Shape::new(np, n, n);
    let mut data = vec![Complex64::new(0.0, 0.0); shape.len()];
    let coord = |i: usize| ((i as f64 + 0.5) / (n * s) as f64) * 2.0 - 1.0;
    let rot: Vec<(f64, f64)> = cfg.ellipses.iter().map(|e| (e.angle.cos(), e.angle.sin())).collect();
    for p in 0..np {
        let shift: Vec<f64> = cfg
            .ellipses
            .iter()
            .map(|e| e.displacement * (2.0 * PI * p as f64 / np as f64).sin())
            .collect();
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for sy in 0..s {
                    let v = coord(y * s + sy);
                    for sx in 0..s {
                        let u = coord(x * s + sx);
                        let mut val = 0.0;
                        for ((e, &(c, si)), dy) in cfg.ellipses.iter().zip(&rot).zip(&shift) {
                            let (dx, dyy) = (u - e.center[0], v - e.center[1] - dy);
                            let a = (c * dx + si * dyy) / e.axes[0];
                            let b = (-si * dx + c * dyy) / e.axes[1];
                            if a * a + b * b <= 1.0 {
                                val += e.intensity;
                            }
                        }
                        acc += val.clamp(0.0, 1.0);
                    }
                }
                data[shape.index(p, y, x)] = Complex64::new(acc / (s * s) as f64, 0.0);
            }
        }
    }
    ComplexImage::new(shape, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AngleScheme {
    Uniform,
    GoldenAngle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub spokes: usize,
    pub readout: usize,
    pub scheme: AngleScheme,
    /// Rotation offset in spoke-angle units.
    #[serde(default)]
    pub rotation: usize,
    /// Input SNR in dB; `None` is noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl AcquisitionConfig {
    /// Spokes per phase for a target fraction of the `n x n` grid.
    pub fn spokes_for_rate(rate: f64, n: usize, readout: usize) -> usize {
        ((rate * (n * n) as f64 / readout as f64).round() as usize).max(1)
    }

    /// Golden-angle acquisition at the given sampling rate, readout `n`.
    pub fn for_rate(rate: f64, n: usize, snr_db: Option<f64>, rotation: usize, seed: u64) -> Self {
        Self {
            spokes: Self::spokes_for_rate(rate, n, n),
            readout: n,
            scheme: AngleScheme::GoldenAngle,
            rotation,
            snr_db,
            seed,
        }
    }

    /// Realized fraction of the `n x n` grid sampled per phase.
    pub fn rate(&self, n: usize) -> f64 {
        (self.spokes * self.readout) as f64 / (n * n) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.spokes == 0 || self.readout == 0 {
            return Err(Error::param("acquisition", "spokes and readout must be >= 1"));
        }
        if let Some(s) = self.snr_db {
            if s.is_nan() || s == f64::NEG_INFINITY {
                return Err(Error::param("snr_db", "must be a number (inf for noiseless)"));
            }
        }
        Ok(())
    }

    /// Spoke angle in `[0, pi)`.
    pub fn angle(&self, phase: usize, n_phases: usize, spoke: usize) -> f64 {
        match self.scheme {
            AngleScheme::Uniform => {
                let idx = (spoke * n_phases + phase + self.rotation) as f64;
                (idx * PI / (self.spokes * n_phases) as f64).rem_euclid(PI)
            }
            AngleScheme::GoldenAngle => {
                let g = (self.rotation + phase * self.spokes + spoke) as f64;
                (g * GOLDEN_ANGLE).rem_euclid(PI)
            }
        }
    }
}

/// Spokes through the origin with `readout` points at `k = -1/2 + r/readout`
/// and ramp density compensation `n^2 pi |k| / (spokes readout)`. The origin,
/// shared by every spoke, gets the equal-area radius `dk/4`.
pub fn radial_trajectory(cfg: &AcquisitionConfig, phase: usize, n_phases: usize, ny: usize, nx: usize) -> Result<PhaseSamples> {
    cfg.validate()?;
    if phase >= n_phases {
        return Err(Error::param("phase", format!("{phase} out of range for {n_phases} phases")));
    }
    let r = cfg.readout as f64;
    let scale = (ny * nx) as f64 * PI / (cfg.spokes as f64 * r);
    let mut points = Vec::with_capacity(cfg.spokes * cfg.readout);
    let mut weights = Vec::with_capacity(cfg.spokes * cfg.readout);
    for s in 0..cfg.spokes {
        let (sin, cos) = cfg.angle(phase, n_phases, s).sin_cos();
        for i in 0..cfg.readout {
            let k = -0.5 + i as f64 / r;
            points.push([k * cos, k * sin]);
            let radius = if k == 0.0 { 0.25 / r } else { k.abs() };
            weights.push(scale * radius);
        }
    }
    PhaseSamples::new(points, weights)
}

pub fn radial_pattern(cfg: &AcquisitionConfig, n_phases: usize, ny: usize, nx: usize) -> Result<SamplingPattern> {
    let phases = (0..n_phases)
        .map(|p| radial_trajectory(cfg, p, n_phases, ny, nx))
        .collect::<Result<Vec<_>>>()?;
    SamplingPattern::new(SamplingScheme::Radial, phases)
}

/// Smooth complex Gaussian-bump sensitivities around the field of view with
/// linear phase ramps, rescaled so the coil energy `sum |S_i|^2` follows a
/// smooth profile in `[0.6, 1.8]`. A single coil is uniform.
pub fn synth_coil_maps(n_coils: usize, ny: usize, nx: usize, seed: u64) -> Result<CoilMaps> {
    if n_coils == 0 {
        return Err(Error::param("n_coils", "must be >= 1"));
    }
    if n_coils == 1 {
        return Ok(CoilMaps::uniform(ny, nx));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<([f64; 2], [f64; 2], f64)> = (0..n_coils)
        .map(|c| {
            let a = 2.0 * PI * c as f64 / n_coils as f64 + rng.gen_range(-0.2..0.2);
            let centre = [0.9 * a.cos(), 0.9 * a.sin()];
            let ramp = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            (centre, ramp, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let mut maps = vec![Vec::with_capacity(ny * nx); n_coils];
    for y in 0..ny {
        let v = ((y as f64 + 0.5) / ny as f64) * 2.0 - 1.0;
        for x in 0..nx {
            let u = ((x as f64 + 0.5) / nx as f64) * 2.0 - 1.0;
            let raw: Vec<Complex64> = params
                .iter()
                .map(|(c, ramp, phi)| {
                    let d2 = (u - c[0]).powi(2) + (v - c[1]).powi(2);
                    Complex64::from_polar((-d2 / (2.0 * 0.7 * 0.7)).exp(), phi + PI * (ramp[0] * u + ramp[1] * v))
                })
                .collect();
            let energy: f64 = raw.iter().map(|z| z.norm_sqr()).sum();
            let target = 0.6 + 1.2 * (-(u * u + v * v) / 0.5).exp();
            let g = (target / energy).sqrt();
            for (m, z) in maps.iter_mut().zip(raw) {
                m.push(z * g);
            }
        }
    }
    CoilMaps::new(ny, nx, maps)
}

/// Circular complex Gaussian noise with per-sample variance
/// `||y||^2 / (m 10^(snr/10))`. Infinite SNR leaves `y` unchanged.
pub fn add_noise(y: &KSpaceData, snr_db: f64, seed: u64) -> Result<KSpaceData> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::param("snr_db", "must be a number"));
    }
    let mut out = y.clone();
    if snr_db == f64::INFINITY {
        out.snr_db = None;
        return Ok(out);
    }
    let energy = y.norm_sqr();
    if !(energy > 0.0) {
        return Err(Error::ZeroEnergy);
    }
    let sigma2 = energy / (y.len() as f64 * 10f64.powf(snr_db / 10.0));
    let sd = (sigma2 / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.iter_mut() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *v += Complex64::new(sd * re, sd * im);
    }
    out.snr_db = Some(snr_db);
    Ok(out)
}

pub struct Acquisition {
    pub operator: MeasurementOperator,
    pub data: KSpaceData,
    pub pseudoinverse: ComplexImage,
}

/// Samples `truth` along the configured trajectory, adds noise and forms
/// the density-compensated pseudoinverse image.
pub fn simulate_acquisition(
    truth: &ComplexImage,
    cfg: &AcquisitionConfig,
    coils: &CoilMaps,
    mode: FourierMode,
) -> Result<Acquisition> {
    let shape = truth.shape();
    let pattern = radial_pattern(cfg, shape.phases, shape.ny, shape.nx)?;
    let operator = MeasurementOperator::new(shape, pattern, coils.clone(), mode)?;
    let clean = operator.forward(truth)?;
    let data = match cfg.snr_db {
        Some(snr) => add_noise(&clean, snr, cfg.seed)?,
        None => clean,
    };
    let pseudoinverse = operator.pseudoinverse(&data)?;
    Ok(Acquisition {
        operator,
        data,
        pseudoinverse,
    })
}

/// One A2A training acquisition per `(object, index)`: golden-angle fans
/// rotated past each other so no spoke repeats within an object, with
/// independent noise seeds.
pub fn training_acquisition(base: &AcquisitionConfig, n_phases: usize, object: usize, index: usize, seed: u64) -> AcquisitionConfig {
    AcquisitionConfig {
        rotation: base.rotation + (object * 7919 + index * base.spokes * n_phases),
        seed: seed.wrapping_mul(1_000_003).wrapping_add((object * 1009 + index) as u64),
        ..base.clone()
    }
}
