//! The multi-coil Fourier measurement model `y = P F S x + e`.
//!
//! Conventions, fixed for every operator:
//!
//! * k-space coordinates are in cycles/pixel, in `[-0.5, 0.5)` on both axes;
//! * pixel coordinates are centred, `p = index - n / 2`;
//! * forward transform uses the negative exponent and `1/sqrt(n)` scaling, so
//!   a fully sampled Cartesian grid is unitary.

mod gridding;
mod pattern;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{ComplexImage, KSpaceData, Shape};

pub use gridding::GriddingParams;
pub use pattern::{CoilMaps, PhaseSamples, SamplingPattern, SamplingScheme};

use gridding::GriddingPlan;

/// How the nonuniform Fourier transform is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum FourierMode {
    /// Exact nonuniform DFT, `O(m n)` per phase and coil.
    #[default]
    Direct,
    /// Kaiser-Bessel gridding on an oversampled FFT grid.
    Gridding(GriddingParams),
}

/// Separable exponential tables for one phase: `ex[s * nx + px]`,
/// `ey[s * ny + py]` hold `exp(-2 pi i k p)` for sample `s`.
struct DirectTables {
    ex: Vec<Complex64>,
    ey: Vec<Complex64>,
}

enum Engine {
    Direct(Vec<DirectTables>),
    Gridding(Vec<GriddingPlan>),
}

/// `H = P F S` for every phase; see the module docs for conventions.
pub struct MeasurementOperator {
    shape: Shape,
    pattern: SamplingPattern,
    coils: CoilMaps,
    mode: FourierMode,
    scale: f64,
    /// `sum_i |S_i|^2` per pixel.
    coil_energy: Vec<f64>,
    engine: Engine,
}

impl std::fmt::Debug for MeasurementOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeasurementOperator")
            .field("shape", &self.shape)
            .field("samples", &self.pattern.samples_per_phase())
            .field("coils", &self.coils.n_coils())
            .field("mode", &self.mode)
            .finish()
    }
}

fn centred(n: usize) -> impl Iterator<Item = f64> {
    let half = (n / 2) as f64;
    (0..n).map(move |i| i as f64 - half)
}

fn exp_table(coords: impl Iterator<Item = f64> + Clone, n: usize) -> Vec<Complex64> {
    let mut table = Vec::new();
    for k in coords {
        for p in centred(n) {
            let arg = -2.0 * std::f64::consts::PI * k * p;
            table.push(Complex64::new(arg.cos(), arg.sin()));
        }
    }
    table
}

impl MeasurementOperator {
    pub fn new(
        shape: Shape,
        pattern: SamplingPattern,
        coils: CoilMaps,
        mode: FourierMode,
    ) -> Result<Self> {
        if pattern.n_phases() != shape.phases {
            return Err(Error::shape(
                format!("{} pattern phases", shape.phases),
                format!("{} pattern phases", pattern.n_phases()),
            ));
        }
        if (coils.ny(), coils.nx()) != (shape.ny, shape.nx) {
            return Err(Error::shape((shape.ny, shape.nx), (coils.ny(), coils.nx())));
        }
        let coil_energy = coils.energy();
        let engine = match mode {
            FourierMode::Direct => Engine::Direct(
                pattern
                    .phases()
                    .iter()
                    .map(|ph| DirectTables {
                        ex: exp_table(ph.points.iter().map(|k| k[0]), shape.nx),
                        ey: exp_table(ph.points.iter().map(|k| k[1]), shape.ny),
                    })
                    .collect(),
            ),
            FourierMode::Gridding(params) => Engine::Gridding(
                pattern
                    .phases()
                    .iter()
                    .map(|ph| GriddingPlan::new(shape.ny, shape.nx, &ph.points, params))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            shape,
            pattern,
            coils,
            mode,
            scale: 1.0 / (shape.plane_len() as f64).sqrt(),
            coil_energy,
            engine,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn pattern(&self) -> &SamplingPattern {
        &self.pattern
    }

    pub fn coils(&self) -> &CoilMaps {
        &self.coils
    }

    pub fn mode(&self) -> FourierMode {
        self.mode
    }

    /// Normalization factor of the Fourier transform, `1/sqrt(nx ny)`.
    pub fn normalization(&self) -> f64 {
        self.scale
    }

    /// Zero k-space data laid out for this operator.
    pub fn zero_data(&self) -> KSpaceData {
        KSpaceData::zeros(self.coils.n_coils(), &self.pattern.samples_per_phase())
    }

    fn check_data(&self, y: &KSpaceData) -> Result<()> {
        y.check_layout(&self.zero_data())
    }

    /// Nonuniform DFT of one plane at the samples of phase `t`.
    fn transform(&self, t: usize, plane: &[Complex64]) -> Vec<Complex64> {
        let (ny, nx) = (self.shape.ny, self.shape.nx);
        match &self.engine {
            Engine::Direct(tables) => {
                let tab = &tables[t];
                let m = self.pattern.phases()[t].len();
                let mut out = vec![Complex64::new(0.0, 0.0); m];
                for (s, ys) in out.iter_mut().enumerate() {
                    let ex = &tab.ex[s * nx..(s + 1) * nx];
                    let ey = &tab.ey[s * ny..(s + 1) * ny];
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (row, &wy) in plane.chunks_exact(nx).zip(ey) {
                        let mut inner = Complex64::new(0.0, 0.0);
                        for (z, &wx) in row.iter().zip(ex) {
                            inner += z * wx;
                        }
                        acc += inner * wy;
                    }
                    *ys = acc * self.scale;
                }
                out
            }
            Engine::Gridding(plans) => {
                let mut out = plans[t].forward(plane);
                for z in &mut out {
                    *z *= self.scale;
                }
                out
            }
        }
    }

    /// Adjoint of [`Self::transform`].
    fn transform_adjoint(&self, t: usize, samples: &[Complex64]) -> Vec<Complex64> {
        let (ny, nx) = (self.shape.ny, self.shape.nx);
        match &self.engine {
            Engine::Direct(tables) => {
                let tab = &tables[t];
                let mut plane = vec![Complex64::new(0.0, 0.0); ny * nx];
                for (s, &ys) in samples.iter().enumerate() {
                    let v = ys * self.scale;
                    let ex = &tab.ex[s * nx..(s + 1) * nx];
                    let ey = &tab.ey[s * ny..(s + 1) * ny];
                    for (row, wy) in plane.chunks_exact_mut(nx).zip(ey) {
                        let c = v * wy.conj();
                        for (z, wx) in row.iter_mut().zip(ex) {
                            *z += c * wx.conj();
                        }
                    }
                }
                plane
            }
            Engine::Gridding(plans) => {
                let mut plane = plans[t].adjoint(samples);
                for z in &mut plane {
                    *z *= self.scale;
                }
                plane
            }
        }
    }

    /// `y = H x`: for each phase and coil, samples of `F(S_i x_t)`.
    pub fn forward(&self, x: &ComplexImage) -> Result<KSpaceData> {
        x.check_shape(self.shape)?;
        x.ensure_finite()?;
        let n_coils = self.coils.n_coils();
        let samples: Vec<Vec<Complex64>> = (0..self.shape.phases * n_coils)
            .into_par_iter()
            .map(|idx| {
                let (t, i) = (idx / n_coils, idx % n_coils);
                let weighted: Vec<Complex64> = x
                    .phase(t)
                    .iter()
                    .zip(self.coils.map(i))
                    .map(|(a, s)| a * s)
                    .collect();
                self.transform(t, &weighted)
            })
            .collect();
        KSpaceData::new(n_coils, samples)
    }

    /// Per-phase coil-combined adjoint, with optional per-sample weights.
    fn combine(&self, y: &KSpaceData, weighted: bool) -> Vec<Vec<Complex64>> {
        let n_coils = self.coils.n_coils();
        (0..self.shape.phases)
            .into_par_iter()
            .map(|t| {
                let mut acc = vec![Complex64::new(0.0, 0.0); self.shape.plane_len()];
                for i in 0..n_coils {
                    let samples = y.get(t, i);
                    let plane = if weighted {
                        let w = &self.pattern.phases()[t].weights;
                        let dc: Vec<Complex64> =
                            samples.iter().zip(w).map(|(z, &w)| z * w).collect();
                        self.transform_adjoint(t, &dc)
                    } else {
                        self.transform_adjoint(t, samples)
                    };
                    for ((a, z), s) in acc.iter_mut().zip(&plane).zip(self.coils.map(i)) {
                        *a += s.conj() * z;
                    }
                }
                acc
            })
            .collect()
    }

    /// `x = H* y`, the exact adjoint of [`Self::forward`].
    pub fn adjoint(&self, y: &KSpaceData) -> Result<ComplexImage> {
        self.check_data(y)?;
        let data = self.combine(y, false).concat();
        Ok(ComplexImage::from_parts_unchecked(self.shape, data))
    }

    /// Density-compensated, coil-energy-normalized adjoint: the zero-filled
    /// (MCNUFFT-style) image used as the practical pseudoinverse.
    pub fn pseudoinverse(&self, y: &KSpaceData) -> Result<ComplexImage> {
        self.check_data(y)?;
        if let Some(idx) = self.coil_energy.iter().position(|&e| !(e > 0.0)) {
            return Err(Error::ZeroCoilEnergy {
                y: idx / self.shape.nx,
                x: idx % self.shape.nx,
            });
        }
        let mut data = self.combine(y, true).concat();
        let n = self.shape.plane_len();
        for (j, z) in data.iter_mut().enumerate() {
            *z /= self.coil_energy[j % n];
        }
        Ok(ComplexImage::from_parts_unchecked(self.shape, data))
    }

    /// Gradient of `g(x) = 1/2 ||Hx - y||^2`, i.e. `H*(Hx - y)`.
    pub fn datafid_gradient(&self, x: &ComplexImage, y: &KSpaceData) -> Result<ComplexImage> {
        self.check_data(y)?;
        let residual = self.forward(x)?.sub(y);
        self.adjoint(&residual)
    }

    /// `1/2 ||Hx - y||^2`.
    pub fn datafid_value(&self, x: &ComplexImage, y: &KSpaceData) -> Result<f64> {
        self.check_data(y)?;
        Ok(0.5 * self.forward(x)?.sub(y).norm_sqr())
    }

    /// `H*H x`.
    pub fn normal(&self, x: &ComplexImage) -> Result<ComplexImage> {
        self.adjoint(&self.forward(x)?)
    }

    /// Power-iteration estimate of `||H||_2^2`, the largest eigenvalue of `H*H`.
    pub fn norm_estimate(&self, iters: usize, seed: u64) -> Result<f64> {
        if iters == 0 {
            return Err(Error::param("iters", "power iteration needs at least one step"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..self.shape.len())
            .map(|_| Complex64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
            .collect();
        let mut v = ComplexImage::from_parts_unchecked(self.shape, data);
        v.scale(1.0 / v.norm());
        let mut lambda = 0.0;
        for _ in 0..iters {
            let w = self.normal(&v)?;
            lambda = v.dot(&w).re;
            let nw = w.norm();
            if nw == 0.0 {
                return Ok(0.0);
            }
            v = w.scaled(1.0 / nw);
        }
        Ok(lambda)
    }
}

#[cfg(test)]
mod tests;
