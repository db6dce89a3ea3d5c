use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingScheme {
    CartesianMask,
    Radial,
}

/// k-space samples of one phase: coordinates in cycles/pixel and their
/// density-compensation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSamples {
    /// `[kx, ky]` pairs, each in `[-0.5, 0.5)`.
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl PhaseSamples {
    pub fn new(points: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::param("points", "a phase needs at least one sample"));
        }
        if points.len() != weights.len() {
            return Err(Error::shape(points.len(), weights.len()));
        }
        for k in &points {
            if !k.iter().all(|c| (-0.5..0.5).contains(c)) {
                return Err(Error::param(
                    "points",
                    format!("coordinate {k:?} outside [-0.5, 0.5)"),
                ));
            }
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::param("weights", format!("weight {w} is not positive")));
        }
        Ok(Self { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn grid_frequencies(n: usize) -> impl Iterator<Item = f64> {
    let half = (n / 2) as f64;
    (0..n).map(move |j| (j as f64 - half) / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPattern {
    scheme: SamplingScheme,
    phases: Vec<PhaseSamples>,
}

impl SamplingPattern {
    pub fn new(scheme: SamplingScheme, phases: Vec<PhaseSamples>) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::param("phases", "pattern needs at least one phase"));
        }
        Ok(Self { scheme, phases })
    }

    /// Every Cartesian grid frequency, unit weights, repeated for each phase.
    pub fn cartesian_full(phases: usize, ny: usize, nx: usize) -> Self {
        let mask = vec![true; ny * nx];
        Self::cartesian_mask(ny, nx, &vec![mask; phases]).expect("full mask is non-empty")
    }

    /// Cartesian grid frequencies selected by a row-major `[ky][kx]` mask per
    /// phase; index `(ny/2, nx/2)` is the k-space origin.
    pub fn cartesian_mask(ny: usize, nx: usize, masks: &[Vec<bool>]) -> Result<Self> {
        let phases = masks
            .iter()
            .map(|mask| {
                if mask.len() != ny * nx {
                    return Err(Error::shape(ny * nx, mask.len()));
                }
                let mut points = Vec::new();
                for (iy, ky) in grid_frequencies(ny).enumerate() {
                    for (ix, kx) in grid_frequencies(nx).enumerate() {
                        if mask[iy * nx + ix] {
                            points.push([kx, ky]);
                        }
                    }
                }
                let weights = vec![1.0; points.len()];
                PhaseSamples::new(points, weights)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(SamplingScheme::CartesianMask, phases)
    }

    /// Concatenates single- or multi-phase patterns along the phase axis.
    pub fn stack(patterns: Vec<SamplingPattern>) -> Result<Self> {
        let scheme = patterns
            .first()
            .map(|p| p.scheme)
            .ok_or_else(|| Error::param("patterns", "nothing to stack"))?;
        let phases = patterns.into_iter().flat_map(|p| p.phases).collect();
        Self::new(scheme, phases)
    }

    pub fn scheme(&self) -> SamplingScheme {
        self.scheme
    }

    pub fn phases(&self) -> &[PhaseSamples] {
        &self.phases
    }

    pub fn n_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn samples_per_phase(&self) -> Vec<usize> {
        self.phases.iter().map(PhaseSamples::len).collect()
    }

    pub fn total_samples(&self) -> usize {
        self.phases.iter().map(PhaseSamples::len).sum()
    }
}

/// Complex receive-coil sensitivities, one `ny x nx` map per coil.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilMaps {
    ny: usize,
    nx: usize,
    maps: Vec<Vec<Complex64>>,
}

impl CoilMaps {
    pub fn new(ny: usize, nx: usize, maps: Vec<Vec<Complex64>>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::param("maps", "need at least one coil"));
        }
        if let Some(m) = maps.iter().find(|m| m.len() != ny * nx) {
            return Err(Error::shape(ny * nx, m.len()));
        }
        let coils = Self { ny, nx, maps };
        if let Some(idx) = coils.energy().iter().position(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::ZeroCoilEnergy {
                y: idx / nx,
                x: idx % nx,
            });
        }
        Ok(coils)
    }

    /// A single coil with unit sensitivity everywhere.
    pub fn uniform(ny: usize, nx: usize) -> Self {
        Self {
            ny,
            nx,
            maps: vec![vec![Complex64::new(1.0, 0.0); ny * nx]],
        }
    }

    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn map(&self, coil: usize) -> &[Complex64] {
        &self.maps[coil]
    }

    /// `sum_i |S_i|^2` per pixel.
    pub fn energy(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.ny * self.nx];
        for m in &self.maps {
            for (acc, s) in e.iter_mut().zip(m) {
                *acc += s.norm_sqr();
            }
        }
        e
    }
}
