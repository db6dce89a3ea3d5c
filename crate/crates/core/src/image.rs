//! Complex-valued image volumes and k-space sample sets.
//!
//! Images are stored row-major as `[phase][y][x]`, x fastest. k-space data is
//! stored per phase and per coil, aligned with a [`SamplingPattern`].
//!
//! [`SamplingPattern`]: crate::operators::SamplingPattern

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis sizes of an image volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub phases: usize,
    pub ny: usize,
    pub nx: usize,
}

impl Shape {
    pub const fn new(phases: usize, ny: usize, nx: usize) -> Self {
        Self { phases, ny, nx }
    }

    /// A single-phase 2D grid.
    pub const fn plane(ny: usize, nx: usize) -> Self {
        Self { phases: 1, ny, nx }
    }

    pub const fn len(&self) -> usize {
        self.phases * self.ny * self.nx
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane_len(&self) -> usize {
        self.ny * self.nx
    }

    #[inline]
    pub const fn index(&self, phase: usize, y: usize, x: usize) -> usize {
        (phase * self.ny + y) * self.nx + x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    shape: Shape,
    data: Vec<Complex64>,
}

impl ComplexImage {
    /// Wraps `data`, checking its length against `shape` and that every entry is finite.
    pub fn new(shape: Shape, data: Vec<Complex64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::param("shape", "image must have at least one pixel"));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(shape.len(), data.len()));
        }
        let image = Self { shape, data };
        image.ensure_finite()?;
        Ok(image)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![Complex64::new(0.0, 0.0); shape.len()],
        }
    }

    pub fn from_real(shape: Shape, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    pub(crate) fn from_parts_unchecked(shape: Shape, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn phase(&self, t: usize) -> &[Complex64] {
        let n = self.shape.plane_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn phase_mut(&mut self, t: usize) -> &mut [Complex64] {
        let n = self.shape.plane_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn check_shape(&self, expected: Shape) -> Result<()> {
        if self.shape == expected {
            Ok(())
        } else {
            Err(Error::shape(expected, self.shape))
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Hermitian inner product `<self, other> = sum conj(self_i) * other_i`.
    pub fn dot(&self, other: &Self) -> Complex64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * alpha;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self::from_parts_unchecked(self.shape, data)
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self::from_parts_unchecked(self.shape, data)
    }

    /// Drops the imaginary part of every entry.
    pub fn project_real(&mut self) {
        for z in &mut self.data {
            z.im = 0.0;
        }
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Measured k-space samples, one vector per (phase, coil).
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    n_coils: usize,
    /// Indexed by `phase * n_coils + coil`.
    samples: Vec<Vec<Complex64>>,
    /// Input SNR annotation in dB, when noise was added.
    pub snr_db: Option<f64>,
}

impl KSpaceData {
    pub fn new(n_coils: usize, samples: Vec<Vec<Complex64>>) -> Result<Self> {
        if n_coils == 0 || samples.is_empty() || samples.len() % n_coils != 0 {
            return Err(Error::param(
                "samples",
                format!("{} sample vectors cannot be split over {n_coils} coils", samples.len()),
            ));
        }
        let data = Self {
            n_coils,
            samples,
            snr_db: None,
        };
        for (t, chunk) in data.samples.chunks(n_coils).enumerate() {
            if chunk.iter().any(|s| s.len() != chunk[0].len()) {
                return Err(Error::param(
                    "samples",
                    format!("coils of phase {t} have different sample counts"),
                ));
            }
        }
        if let Some(index) = data
            .samples
            .iter()
            .flatten()
            .position(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::NonFinite { index });
        }
        Ok(data)
    }

    pub fn zeros(n_coils: usize, samples_per_phase: &[usize]) -> Self {
        let samples = samples_per_phase
            .iter()
            .flat_map(|&m| std::iter::repeat(vec![Complex64::new(0.0, 0.0); m]).take(n_coils))
            .collect();
        Self {
            n_coils,
            samples,
            snr_db: None,
        }
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    pub fn n_phases(&self) -> usize {
        self.samples.len() / self.n_coils
    }

    pub fn samples_per_phase(&self) -> Vec<usize> {
        self.samples
            .chunks(self.n_coils)
            .map(|c| c[0].len())
            .collect()
    }

    pub fn get(&self, phase: usize, coil: usize) -> &[Complex64] {
        &self.samples[phase * self.n_coils + coil]
    }

    pub fn get_mut(&mut self, phase: usize, coil: usize) -> &mut [Complex64] {
        &mut self.samples[phase * self.n_coils + coil]
    }

    pub fn vectors(&self) -> &[Vec<Complex64>] {
        &self.samples
    }

    pub fn iter(&self) -> impl Iterator<Item = &Complex64> {
        self.samples.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Complex64> {
        self.samples.iter_mut().flatten()
    }

    /// Total number of complex samples over all phases and coils.
    pub fn len(&self) -> usize {
        self.samples.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm_sqr(&self) -> f64 {
        self.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.n_coils == other.n_coils
            && self.samples.len() == other.samples.len()
            && self
                .samples
                .iter()
                .zip(&other.samples)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape(
                (other.n_coils, other.samples_per_phase()),
                (self.n_coils, self.samples_per_phase()),
            ))
        }
    }

    /// Hermitian inner product over all samples.
    pub fn dot(&self, other: &Self) -> Complex64 {
        self.iter().zip(other.iter()).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn sub(&self, other: &Self) -> Self {
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u - v).collect())
            .collect();
        Self {
            n_coils: self.n_coils,
            samples,
            snr_db: None,
        }
    }
}
