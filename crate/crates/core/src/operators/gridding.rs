//! Kaiser-Bessel gridding: deapodize, zero-pad onto an oversampled grid, FFT,
//! then interpolate at the nonuniform sample locations. The adjoint runs the
//! exact transposed steps, so the adjoint identity holds to rounding even
//! though the forward map only approximates the direct DFT.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GriddingParams {
    /// Kernel support in oversampled-grid cells.
    pub width: usize,
    /// Grid oversampling ratio.
    pub oversampling: f64,
}

impl Default for GriddingParams {
    fn default() -> Self {
        Self {
            width: 6,
            oversampling: 1.25,
        }
    }
}

impl GriddingParams {
    /// Shape parameter from Beatty, Nishimura & Pauly (2005).
    pub fn beta(&self) -> f64 {
        let w = self.width as f64;
        let a = self.oversampling;
        PI * ((w / a).powi(2) * (a - 0.5).powi(2) - 0.8).sqrt()
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn kernel(d: f64, width: f64, beta: f64) -> f64 {
    let r = 2.0 * d / width;
    if r.abs() > 1.0 {
        0.0
    } else {
        bessel_i0(beta * (1.0 - r * r).sqrt())
    }
}

/// Continuous Fourier transform of [`kernel`] at frequency `nu` (cycles/cell).
fn kernel_ft(nu: f64, width: f64, beta: f64) -> f64 {
    let z2 = (PI * width * nu).powi(2) - beta * beta;
    if z2 < 0.0 {
        let z = (-z2).sqrt();
        width * z.sinh() / z
    } else if z2 > 0.0 {
        let z = z2.sqrt();
        width * z.sin() / z
    } else {
        width
    }
}

fn grid_size(n: usize, oversampling: f64) -> usize {
    let g = (n as f64 * oversampling).ceil() as usize;
    g + g % 2
}

/// Per-axis stencil: `width + 1` slots, unused slots carry zero weight.
struct Stencil {
    index: Vec<usize>,
    weight: Vec<f64>,
}

fn stencil(k: f64, g: usize, width: usize, beta: f64) -> (Vec<usize>, Vec<f64>) {
    let kappa = k * g as f64;
    let half = width as f64 / 2.0;
    let lo = (kappa - half).ceil() as i64;
    let mut index = Vec::with_capacity(width + 1);
    let mut weight = Vec::with_capacity(width + 1);
    for u in lo..lo + width as i64 + 1 {
        index.push(u.rem_euclid(g as i64) as usize);
        weight.push(kernel(kappa - u as f64, width as f64, beta));
    }
    (index, weight)
}

pub(crate) struct GriddingPlan {
    ny: usize,
    nx: usize,
    gy: usize,
    gx: usize,
    taps: usize,
    deapod: Vec<f64>,
    sy: Stencil,
    sx: Stencil,
    fwd_y: Arc<dyn Fft<f64>>,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
}

impl GriddingPlan {
    pub(crate) fn new(ny: usize, nx: usize, points: &[[f64; 2]], params: GriddingParams) -> Result<Self> {
        if params.width < 2 || !(params.oversampling > 1.0) {
            return Err(Error::param(
                "gridding",
                "kernel width must be >= 2 and oversampling > 1",
            ));
        }
        let beta = params.beta();
        if !beta.is_finite() {
            return Err(Error::param("gridding", "kernel too narrow for this oversampling"));
        }
        let (gy, gx) = (grid_size(ny, params.oversampling), grid_size(nx, params.oversampling));
        let w = params.width as f64;
        let mut deapod = Vec::with_capacity(ny * nx);
        for py in 0..ny {
            let fy = kernel_ft((py as f64 - (ny / 2) as f64) / gy as f64, w, beta);
            for px in 0..nx {
                let fx = kernel_ft((px as f64 - (nx / 2) as f64) / gx as f64, w, beta);
                deapod.push(1.0 / (fy * fx));
            }
        }
        let mut sy = Stencil { index: Vec::new(), weight: Vec::new() };
        let mut sx = Stencil { index: Vec::new(), weight: Vec::new() };
        for k in points {
            let (i, v) = stencil(k[1], gy, params.width, beta);
            sy.index.extend(i);
            sy.weight.extend(v);
            let (i, v) = stencil(k[0], gx, params.width, beta);
            sx.index.extend(i);
            sx.weight.extend(v);
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            ny,
            nx,
            gy,
            gx,
            taps: params.width + 1,
            deapod,
            sy,
            sx,
            fwd_y: planner.plan_fft_forward(gy),
            fwd_x: planner.plan_fft_forward(gx),
            inv_y: planner.plan_fft_inverse(gy),
            inv_x: planner.plan_fft_inverse(gx),
        })
    }

    fn grid_offset(&self, py: usize, px: usize) -> usize {
        let gyi = (py as i64 - (self.ny / 2) as i64).rem_euclid(self.gy as i64) as usize;
        let gxi = (px as i64 - (self.nx / 2) as i64).rem_euclid(self.gx as i64) as usize;
        gyi * self.gx + gxi
    }

    fn fft2(&self, grid: &mut [Complex64], fx: &Arc<dyn Fft<f64>>, fy: &Arc<dyn Fft<f64>>) {
        for row in grid.chunks_exact_mut(self.gx) {
            fx.process(row);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); self.gy];
        for x in 0..self.gx {
            for (y, c) in column.iter_mut().enumerate() {
                *c = grid[y * self.gx + x];
            }
            fy.process(&mut column);
            for (y, c) in column.iter().enumerate() {
                grid[y * self.gx + x] = *c;
            }
        }
    }

    /// Unnormalized forward transform of a plane at the plan's sample points.
    pub(crate) fn forward(&self, plane: &[Complex64]) -> Vec<Complex64> {
        let mut grid = vec![Complex64::new(0.0, 0.0); self.gy * self.gx];
        for py in 0..self.ny {
            for px in 0..self.nx {
                let j = py * self.nx + px;
                grid[self.grid_offset(py, px)] = plane[j] * self.deapod[j];
            }
        }
        self.fft2(&mut grid, &self.fwd_x, &self.fwd_y);
        let m = self.sy.index.len() / self.taps;
        (0..m)
            .map(|s| {
                let r = s * self.taps..(s + 1) * self.taps;
                let mut acc = Complex64::new(0.0, 0.0);
                for (&iy, &wy) in self.sy.index[r.clone()].iter().zip(&self.sy.weight[r.clone()]) {
                    let row = &grid[iy * self.gx..(iy + 1) * self.gx];
                    let mut inner = Complex64::new(0.0, 0.0);
                    for (&ix, &wx) in self.sx.index[r.clone()].iter().zip(&self.sx.weight[r.clone()]) {
                        inner += row[ix] * wx;
                    }
                    acc += inner * wy;
                }
                acc
            })
            .collect()
    }

    /// Exact adjoint of [`Self::forward`].
    pub(crate) fn adjoint(&self, samples: &[Complex64]) -> Vec<Complex64> {
        let mut grid = vec![Complex64::new(0.0, 0.0); self.gy * self.gx];
        for (s, &v) in samples.iter().enumerate() {
            let r = s * self.taps..(s + 1) * self.taps;
            for (&iy, &wy) in self.sy.index[r.clone()].iter().zip(&self.sy.weight[r.clone()]) {
                let c = v * wy;
                let row = &mut grid[iy * self.gx..(iy + 1) * self.gx];
                for (&ix, &wx) in self.sx.index[r.clone()].iter().zip(&self.sx.weight[r.clone()]) {
                    row[ix] += c * wx;
                }
            }
        }
        self.fft2(&mut grid, &self.inv_x, &self.inv_y);
        let mut plane = vec![Complex64::new(0.0, 0.0); self.ny * self.nx];
        for py in 0..self.ny {
            for px in 0..self.nx {
                let j = py * self.nx + px;
                plane[j] = grid[self.grid_offset(py, px)] * self.deapod[j];
            }
        }
        plane
    }
}
