//! Artifact-removal operators `R: image -> image` and the RED terms they induce.

mod net;
mod tv;

use crate::error::{Error, Result};
use crate::image::ComplexImage;

pub use net::{Activation, ConvLayer, NetConfig, NetWeights};
pub use tv::{tv_denoise, tv_value, TvDenoiser, TvParams};

pub(crate) use net::{backward, dims_of, forward_cached, image_to_tensor};

/// A deterministic image-to-image map preserving dims.
pub trait ArtifactRemover: Send + Sync {
    fn name(&self) -> String;

    fn apply(&self, x: &ComplexImage) -> Result<ComplexImage>;
}

impl<R: ArtifactRemover + ?Sized> ArtifactRemover for &R {
    fn name(&self) -> String {
        (**self).name()
    }

    fn apply(&self, x: &ComplexImage) -> Result<ComplexImage> {
        (**self).apply(x)
    }
}

impl<R: ArtifactRemover + ?Sized> ArtifactRemover for Box<R> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn apply(&self, x: &ComplexImage) -> Result<ComplexImage> {
        (**self).apply(x)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl ArtifactRemover for Identity {
    fn name(&self) -> String {
        "identity".into()
    }

    fn apply(&self, x: &ComplexImage) -> Result<ComplexImage> {
        Ok(x.clone())
    }
}

/// `R(x) = a x`. A linear prior with closed-form RARE solutions; `a = 0` is the zero map.
#[derive(Clone, Copy, Debug)]
pub struct Scaling(pub f64);

impl ArtifactRemover for Scaling {
    fn name(&self) -> String {
        format!("scaling({})", self.0)
    }

    fn apply(&self, x: &ComplexImage) -> Result<ComplexImage> {
        Ok(x.scaled(self.0))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::param("tau", format!("must be positive, got {tau}")))
    }
}

/// `tau x - tau r` elementwise, given `r = R(x)`.
pub(crate) fn residual_from(x: &ComplexImage, rx: &ComplexImage, tau: f64) -> ComplexImage {
    let data = x
        .data()
        .iter()
        .zip(rx.data())
        .map(|(a, b)| a * tau - b * tau)
        .collect();
    ComplexImage::from_parts_unchecked(x.shape(), data)
}

/// `(tau/2) Re<x, x - r>`, given `r = R(x)`.
pub(crate) fn value_from(x: &ComplexImage, rx: &ComplexImage, tau: f64) -> f64 {
    let inner: f64 = x
        .data()
        .iter()
        .zip(rx.data())
        .map(|(a, b)| (a.conj() * (a - b)).re)
        .sum();
    0.5 * tau * inner
}

fn apply_checked(x: &ComplexImage, r: &dyn ArtifactRemover) -> Result<ComplexImage> {
    let rx = r.apply(x)?;
    rx.check_shape(x.shape())?;
    Ok(rx)
}

/// Gradient of the RED regularizer, `tau (x - R(x))`, assembled as `tau x - tau R(x)`.
pub fn red_residual(x: &ComplexImage, r: &dyn ArtifactRemover, tau: f64) -> Result<ComplexImage> {
    check_tau(tau)?;
    let rx = apply_checked(x, r)?;
    Ok(residual_from(x, &rx, tau))
}

/// Explicit RED regularizer `(tau/2) Re<x, x - R(x)>`.
pub fn red_value(x: &ComplexImage, r: &dyn ArtifactRemover, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let rx = apply_checked(x, r)?;
    Ok(value_from(x, &rx, tau))
}
