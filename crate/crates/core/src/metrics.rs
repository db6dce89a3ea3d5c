//! PSNR and SSIM on magnitude images, per phase and averaged.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ComplexImage;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseScores {
    pub per_phase: Vec<f64>,
    pub mean: f64,
}

impl PhaseScores {
    fn from_phases(per_phase: Vec<f64>) -> Self {
        let mean = per_phase.iter().sum::<f64>() / per_phase.len() as f64;
        Self { per_phase, mean }
    }
}

fn magnitudes(x: &ComplexImage, reference: &ComplexImage) -> Result<(Vec<f64>, Vec<f64>)> {
    reference.check_shape(x.shape())?;
    Ok((x.magnitude(), reference.magnitude()))
}

/// `10 log10(L^2 / MSE)` per phase with `L = max |ref|` over the volume.
/// Identical phases score `+inf`.
pub fn psnr(x: &ComplexImage, reference: &ComplexImage) -> Result<PhaseScores> {
    let (a, b) = magnitudes(x, reference)?;
    let peak = b.iter().fold(0.0f64, |m, v| m.max(*v));
    if !(peak > 0.0) {
        return Err(Error::ZeroEnergy);
    }
    let plane = x.shape().plane_len();
    let per_phase = a
        .chunks_exact(plane)
        .zip(b.chunks_exact(plane))
        .map(|(pa, pb)| {
            let mse = pa.iter().zip(pb).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / plane as f64;
            if mse == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (peak * peak / mse).log10()
            }
        })
        .collect();
    Ok(PhaseScores::from_phases(per_phase))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsimMode {
    /// 11x11 Gaussian windows (sigma 1.5) at every fully contained position.
    #[default]
    Windowed,
    /// One evaluation over the whole phase.
    Global,
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

pub(crate) fn gaussian_window() -> Vec<f64> {
    let h = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - h).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `ny x nx` plane.
fn filter_valid(img: &[f64], ny: usize, nx: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let (oy, ox) = (ny + 1 - k, nx + 1 - k);
    let mut rows = vec![0.0; ny * ox];
    for y in 0..ny {
        for x in 0..ox {
            rows[y * ox + x] = w.iter().enumerate().map(|(i, wi)| wi * img[y * nx + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oy * ox];
    for y in 0..oy {
        for x in 0..ox {
            out[y * ox + x] = w.iter().enumerate().map(|(i, wi)| wi * rows[(y + i) * ox + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], ny: usize, nx: usize, l: f64, mode: SsimMode) -> f64 {
    let (c1, c2) = ((SSIM_K1 * l).powi(2), (SSIM_K2 * l).powi(2));
    match mode {
        SsimMode::Global => {
            let n = a.len() as f64;
            let (mx, my) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let vx = a.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
            let vy = b.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            let cxy = a.iter().zip(b).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>() / n;
            ssim_formula(mx, my, vx, vy, cxy, c1, c2)
        }
        SsimMode::Windowed => {
            let w = gaussian_window();
            let sq = |v: &[f64]| v.iter().map(|t| t * t).collect::<Vec<_>>();
            let prod: Vec<f64> = a.iter().zip(b).map(|(u, v)| u * v).collect();
            let mx = filter_valid(a, ny, nx, &w);
            let my = filter_valid(b, ny, nx, &w);
            let xx = filter_valid(&sq(a), ny, nx, &w);
            let yy = filter_valid(&sq(b), ny, nx, &w);
            let xy = filter_valid(&prod, ny, nx, &w);
            let n = mx.len() as f64;
            (0..mx.len())
                .map(|i| {
                    let vx = xx[i] - mx[i] * mx[i];
                    let vy = yy[i] - my[i] * my[i];
                    let cxy = xy[i] - mx[i] * my[i];
                    ssim_formula(mx[i], my[i], vx, vy, cxy, c1, c2)
                })
                .sum::<f64>()
                / n
        }
    }
}

/// SSIM of magnitude images with dynamic range `L = max |ref|`.
pub fn ssim(x: &ComplexImage, reference: &ComplexImage, mode: SsimMode) -> Result<PhaseScores> {
    let peak = reference.max_magnitude();
    if !(peak > 0.0) {
        return Err(Error::ZeroEnergy);
    }
    ssim_with_range(x, reference, peak, mode)
}

/// SSIM with an explicit dynamic range `l`.
pub fn ssim_with_range(x: &ComplexImage, reference: &ComplexImage, l: f64, mode: SsimMode) -> Result<PhaseScores> {
    let (a, b) = magnitudes(x, reference)?;
    let s = x.shape();
    if mode == SsimMode::Windowed && (s.ny < SSIM_WINDOW || s.nx < SSIM_WINDOW) {
        return Err(Error::param("ssim", format!("windowed mode needs planes of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::param("l", "dynamic range must be positive"));
    }
    let plane = s.plane_len();
    let per_phase = a
        .chunks_exact(plane)
        .zip(b.chunks_exact(plane))
        .map(|(pa, pb)| ssim_plane(pa, pb, s.ny, s.nx, l, mode))
        .collect();
    Ok(PhaseScores::from_phases(per_phase))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    Groundtruth,
    /// Scores against a non-groundtruth reference are relative (rPSNR, rSSIM).
    Reference,
}

impl ReferenceKind {
    fn prefix(self) -> &'static str {
        match self {
            ReferenceKind::Groundtruth => "",
            ReferenceKind::Reference => "r",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub reference: ReferenceKind,
    pub psnr: PhaseScores,
    pub ssim: PhaseScores,
}

pub fn evaluate(method: &str, x: &ComplexImage, reference: &ComplexImage, kind: ReferenceKind) -> Result<MetricReport> {
    Ok(MetricReport {
        method: method.to_string(),
        reference: kind,
        psnr: psnr(x, reference)?,
        ssim: ssim(x, reference, SsimMode::Windowed)?,
    })
}

/// One evaluated image of a study.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub case: String,
    pub rate: f64,
    pub snr_db: Option<f64>,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub rate: f64,
    pub snr_db: Option<f64>,
    pub reference: ReferenceKind,
    pub cases: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean per-image scores grouped by `(rate, snr, method)`, in order of first appearance.
pub fn summarize(records: &[EvalRecord]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    for r in records {
        let found = rows.iter_mut().find(|row| {
            row.method == r.report.method && row.rate == r.rate && row.snr_db == r.snr_db && row.reference == r.report.reference
        });
        match found {
            Some(row) => {
                row.cases += 1;
                row.psnr += r.report.psnr.mean;
                row.ssim += r.report.ssim.mean;
            }
            None => rows.push(SummaryRow {
                method: r.report.method.clone(),
                rate: r.rate,
                snr_db: r.snr_db,
                reference: r.report.reference,
                cases: 1,
                psnr: r.report.psnr.mean,
                ssim: r.report.ssim.mean,
            }),
        }
    }
    for row in &mut rows {
        row.psnr /= row.cases as f64;
        row.ssim /= row.cases as f64;
    }
    rows
}

fn snr_label(snr: Option<f64>) -> String {
    snr.map(|s| format!("{s}")).unwrap_or_else(|| "inf".into())
}

fn metric_header(rows_kind: Option<ReferenceKind>) -> (String, String) {
    let p = rows_kind.map(ReferenceKind::prefix).unwrap_or("");
    (format!("{p}psnr_db"), format!("{p}ssim"))
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let (p, s) = metric_header(rows.first().map(|r| r.reference));
    let mut out = format!("method,rate,snr_db,cases,{p},{s}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.6},{:.6}", r.method, r.rate, snr_label(r.snr_db), r.cases, r.psnr, r.ssim);
    }
    out
}

/// Per-phase curves: one line per `(case, method, phase)`.
pub fn phase_curves_csv(records: &[EvalRecord]) -> String {
    let (p, s) = metric_header(records.first().map(|r| r.report.reference));
    let mut out = format!("case,method,rate,snr_db,phase,{p},{s}\n");
    for r in records {
        for (t, (a, b)) in r.report.psnr.per_phase.iter().zip(&r.report.ssim.per_phase).enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6}",
                r.case,
                r.report.method,
                r.rate,
                snr_label(r.snr_db),
                t,
                a,
                b
            );
        }
    }
    out
}

/// `factor * |x - ref|`, elementwise, as a real image.
pub fn residual_image(x: &ComplexImage, reference: &ComplexImage, factor: f64) -> Result<ComplexImage> {
    let (a, b) = magnitudes(x, reference)?;
    let values: Vec<f64> = a.iter().zip(&b).map(|(u, v)| factor * (u - v).abs()).collect();
    ComplexImage::from_real(x.shape(), &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_real(shape: Shape, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        ComplexImage::from_real(shape, &v).unwrap()
    }

    /// Windowed SSIM evaluated literally: explicit 2D weights at each position.
    fn ssim_oracle(a: &[f64], b: &[f64], n: usize, l: f64) -> f64 {
        let k = SSIM_WINDOW;
        let h = (k / 2) as f64;
        let mut w2 = vec![vec![0.0; k]; k];
        let mut total = 0.0;
        for (i, row) in w2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-(((i as f64 - h).powi(2) + (j as f64 - h).powi(2)) / (2.0 * 1.5 * 1.5))).exp();
                total += *v;
            }
        }
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let mut acc = 0.0;
        let mut count = 0.0;
        for y in 0..=n - k {
            for x in 0..=n - k {
                let at = |img: &[f64], i: usize, j: usize| img[(y + i) * n + x + j];
                let mut mx = 0.0;
                let mut my = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        mx += w2[i][j] / total * at(a, i, j);
                        my += w2[i][j] / total * at(b, i, j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = w2[i][j] / total;
                        vx += wt * (at(a, i, j) - mx).powi(2);
                        vy += wt * (at(b, i, j) - my).powi(2);
                        cxy += wt * (at(a, i, j) - mx) * (at(b, i, j) - my);
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let x = random_real(Shape::new(2, 4, 4), 0);
        let p = psnr(&x, &x).unwrap();
        assert!(p.per_phase.iter().all(|v| v.is_infinite()) && p.mean.is_infinite());
    }

    #[test]
    fn psnr_arithmetic() {
        let shape = Shape::plane(10, 10);
        let mut r = vec![0.5; 100];
        r[0] = 1.0;
        let reference = ComplexImage::from_real(shape, &r).unwrap();
        // MSE 1e-3: every pixel off by sqrt(1e-3).
        let d = 1e-3f64.sqrt();
        let x = ComplexImage::from_real(shape, &r.iter().map(|v| v + d).collect::<Vec<_>>()).unwrap();
        assert!((psnr(&x, &reference).unwrap().mean - 30.0).abs() < 1e-10);
    }

    #[test]
    fn psnr_matches_two_pass_oracle() {
        let shape = Shape::new(3, 8, 8);
        let (x, r) = (random_real(shape, 1), random_real(shape, 2));
        let got = psnr(&x, &r).unwrap();
        let peak = r.magnitude().into_iter().fold(0.0, f64::max);
        for p in 0..3 {
            let mse: f64 = x.phase(p).iter().zip(r.phase(p)).map(|(a, b)| (a.norm() - b.norm()).powi(2)).sum::<f64>() / 64.0;
            assert!((got.per_phase[p] - 10.0 * (peak * peak / mse).log10()).abs() < 1e-10);
        }
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let x = random_real(Shape::new(2, 16, 16), 3);
        for mode in [SsimMode::Windowed, SsimMode::Global] {
            let s = ssim(&x, &x, mode).unwrap();
            assert!((s.mean - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn ssim_matches_literal_window_oracle() {
        let shape = Shape::plane(16, 16);
        let (x, r) = (random_real(shape, 4), random_real(shape, 5));
        let l = r.max_magnitude();
        let got = ssim(&x, &r, SsimMode::Windowed).unwrap().mean;
        let want = ssim_oracle(&x.magnitude(), &r.magnitude(), 16, l);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn ssim_of_constant_shift_on_constant_images() {
        let shape = Shape::plane(12, 12);
        let (a, b) = (0.4, 0.7);
        let x = ComplexImage::from_real(shape, &[a; 144]).unwrap();
        let r = ComplexImage::from_real(shape, &[b; 144]).unwrap();
        let c1 = (0.01f64 * b).powi(2);
        let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
        for mode in [SsimMode::Windowed, SsimMode::Global] {
            assert!((ssim(&x, &r, mode).unwrap().mean - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_is_symmetric_with_fixed_range() {
        let shape = Shape::new(2, 14, 13);
        let (x, r) = (random_real(shape, 6), random_real(shape, 7));
        let a = ssim_with_range(&x, &r, 1.0, SsimMode::Windowed).unwrap();
        let b = ssim_with_range(&r, &x, 1.0, SsimMode::Windowed).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-14);
    }

    #[test]
    fn noise_ordering() {
        let shape = Shape::new(1, 16, 16);
        let r = random_real(shape, 8);
        let mut last = f64::INFINITY;
        for level in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let mut total = 0.0;
            for seed in 0..10 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data = r.data().iter().map(|v| v + Complex64::new(level * rng.gen_range(-1.0..1.0), 0.0)).collect();
                total += psnr(&ComplexImage::new(shape, data).unwrap(), &r).unwrap().mean;
            }
            assert!(total / 10.0 < last);
            last = total / 10.0;
        }
    }

    #[test]
    fn summary_means_match_recomputation() {
        let shape = Shape::new(1, 12, 12);
        let r = random_real(shape, 9);
        let mut records = Vec::new();
        for (i, m) in ["a", "b", "a", "b"].iter().enumerate() {
            let x = random_real(shape, 20 + i as u64);
            records.push(EvalRecord {
                case: format!("c{}", i / 2),
                rate: 0.1,
                snr_db: Some(30.0),
                report: evaluate(m, &x, &r, ReferenceKind::Groundtruth).unwrap(),
            });
        }
        let rows = summarize(&records);
        assert_eq!(rows.len(), 2);
        let a_mean = (records[0].report.psnr.mean + records[2].report.psnr.mean) / 2.0;
        assert!((rows[0].psnr - a_mean).abs() < 1e-12);
        assert_eq!(rows[0].cases, 2);
        let csv = summary_csv(&rows);
        assert!(csv.starts_with("method,rate,snr_db,cases,psnr_db,ssim\n"));
    }

    #[test]
    fn exact_method_ranks_first() {
        let shape = Shape::new(1, 12, 12);
        let r = random_real(shape, 10);
        let noisy = r.add(&random_real(shape, 11).scaled(0.1));
        let a = evaluate("exact", &r, &r, ReferenceKind::Groundtruth).unwrap();
        let b = evaluate("noisy", &noisy, &r, ReferenceKind::Groundtruth).unwrap();
        assert!(a.psnr.mean > b.psnr.mean && a.ssim.mean > b.ssim.mean);
        assert_eq!(a.ssim.mean, 1.0);
    }

    #[test]
    fn residual_scaling() {
        let shape = Shape::plane(4, 4);
        let (x, r) = (random_real(shape, 12), random_real(shape, 13));
        let raw = residual_image(&x, &r, 1.0).unwrap().max_magnitude();
        let big = residual_image(&x, &r, 10.0).unwrap().max_magnitude();
        assert!((big - 10.0 * raw).abs() < 1e-12);
    }
}
