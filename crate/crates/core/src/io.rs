//! On-disk format for images and k-space data.
//!
//! Each array is a raw little-endian payload of interleaved `(re, im)` pairs
//! plus a sidecar text header at `<payload>.hdr`:
//!
//! ```text
//! format_version = 1
//! kind = "image"
//! dims = [10, 64, 64]
//! axes = ["phase", "y", "x"]
//! dtype = "complex128"
//! endianness = "little"
//! ```
//!
//! k-space files use `kind = "kspace"`, `dims = [phases, coils]`,
//! `axes = ["phase", "coil", "sample"]` and list `samples_per_phase`.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ComplexImage, KSpaceData, Shape};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Complex64,
    Complex128,
}

impl Dtype {
    fn bytes_per_sample(self) -> usize {
        match self {
            Dtype::Complex64 => 8,
            Dtype::Complex128 => 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    dims: Vec<usize>,
    axes: Vec<String>,
    dtype: Dtype,
    endianness: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    samples_per_phase: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    snr_db: Option<f64>,
}

/// Sidecar header path for a payload path.
pub fn header_path(payload: &Path) -> PathBuf {
    let mut name = payload.as_os_str().to_owned();
    name.push(".hdr");
    PathBuf::from(name)
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn encode(values: &[Complex64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.bytes_per_sample());
    for z in values {
        match dtype {
            Dtype::Complex64 => {
                out.extend_from_slice(&(z.re as f32).to_le_bytes());
                out.extend_from_slice(&(z.im as f32).to_le_bytes());
            }
            Dtype::Complex128 => {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }
        }
    }
    out
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<Complex64> {
    match dtype {
        Dtype::Complex64 => bytes
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes(c[0..4].try_into().unwrap());
                let im = f32::from_le_bytes(c[4..8].try_into().unwrap());
                Complex64::new(re as f64, im as f64)
            })
            .collect(),
        Dtype::Complex128 => bytes
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[0..8].try_into().unwrap());
                let im = f64::from_le_bytes(c[8..16].try_into().unwrap());
                Complex64::new(re, im)
            })
            .collect(),
    }
}

fn write_pair(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let text = toml::to_string(header).map_err(|e| format_err(path, e.to_string()))?;
    fs::write(header_path(path), text)?;
    fs::write(path, payload)?;
    Ok(())
}

fn read_pair(path: &Path) -> Result<(Header, Vec<u8>)> {
    let hdr_path = header_path(path);
    let text = fs::read_to_string(&hdr_path)?;
    let header: Header = toml::from_str(&text).map_err(|e| format_err(&hdr_path, e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format_err(
            &hdr_path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    if header.endianness != "little" {
        return Err(format_err(&hdr_path, "only little-endian payloads are supported"));
    }
    let payload = fs::read(path)?;
    Ok((header, payload))
}

pub fn write_image(path: &Path, image: &ComplexImage, dtype: Dtype) -> Result<()> {
    let s = image.shape();
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "image".into(),
        dims: vec![s.phases, s.ny, s.nx],
        axes: vec!["phase".into(), "y".into(), "x".into()],
        dtype,
        endianness: "little".into(),
        samples_per_phase: Vec::new(),
        snr_db: None,
    };
    write_pair(path, &header, &encode(image.data(), dtype))
}

pub fn read_image(path: &Path) -> Result<ComplexImage> {
    let (header, payload) = read_pair(path)?;
    if header.kind != "image" || header.dims.len() != 3 {
        return Err(format_err(path, "not a 3-axis image file"));
    }
    let shape = Shape::new(header.dims[0], header.dims[1], header.dims[2]);
    if payload.len() != shape.len() * header.dtype.bytes_per_sample() {
        return Err(format_err(path, "payload size does not match header dims"));
    }
    ComplexImage::new(shape, decode(&payload, header.dtype))
}

pub fn write_kspace(path: &Path, data: &KSpaceData, dtype: Dtype) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "kspace".into(),
        dims: vec![data.n_phases(), data.n_coils()],
        axes: vec!["phase".into(), "coil".into(), "sample".into()],
        dtype,
        endianness: "little".into(),
        samples_per_phase: data.samples_per_phase(),
        snr_db: data.snr_db,
    };
    let flat: Vec<Complex64> = data.iter().copied().collect();
    write_pair(path, &header, &encode(&flat, dtype))
}

pub fn read_kspace(path: &Path) -> Result<KSpaceData> {
    let (header, payload) = read_pair(path)?;
    if header.kind != "kspace" || header.dims.len() != 2 {
        return Err(format_err(path, "not a k-space file"));
    }
    let (phases, coils) = (header.dims[0], header.dims[1]);
    if header.samples_per_phase.len() != phases {
        return Err(format_err(path, "samples_per_phase does not match phase count"));
    }
    let total: usize = header.samples_per_phase.iter().sum::<usize>() * coils;
    if payload.len() != total * header.dtype.bytes_per_sample() {
        return Err(format_err(path, "payload size does not match header"));
    }
    let flat = decode(&payload, header.dtype);
    let mut samples = Vec::with_capacity(phases * coils);
    let mut offset = 0;
    for &m in &header.samples_per_phase {
        for _ in 0..coils {
            samples.push(flat[offset..offset + m].to_vec());
            offset += m;
        }
    }
    let mut data = KSpaceData::new(coils, samples)?;
    data.snr_db = header.snr_db;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_roundtrip_is_exact_in_complex128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cplx");
        let data: Vec<_> = (0..24)
            .map(|i| Complex64::new(i as f64 * 0.1, -(i as f64).sqrt()))
            .collect();
        let image = ComplexImage::new(Shape::new(2, 3, 4), data).unwrap();
        write_image(&path, &image, Dtype::Complex128).unwrap();
        assert_eq!(read_image(&path).unwrap(), image);

        let header = fs::read_to_string(header_path(&path)).unwrap();
        assert!(header.contains("endianness = \"little\""));
        assert!(header.contains("dims = [2, 3, 4]"));
    }

    #[test]
    fn complex64_payload_rounds_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cplx");
        let image = ComplexImage::new(Shape::plane(1, 2), vec![Complex64::new(0.1, 0.2); 2]).unwrap();
        write_image(&path, &image, Dtype::Complex64).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 16);
        let back = read_image(&path).unwrap();
        assert_eq!(back.data()[0].re, 0.1f32 as f64);
    }

    #[test]
    fn kspace_roundtrip_keeps_layout_and_snr() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.ksp");
        let mut data = KSpaceData::zeros(2, &[3, 5]);
        for (i, z) in data.iter_mut().enumerate() {
            *z = Complex64::new(i as f64, 1.0);
        }
        data.snr_db = Some(30.0);
        write_kspace(&path, &data, Dtype::Complex128).unwrap();
        let back = read_kspace(&path).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cplx");
        let image = ComplexImage::zeros(Shape::plane(2, 2));
        write_image(&path, &image, Dtype::Complex128).unwrap();
        fs::write(&path, [0u8; 10]).unwrap();
        assert!(matches!(read_image(&path), Err(Error::Format { .. })));
    }
}
