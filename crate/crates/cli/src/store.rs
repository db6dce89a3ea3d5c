//! Run directory layout, manifests and digests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rare_core::io::{self, Dtype};
use rare_core::simulation::AcquisitionConfig;
use rare_core::{ComplexImage, KSpaceData};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Method;

pub const MANIFEST_VERSION: u32 = 1;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

/// Digest of the canonical TOML form of a value.
pub fn digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_bytes(toml::to_string(value)?.as_bytes()))
}

/// Paths inside one run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn abs(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config(&self) -> PathBuf {
        self.abs("config.toml")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.abs("data/manifest.toml")
    }

    pub fn a2a_weights() -> &'static str {
        "weights/a2a.rw"
    }

    pub fn denoiser_weights(index: usize) -> String {
        format!("weights/denoiser-{index}.rw")
    }

    pub fn weights_manifest(&self) -> PathBuf {
        self.abs("weights/manifest.toml")
    }

    pub fn recon_dir(case: &str) -> String {
        format!("recon/{case}")
    }

    pub fn recon_image(case: &str, method: Method) -> String {
        format!("recon/{case}/{method}.cimg")
    }

    pub fn recon_record(&self, case: &str, method: Method) -> PathBuf {
        self.abs(&format!("recon/{case}/{method}.toml"))
    }

    pub fn results_dir(&self) -> PathBuf {
        self.abs("results")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.abs("report")
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).with_context(|| format!("serializing {}", path.display()))?;
    write_text(path, &text)
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes a complex128 image and returns the payload digest.
pub fn store_image(layout: &Layout, rel: &str, image: &ComplexImage) -> Result<String> {
    let path = layout.abs(rel);
    ensure_parent(&path)?;
    io::write_image(&path, image, Dtype::Complex128).with_context(|| format!("writing {}", path.display()))?;
    sha256_file(&path)
}

pub fn store_kspace(layout: &Layout, rel: &str, data: &KSpaceData) -> Result<String> {
    let path = layout.abs(rel);
    ensure_parent(&path)?;
    io::write_kspace(&path, data, Dtype::Complex128).with_context(|| format!("writing {}", path.display()))?;
    sha256_file(&path)
}

/// Reads an image after checking its payload digest.
pub fn load_image(layout: &Layout, rel: &str, sha256: &str) -> Result<ComplexImage> {
    let path = layout.abs(rel);
    verify(&path, sha256)?;
    io::read_image(&path).with_context(|| format!("reading {}", path.display()))
}

pub fn load_kspace(layout: &Layout, rel: &str, sha256: &str) -> Result<KSpaceData> {
    let path = layout.abs(rel);
    verify(&path, sha256)?;
    io::read_kspace(&path).with_context(|| format!("reading {}", path.display()))
}

pub fn verify(path: &Path, sha256: &str) -> Result<()> {
    let actual = sha256_file(path)?;
    if actual != sha256 {
        bail!("{}: digest mismatch (manifest {sha256}, file {actual})", path.display());
    }
    Ok(())
}

/// True when every `(path, digest)` exists and matches.
pub fn all_match(layout: &Layout, files: &[(&str, &str)]) -> bool {
    files
        .iter()
        .all(|(rel, sha)| sha256_file(&layout.abs(rel)).map(|d| d == *sha).unwrap_or(false))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: usize,
    pub role: Role,
    pub phantom_seed: u64,
    pub truth: String,
    pub truth_sha256: String,
}

/// One pseudoinverse image of a training object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionEntry {
    pub object: usize,
    pub acquisition: usize,
    pub config_digest: String,
    pub config: AcquisitionConfig,
    pub image: String,
    pub sha256: String,
}

/// One held-out measurement to reconstruct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub name: String,
    pub object: usize,
    pub rate: f64,
    pub snr_db: f64,
    pub config_digest: String,
    pub config: AcquisitionConfig,
    pub kspace: String,
    pub kspace_sha256: String,
    pub zf: String,
    pub zf_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub manifest_version: u32,
    /// Digest of the configuration sections that determine the dataset.
    pub config_digest: String,
    pub dims: [usize; 3],
    pub coils: usize,
    pub coil_seed: u64,
    pub objects: Vec<ObjectEntry>,
    pub acquisitions: Vec<AcquisitionEntry>,
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    pub fn object(&self, id: usize) -> Result<&ObjectEntry> {
        match self.objects.iter().find(|o| o.id == id) {
            Some(o) => Ok(o),
            None => bail!("manifest lists no object {id}"),
        }
    }

    /// Every file the manifest points at, with its digest.
    pub fn files(&self) -> Vec<(&str, &str)> {
        let mut out: Vec<(&str, &str)> = self.objects.iter().map(|o| (o.truth.as_str(), o.truth_sha256.as_str())).collect();
        out.extend(self.acquisitions.iter().map(|a| (a.image.as_str(), a.sha256.as_str())));
        for c in &self.cases {
            out.push((c.kspace.as_str(), c.kspace_sha256.as_str()));
            out.push((c.zf.as_str(), c.zf_sha256.as_str()));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsEntry {
    pub kind: String,
    /// AWGN level for denoisers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Digest of the dataset, network and training settings that produced the file.
    pub inputs_digest: String,
    pub path: String,
    pub sha256: String,
    pub loss: String,
    pub loss_sha256: String,
    pub final_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub manifest_version: u32,
    pub weights: Vec<WeightsEntry>,
}

impl WeightsManifest {
    pub fn find(&self, kind: &str) -> Vec<&WeightsEntry> {
        self.weights.iter().filter(|w| w.kind == kind).collect()
    }
}

/// Score of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub parameter: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Mean PSNR, `NaN` when the solve failed.
    pub psnr_db: f64,
    pub termination: String,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRecord {
    pub case: String,
    pub method: Method,
    pub inputs_digest: String,
    /// `ok` or `failed`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<GridPoint>,
    #[serde(default)]
    pub grid: Vec<GridPoint>,
    #[serde(default)]
    pub image: String,
    #[serde(default)]
    pub sha256: String,
    #[serde(default)]
    pub trace: String,
    #[serde(default)]
    pub trace_sha256: String,
}

impl ReconRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}
