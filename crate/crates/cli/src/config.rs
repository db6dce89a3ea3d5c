//! Experiment configuration (TOML, versioned schema).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rare_core::operators::{FourierMode, GriddingParams};
use rare_core::priors::{NetConfig, TvParams};
use rare_core::simulation::AngleScheme;
use rare_core::solver::SolverConfig;
use rare_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Zf,
    CsTv,
    RareA2a,
    RedDenoiser,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Zf, Method::CsTv, Method::RareA2a, Method::RedDenoiser];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Zf => "zf",
            Method::CsTv => "cs-tv",
            Method::RareA2a => "rare-a2a",
            Method::RedDenoiser => "red-denoiser",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| anyhow!("unknown method `{s}` (expected one of zf, cs-tv, rare-a2a, red-denoiser)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub size: usize,
    pub phases: usize,
    /// Objects used only for training.
    pub train_objects: usize,
    /// Held-out objects, one test case per object and cell.
    pub test_objects: usize,
    pub supersample: usize,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            size: 64,
            phases: 10,
            train_objects: 4,
            test_objects: 2,
            supersample: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FourierChoice {
    Direct,
    Gridding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionSection {
    pub coils: usize,
    pub fourier: FourierChoice,
    /// Samples per spoke; the grid size when unset.
    pub readout: Option<usize>,
    pub scheme: AngleScheme,
    /// Sampling rate of the training acquisitions.
    pub train_rate: f64,
    /// Acquisitions per training object.
    pub train_acquisitions: usize,
    /// Input SNR of the training acquisitions; `inf` is noiseless.
    pub train_snr_db: f64,
}

impl Default for AcquisitionSection {
    fn default() -> Self {
        Self {
            coils: 1,
            fourier: FourierChoice::Direct,
            readout: None,
            scheme: AngleScheme::GoldenAngle,
            train_rate: 0.4,
            train_acquisitions: 2,
            train_snr_db: 30.0,
        }
    }
}

impl AcquisitionSection {
    pub fn fourier_mode(&self) -> FourierMode {
        match self.fourier {
            FourierChoice::Direct => FourierMode::Direct,
            FourierChoice::Gridding => FourierMode::Gridding(GriddingParams::default()),
        }
    }
}

/// One (sampling rate, input SNR) cell of the study table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub rate: f64,
    /// `inf` is noiseless.
    pub snr_db: f64,
}

impl Cell {
    pub fn snr(&self) -> Option<f64> {
        self.snr_db.is_finite().then_some(self.snr_db)
    }
}

fn default_cells() -> Vec<Cell> {
    let mut cells = Vec::new();
    for rate in [0.10, 0.15, 0.20] {
        for snr_db in [30.0, 40.0] {
            cells.push(Cell { rate, snr_db });
        }
    }
    cells
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

/// Candidate values searched per test case; the best-PSNR value is kept.
/// An empty list falls back to the single value in `solver` or `tv`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub tau: Vec<f64>,
    pub lambda: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    /// AWGN standard deviations, one network per value.
    pub sigmas: Vec<f64>,
    /// Overrides `training` for the denoisers when set.
    pub training: Option<TrainConfig>,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            sigmas: vec![0.01, 0.03, 0.05, 0.1],
            training: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Magnification of exported residual images.
    pub residual_factor: f64,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { residual_factor: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_cells")]
    pub cells: Vec<Cell>,
    #[serde(default)]
    pub phantom: PhantomSection,
    #[serde(default)]
    pub acquisition: AcquisitionSection,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub tv: TvParams,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub network: NetConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub denoiser: DenoiserSection,
    #[serde(default)]
    pub report: ReportSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out: None,
            methods: default_methods(),
            cells: default_cells(),
            phantom: PhantomSection::default(),
            acquisition: AcquisitionSection::default(),
            solver: SolverConfig::default(),
            tv: TvParams::default(),
            grid: GridSection::default(),
            network: NetConfig::default(),
            training: TrainConfig::default(),
            denoiser: DenoiserSection::default(),
            report: ReportSection::default(),
        }
    }
}

fn field(path: &str, ok: bool, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        bail!("{path}: {reason}")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn readout(&self) -> usize {
        self.acquisition.readout.unwrap_or(self.phantom.size)
    }

    pub fn validate(&self) -> Result<()> {
        field(
            "schema_version",
            self.schema_version == SCHEMA_VERSION,
            &format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
        )?;
        field("methods", !self.methods.is_empty(), "must list at least one method")?;
        for (i, m) in self.methods.iter().enumerate() {
            field("methods", !self.methods[..i].contains(m), &format!("`{m}` listed twice"))?;
        }
        field("cells", !self.cells.is_empty(), "must list at least one (rate, snr_db) cell")?;
        for (i, c) in self.cells.iter().enumerate() {
            field(&format!("cells[{i}].rate"), c.rate > 0.0 && c.rate <= 1.0, "must lie in (0, 1]")?;
            field(&format!("cells[{i}].snr_db"), !c.snr_db.is_nan() && c.snr_db > f64::NEG_INFINITY, "must be a number or inf")?;
        }
        let p = &self.phantom;
        field("phantom.size", p.size >= 8, "must be >= 8")?;
        field("phantom.phases", p.phases >= 1, "must be >= 1")?;
        field("phantom.test_objects", p.test_objects >= 1, "must be >= 1")?;
        field("phantom.supersample", p.supersample >= 1, "must be >= 1")?;
        let a = &self.acquisition;
        field("acquisition.coils", a.coils >= 1, "must be >= 1")?;
        field("acquisition.readout", self.readout() >= 2, "must be >= 2")?;
        field("acquisition.train_rate", a.train_rate > 0.0 && a.train_rate <= 1.0, "must lie in (0, 1]")?;
        field("acquisition.train_snr_db", !a.train_snr_db.is_nan(), "must be a number or inf")?;
        let needs_a2a = self.methods.contains(&Method::RareA2a);
        let needs_clean = self.methods.contains(&Method::RedDenoiser);
        if needs_a2a {
            field("phantom.train_objects", p.train_objects >= 1, "rare-a2a needs at least one training object")?;
            field("acquisition.train_acquisitions", a.train_acquisitions >= 2, "rare-a2a needs >= 2 acquisitions per object")?;
        }
        if needs_clean {
            field("phantom.train_objects", p.train_objects >= 1, "red-denoiser needs at least one training object")?;
            field("denoiser.sigmas", !self.denoiser.sigmas.is_empty(), "must list at least one sigma")?;
            for s in &self.denoiser.sigmas {
                field("denoiser.sigmas", *s > 0.0 && s.is_finite(), "must be positive")?;
            }
        }
        for t in &self.grid.tau {
            field("grid.tau", *t > 0.0 && t.is_finite(), "must be positive")?;
        }
        for l in &self.grid.lambda {
            field("grid.lambda", *l >= 0.0 && l.is_finite(), "must be >= 0")?;
        }
        field(
            "report.residual_factor",
            self.report.residual_factor > 0.0 && self.report.residual_factor.is_finite(),
            "must be positive",
        )?;
        self.solver.validate().context("solver")?;
        self.tv.validate().context("tv")?;
        self.network.validate().context("network")?;
        self.training.validate().context("training")?;
        if let Some(t) = &self.denoiser.training {
            t.validate().context("denoiser.training")?;
        }
        Ok(())
    }

    pub fn taus(&self) -> Vec<f64> {
        if self.grid.tau.is_empty() {
            vec![self.solver.tau]
        } else {
            self.grid.tau.clone()
        }
    }

    pub fn lambdas(&self) -> Vec<f64> {
        if self.grid.lambda.is_empty() {
            vec![self.tv.lambda]
        } else {
            self.grid.lambda.clone()
        }
    }

    pub fn denoiser_training(&self) -> &TrainConfig {
        self.denoiser.training.as_ref().unwrap_or(&self.training)
    }

    /// Applies a `--grid` override such as `tau=0.1,0.3,1` or `lambda=0.01,0.02`.
    pub fn apply_grid(&mut self, spec: &str) -> Result<()> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--grid `{spec}`: expected NAME=V1,V2,..."))?;
        let values = values
            .split(',')
            .filter(|v| !v.trim().is_empty())
            .map(|v| v.trim().parse::<f64>().with_context(|| format!("--grid `{spec}`: bad number `{v}`")))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            bail!("--grid `{spec}`: no values");
        }
        match key.trim() {
            "tau" => self.grid.tau = values,
            "lambda" => self.grid.lambda = values,
            other => bail!("--grid: unknown parameter `{other}` (expected tau or lambda)"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::parse("schema_version = 1\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.cells.len(), 6);
    }

    #[test]
    fn roundtrip_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.cells.push(Cell { rate: 0.5, snr_db: f64::INFINITY });
        let back = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.cells.last().unwrap().snr(), None);
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::parse("schema_version = 2\n").unwrap_err();
        assert!(format!("{e:#}").contains("schema_version"));
        let e = ExperimentConfig::parse("schema_version = 1\n[phantom]\nsize = 4\n").unwrap_err();
        assert!(format!("{e:#}").contains("phantom.size"));
        let e = ExperimentConfig::parse("schema_version = 1\nmethods = []\n").unwrap_err();
        assert!(format!("{e:#}").contains("methods"));
        let e = ExperimentConfig::parse("schema_version = 1\n[solver]\ntau = -1.0\n").unwrap_err();
        assert!(format!("{e:#}").contains("solver"));
        let e = ExperimentConfig::parse("schema_version = 1\n[phantom]\nsise = 4\n").unwrap_err();
        assert!(format!("{e:#}").contains("sise"));
    }

    #[test]
    fn grid_override() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_grid("tau=0.1, 0.3,1").unwrap();
        cfg.apply_grid("lambda=0.02").unwrap();
        assert_eq!(cfg.taus(), vec![0.1, 0.3, 1.0]);
        assert_eq!(cfg.lambdas(), vec![0.02]);
        assert!(cfg.apply_grid("mu=1").is_err());
        assert!(cfg.apply_grid("tau=").is_err());
        assert!(cfg.apply_grid("tau=x").is_err());
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("rare".parse::<Method>().is_err());
    }
}
