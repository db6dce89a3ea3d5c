//! The five pipeline stages. Each stage reads what earlier stages wrote under
//! the run directory and records digests of its inputs, so `resume` can skip
//! work whose inputs are unchanged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rare_core::metrics::{self, EvalRecord, ReferenceKind, SummaryRow};
use rare_core::operators::{CoilMaps, MeasurementOperator};
use rare_core::priors::{ArtifactRemover, NetWeights, TvParams};
use rare_core::simulation::{
    make_phantom, radial_pattern, simulate_acquisition, synth_coil_maps, training_acquisition, AcquisitionConfig,
    PhantomConfig,
};
use rare_core::solver::{fista_tv_solve, rare_solve, ReconReport, SolverConfig};
use rare_core::training::{awgn_pairs, build_pairs, train, TrainConfig};
use rare_core::{ComplexImage, Shape};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{AcquisitionSection, Cell, ExperimentConfig, Method, PhantomSection};
use crate::store::{
    all_match, digest, load_image, load_kspace, read_toml, sha256_file, store_image, store_kspace, write_text,
    write_toml, AcquisitionEntry, CaseEntry, DatasetManifest, GridPoint, Layout, ObjectEntry, ReconRecord, Role,
    WeightsEntry, WeightsManifest, MANIFEST_VERSION,
};

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Skip stages whose recorded input digests and output files still match.
    pub resume: bool,
    /// Suppress progress lines on stdout.
    pub quiet: bool,
}

impl RunOptions {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for stream `stream`, item `index` of a run. Kept to 63
/// bits so it survives TOML's signed integers.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(stream.wrapping_mul(0x1_0000_0001) ^ splitmix(index))) >> 1
}

#[derive(Serialize)]
struct DatasetInputs<'a> {
    seed: u64,
    phantom: &'a PhantomSection,
    acquisition: &'a AcquisitionSection,
    cells: &'a [Cell],
}

fn snr_label(snr_db: f64) -> String {
    if snr_db.is_finite() {
        format!("{snr_db}")
    } else {
        "inf".into()
    }
}

struct ObjectOutput {
    object: ObjectEntry,
    acquisitions: Vec<AcquisitionEntry>,
    cases: Vec<(usize, CaseEntry)>,
}

fn simulate_object(
    cfg: &ExperimentConfig,
    layout: &Layout,
    coils: &CoilMaps,
    id: usize,
    role: Role,
) -> Result<ObjectOutput> {
    let p = &cfg.phantom;
    let a = &cfg.acquisition;
    let readout = cfg.readout();
    let phantom_seed = derive_seed(cfg.seed, 2, id as u64);
    let phantom = PhantomConfig {
        supersample: p.supersample,
        ..PhantomConfig::random(p.size, p.phases, phantom_seed)
    };
    let truth = make_phantom(&phantom)?;
    let dir = format!("data/obj{id}");
    let truth_rel = format!("{dir}/truth.cimg");
    let truth_sha256 = store_image(layout, &truth_rel, &truth)?;
    let mode = a.fourier_mode();
    let mut acquisitions = Vec::new();
    let mut cases = Vec::new();
    match role {
        Role::Train => {
            let base = AcquisitionConfig {
                spokes: AcquisitionConfig::spokes_for_rate(a.train_rate, p.size, readout),
                readout,
                scheme: a.scheme,
                rotation: 0,
                snr_db: a.train_snr_db.is_finite().then_some(a.train_snr_db),
                seed: 0,
            };
            let noise_seed = derive_seed(cfg.seed, 3, 0);
            for i in 0..a.train_acquisitions {
                let mut acq = training_acquisition(&base, p.phases, id, i, noise_seed);
                acq.seed &= i64::MAX as u64;
                let sim = simulate_acquisition(&truth, &acq, coils, mode)?;
                let rel = format!("{dir}/acq{i}.cimg");
                let sha256 = store_image(layout, &rel, &sim.pseudoinverse)?;
                acquisitions.push(AcquisitionEntry {
                    object: id,
                    acquisition: i,
                    config_digest: digest(&acq)?,
                    config: acq,
                    image: rel,
                    sha256,
                });
            }
        }
        Role::Test => {
            for (ci, cell) in cfg.cells.iter().enumerate() {
                let acq = AcquisitionConfig {
                    spokes: AcquisitionConfig::spokes_for_rate(cell.rate, p.size, readout),
                    readout,
                    scheme: a.scheme,
                    rotation: 0,
                    snr_db: cell.snr(),
                    seed: derive_seed(cfg.seed, 4, (id * cfg.cells.len() + ci) as u64),
                };
                let sim = simulate_acquisition(&truth, &acq, coils, mode)?;
                let name = format!("cell{ci}-obj{id}");
                let kspace = format!("data/cases/{name}/y.ksp");
                let zf = format!("data/cases/{name}/zf.cimg");
                let kspace_sha256 = store_kspace(layout, &kspace, &sim.data)?;
                let zf_sha256 = store_image(layout, &zf, &sim.pseudoinverse)?;
                cases.push((
                    ci,
                    CaseEntry {
                        name,
                        object: id,
                        rate: cell.rate,
                        snr_db: cell.snr_db,
                        config_digest: digest(&acq)?,
                        config: acq,
                        kspace,
                        kspace_sha256,
                        zf,
                        zf_sha256,
                    },
                ));
            }
        }
    }
    Ok(ObjectOutput {
        object: ObjectEntry {
            id,
            role,
            phantom_seed,
            truth: truth_rel,
            truth_sha256,
        },
        acquisitions,
        cases,
    })
}

/// Phantoms, training acquisitions and test measurements.
pub fn simulate(cfg: &ExperimentConfig, layout: &Layout, opts: RunOptions) -> Result<DatasetManifest> {
    let config_digest = digest(&DatasetInputs {
        seed: cfg.seed,
        phantom: &cfg.phantom,
        acquisition: &cfg.acquisition,
        cells: &cfg.cells,
    })?;
    let manifest_path = layout.dataset_manifest();
    if opts.resume && manifest_path.exists() {
        if let Ok(m) = read_toml::<DatasetManifest>(&manifest_path) {
            if m.config_digest == config_digest && all_match(layout, &m.files()) {
                opts.say("simulate: dataset up to date");
                return Ok(m);
            }
        }
    }
    write_toml(&layout.config(), cfg)?;
    let p = &cfg.phantom;
    let coil_seed = derive_seed(cfg.seed, 1, 0);
    let coils = synth_coil_maps(cfg.acquisition.coils, p.size, p.size, coil_seed)?;
    let roles: Vec<(usize, Role)> = (0..p.train_objects)
        .map(|i| (i, Role::Train))
        .chain((0..p.test_objects).map(|i| (p.train_objects + i, Role::Test)))
        .collect();
    let outputs = roles
        .par_iter()
        .map(|&(id, role)| simulate_object(cfg, layout, &coils, id, role))
        .collect::<Result<Vec<_>>>()?;
    let mut objects = Vec::new();
    let mut acquisitions = Vec::new();
    let mut cases = Vec::new();
    for o in outputs {
        objects.push(o.object);
        acquisitions.extend(o.acquisitions);
        cases.extend(o.cases);
    }
    cases.sort_by_key(|(ci, c)| (*ci, c.object));
    let manifest = DatasetManifest {
        manifest_version: MANIFEST_VERSION,
        config_digest,
        dims: [p.phases, p.size, p.size],
        coils: cfg.acquisition.coils,
        coil_seed,
        objects,
        acquisitions,
        cases: cases.into_iter().map(|(_, c)| c).collect(),
    };
    write_toml(&manifest_path, &manifest)?;
    opts.say(format!(
        "simulate: {} objects, {} training images, {} test cases -> {}",
        manifest.objects.len(),
        manifest.acquisitions.len(),
        manifest.cases.len(),
        manifest_path.display()
    ));
    Ok(manifest)
}

pub fn load_dataset(layout: &Layout) -> Result<DatasetManifest> {
    let path = layout.dataset_manifest();
    if !path.exists() {
        bail!("no dataset manifest at {}; run `rare simulate` first", path.display());
    }
    let m: DatasetManifest = read_toml(&path)?;
    if m.manifest_version != MANIFEST_VERSION {
        bail!("{}: unsupported manifest_version {}", path.display(), m.manifest_version);
    }
    Ok(m)
}

fn check_dataset_matches(cfg: &ExperimentConfig, m: &DatasetManifest) -> Result<()> {
    let expected = [cfg.phantom.phases, cfg.phantom.size, cfg.phantom.size];
    if m.dims != expected {
        bail!("dataset dims {:?} do not match the configured {:?}; rerun `rare simulate`", m.dims, expected);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainKind {
    /// Pairs of pseudoinverse images of the same object.
    A2a,
    /// AWGN-corrupted groundtruth against clean targets, one net per sigma.
    Denoiser,
}

impl TrainKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainKind::A2a => "a2a",
            TrainKind::Denoiser => "denoiser",
        }
    }

    /// Kinds needed by the configured methods.
    pub fn required(cfg: &ExperimentConfig) -> Vec<TrainKind> {
        let mut kinds = Vec::new();
        if cfg.methods.contains(&Method::RareA2a) {
            kinds.push(TrainKind::A2a);
        }
        if cfg.methods.contains(&Method::RedDenoiser) {
            kinds.push(TrainKind::Denoiser);
        }
        kinds
    }
}

#[derive(Serialize)]
struct TrainInputs<'a> {
    kind: &'a str,
    dataset: Vec<&'a str>,
    network: &'a rare_core::priors::NetConfig,
    training: &'a TrainConfig,
    sigma: Option<f64>,
}

fn load_weights_manifest(layout: &Layout) -> Result<WeightsManifest> {
    let path = layout.weights_manifest();
    if path.exists() {
        read_toml(&path)
    } else {
        Ok(WeightsManifest {
            manifest_version: MANIFEST_VERSION,
            weights: Vec::new(),
        })
    }
}

fn reusable(layout: &Layout, old: &WeightsManifest, kind: &str, inputs_digest: &str) -> Option<WeightsEntry> {
    old.weights
        .iter()
        .find(|w| w.kind == kind && w.inputs_digest == inputs_digest)
        .filter(|w| all_match(layout, &[(&w.path, &w.sha256), (&w.loss, &w.loss_sha256)]))
        .cloned()
}

fn fit(
    layout: &Layout,
    kind: &str,
    rel: &str,
    sigma: Option<f64>,
    inputs_digest: String,
    pairs: &[rare_core::training::TrainPair],
    cfg: &ExperimentConfig,
    tcfg: &TrainConfig,
) -> Result<WeightsEntry> {
    let outcome = train(pairs, &cfg.network, tcfg)?;
    let path = layout.abs(rel);
    crate::store::ensure_parent(&path)?;
    outcome.weights.save(&path).with_context(|| format!("writing {}", path.display()))?;
    let loss = rel.replace(".rw", "-loss.csv");
    write_text(&layout.abs(&loss), &outcome.loss_csv())?;
    Ok(WeightsEntry {
        kind: kind.into(),
        sigma,
        inputs_digest,
        path: rel.into(),
        sha256: sha256_file(&path)?,
        loss_sha256: sha256_file(&layout.abs(&loss))?,
        loss,
        final_loss: outcome.loss_history.last().copied().unwrap_or(f64::NAN),
    })
}

/// Trains the A2A network or the AWGN denoisers.
pub fn train_stage(cfg: &ExperimentConfig, layout: &Layout, kind: TrainKind, opts: RunOptions) -> Result<WeightsManifest> {
    let m = load_dataset(layout)?;
    check_dataset_matches(cfg, &m)?;
    let old = load_weights_manifest(layout)?;
    let mut fresh = Vec::new();
    match kind {
        TrainKind::A2a => {
            let mut by_object: BTreeMap<usize, Vec<&AcquisitionEntry>> = BTreeMap::new();
            for a in &m.acquisitions {
                by_object.entry(a.object).or_default().push(a);
            }
            let skipped = by_object.values().filter(|v| v.len() < 2).count();
            if by_object.is_empty() || skipped > 0 {
                return Err(rare_core::Error::InsufficientPairs { skipped }.into());
            }
            let tcfg = TrainConfig {
                seed: derive_seed(cfg.seed, 5, cfg.training.seed),
                ..cfg.training.clone()
            };
            let inputs_digest = digest(&TrainInputs {
                kind: "a2a",
                dataset: m.acquisitions.iter().map(|a| a.sha256.as_str()).collect(),
                network: &cfg.network,
                training: &tcfg,
                sigma: None,
            })?;
            let entry = match reusable(layout, &old, "a2a", &inputs_digest).filter(|_| opts.resume) {
                Some(e) => {
                    opts.say("train: a2a weights up to date");
                    e
                }
                None => {
                    let images = by_object
                        .values()
                        .map(|acqs| {
                            acqs.iter()
                                .map(|a| load_image(layout, &a.image, &a.sha256).map(Arc::new))
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let (pairs, _) = build_pairs(&images)?;
                    opts.say(format!("train: a2a on {} pairs, {} epochs", pairs.len(), tcfg.epochs));
                    let e = fit(layout, "a2a", Layout::a2a_weights(), None, inputs_digest, &pairs, cfg, &tcfg)?;
                    opts.say(format!("train: a2a final loss {:.6e}", e.final_loss));
                    e
                }
            };
            fresh.push(entry);
        }
        TrainKind::Denoiser => {
            let clean_entries: Vec<&ObjectEntry> = m.objects.iter().filter(|o| o.role == Role::Train).collect();
            if clean_entries.is_empty() {
                return Err(rare_core::Error::InsufficientPairs { skipped: 0 }.into());
            }
            let base = cfg.denoiser_training();
            let mut clean: Option<Vec<Arc<ComplexImage>>> = None;
            for (k, &sigma) in cfg.denoiser.sigmas.iter().enumerate() {
                let tcfg = TrainConfig {
                    seed: derive_seed(cfg.seed, 7, base.seed.wrapping_add(k as u64)),
                    ..base.clone()
                };
                let inputs_digest = digest(&TrainInputs {
                    kind: "denoiser",
                    dataset: clean_entries.iter().map(|o| o.truth_sha256.as_str()).collect(),
                    network: &cfg.network,
                    training: &tcfg,
                    sigma: Some(sigma),
                })?;
                if let Some(e) = reusable(layout, &old, "denoiser", &inputs_digest).filter(|_| opts.resume) {
                    opts.say(format!("train: denoiser sigma={sigma} up to date"));
                    fresh.push(e);
                    continue;
                }
                if clean.is_none() {
                    clean = Some(
                        clean_entries
                            .iter()
                            .map(|o| load_image(layout, &o.truth, &o.truth_sha256).map(Arc::new))
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                let pairs = awgn_pairs(clean.as_deref().unwrap_or_default(), &[sigma], derive_seed(cfg.seed, 6, k as u64))?;
                opts.say(format!("train: denoiser sigma={sigma} on {} pairs", pairs.len()));
                let rel = Layout::denoiser_weights(k);
                fresh.push(fit(layout, "denoiser", &rel, Some(sigma), inputs_digest, &pairs, cfg, &tcfg)?);
            }
        }
    }
    let mut out = WeightsManifest {
        manifest_version: MANIFEST_VERSION,
        weights: old.weights.into_iter().filter(|w| w.kind != kind.as_str()).collect(),
    };
    out.weights.extend(fresh);
    out.weights.sort_by(|a, b| a.kind.cmp(&b.kind).then(a.path.cmp(&b.path)));
    write_toml(&layout.weights_manifest(), &out)?;
    Ok(out)
}

#[derive(Serialize)]
struct ReconInputs<'a> {
    method: Method,
    case: &'a str,
    acquisition: &'a str,
    kspace: &'a str,
    truth: &'a str,
    coils: usize,
    coil_seed: u64,
    fourier: &'a crate::config::FourierChoice,
    solver: Option<&'a SolverConfig>,
    tv: Option<&'a TvParams>,
    taus: Vec<f64>,
    lambdas: Vec<f64>,
    weights: Vec<&'a str>,
}

/// A trained network with its provenance.
struct Prior {
    sigma: Option<f64>,
    sha256: String,
    net: NetWeights,
}

fn load_priors(layout: &Layout, w: &WeightsManifest, kind: &str, method: Method) -> Result<Vec<Prior>> {
    let entries = w.find(kind);
    if entries.is_empty() {
        bail!("method {method} needs {kind} weights; run `rare train --kind {kind}` first");
    }
    entries
        .into_iter()
        .map(|e| {
            let path = layout.abs(&e.path);
            crate::store::verify(&path, &e.sha256)?;
            Ok(Prior {
                sigma: e.sigma,
                sha256: e.sha256.clone(),
                net: NetWeights::load(&path).with_context(|| format!("loading {}", path.display()))?,
            })
        })
        .collect()
}

struct Candidate {
    point: GridPoint,
    report: Option<ReconReport>,
}

fn score(truth: &ComplexImage, report: rare_core::Result<ReconReport>, parameter: &str, value: f64, sigma: Option<f64>) -> Result<Candidate> {
    match report {
        Ok(r) => {
            let psnr = metrics::psnr(&r.image, truth)?.mean;
            Ok(Candidate {
                point: GridPoint {
                    parameter: parameter.into(),
                    value,
                    sigma,
                    psnr_db: psnr,
                    termination: r.termination.as_str().into(),
                    iterations: r.trace.len(),
                },
                report: Some(r),
            })
        }
        Err(rare_core::Error::Diverged { iteration }) => Ok(Candidate {
            point: GridPoint {
                parameter: parameter.into(),
                value,
                sigma,
                psnr_db: f64::NAN,
                termination: "diverged".into(),
                iterations: iteration,
            },
            report: None,
        }),
        Err(e) => Err(e.into()),
    }
}

struct Job<'a> {
    cfg: &'a ExperimentConfig,
    layout: &'a Layout,
    manifest: &'a DatasetManifest,
    coils: &'a CoilMaps,
    a2a: &'a [Prior],
    denoisers: &'a [Prior],
    opts: RunOptions,
}

impl Job<'_> {
    fn priors(&self, method: Method) -> &[Prior] {
        match method {
            Method::RareA2a => self.a2a,
            Method::RedDenoiser => self.denoisers,
            _ => &[],
        }
    }

    fn inputs_digest(&self, case: &CaseEntry, truth_sha: &str, method: Method) -> Result<String> {
        let uses_solver = method != Method::Zf;
        digest(&ReconInputs {
            method,
            case: &case.name,
            acquisition: &case.config_digest,
            kspace: &case.kspace_sha256,
            truth: truth_sha,
            coils: self.manifest.coils,
            coil_seed: self.manifest.coil_seed,
            fourier: &self.cfg.acquisition.fourier,
            solver: uses_solver.then_some(&self.cfg.solver),
            tv: (method == Method::CsTv).then_some(&self.cfg.tv),
            taus: if matches!(method, Method::RareA2a | Method::RedDenoiser) { self.cfg.taus() } else { Vec::new() },
            lambdas: if method == Method::CsTv { self.cfg.lambdas() } else { Vec::new() },
            weights: self.priors(method).iter().map(|p| p.sha256.as_str()).collect(),
        })
    }

    fn run_case(&self, case: &CaseEntry) -> Result<Vec<ReconRecord>> {
        let truth_entry = self.manifest.object(case.object)?;
        let dims = self.manifest.dims;
        let shape = Shape::new(dims[0], dims[1], dims[2]);
        let mut records = Vec::new();
        let mut setup: Option<(MeasurementOperator, rare_core::KSpaceData, ComplexImage, ComplexImage, f64)> = None;
        for &method in &self.cfg.methods {
            let inputs_digest = self.inputs_digest(case, &truth_entry.truth_sha256, method)?;
            let record_path = self.layout.recon_record(&case.name, method);
            if self.opts.resume && record_path.exists() {
                if let Ok(old) = read_toml::<ReconRecord>(&record_path) {
                    let files_ok = !old.is_ok()
                        || all_match(self.layout, &[(&old.image, &old.sha256), (&old.trace, &old.trace_sha256)]);
                    if old.inputs_digest == inputs_digest && files_ok {
                        self.opts.say(format!("reconstruct: {} {method} up to date", case.name));
                        records.push(old);
                        continue;
                    }
                }
            }
            if setup.is_none() {
                let pattern = radial_pattern(&case.config, shape.phases, shape.ny, shape.nx)?;
                let op = MeasurementOperator::new(shape, pattern, self.coils.clone(), self.cfg.acquisition.fourier_mode())?;
                let y = load_kspace(self.layout, &case.kspace, &case.kspace_sha256)?;
                let truth = load_image(self.layout, &truth_entry.truth, &truth_entry.truth_sha256)?;
                let zf = op.pseudoinverse(&y)?;
                let gamma0 = match self.cfg.solver.gamma0 {
                    Some(g) => g,
                    None => 1.0 / op.norm_estimate(self.cfg.solver.norm_iters, 0)?,
                };
                setup = Some((op, y, truth, zf, gamma0));
            }
            let (op, y, truth, zf, gamma0) = setup.as_ref().expect("initialized above");
            let solver = SolverConfig {
                gamma0: Some(*gamma0),
                ..self.cfg.solver.clone()
            };
            let mut candidates = Vec::new();
            match method {
                Method::Zf => {
                    let report = ReconReport {
                        image: zf.clone(),
                        trace: Vec::new(),
                        termination: rare_core::solver::Termination::Converged,
                    };
                    let mut c = score(truth, Ok(report), "none", 0.0, None)?;
                    c.point.termination = "closed-form".into();
                    candidates.push(c);
                }
                Method::CsTv => {
                    for lambda in self.cfg.lambdas() {
                        let p = TvParams {
                            lambda,
                            ..self.cfg.tv.clone()
                        };
                        candidates.push(score(truth, fista_tv_solve(y, op, &p, &solver), "lambda", lambda, None)?);
                    }
                }
                Method::RareA2a | Method::RedDenoiser => {
                    for prior in self.priors(method) {
                        let x0 = prior.net.apply(zf)?;
                        for tau in self.cfg.taus() {
                            let s = SolverConfig { tau, ..solver.clone() };
                            let r = rare_solve(y, op, &prior.net, &s, Some(&x0));
                            candidates.push(score(truth, r, "tau", tau, prior.sigma)?);
                        }
                    }
                }
            }
            let grid: Vec<GridPoint> = candidates.iter().map(|c| c.point.clone()).collect();
            let best = candidates
                .into_iter()
                .filter(|c| c.report.is_some() && !c.point.psnr_db.is_nan())
                .reduce(|a, b| if b.point.psnr_db > a.point.psnr_db { b } else { a });
            let mut record = ReconRecord {
                case: case.name.clone(),
                method,
                inputs_digest,
                status: "failed".into(),
                error: None,
                selected: None,
                grid,
                image: String::new(),
                sha256: String::new(),
                trace: String::new(),
                trace_sha256: String::new(),
            };
            match best {
                Some(Candidate {
                    point,
                    report: Some(report),
                }) => {
                    let image = Layout::recon_image(&case.name, method);
                    let trace = format!("{}/{method}-trace.csv", Layout::recon_dir(&case.name));
                    record.sha256 = store_image(self.layout, &image, &report.image)?;
                    write_text(&self.layout.abs(&trace), &report.trace_csv())?;
                    record.trace_sha256 = sha256_file(&self.layout.abs(&trace))?;
                    record.image = image;
                    record.trace = trace;
                    record.status = "ok".into();
                    self.opts.say(format!(
                        "reconstruct: {} {method} {:.2} dB ({}={}{})",
                        case.name,
                        point.psnr_db,
                        point.parameter,
                        point.value,
                        point.sigma.map(|s| format!(", sigma={s}")).unwrap_or_default()
                    ));
                    record.selected = Some(point);
                }
                _ => {
                    record.error = Some("every grid point diverged".into());
                    self.opts.say(format!("reconstruct: {} {method} failed: every grid point diverged", case.name));
                }
            }
            write_toml(&record_path, &record)?;
            records.push(record);
        }
        Ok(records)
    }
}

/// Runs every configured method on every test case, cases in parallel.
pub fn reconstruct(cfg: &ExperimentConfig, layout: &Layout, opts: RunOptions) -> Result<Vec<ReconRecord>> {
    let m = load_dataset(layout)?;
    check_dataset_matches(cfg, &m)?;
    let weights = load_weights_manifest(layout)?;
    let a2a = if cfg.methods.contains(&Method::RareA2a) {
        load_priors(layout, &weights, "a2a", Method::RareA2a)?
    } else {
        Vec::new()
    };
    let denoisers = if cfg.methods.contains(&Method::RedDenoiser) {
        load_priors(layout, &weights, "denoiser", Method::RedDenoiser)?
    } else {
        Vec::new()
    };
    let coils = synth_coil_maps(m.coils, m.dims[1], m.dims[2], m.coil_seed)?;
    let job = Job {
        cfg,
        layout,
        manifest: &m,
        coils: &coils,
        a2a: &a2a,
        denoisers: &denoisers,
        opts,
    };
    let per_case = m.cases.par_iter().map(|c| job.run_case(c)).collect::<Result<Vec<_>>>()?;
    Ok(per_case.into_iter().flatten().collect())
}

/// Scores every `(case, method)` reconstruction against groundtruth, in
/// manifest case order and configured method order. Failed solves are skipped.
pub fn collect_records(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<(EvalRecord, ComplexImage, ComplexImage)>> {
    let m = load_dataset(layout)?;
    check_dataset_matches(cfg, &m)?;
    let jobs: Vec<(&CaseEntry, Method)> = m
        .cases
        .iter()
        .flat_map(|c| cfg.methods.iter().map(move |&meth| (c, meth)))
        .collect();
    let scored = jobs
        .par_iter()
        .map(|&(case, method)| -> Result<Option<_>> {
            let path = layout.recon_record(&case.name, method);
            if !path.exists() {
                bail!("no reconstruction for case {} method {method}; run `rare reconstruct`", case.name);
            }
            let record: ReconRecord = read_toml(&path)?;
            if record.case != case.name || record.method != method {
                bail!("{}: record is for {} {}, expected {} {method}", path.display(), record.case, record.method, case.name);
            }
            if !record.is_ok() {
                return Ok(None);
            }
            let truth_entry = m.object(case.object)?;
            let truth = load_image(layout, &truth_entry.truth, &truth_entry.truth_sha256)?;
            let x = load_image(layout, &record.image, &record.sha256)?;
            let report = metrics::evaluate(method.as_str(), &x, &truth, ReferenceKind::Groundtruth)
                .with_context(|| format!("scoring {} {method}", case.name))?;
            Ok(Some((
                EvalRecord {
                    case: case.name.clone(),
                    rate: case.rate,
                    snr_db: case.config.snr_db,
                    report,
                },
                x,
                truth,
            )))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scored.into_iter().flatten().collect())
}

pub fn metrics_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("case,method,rate,snr_db,psnr_db,ssim\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6}",
            r.case,
            r.report.method,
            r.rate,
            snr_label(r.snr_db.unwrap_or(f64::INFINITY)),
            r.report.psnr.mean,
            r.report.ssim.mean
        );
    }
    out
}

pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    pub summary: Vec<SummaryRow>,
    pub table_csv: String,
}

/// Per-image scores, the per-cell table and per-phase curves under `results/`.
pub fn evaluate(cfg: &ExperimentConfig, layout: &Layout, opts: RunOptions) -> Result<Evaluation> {
    let records: Vec<EvalRecord> = collect_records(cfg, layout)?.into_iter().map(|(r, _, _)| r).collect();
    let summary = metrics::summarize(&records);
    let table_csv = metrics::summary_csv(&summary);
    let dir = layout.results_dir();
    write_text(&dir.join("metrics.csv"), &metrics_csv(&records))?;
    write_text(&dir.join("table.csv"), &table_csv)?;
    write_text(&dir.join("phase_curves.csv"), &metrics::phase_curves_csv(&records))?;
    opts.say(format!("evaluate: {} images scored -> {}", records.len(), dir.display()));
    Ok(Evaluation {
        records,
        summary,
        table_csv,
    })
}

pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut out = format!("{:<14} {:>6} {:>7} {:>6} {:>9} {:>7}\n", "method", "rate", "snr_db", "cases", "psnr_db", "ssim");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>7} {:>6} {:>9.2} {:>7.4}",
            r.method,
            r.rate,
            snr_label(r.snr_db.unwrap_or(f64::INFINITY)),
            r.cases,
            r.psnr,
            r.ssim
        );
    }
    out
}

/// Recomputes the evaluation, checks it against `results/table.csv` when
/// present, and exports tables, curves and magnified residual images under
/// `report/`.
pub fn report(cfg: &ExperimentConfig, layout: &Layout, opts: RunOptions) -> Result<Vec<SummaryRow>> {
    let scored = collect_records(cfg, layout)?;
    let records: Vec<EvalRecord> = scored.iter().map(|(r, _, _)| r.clone()).collect();
    let summary = metrics::summarize(&records);
    let table_csv = metrics::summary_csv(&summary);
    let evaluated = layout.results_dir().join("table.csv");
    if evaluated.exists() {
        let old = std::fs::read_to_string(&evaluated)?;
        if old != table_csv {
            bail!("{} is stale; rerun `rare evaluate`", evaluated.display());
        }
    }
    let dir = layout.report_dir();
    write_text(&dir.join("table.csv"), &table_csv)?;
    write_text(&dir.join("phase_curves.csv"), &metrics::phase_curves_csv(&records))?;
    let factor = cfg.report.residual_factor;
    scored.par_iter().try_for_each(|(r, x, truth)| -> Result<()> {
        let residual = metrics::residual_image(x, truth, factor)?;
        store_image(layout, &format!("report/residuals/{}/{}.cimg", r.case, r.report.method), &residual)?;
        Ok(())
    })?;
    opts.say(format_table(&summary));
    opts.say(format!("report: {} rows, residuals x{factor} -> {}", summary.len(), dir.display()));
    Ok(summary)
}

/// All stages in order.
pub fn run_all(cfg: &ExperimentConfig, layout: &Layout, opts: RunOptions) -> Result<Evaluation> {
    simulate(cfg, layout, opts)?;
    for kind in TrainKind::required(cfg) {
        train_stage(cfg, layout, kind, opts)?;
    }
    reconstruct(cfg, layout, opts)?;
    let eval = evaluate(cfg, layout, opts)?;
    report(cfg, layout, opts)?;
    Ok(eval)
}
