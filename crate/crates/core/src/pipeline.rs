//! Staged experiment runner behind the `lfr` binary.
//!
//! Every stage reads its inputs from, and writes its outputs to, one run
//! directory:
//!
//! ```text
//! config.json                  full configuration with defaults filled in
//! manifest.json                stage status, seeds, artifacts, errors
//! data/estimation.csv (+.json) estimation record
//! data/<test>.csv (+.json)     one record per test set
//! data/datasets.json           test-set names and scoring modes
//! bla.json                     BLA model, offsets, refinement report
//! init/<tag>.json              initial NL-LFR model and initial state
//! models/<tag>.json            fitted NL-LFR model
//! fits/<tag>.json              FitReport
//! fits/<tag>.cost.csv          cost trace
//! metrics.csv                  RMSE table
//! plots/residual_time_<test>.csv
//! plots/residual_spectrum_<test>.csv
//! ```
//!
//! `<tag>` is `nz{n_z}_nw{n_w}_seed{seed}`. The metrics table has the fixed
//! columns `dataset,model,n_z,n_w,seed,selected,rmse_estimation` followed by
//! one `rmse_<test>` column per test set. For multi-output systems each RMSE
//! cell is the root of the channel-averaged mean squared error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::boucwen::{self, BoucWenParams, DatasetKind, SimulationOptions};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::init::{init_nllfr_detailed, InitSpec, StateTrajectory};
use crate::lm::{self, FitReport, LmOptions};
use crate::lti::{self, BlaOptions, LtiStateSpace};
use crate::metrics::{self, EvalMode, OutputModel, WithOffsets};
use crate::nllfr::{Activation, Dims, ModelFile, NlLfrModel};
use crate::signals::{Excitation, RecordMeta, SignalRecord};
use crate::util::{self, vector_json};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoucWenSource {
    pub params: BoucWenParams,
    pub simulation: SimulationOptions,
    pub estimation_seed: u64,
    pub test_seed: u64,
    pub multisine_rms: f64,
    pub sweep_rms: f64,
    pub sweep_discard: usize,
}

impl Default for BoucWenSource {
    fn default() -> Self {
        Self {
            params: BoucWenParams::default(),
            simulation: SimulationOptions {
                settle_periods: 1,
                ..SimulationOptions::default()
            },
            estimation_seed: 1,
            test_seed: 2,
            multisine_rms: boucwen::MULTISINE_AMPLITUDE_RMS,
            sweep_rms: boucwen::SWEEP_AMPLITUDE_RMS,
            sweep_discard: metrics::DEFAULT_DISCARD,
        }
    }
}

/// A record stored as CSV. Without `meta`, the side-car next to `path` is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalRecord {
    pub path: PathBuf,
    #[serde(default)]
    pub meta: Option<RecordMeta>,
}

impl ExternalRecord {
    fn load(&self) -> Result<SignalRecord> {
        if !self.path.exists() {
            return Err(Error::Config(format!("data file {} does not exist", self.path.display())));
        }
        match &self.meta {
            Some(meta) => SignalRecord::read_csv_with(&self.path, meta),
            None => SignalRecord::read_csv(&self.path),
        }
    }

    fn channels(&self) -> Result<(usize, usize)> {
        let meta = match &self.meta {
            Some(m) => m.clone(),
            None => util::read_json::<RecordMeta>(&crate::signals::sidecar_path(&self.path))?,
        };
        Ok((meta.inputs.len(), meta.outputs.len()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalTest {
    pub name: String,
    pub record: ExternalRecord,
    #[serde(default)]
    pub mode: EvalMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalSource {
    pub n_inputs: usize,
    pub n_outputs: usize,
    pub estimation: ExternalRecord,
    #[serde(default)]
    pub tests: Vec<ExternalTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    BoucWen(BoucWenSource),
    External(ExternalSource),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::BoucWen(BoucWenSource::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Structure {
    pub n_z: usize,
    pub n_w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub structures: Vec<Structure>,
    pub n_n: usize,
    pub activation: Activation,
    pub uniform_bound: f64,
    /// Restart count R; seeds are `first_seed .. first_seed + R`.
    pub restarts: usize,
    pub first_seed: u64,
    pub estimate_x0: bool,
    /// `None` picks the periodic trajectory for multisine estimation data.
    pub trajectory: Option<StateTrajectory>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            structures: vec![
                Structure { n_z: 1, n_w: 1 },
                Structure { n_z: 2, n_w: 1 },
                Structure { n_z: 2, n_w: 2 },
            ],
            n_n: 15,
            activation: Activation::Tanh,
            uniform_bound: 1.0,
            restarts: 5,
            first_seed: 0,
            estimate_x0: true,
            trajectory: None,
        }
    }
}

impl ModelSettings {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.restarts as u64).map(|i| self.first_seed + i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub bla: BlaOptions,
    pub model: ModelSettings,
    pub lm: LmOptions,
    pub execution: Execution,
    /// Run directory; the CLI's `--out` takes precedence.
    pub output_dir: Option<PathBuf>,
    /// Samples per residual trace in the plot files (0 = all).
    pub plot_max_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "boucwen".into(),
            dataset: DatasetSource::default(),
            bla: BlaOptions::default(),
            model: ModelSettings::default(),
            lm: LmOptions::default(),
            execution: Execution::default(),
            output_dir: None,
            plot_max_samples: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = util::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked without computing, including
    /// the channel counts of external files.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(',') {
            return Err(Error::Config("name must be non-empty and contain no commas".into()));
        }
        let m = &self.model;
        if m.restarts == 0 {
            return Err(Error::Config("restarts must be >= 1".into()));
        }
        if m.structures.is_empty() {
            return Err(Error::Config("at least one (n_z, n_w) structure is required".into()));
        }
        for s in &m.structures {
            InitSpec {
                n_z: s.n_z,
                n_w: s.n_w,
                n_n: m.n_n,
                bound: m.uniform_bound,
                ..InitSpec::default()
            }
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        }
        self.lm.validate().map_err(|e| Error::Config(e.to_string()))?;
        match &self.dataset {
            DatasetSource::BoucWen(b) => {
                b.params.validate().map_err(|e| Error::Config(e.to_string()))?;
                if !(b.multisine_rms > 0.0 && b.sweep_rms > 0.0) {
                    return Err(Error::Config("Bouc-Wen amplitudes must be positive".into()));
                }
            }
            DatasetSource::External(x) => {
                let mut names = std::collections::BTreeSet::new();
                let records = std::iter::once(("estimation", &x.estimation))
                    .chain(x.tests.iter().map(|t| (t.name.as_str(), &t.record)));
                for (name, rec) in records {
                    if !valid_test_name(name) {
                        return Err(Error::Config(format!("invalid test-set name '{name}'")));
                    }
                    if !names.insert(name.to_string()) {
                        return Err(Error::Config(format!("duplicate test-set name '{name}'")));
                    }
                    if !rec.path.exists() {
                        return Err(Error::Config(format!("data file {} does not exist", rec.path.display())));
                    }
                    let (n_u, n_y) = rec.channels()?;
                    if (n_u, n_y) != (x.n_inputs, x.n_outputs) {
                        return Err(Error::Config(format!(
                            "{} has {n_u} inputs and {n_y} outputs; config declares {} and {}",
                            rec.path.display(),
                            x.n_inputs,
                            x.n_outputs
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn valid_test_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn tag(s: Structure, seed: u64) -> String {
    format!("nz{}_nw{}_seed{}", s.n_z, s.n_w, seed)
}

// ---------------------------------------------------------------------------
// Persisted artifacts

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSetInfo {
    pub name: String,
    pub mode: EvalMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub dataset: String,
    pub tests: Vec<TestSetInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlaFile {
    pub format_version: u32,
    pub model: LtiStateSpace,
    pub u_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub options: BlaOptions,
    pub report: Option<FitReport>,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitFile {
    pub format_version: u32,
    pub seed: u64,
    pub structure: Structure,
    pub model: ModelFile,
    /// Initial state matching the chosen normalization trajectory.
    #[serde(with = "vector_json")]
    pub x0: DVector<f64>,
    pub trajectory: StateTrajectory,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub completed: bool,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub crate_version: String,
    pub config: Option<ExperimentConfig>,
    pub seeds: Vec<u64>,
    pub stages: BTreeMap<String, StageStatus>,
    pub artifacts: Vec<String>,
    /// Selected fit per structure, by estimation cost.
    pub selected: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn failed(&self) -> bool {
        self.stages.values().any(|s| !s.errors.is_empty())
    }
}

/// Run directory with its manifest kept in sync on disk.
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join("manifest.json");
        let manifest = if path.exists() {
            util::read_json(&path)?
        } else {
            RunManifest {
                format_version: FORMAT_VERSION,
                crate_version: env!("CARGO_PKG_VERSION").into(),
                ..RunManifest::default()
            }
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    fn record_artifact(&mut self, rel: &str) {
        if !self.manifest.artifacts.iter().any(|a| a == rel) {
            self.manifest.artifacts.push(rel.to_string());
        }
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        util::write_json(&self.path(rel)?, value)?;
        self.record_artifact(rel);
        Ok(())
    }

    fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        self.record_artifact(rel);
        Ok(())
    }

    fn write_record(&mut self, rel: &str, rec: &SignalRecord) -> Result<()> {
        rec.write_csv(&self.path(rel)?)?;
        self.record_artifact(rel);
        Ok(())
    }

    fn read_json<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<T> {
        util::read_json(&self.root.join(rel))
    }

    fn read_record(&self, rel: &str) -> Result<SignalRecord> {
        SignalRecord::read_csv(&self.root.join(rel))
    }

    fn save_manifest(&self) -> Result<()> {
        util::write_json(&self.root.join("manifest.json"), &self.manifest)
    }

    /// Runs one stage, recording its outcome. Non-fatal problems pushed to
    /// the error list mark the stage as failed without aborting it.
    fn stage<T>(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut Self, &mut Vec<String>) -> Result<T>,
    ) -> Result<T> {
        let mut soft = Vec::new();
        let out = body(self, &mut soft);
        let status = self.manifest.stages.entry(name.to_string()).or_default();
        status.errors = soft;
        match &out {
            Ok(_) => status.completed = true,
            Err(e) => {
                status.completed = false;
                status.errors.push(e.to_string());
            }
        }
        self.save_manifest()?;
        if out.is_ok() && !status_ok(&self.manifest, name) {
            return Err(Error::Config(format!(
                "stage '{name}' finished with errors: {}",
                self.manifest.stages[name].errors.join("; ")
            )));
        }
        out
    }

    fn set_config(&mut self, cfg: &ExperimentConfig) -> Result<()> {
        self.manifest.config = Some(cfg.clone());
        self.manifest.seeds = cfg.model.seeds();
        self.write_json("config.json", cfg)?;
        self.save_manifest()
    }
}

fn status_ok(m: &RunManifest, name: &str) -> bool {
    m.stages.get(name).is_some_and(|s| s.errors.is_empty())
}

// ---------------------------------------------------------------------------
// Stages

pub const ESTIMATION: &str = "data/estimation.csv";
const DATASETS: &str = "data/datasets.json";
const BLA: &str = "bla.json";

fn test_path(name: &str) -> String {
    format!("data/test_{name}.csv")
}

/// Writes the estimation and test records into `data/`.
pub fn stage_generate(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<DatasetIndex> {
    cfg.validate()?;
    run.set_config(cfg)?;
    run.stage("generate", |run, _| {
        let (estimation, tests) = match &cfg.dataset {
            DatasetSource::BoucWen(b) => generate_boucwen(b)?,
            DatasetSource::External(x) => {
                let est = x.estimation.load()?;
                let tests = x
                    .tests
                    .iter()
                    .map(|t| Ok((t.name.clone(), t.mode, t.record.load()?)))
                    .collect::<Result<Vec<_>>>()?;
                (est, tests)
            }
        };
        estimation.require_y()?;
        run.write_record(ESTIMATION, &estimation)?;
        let mut index = DatasetIndex {
            dataset: cfg.name.clone(),
            tests: Vec::new(),
        };
        for (name, mode, rec) in tests {
            rec.require_y()?;
            run.write_record(&test_path(&name), &rec)?;
            index.tests.push(TestSetInfo { name, mode });
        }
        run.write_json(DATASETS, &index)?;
        Ok(index)
    })
}

type Generated = (SignalRecord, Vec<(String, EvalMode, SignalRecord)>);

fn generate_boucwen(b: &BoucWenSource) -> Result<Generated> {
    let make = |seed, rms, kind| boucwen::make_boucwen_dataset_with(&b.params, seed, rms, kind, &b.simulation);
    let est = make(b.estimation_seed, b.multisine_rms, DatasetKind::Multisine)?;
    let ms = make(b.test_seed, b.multisine_rms, DatasetKind::Multisine)?;
    let sweep = make(0, b.sweep_rms, DatasetKind::Sweep)?;
    Ok((
        est,
        vec![
            ("multisine".into(), EvalMode::SteadyState, ms),
            (
                "sweep".into(),
                EvalMode::Transient {
                    discard_n: b.sweep_discard,
                },
                sweep,
            ),
        ],
    ))
}

pub fn stage_bla(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<BlaFile> {
    run.stage("bla", |run, _| {
        let est = run.read_record(ESTIMATION)?;
        let bla = lti::estimate_bla(&est, &cfg.bla)?;
        if let Some(w) = &bla.warning {
            log::warn!("BLA: {w}");
        }
        let file = BlaFile {
            format_version: FORMAT_VERSION,
            model: bla.model,
            u_mean: bla.u_mean,
            y_mean: bla.y_mean,
            options: cfg.bla.clone(),
            report: bla.report,
            warning: bla.warning,
        };
        run.write_json(BLA, &file)?;
        Ok(file)
    })
}

/// Estimation data with the BLA offsets removed, as seen by init and fit.
fn centred_estimation(run: &RunDir, bla: &BlaFile) -> Result<SignalRecord> {
    let est = run.read_record(ESTIMATION)?;
    let mut u = est.u().clone();
    let mut y = est.require_y()?.clone();
    subtract_means(&mut u, &bla.u_mean);
    subtract_means(&mut y, &bla.y_mean);
    SignalRecord::new(u, Some(y), est.fs(), est.n_periods(), est.excitation().clone())
}

fn subtract_means(m: &mut DMatrix<f64>, means: &[f64]) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means.get(j).copied().unwrap_or(0.0));
    }
}

fn trajectory_for(cfg: &ExperimentConfig, est: &SignalRecord) -> StateTrajectory {
    cfg.model.trajectory.unwrap_or(match est.excitation() {
        Excitation::Multisine(_) if est.n_periods() == 1 => StateTrajectory::PeriodicSteadyState,
        _ => StateTrajectory::ZeroInitial,
    })
}

pub fn stage_init(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Vec<InitFile>> {
    run.stage("init", |run, soft| {
        let bla: BlaFile = run.read_json(BLA)?;
        let est = centred_estimation(run, &bla)?;
        let trajectory = trajectory_for(cfg, &est);
        let mut out = Vec::new();
        for &s in &cfg.model.structures {
            for seed in cfg.model.seeds() {
                let spec = InitSpec {
                    n_z: s.n_z,
                    n_w: s.n_w,
                    n_n: cfg.model.n_n,
                    activation: cfg.model.activation,
                    seed,
                    bound: cfg.model.uniform_bound,
                    trajectory,
                };
                match init_nllfr_detailed(&bla.model, est.u(), &spec) {
                    Ok(init) => {
                        let file = InitFile {
                            format_version: FORMAT_VERSION,
                            seed,
                            structure: s,
                            model: ModelFile::new(init.model),
                            x0: init.x0,
                            trajectory,
                        };
                        run.write_json(&format!("init/{}.json", tag(s, seed)), &file)?;
                        out.push(file);
                    }
                    // A BLA that cannot be normalized fails every seed alike.
                    Err(e @ (Error::UnstableBla { .. } | Error::DegenerateState { .. })) => return Err(e),
                    Err(e) => soft.push(format!("init {}: {e}", tag(s, seed))),
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no initial model could be built".into()));
        }
        Ok(out)
    })
}

/// Outcome of one restart.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub structure: Structure,
    pub seed: u64,
    pub result: std::result::Result<(NlLfrModel, FitReport), String>,
}

pub fn stage_fit(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Vec<FitOutcome>> {
    run.stage("fit", |run, soft| {
        let bla: BlaFile = run.read_json(BLA)?;
        let est = centred_estimation(run, &bla)?;
        let mut inits = Vec::new();
        for &s in &cfg.model.structures {
            for seed in cfg.model.seeds() {
                let rel = format!("init/{}.json", tag(s, seed));
                if run.root().join(&rel).exists() {
                    inits.push(run.read_json::<InitFile>(&rel)?);
                }
            }
        }
        if inits.is_empty() {
            return Err(Error::Config("no initial models found; run the init stage first".into()));
        }
        let jobs = inits
            .into_iter()
            .map(|f| Ok((f.structure, f.seed, f.model.into_model()?, f.x0)))
            .collect::<Result<Vec<_>>>()?;
        let exec_mode = cfg.execution;
        let outcomes = exec::map_ordered(exec_mode, jobs, |(s, seed, model, x0)| {
            let r = lm::fit_nllfr_with(&model, &x0, &est, &cfg.lm, cfg.model.estimate_x0, exec_mode);
            FitOutcome {
                structure: s,
                seed,
                result: r
                    .map(|fit| {
                        let mut report = fit.report;
                        report.seeds = vec![seed];
                        (fit.model, report)
                    })
                    .map_err(|e| e.to_string()),
            }
        });
        for o in &outcomes {
            let t = tag(o.structure, o.seed);
            match &o.result {
                Ok((model, report)) => {
                    log::info!(
                        "fit {t}: cost {:.4e} -> {:.4e} ({:?})",
                        report.initial_cost,
                        report.final_cost,
                        report.termination
                    );
                    run.write_json(&format!("models/{t}.json"), &ModelFile::new(model.clone()))?;
                    run.write_json(&format!("fits/{t}.json"), report)?;
                    run.write_text(&format!("fits/{t}.cost.csv"), &report.cost_trace_csv())?;
                }
                Err(e) => soft.push(format!("fit {t}: {e}")),
            }
        }
        Ok(outcomes)
    })
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub structure: Option<Structure>,
    pub seed: Option<u64>,
    pub selected: bool,
    /// Estimation first, then test sets in index order. NaN marks a
    /// diverged or missing evaluation.
    pub rmse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub dataset: String,
    pub columns: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,model,n_z,n_w,seed,selected");
        for c in &self.columns {
            out.push_str(&format!(",rmse_{c}"));
        }
        out.push('\n');
        for r in &self.rows {
            let (nz, nw) = r.structure.map_or((String::new(), String::new()), |s| (s.n_z.to_string(), s.n_w.to_string()));
            let seed = r.seed.map_or(String::new(), |s| s.to_string());
            out.push_str(&format!("{},{},{nz},{nw},{seed},{}", self.dataset, r.model, r.selected));
            for v in &r.rmse {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }

    /// Selected NL-LFR row for a structure.
    pub fn selected(&self, s: Structure) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.selected && r.structure == Some(s))
    }

    pub fn bla(&self) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.model == "bla")
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

fn with_offsets<'a, M: OutputModel>(model: &'a M, bla: &'a BlaFile) -> WithOffsets<'a, M> {
    WithOffsets {
        model,
        u_mean: &bla.u_mean,
        y_mean: &bla.y_mean,
    }
}

fn aggregate(rmse: &[f64]) -> f64 {
    (rmse.iter().map(|v| v * v).sum::<f64>() / rmse.len().max(1) as f64).sqrt()
}

struct Scored {
    rmse: Vec<f64>,
    residuals: Vec<Option<(DMatrix<f64>, DMatrix<f64>)>>,
}

fn score<M: OutputModel + ?Sized>(
    model: &M,
    est: &SignalRecord,
    tests: &[(TestSetInfo, SignalRecord)],
    soft: &mut Vec<String>,
    label: &str,
) -> Scored {
    let est_mode = match est.excitation() {
        Excitation::Multisine(_) => EvalMode::SteadyState,
        _ => EvalMode::Transient { discard_n: 0 },
    };
    let sets = std::iter::once(("estimation", est_mode, est)).chain(tests.iter().map(|(i, r)| (i.name.as_str(), i.mode, r)));
    let mut rmse = Vec::new();
    let mut residuals = Vec::new();
    for (name, mode, rec) in sets {
        match metrics::evaluate_model(model, rec, mode) {
            Ok(e) => {
                if let Some(k) = e.diverged_at {
                    soft.push(format!("{label} on {name}: simulation diverged at sample {k}"));
                    rmse.push(f64::NAN);
                } else {
                    rmse.push(aggregate(&e.rmse));
                }
                residuals.push(Some((e.measured, e.residual)));
            }
            Err(err) => {
                soft.push(format!("{label} on {name}: {err}"));
                rmse.push(f64::NAN);
                residuals.push(None);
            }
        }
    }
    Scored { rmse, residuals }
}

pub fn stage_eval(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<MetricsTable> {
    run.stage("eval", |run, soft| {
        let index: DatasetIndex = run.read_json(DATASETS)?;
        let bla: BlaFile = run.read_json(BLA)?;
        let est = run.read_record(ESTIMATION)?;
        let tests = index
            .tests
            .iter()
            .map(|t| Ok((t.clone(), run.read_record(&test_path(&t.name))?)))
            .collect::<Result<Vec<_>>>()?;

        let mut columns = vec!["estimation".to_string()];
        columns.extend(index.tests.iter().map(|t| t.name.clone()));
        let bla_scored = score(&with_offsets(&bla.model, &bla), &est, &tests, soft, "bla");
        let mut rows = vec![MetricsRow {
            model: "bla".into(),
            structure: None,
            seed: None,
            selected: false,
            rmse: bla_scored.rmse.clone(),
        }];
        let mut traces: Vec<(String, Scored)> = vec![("bla".into(), bla_scored)];

        for &s in &cfg.model.structures {
            let mut candidates = Vec::new();
            for seed in cfg.model.seeds() {
                let t = tag(s, seed);
                let (mp, fp) = (format!("models/{t}.json"), format!("fits/{t}.json"));
                if !run.root().join(&mp).exists() {
                    continue;
                }
                let model = run.read_json::<ModelFile>(&mp)?.into_model()?;
                let report: FitReport = run.read_json(&fp)?;
                candidates.push((seed, model, report.final_cost));
            }
            if candidates.is_empty() {
                soft.push(format!("no fitted model for n_z={} n_w={}", s.n_z, s.n_w));
                continue;
            }
            // Selection uses estimation cost only.
            let best = candidates
                .iter()
                .filter(|c| c.2.is_finite())
                .min_by(|a, b| a.2.total_cmp(&b.2))
                .map(|c| c.0);
            for (seed, model, _) in &candidates {
                let label = tag(s, *seed);
                let scored = score(&with_offsets(model, &bla), &est, &tests, soft, &label);
                let selected = Some(*seed) == best;
                rows.push(MetricsRow {
                    model: "nllfr".into(),
                    structure: Some(s),
                    seed: Some(*seed),
                    selected,
                    rmse: scored.rmse.clone(),
                });
                if selected {
                    run.manifest.selected.insert(format!("nz{}_nw{}", s.n_z, s.n_w), label.clone());
                    traces.push((label, scored));
                }
            }
        }

        let table = MetricsTable {
            dataset: index.dataset.clone(),
            columns,
            rows,
        };
        run.write_text("metrics.csv", &table.to_csv())?;
        for (ci, name) in table.columns.iter().enumerate() {
            let fs = if ci == 0 { est.fs() } else { tests[ci - 1].1.fs() };
            write_plot_files(run, name, fs, &traces, ci, cfg.plot_max_samples)?;
        }
        Ok(table)
    })
}

fn write_plot_files(
    run: &mut RunDir,
    set: &str,
    fs: f64,
    traces: &[(String, Scored)],
    ci: usize,
    max_samples: usize,
) -> Result<()> {
    let available: Vec<(&str, &DMatrix<f64>, &DMatrix<f64>)> = traces
        .iter()
        .filter_map(|(label, s)| s.residuals[ci].as_ref().map(|(m, r)| (label.as_str(), m, r)))
        .collect();
    let Some(&(_, measured, _)) = available.first() else {
        return Ok(());
    };
    let n_y = measured.ncols();
    let n = available.iter().map(|(_, _, r)| r.nrows()).min().unwrap_or(0);
    if n == 0 {
        return Ok(());
    }
    // Time traces.
    let stride = if max_samples > 0 { n.div_ceil(max_samples) } else { 1 };
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend((1..=n_y).map(|j| format!("y{j}")));
    for (label, _, _) in &available {
        header.extend((1..=n_y).map(|j| format!("e_{label}_y{j}")));
    }
    let mut text = header.join(",") + "\n";
    for k in (0..n).step_by(stride) {
        let mut row = vec![k.to_string(), format!("{:e}", k as f64 / fs)];
        row.extend((0..n_y).map(|j| format!("{:e}", measured[(k, j)])));
        for (_, _, r) in &available {
            row.extend((0..n_y).map(|j| format!("{:e}", r[(k, j)])));
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    run.write_text(&format!("plots/residual_time_{set}.csv"), &text)?;

    // Spectra of the output and of every residual over the common length.
    let (freqs, y_mag) = metrics::magnitude_spectrum(&measured.rows(0, n).into_owned(), fs);
    let mags: Vec<DMatrix<f64>> = available
        .iter()
        .map(|(_, _, r)| metrics::magnitude_spectrum(&r.rows(0, n).into_owned(), fs).1)
        .collect();
    let mut header = vec!["f_hz".to_string()];
    header.extend((1..=n_y).map(|j| format!("y{j}")));
    for (label, _, _) in &available {
        header.extend((1..=n_y).map(|j| format!("e_{label}_y{j}")));
    }
    let mut text = header.join(",") + "\n";
    for (k, f) in freqs.iter().enumerate() {
        let mut row = vec![format!("{f:e}")];
        row.extend((0..n_y).map(|j| format!("{:e}", y_mag[(k, j)])));
        for m in &mags {
            row.extend((0..n_y).map(|j| format!("{:e}", m[(k, j)])));
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    run.write_text(&format!("plots/residual_spectrum_{set}.csv"), &text)?;
    Ok(())
}

/// Every stage in order. Stops at the first failed stage; artifacts written
/// so far and the manifest stay on disk.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsTable> {
    let mut run = RunDir::open(out)?;
    let result = (|| {
        stage_generate(cfg, &mut run)?;
        stage_bla(cfg, &mut run)?;
        stage_init(cfg, &mut run)?;
        stage_fit(cfg, &mut run)?;
        stage_eval(cfg, &mut run)
    })();
    if let Err(e) = &result {
        if !run.manifest.stages.values().any(|s| !s.errors.is_empty()) {
            // Failure before any stage ran (e.g. config validation).
            run.manifest.stages.entry("config".into()).or_default().errors.push(e.to_string());
        }
        run.save_manifest()?;
    }
    result
}

/// Dimensions of the models a configuration produces, for a record with
/// `n_u` inputs and `n_y` outputs.
pub fn dims_for(cfg: &ExperimentConfig, s: Structure, n_u: usize, n_y: usize) -> Dims {
    Dims {
        n_x: cfg.bla.n_x,
        n_u,
        n_y,
        n_z: s.n_z,
        n_w: s.n_w,
        n_n: cfg.model.n_n,
    }
}
