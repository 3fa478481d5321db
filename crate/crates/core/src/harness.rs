//! End-to-end experiments: scene → training → recovery → localization → metrics.
//!
//! Every user owns RNG substreams derived from `(rng_seed, user)`, so results
//! do not depend on thread scheduling. Rows are sorted by user before writing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{build_channel, Path, PulseShape, UnitDirection, UraGeometry};
use crate::dictionaries::{build_dictionaries, DictionaryConfig, DictionarySet};
use crate::localization::{classify, solve_position, weights_from_gains, ClassifierConfig, PathLabel, PositionFix};
use crate::scene::{default_scene, sample_clock_offset, GroundTruth, RoomScene};
use crate::solver::{extract_paths, PreparedSolver, SolverConfig, SparseEstimate};
use crate::training::{
    build_sensing, make_frames, make_pilots, observe, stream_id, substream, Observation, SensingTensor, TrainingConfig,
    TrainingFrame,
};
use crate::{Error, Result};

const STREAM_SCENE: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MOMP", alias = "momp")]
    Momp,
    #[serde(rename = "OMP", alias = "omp")]
    Omp,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Momp => "MOMP",
            Method::Omp => "OMP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub k_res: f64,
}

/// A receive array and its RF chain count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RxSetup {
    pub array: UraGeometry,
    pub rf_chains: usize,
}

impl RxSetup {
    pub fn label(&self) -> String {
        format!("{}x{}", self.array.nx, self.array.ny)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub k_res: Vec<f64>,
    /// Number of users (evenly spaced) timed per point.
    pub users: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Momp, Method::Omp],
            k_res: vec![1.0, 1.6, 16.0, 128.0],
            users: 1,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `None` selects the built-in two-room scene.
    pub scene: Option<RoomScene>,
    /// Evenly spaced subset of the scene's users; `None` keeps all.
    pub user_count: Option<usize>,
    /// Explicit user ids; overrides `user_count`.
    pub users: Option<Vec<usize>>,
    pub tx_array: UraGeometry,
    pub tx_rf_chains: usize,
    pub rx_setups: Vec<RxSetup>,
    pub frames: usize,
    pub q_symbols: usize,
    pub d_taps: usize,
    pub pilot_pad_left: usize,
    pub pilot_pad_right: usize,
    pub tx_power_dbm: f64,
    pub noise_power_dbm: f64,
    pub noiseless: bool,
    pub pulse: PulseShape,
    /// Clock offsets are drawn from `[0, range)`; 0 disables the offset.
    pub clock_offset_range_s: f64,
    pub methods: Vec<MethodSpec>,
    pub solver: SolverConfig,
    pub classifier: ClassifierConfig,
    pub rng_seed: u64,
    pub output_dir: PathBuf,
    /// Write solver run times to metrics.csv (makes the file non-reproducible).
    pub record_runtime: bool,
    /// `run` exits with status 3 when the failure rate exceeds this.
    pub failure_threshold: f64,
    pub write_debug: bool,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: None,
            user_count: None,
            users: None,
            tx_array: UraGeometry::half_wave(3, 3),
            tx_rf_chains: 3,
            rx_setups: vec![RxSetup {
                array: UraGeometry::half_wave(6, 6),
                rf_chains: 6,
            }],
            frames: 32,
            q_symbols: 96,
            d_taps: 64,
            pilot_pad_left: 64,
            pilot_pad_right: 32,
            tx_power_dbm: 20.0,
            noise_power_dbm: -84.0,
            noiseless: false,
            pulse: PulseShape::sinc(1e-9),
            clock_offset_range_s: 5e-9,
            methods: vec![
                MethodSpec {
                    method: Method::Momp,
                    k_res: 128.0,
                },
                MethodSpec {
                    method: Method::Omp,
                    k_res: 1.6,
                },
            ],
            solver: SolverConfig::default(),
            classifier: ClassifierConfig::default(),
            rng_seed: 1,
            output_dir: PathBuf::from("out"),
            record_runtime: false,
            failure_threshold: 1.0,
            write_debug: false,
            bench: BenchConfig::default(),
        }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn scene(&self) -> RoomScene {
        self.scene.clone().unwrap_or_else(default_scene)
    }

    pub fn training(&self, rx: &RxSetup) -> TrainingConfig {
        TrainingConfig {
            m_frames: self.frames,
            m_tx_chains: self.tx_rf_chains,
            m_rx_chains: rx.rf_chains,
            q_symbols: self.q_symbols,
            d_taps: self.d_taps,
            tx_power_w: dbm_to_watts(self.tx_power_dbm),
            noise_power_w: if self.noiseless { 0.0 } else { dbm_to_watts(self.noise_power_dbm) },
            rng_seed: self.rng_seed,
        }
    }

    pub fn dictionary(&self, rx: &RxSetup, k_res: f64) -> DictionaryConfig {
        DictionaryConfig {
            k_res,
            d_taps: self.d_taps,
            sample_period_s: self.pulse.sample_period_s,
            rx_geom: rx.array,
            tx_geom: self.tx_array,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scene = self.scene();
        scene.validate()?;
        self.tx_array.validate()?;
        self.pulse.validate()?;
        self.solver.validate()?;
        self.classifier.validate()?;
        if self.rx_setups.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("need at least one receive setup and one method".into()));
        }
        for rx in &self.rx_setups {
            rx.array.validate()?;
            let t = self.training(rx);
            t.validate()?;
            if rx.rf_chains > rx.array.n_elements() || self.tx_rf_chains > self.tx_array.n_elements() {
                return Err(Error::Config("more RF chains than antennas".into()));
            }
            make_pilots(&t, self.pilot_pad_left, self.pilot_pad_right)?;
        }
        for m in &self.methods {
            if !(m.k_res.is_finite() && m.k_res >= 1.0) {
                return Err(Error::Config(format!("k_res must be >= 1, got {}", m.k_res)));
            }
        }
        if !(self.clock_offset_range_s.is_finite() && self.clock_offset_range_s >= 0.0) {
            return Err(Error::Config("clock_offset_range_s must be >= 0".into()));
        }
        if self.noise_power_dbm.is_nan() || self.tx_power_dbm.is_nan() {
            return Err(Error::Config("powers must be numbers".into()));
        }
        self.user_ids(&scene)?;
        Ok(())
    }

    /// Users included in the run, ascending.
    pub fn user_ids(&self, scene: &RoomScene) -> Result<Vec<usize>> {
        let n = scene.users.len();
        if let Some(ids) = &self.users {
            if let Some(bad) = ids.iter().find(|&&u| u >= n) {
                return Err(Error::Config(format!("user {bad} does not exist ({n} users)")));
            }
            let mut ids = ids.clone();
            ids.sort_unstable();
            ids.dedup();
            return Ok(ids);
        }
        Ok(match self.user_count {
            None => (0..n).collect(),
            Some(c) => evenly_spaced(n, c),
        })
    }
}

/// `count` indices spread evenly over `0..n`, first and last included.
pub fn evenly_spaced(n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n);
    match count {
        0 => Vec::new(),
        1 => vec![0],
        _ => {
            let mut v: Vec<usize> = (0..count)
                .map(|i| ((i * (n - 1)) as f64 / (count - 1) as f64).round() as usize)
                .collect();
            v.dedup();
            v
        }
    }
}

/// Angle between two directions in degrees.
pub fn angular_error(a: &UnitDirection, b: &UnitDirection) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    /// The solver returned no paths.
    NoPaths,
    Unlocalizable,
    Failed,
}

impl RowStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::NoPaths => "no_paths",
            RowStatus::Unlocalizable => "unlocalizable",
            RowStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub user: usize,
    pub ap: usize,
    pub method: Method,
    pub k_res: f64,
    pub rx_array: String,
    pub aoa_err_deg: Option<f64>,
    pub aod_err_deg: Option<f64>,
    pub loc_err_m: Option<f64>,
    pub runtime_s: f64,
    pub status: RowStatus,
    /// Error text for failed rows.
    pub detail: Option<String>,
}

/// Per-user ground truth shared by every receive setup and method.
#[derive(Debug, Clone)]
struct UserCase {
    truth: GroundTruth,
    ap_position: [f64; 3],
}

fn user_case(cfg: &ExperimentConfig, scene: &RoomScene, user: usize) -> Result<UserCase> {
    let ap = scene.associate_ap(user)?;
    let mut rng = substream(cfg.rng_seed, stream_id(user as u64, STREAM_SCENE));
    let traced = scene.trace_paths(ap, user, &mut rng)?;
    let clock_offset_s = if cfg.clock_offset_range_s > 0.0 {
        sample_clock_offset(&mut rng, cfg.clock_offset_range_s)?
    } else {
        0.0
    };
    Ok(UserCase {
        truth: GroundTruth {
            user,
            ap,
            position: scene.users[user],
            clock_offset_s,
            paths: traced.iter().map(|t| t.path).collect(),
            labels: traced.iter().map(|t| t.kind).collect(),
        },
        ap_position: scene.aps[ap].position,
    })
}

/// Training setup for one receive array.
struct Setup {
    rx: RxSetup,
    training: TrainingConfig,
    frames: Vec<TrainingFrame>,
    phi: SensingTensor,
    index: u64,
}

fn make_setup(cfg: &ExperimentConfig, rx: &RxSetup, index: usize) -> Result<Setup> {
    let training = cfg.training(rx);
    let pilot = make_pilots(&training, cfg.pilot_pad_left, cfg.pilot_pad_right)?;
    let frames = make_frames(&training, &cfg.tx_array, &rx.array, &pilot)?;
    let phi = build_sensing(&frames, &training, &cfg.tx_array, &rx.array)?;
    Ok(Setup {
        rx: *rx,
        training,
        frames,
        phi,
        index: index as u64,
    })
}

fn simulate_user(cfg: &ExperimentConfig, setup: &Setup, case: &UserCase) -> Result<Observation> {
    let h = build_channel(
        &case.truth.paths,
        &setup.rx.array,
        &cfg.tx_array,
        &cfg.pulse,
        cfg.d_taps,
        case.truth.clock_offset_s,
    )?;
    let stream = stream_id(stream_id(case.truth.user as u64, setup.index), STREAM_NOISE);
    observe(&h, &setup.frames, &setup.training, stream)
}

fn prepare<'a>(
    method: Method,
    phi: &'a SensingTensor,
    set: &'a DictionarySet,
    cfg: &SolverConfig,
) -> Result<PreparedSolver<'a>> {
    match method {
        Method::Momp => PreparedSolver::momp(phi, set, cfg),
        Method::Omp => PreparedSolver::omp(phi, set, cfg),
    }
}

/// Outcome of estimation and localization for one user and method.
#[derive(Debug)]
pub struct UserEstimate {
    pub estimate: SparseEstimate,
    pub paths: Vec<Path>,
    /// Paths rotated into the global frame, AP at the origin.
    pub global_paths: Vec<Path>,
    pub labels: Vec<PathLabel>,
    pub fix: Result<PositionFix>,
    pub runtime_s: f64,
}

fn to_global(scene: &RoomScene, ap: usize, p: &Path) -> Path {
    Path {
        aoa: scene.aps[ap].orientation.to_global(&p.aoa),
        aod: scene.user_orientation.to_global(&p.aod),
        ..*p
    }
}

fn estimate_user(
    cfg: &ExperimentConfig,
    scene: &RoomScene,
    solver: &PreparedSolver,
    set: &DictionarySet,
    case: &UserCase,
    y: &Observation,
) -> Result<UserEstimate> {
    let start = Instant::now();
    let estimate = solver.solve(y)?;
    let runtime_s = start.elapsed().as_secs_f64();
    let paths = extract_paths(&estimate, set)?;
    let global_paths: Vec<Path> = paths.iter().map(|p| to_global(scene, case.truth.ap, p)).collect();
    let labels: Vec<PathLabel> = global_paths.iter().map(|p| classify(p, &cfg.classifier)).collect();
    let fix = solve_position(&global_paths, &labels, &weights_from_gains(&global_paths));
    Ok(UserEstimate {
        estimate,
        paths,
        global_paths,
        labels,
        fix,
        runtime_s,
    })
}

fn strongest(paths: &[Path]) -> Option<&Path> {
    paths.iter().fold(None, |best: Option<&Path>, p| match best {
        Some(b) if b.power() >= p.power() => Some(b),
        _ => Some(p),
    })
}

fn score_row(spec: &MethodSpec, setup: &Setup, case: &UserCase, outcome: Result<UserEstimate>) -> MetricsRow {
    let mut row = MetricsRow {
        user: case.truth.user,
        ap: case.truth.ap,
        method: spec.method,
        k_res: spec.k_res,
        rx_array: setup.rx.label(),
        aoa_err_deg: None,
        aod_err_deg: None,
        loc_err_m: None,
        runtime_s: 0.0,
        status: RowStatus::Failed,
        detail: None,
    };
    let est = match outcome {
        Ok(e) => e,
        Err(e) => {
            row.detail = Some(e.to_string());
            return row;
        }
    };
    row.runtime_s = est.runtime_s;
    let (Some(main_est), Some(main_true)) = (strongest(&est.paths), strongest(&case.truth.paths)) else {
        row.status = RowStatus::NoPaths;
        return row;
    };
    row.aoa_err_deg = Some(angular_error(&main_est.aoa, &main_true.aoa));
    row.aod_err_deg = Some(angular_error(&main_est.aod, &main_true.aod));
    match est.fix {
        Ok(fix) => {
            let pos: [f64; 3] = std::array::from_fn(|k| case.ap_position[k] + fix.u[k]);
            let d: f64 = (0..3).map(|k| (pos[k] - case.truth.position[k]).powi(2)).sum();
            row.loc_err_m = Some(d.sqrt());
            row.status = RowStatus::Ok;
        }
        Err(e) => {
            row.status = RowStatus::Unlocalizable;
            row.detail = Some(e.to_string());
        }
    }
    row
}

/// Runs every configured receive setup and method over the selected users.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let scene = cfg.scene();
    let users = cfg.user_ids(&scene)?;
    let cases: Vec<Result<UserCase>> = users.par_iter().map(|&u| user_case(cfg, &scene, u)).collect();
    let mut rows = Vec::new();
    for (si, rx) in cfg.rx_setups.iter().enumerate() {
        let setup = make_setup(cfg, rx, si)?;
        let sets: Vec<Result<DictionarySet>> = cfg
            .methods
            .iter()
            .map(|m| build_dictionaries(&cfg.dictionary(rx, m.k_res), &cfg.pulse))
            .collect();
        let solvers: Vec<Result<PreparedSolver>> = cfg
            .methods
            .iter()
            .zip(&sets)
            .map(|(m, set)| match set {
                Ok(set) => prepare(m.method, &setup.phi, set, &cfg.solver),
                Err(e) => Err(Error::Config(e.to_string())),
            })
            .collect();
        let per_user: Vec<Vec<MetricsRow>> = cases
            .par_iter()
            .zip(&users)
            .map(|(case, &user)| {
                let case = match case {
                    Ok(c) => c,
                    Err(e) => return failed_rows(cfg, rx, user, e),
                };
                let y = simulate_user(cfg, &setup, case);
                cfg.methods
                    .iter()
                    .zip(&sets)
                    .zip(&solvers)
                    .map(|((spec, set), solver)| {
                        let outcome = match (&y, set, solver) {
                            (Ok(y), Ok(set), Ok(solver)) => estimate_user(cfg, &scene, solver, set, case, y),
                            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => Err(Error::Config(e.to_string())),
                        };
                        score_row(spec, &setup, case, outcome)
                    })
                    .collect()
            })
            .collect();
        rows.extend(per_user.into_iter().flatten());
    }
    rows.sort_by_key(|r| r.user);
    Ok(rows)
}

fn failed_rows(cfg: &ExperimentConfig, rx: &RxSetup, user: usize, e: &Error) -> Vec<MetricsRow> {
    cfg.methods
        .iter()
        .map(|m| MetricsRow {
            user,
            ap: 0,
            method: m.method,
            k_res: m.k_res,
            rx_array: rx.label(),
            aoa_err_deg: None,
            aod_err_deg: None,
            loc_err_m: None,
            runtime_s: 0.0,
            status: RowStatus::Failed,
            detail: Some(e.to_string()),
        })
        .collect()
}

pub const CSV_HEADER: &str = "user,ap,method,k_res,aoa_err_deg,aod_err_deg,loc_err_m,runtime_s,status,rx_array";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow], record_runtime: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let runtime = if record_runtime { r.runtime_s.to_string() } else { String::new() };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.user,
            r.ap,
            r.method.tag(),
            r.k_res,
            opt(r.aoa_err_deg),
            opt(r.aod_err_deg),
            opt(r.loc_err_m),
            runtime,
            r.status.as_str(),
            r.rx_array
        ));
    }
    out
}

/// Median with the two middle values averaged.
pub fn median(values: &[f64]) -> Option<f64> {
    percentile(values, 50.0)
}

/// Linear-interpolation percentile.
pub fn percentile(values: &[f64], pct: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: Method,
    pub k_res: f64,
    pub rx_array: String,
    pub rows: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub median_aoa_err_deg: Option<f64>,
    pub median_aod_err_deg: Option<f64>,
    pub median_loc_err_m: Option<f64>,
    pub p90_loc_err_m: Option<f64>,
    pub mean_runtime_s: Option<f64>,
    /// Sorted localization errors; the i-th value has CDF `(i + 1) / n`.
    pub loc_err_cdf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub groups: Vec<GroupSummary>,
    pub failure_rate: f64,
}

/// Per `(method, k_res, rx array)` statistics. Rows that are not `ok` count as
/// failures and are left out of the localization statistics; angular errors
/// use every row that produced paths.
pub fn summarize(rows: &[MetricsRow], include_runtime: bool) -> Summary {
    let mut groups: BTreeMap<(Method, u64, String), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method, r.k_res.to_bits(), r.rx_array.clone()))
            .or_default()
            .push(r);
    }
    let groups: Vec<GroupSummary> = groups
        .into_values()
        .map(|g| {
            let pick = |f: fn(&MetricsRow) -> Option<f64>| g.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
            let aoa = pick(|r| r.aoa_err_deg);
            let aod = pick(|r| r.aod_err_deg);
            let mut loc: Vec<f64> = g.iter().filter(|r| r.status == RowStatus::Ok).filter_map(|r| r.loc_err_m).collect();
            loc.sort_by(f64::total_cmp);
            let failures = g.iter().filter(|r| r.status != RowStatus::Ok).count();
            let runtime = include_runtime.then(|| g.iter().map(|r| r.runtime_s).sum::<f64>() / g.len() as f64);
            GroupSummary {
                method: g[0].method,
                k_res: g[0].k_res,
                rx_array: g[0].rx_array.clone(),
                rows: g.len(),
                failures,
                failure_rate: failures as f64 / g.len() as f64,
                median_aoa_err_deg: median(&aoa),
                median_aod_err_deg: median(&aod),
                median_loc_err_m: median(&loc),
                p90_loc_err_m: percentile(&loc, 90.0),
                mean_runtime_s: runtime,
                loc_err_cdf: loc,
            }
        })
        .collect();
    let failures = rows.iter().filter(|r| r.status != RowStatus::Ok).count();
    Summary {
        groups,
        failure_rate: if rows.is_empty() { 0.0 } else { failures as f64 / rows.len() as f64 },
    }
}

/// Writes metrics.csv and summary.json; returns the summary.
pub fn write_outputs(rows: &[MetricsRow], cfg: &ExperimentConfig, dir: &FsPath) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(rows, cfg.record_runtime))?;
    let summary = summarize(rows, cfg.record_runtime);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    if cfg.write_debug {
        let failed: Vec<&MetricsRow> = rows.iter().filter(|r| r.detail.is_some()).collect();
        fs::write(dir.join("failures.json"), serde_json::to_string_pretty(&failed)?)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub k_res: f64,
    pub atoms: u128,
    /// Median solve time over users and repeats; `None` when the method cannot run.
    pub median_runtime_s: Option<f64>,
    pub note: Option<String>,
}

/// Times each method over the `bench.k_res` sweep on the first receive setup.
pub fn bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let scene = cfg.scene();
    let rx = cfg.rx_setups[0];
    let setup = make_setup(cfg, &rx, 0)?;
    let all = cfg.user_ids(&scene)?;
    let picks = evenly_spaced(all.len(), cfg.bench.users.max(1));
    let mut observations = Vec::new();
    for &i in &picks {
        let case = user_case(cfg, &scene, all[i])?;
        observations.push(simulate_user(cfg, &setup, &case)?);
    }
    let mut out = Vec::new();
    for &method in &cfg.bench.methods {
        for &k_res in &cfg.bench.k_res {
            let set = build_dictionaries(&cfg.dictionary(&rx, k_res), &cfg.pulse)?;
            let atoms = set.total_atoms();
            let solver = match prepare(method, &setup.phi, &set, &cfg.solver) {
                Ok(s) => s,
                Err(e @ Error::Capacity { .. }) => {
                    out.push(BenchRow {
                        method,
                        k_res,
                        atoms,
                        median_runtime_s: None,
                        note: Some(e.to_string()),
                    });
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut times = Vec::new();
            for y in &observations {
                for _ in 0..cfg.bench.repeats.max(1) {
                    let start = Instant::now();
                    solver.solve(y)?;
                    times.push(start.elapsed().as_secs_f64());
                }
            }
            out.push(BenchRow {
                method,
                k_res,
                atoms,
                median_runtime_s: median(&times),
                note: None,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct TraceMethod {
    method: Method,
    k_res: f64,
    runtime_s: f64,
    estimate: serde_json::Value,
    paths: Vec<Path>,
    global_paths: Vec<Path>,
    labels: Vec<PathLabel>,
    fix: Option<PositionFix>,
    fix_error: Option<String>,
}

/// Dumps one user's intermediate artifacts (first receive setup) into `dir`.
pub fn trace_user(cfg: &ExperimentConfig, user: usize, dir: &FsPath) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let scene = cfg.scene();
    if user >= scene.users.len() {
        return Err(Error::Config(format!("user {user} does not exist")));
    }
    fs::create_dir_all(dir)?;
    let case = user_case(cfg, &scene, user)?;
    let setup = make_setup(cfg, &cfg.rx_setups[0], 0)?;
    let y = simulate_user(cfg, &setup, &case)?;
    let mut written = Vec::new();
    let truth_path = dir.join("ground_truth.json");
    fs::write(&truth_path, serde_json::to_string_pretty(&case.truth)?)?;
    written.push(truth_path);
    let obs_path = dir.join("observation.bin");
    y.write_to(fs::File::create(&obs_path)?)?;
    written.push(obs_path);
    let mut methods = Vec::new();
    for spec in &cfg.methods {
        let set = build_dictionaries(&cfg.dictionary(&setup.rx, spec.k_res), &cfg.pulse)?;
        let solver = prepare(spec.method, &setup.phi, &set, &cfg.solver)?;
        let est = estimate_user(cfg, &scene, &solver, &set, &case, &y)?;
        let (fix, fix_error) = match est.fix {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        methods.push(TraceMethod {
            method: spec.method,
            k_res: spec.k_res,
            runtime_s: est.runtime_s,
            estimate: serde_json::from_str(&est.estimate.to_json()?)?,
            paths: est.paths,
            global_paths: est.global_paths,
            labels: est.labels,
            fix,
            fix_error,
        });
    }
    let est_path = dir.join("estimates.json");
    fs::write(&est_path, serde_json::to_string_pretty(&methods)?)?;
    written.push(est_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(aoa: f64, loc: Option<f64>, status: RowStatus) -> MetricsRow {
        MetricsRow {
            user: 0,
            ap: 0,
            method: Method::Momp,
            k_res: 128.0,
            rx_array: "6x6".into(),
            aoa_err_deg: Some(aoa),
            aod_err_deg: Some(aoa),
            loc_err_m: loc,
            runtime_s: 0.5,
            status,
            detail: None,
        }
    }

    #[test]
    fn angular_error_examples() {
        let x = UnitDirection { x: 1.0, y: 0.0, z: 0.0 };
        assert_eq!(angular_error(&x, &x), 0.0);
        let y = UnitDirection { x: 0.0, y: 1.0, z: 0.0 };
        assert!((angular_error(&x, &y) - 90.0).abs() < 1e-12);
        let d = UnitDirection { x: 0.3, y: 0.4, z: 0.75f64.sqrt() };
        assert!((angular_error(&x, &d) - 0.3f64.acos().to_degrees()).abs() < 1e-12);
        assert!((angular_error(&x, &d) - 72.54).abs() < 0.01);
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[row(1.5, Some(0.2), RowStatus::Ok)], true);
        let g = &s.groups[0];
        assert_eq!(g.median_aoa_err_deg, Some(1.5));
        assert_eq!(g.median_loc_err_m, Some(0.2));
        assert_eq!(g.p90_loc_err_m, Some(0.2));
        assert_eq!(g.mean_runtime_s, Some(0.5));

        let rows = [
            row(1.0, Some(1.0), RowStatus::Ok),
            row(2.0, Some(2.0), RowStatus::Ok),
            row(3.0, Some(3.0), RowStatus::Ok),
            row(9.0, None, RowStatus::Unlocalizable),
        ];
        let s = summarize(&rows[..3], false);
        assert_eq!(s.groups[0].median_aoa_err_deg, Some(2.0));
        assert_eq!(s.groups[0].mean_runtime_s, None);
        let s = summarize(&rows, false);
        assert_eq!(s.groups[0].median_loc_err_m, Some(2.0));
        assert_eq!(s.groups[0].failure_rate, 0.25);
        assert_eq!(s.groups[0].loc_err_cdf, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn csv_layout() {
        let mut r = row(1.0, None, RowStatus::Unlocalizable);
        r.user = 7;
        let csv = metrics_csv(&[r], false);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("user,ap,method,k_res,aoa_err_deg,aod_err_deg,loc_err_m,runtime_s,status"));
        assert_eq!(lines[1], "7,0,MOMP,128,1,1,,,unlocalizable,6x6");
    }

    #[test]
    fn user_selection() {
        assert_eq!(evenly_spaced(218, 1), vec![0]);
        assert_eq!(evenly_spaced(5, 3), vec![0, 2, 4]);
        assert_eq!(evenly_spaced(3, 10), vec![0, 1, 2]);
        let v = evenly_spaced(218, 50);
        assert_eq!(v.len(), 50);
        assert_eq!(*v.last().unwrap(), 217);
    }

    #[test]
    fn config_defaults_and_errors() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg.q_symbols + cfg.d_taps, 160);
        assert!((dbm_to_watts(cfg.tx_power_dbm) - 0.1).abs() < 1e-15);
        assert!(matches!(ExperimentConfig::from_json(r#"{"frames": 0}"#), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"methods": [{"method": "MOMP", "k_res": 0.5}]}"#),
            Err(Error::Config(_))
        ));
    }
}
