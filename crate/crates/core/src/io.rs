//! Run configuration, energy logs and binary snapshots.
//!
//! Snapshot layout (all little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 8            | magic `CPSNAP\0\0`                        |
//! | 4            | format version (`u32`, currently 1)       |
//! | 4 + 4        | `nx`, `ny` (`u32`)                        |
//! | 8 + 8 + 8    | `hx`, `hy`, `t` (`f64`)                   |
//! | 4            | field count (`u32`)                       |
//! | 16 per field | field name, ASCII, zero padded            |
//! | 8 nx ny each | field values (`f64`), row-major `j nx + i` |

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::Coupling;
use crate::grid::{Grid2D, ScalarField};
use crate::harness::{find_experiment, step_count, ExperimentSpec, InitialCondition, ModelSpec, Scale};
use crate::integrators::{DissipationPoint, SchemeKind, Simulation, StepOptions, StepRecord};
use crate::model::PhaseState;

/// The model block of a config: parameters plus initial data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n: [f64; 3],
    /// Pair interactions `(AB, AS, BS)`.
    pub chi: [f64; 3],
    pub eps: f64,
    pub gamma: f64,
    pub mobility: [[f64; 3]; 3],
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_true")]
    pub bulk_log: bool,
    pub initial: InitialCondition,
}

fn default_sigma() -> f64 {
    crate::model::DEFAULT_SIGMA
}

fn default_true() -> bool {
    true
}

fn default_length() -> f64 {
    1.0
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ModelSection {
    fn from_spec(spec: &ExperimentSpec) -> Self {
        let m = &spec.model;
        Self {
            n: m.n,
            chi: m.chi,
            eps: m.eps,
            gamma: m.gamma,
            mobility: m.mobility,
            sigma: m.sigma,
            bulk_log: m.bulk_log,
            initial: spec.initial.clone(),
        }
    }

    fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            n: self.n,
            chi: self.chi,
            eps: self.eps,
            gamma: self.gamma,
            mobility: self.mobility,
            sigma: self.sigma,
            bulk_log: self.bulk_log,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "default_length")]
    pub lx: f64,
    #[serde(default = "default_length")]
    pub ly: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub dt: f64,
    pub t_end: f64,
    /// Where the SVM energy target evaluates the dissipation rate.
    #[serde(default)]
    pub dissipation: DissipationPoint,
    /// Re-solve the induced potential inside the Newton iteration.
    #[serde(default)]
    pub refresh_potential: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Times (multiples of `dt`) at which snapshots are written in addition
    /// to the initial one.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            out_dir: default_out_dir(),
            snapshot_times: Vec::new(),
        }
    }
}

/// A run description. With `experiment` set, omitted sections fall back to
/// the built-in experiment; a section that is present replaces the
/// built-in one as a whole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    pub scheme: SchemeKind,
    /// Overrides the seed of random initial data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Use the full-size grid and step instead of the desk defaults.
    #[serde(default)]
    pub full_scale: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<Coupling>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<TimeSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// A config with every default filled in and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub spec: ExperimentSpec,
    pub scheme: SchemeKind,
    pub grid: Grid2D,
    pub dt: f64,
    pub t_end: f64,
    pub steps: usize,
    pub options: StepOptions,
    /// Step indices at which snapshots are due (always includes 0).
    pub snapshot_steps: Vec<usize>,
    pub out_dir: PathBuf,
}

impl ResolvedRun {
    pub fn simulation(&self) -> Result<Simulation> {
        self.spec
            .simulation_on(self.scheme, self.grid, self.dt, self.options)
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.resolve()?;
    Ok(cfg)
}

pub fn config_to_string(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

impl RunConfig {
    /// A config that runs a built-in experiment with its defaults.
    pub fn for_experiment(name: &str, scheme: SchemeKind) -> Self {
        Self {
            experiment: Some(name.to_string()),
            scheme,
            seed: None,
            full_scale: false,
            model: None,
            coupling: None,
            grid: None,
            time: None,
            output: OutputSection::default(),
        }
    }

    pub fn resolve(&self) -> Result<ResolvedRun> {
        let base = match &self.experiment {
            Some(name) => Some(find_experiment(name)?),
            None => None,
        };
        let missing = |section: &str| {
            Error::Config(format!(
                "section [{section}] is required when no experiment is named"
            ))
        };
        let model = match (&self.model, &base) {
            (Some(m), _) => m.clone(),
            (None, Some(b)) => ModelSection::from_spec(b),
            (None, None) => return Err(missing("model")),
        };
        let scale: Option<Scale> = base.as_ref().map(|b| b.scale(self.full_scale));
        let grid = match (&self.grid, scale) {
            (Some(g), _) => *g,
            (None, Some(s)) => GridSection {
                nx: s.n,
                ny: s.n,
                lx: 1.0,
                ly: 1.0,
            },
            (None, None) => return Err(missing("grid")),
        };
        let time = match (&self.time, scale) {
            (Some(t), _) => *t,
            (None, Some(s)) => TimeSection {
                dt: s.dt,
                t_end: s.t_end,
                dissipation: DissipationPoint::default(),
                refresh_potential: false,
            },
            (None, None) => return Err(missing("time")),
        };
        let coupling = self
            .coupling
            .or(base.as_ref().map(|b| b.coupling))
            .unwrap_or_default();

        if grid.nx < 4 || grid.ny < 4 {
            return Err(Error::param(
                "grid",
                format!("nx and ny must be at least 4, got {} x {}", grid.nx, grid.ny),
            ));
        }
        if !(time.dt > 0.0 && time.dt.is_finite()) {
            return Err(Error::param("time.dt", format!("must be positive, got {}", time.dt)));
        }
        if !(time.t_end >= 0.0 && time.t_end.is_finite()) {
            return Err(Error::param(
                "time.t_end",
                format!("must be nonnegative, got {}", time.t_end),
            ));
        }
        let steps = step_count(time.t_end, time.dt)?;
        let mut snapshot_steps = vec![0];
        for &ts in &self.output.snapshot_times {
            if !(0.0..=time.t_end).contains(&ts) {
                return Err(Error::param(
                    "output.snapshot_times",
                    format!("{ts} lies outside [0, {}]", time.t_end),
                ));
            }
            snapshot_steps.push(step_count(ts, time.dt)?);
        }
        if let Some(b) = &base {
            if self.output.snapshot_times.is_empty() {
                for f in &b.snapshot_fractions {
                    snapshot_steps.push((f * steps as f64).round() as usize);
                }
            }
        }
        snapshot_steps.sort_unstable();
        snapshot_steps.dedup();

        let mut initial = model.initial.clone();
        if let Some(seed) = self.seed {
            initial = initial.with_seed(seed);
        }
        let spec = ExperimentSpec {
            name: self
                .experiment
                .clone()
                .unwrap_or_else(|| "custom".to_string()),
            description: base
                .as_ref()
                .map(|b| b.description.clone())
                .unwrap_or_else(|| "inline configuration".into()),
            model: model.model_spec(),
            coupling,
            initial,
            desk: scale.unwrap_or(Scale {
                n: grid.nx,
                dt: time.dt,
                t_end: time.t_end,
            }),
            full: base.as_ref().map_or(
                Scale {
                    n: grid.nx,
                    dt: time.dt,
                    t_end: time.t_end,
                },
                |b| b.full,
            ),
            snapshot_fractions: Vec::new(),
        };
        coupling.validate()?;
        let grid2 = Grid2D::new(grid.nx, grid.ny, grid.lx, grid.ly)?;
        // parameter validation against the actual means of the initial data
        // is cheap except for relaxed data, which is validated on use
        if !matches!(spec.initial, InitialCondition::Relaxed { .. }) {
            let st = spec.initial.build(grid2, &spec.model)?;
            spec.model.params(st.means())?;
        } else {
            spec.model.params(spec.initial.phibar())?;
        }
        Ok(ResolvedRun {
            spec,
            scheme: self.scheme,
            grid: grid2,
            dt: time.dt,
            t_end: time.t_end,
            steps,
            options: StepOptions {
                dissipation: time.dissipation,
                refresh_potential: time.refresh_potential,
                ..StepOptions::default()
            },
            snapshot_steps,
            out_dir: self.output.out_dir.clone(),
        })
    }
}

pub const ENERGY_LOG_HEADER: &str =
    "t energy predicted_energy dissipation alpha beta newton_iters krylov_iters mean_A mean_B mean_S";

pub fn format_record(r: &StepRecord) -> String {
    format!(
        "{:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {} {} {:.16e} {:.16e} {:.16e}",
        r.t,
        r.energy,
        r.predicted_energy,
        r.dissipation,
        r.alpha,
        r.beta,
        r.newton_iters,
        r.krylov_iters,
        r.means[0],
        r.means[1],
        r.means[2]
    )
}

/// Line-buffered energy log; each record is flushed as it is written so a
/// failing run leaves every completed step on disk.
pub struct EnergyLogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl EnergyLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.line(ENERGY_LOG_HEADER)?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn push(&mut self, r: &StepRecord) -> Result<()> {
        self.line(&format_record(r))
    }
}

pub fn write_energy_log(records: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = EnergyLogWriter::create(path)?;
    for r in records {
        w.push(r)?;
    }
    Ok(())
}

/// Parsed energy log: the header and one numeric row per step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl EnergyLog {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

pub fn read_energy_log(path: &Path) -> Result<EnergyLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Snapshot {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let columns: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("empty energy log".into()))?
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {e}", k + 2)))?;
        if row.len() != columns.len() {
            return Err(bad(format!("line {} has {} columns", k + 2, row.len())));
        }
        rows.push(row);
    }
    Ok(EnergyLog { columns, rows })
}

const MAGIC: &[u8; 8] = b"CPSNAP\0\0";
const VERSION: u32 = 1;
const NAME_LEN: usize = 16;

/// Decoded snapshot file.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub t: f64,
    pub fields: Vec<(String, Vec<f64>)>,
}

impl Snapshot {
    pub fn from_state(state: &PhaseState, potential: Option<&ScalarField>, t: f64) -> Self {
        let g = state.grid();
        let mut fields = vec![
            ("phi_A".to_string(), state.a().values().to_vec()),
            ("phi_B".to_string(), state.b().values().to_vec()),
            ("phi_S".to_string(), state.s().values().to_vec()),
        ];
        if let Some(p) = potential {
            fields.push(("Phi".to_string(), p.values().to_vec()));
        }
        Self {
            nx: g.nx,
            ny: g.ny,
            hx: g.hx,
            hy: g.hy,
            t,
            fields,
        }
    }

    pub fn field(&self, name: &str) -> Option<&[f64]> {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn grid(&self) -> Result<Grid2D> {
        Grid2D::new(self.nx, self.ny, self.nx as f64 * self.hx, self.ny as f64 * self.hy)
    }

    pub fn state(&self) -> Result<PhaseState> {
        let g = self.grid()?;
        let get = |name: &str| -> Result<ScalarField> {
            let v = self.field(name).ok_or_else(|| Error::Snapshot {
                path: PathBuf::new(),
                reason: format!("missing field {name}"),
            })?;
            ScalarField::from_vec(g, v.to_vec())
        };
        Ok(PhaseState::new(get("phi_A")?, get("phi_B")?, get("phi_S")?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.nx * self.ny;
        let mut b = Vec::with_capacity(48 + self.fields.len() * (NAME_LEN + 8 * n));
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.nx as u32).to_le_bytes());
        b.extend_from_slice(&(self.ny as u32).to_le_bytes());
        b.extend_from_slice(&self.hx.to_le_bytes());
        b.extend_from_slice(&self.hy.to_le_bytes());
        b.extend_from_slice(&self.t.to_le_bytes());
        b.extend_from_slice(&(self.fields.len() as u32).to_le_bytes());
        for (name, _) in &self.fields {
            let mut buf = [0u8; NAME_LEN];
            let bytes = name.as_bytes();
            let len = bytes.len().min(NAME_LEN);
            buf[..len].copy_from_slice(&bytes[..len]);
            b.extend_from_slice(&buf);
        }
        for (_, v) in &self.fields {
            for x in v {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Snapshot {
            path: path.to_path_buf(),
            reason,
        };
        let mut pos = 0usize;
        let mut take = |len: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + len)
                .ok_or_else(|| bad(format!("truncated at byte {pos}")))?;
            pos += len;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().expect("8 bytes"));
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let nx = u32_at(take(4)?) as usize;
        let ny = u32_at(take(4)?) as usize;
        let hx = f64_at(take(8)?);
        let hy = f64_at(take(8)?);
        let t = f64_at(take(8)?);
        let count = u32_at(take(4)?) as usize;
        let mut names = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = take(NAME_LEN)?;
            let end = raw.iter().position(|&c| c == 0).unwrap_or(NAME_LEN);
            names.push(
                std::str::from_utf8(&raw[..end])
                    .map_err(|_| bad("field name is not ASCII".into()))?
                    .to_string(),
            );
        }
        let n = nx * ny;
        let mut fields = Vec::with_capacity(count);
        for name in names {
            let raw = take(8 * n)?;
            let v = raw.chunks_exact(8).map(f64_at).collect();
            fields.push((name, v));
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            nx,
            ny,
            hx,
            hy,
            t,
            fields,
        })
    }
}

pub fn write_snapshot(
    state: &PhaseState,
    potential: Option<&ScalarField>,
    t: f64,
    path: &Path,
) -> Result<()> {
    let bytes = Snapshot::from_state(state, potential, t).to_bytes();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Snapshot::from_bytes(&bytes, path)
}

pub fn snapshot_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("snap_{step:07}.bin"))
}

/// What a run left on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub steps_done: usize,
    pub energy_log: PathBuf,
    pub snapshots: Vec<PathBuf>,
}

/// Executes a resolved run: streams the energy log, writes the configured
/// snapshots and, on failure, the last valid state as `last_valid.bin`.
pub fn execute_run(run: &ResolvedRun) -> std::result::Result<RunOutcome, (Error, RunOutcome)> {
    let dir = &run.out_dir;
    let mut outcome = RunOutcome {
        steps_done: 0,
        energy_log: dir.join("energy.log"),
        snapshots: Vec::new(),
    };
    let setup = || -> Result<(Simulation, EnergyLogWriter)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let sim = run.simulation()?;
        let log = EnergyLogWriter::create(&dir.join("energy.log"))?;
        Ok((sim, log))
    };
    let (mut sim, mut log) = match setup() {
        Ok(v) => v,
        Err(e) => return Err((e, outcome)),
    };
    let snap = |sim: &Simulation, outcome: &mut RunOutcome| -> Result<()> {
        let p = snapshot_path(dir, sim.steps());
        write_snapshot(&sim.state, sim.potential(), sim.time(), &p)?;
        outcome.snapshots.push(p);
        Ok(())
    };
    if let Err(e) = snap(&sim, &mut outcome) {
        return Err((e, outcome));
    }
    for _ in 0..run.steps {
        let res = sim.step().and_then(|r| log.push(&r));
        if let Err(e) = res {
            let p = dir.join("last_valid.bin");
            let _ = write_snapshot(&sim.state, sim.potential(), sim.time(), &p);
            outcome.snapshots.push(p);
            return Err((e, outcome));
        }
        outcome.steps_done = sim.steps();
        if run.snapshot_steps.binary_search(&sim.steps()).is_ok() {
            if let Err(e) = snap(&sim, &mut outcome) {
                return Err((e, outcome));
            }
        }
    }
    Ok(outcome)
}
