//! Experiment configs, runners and metric outputs.
//!
//! Every output byte except the `wall_time` column is a function of the
//! config and the master seed. Run `i` uses `derive_seed(seed, [i])`.

mod cstr;
mod lq;
mod oracle;

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::envs::{BoxBounds, CstrConfig, LqEnvConfig};
use crate::error::{Error, Result};
use crate::mdp::DiscountConfig;
use crate::ocp::CstrScaling;
use crate::rl::{LearnerConfig, ValueFeatures};
use crate::solver::SolverSettings;

pub use cstr::{run_cstr_vfmpc, AgentReport, CstrReport, TrajectoryRow};
pub use lq::{lq_expected_return, run_lq_reinforce, LqReport};
pub use oracle::{
    bellman_suite, riccati_mpc_suite, run_oracle_suite, sensitivity_suite, td_fixed_point_suite, BellmanReport,
    OracleReport, OracleSettings, RiccatiMpcReport, SensitivityReport, TdFixedPointReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    LqReinforce,
    CstrVfmpc,
    OracleSuite,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::LqReinforce => "lq_reinforce",
            Self::CstrVfmpc => "cstr_vfmpc",
            Self::OracleSuite => "oracle_suite",
        }
    }
}

/// Top-level experiment file. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Master seed.
    pub seed: u64,
    /// Independent seeded runs of the LQ study; the CSTR study and the
    /// oracle suite are single deterministic runs and ignore it.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Default output directory; the command line can override it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub env: Option<EnvSection>,
    #[serde(default)]
    pub ocp: Option<OcpSection>,
    #[serde(default)]
    pub learner: Option<LearnerConfig>,
    #[serde(default)]
    pub cstr: Option<CstrSection>,
    #[serde(default)]
    pub oracle: Option<OracleSettings>,
}

fn default_repetitions() -> usize {
    100
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EnvSection {
    Lq(LqEnvSection),
    Cstr(CstrConfig),
}

/// Matrices are given as lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqEnvSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    /// Zero noise when absent.
    #[serde(default)]
    pub noise_std: Option<Vec<f64>>,
    pub x0_low: Vec<f64>,
    pub x0_high: Vec<f64>,
}

impl LqEnvSection {
    pub fn to_config(&self) -> Result<LqEnvConfig> {
        let a = matrix("env.a", &self.a)?;
        let n = a.nrows();
        let noise = self.noise_std.clone().unwrap_or_else(|| vec![0.0; n]);
        let cfg = LqEnvConfig {
            a,
            b: matrix("env.b", &self.b)?,
            q: matrix("env.q", &self.q)?,
            r: matrix("env.r", &self.r)?,
            noise_std: noise.into(),
            x0_low: self.x0_low.clone().into(),
            x0_high: self.x0_high.clone().into(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Row-major matrix from a list of equally long rows.
pub fn matrix(what: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 {
        return Err(Error::Config(format!("{what} is empty")));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != nc) {
        return Err(Error::Config(format!("{what}: ragged rows ({} and {} entries)", nc, bad.len())));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Seeded model perturbation: `A_phi = A + frobenius_a * G_A / |G_A|_F`
/// with `G_A` standard normal, likewise for `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub frobenius_a: f64,
    pub frobenius_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpSection {
    pub horizon: usize,
    pub gamma: DiscountConfig,
    #[serde(default = "yes")]
    pub discount_in_horizon: bool,
    /// Input box of the LQ MPC.
    #[serde(default)]
    pub input_bounds: Option<BoxBounds>,
    /// Initial model mismatch of the LQ MPC.
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
}

/// Settings of the CSTR study: MPC scaling, the value fit and the closed
/// loop shared by the three agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CstrSection {
    pub scaling: CstrScaling,
    #[serde(default = "unit")]
    pub cost_scale: f64,
    /// Tightening of the state box inside the MPC, in scaled units.
    #[serde(default)]
    pub backoff: f64,
    /// Closed-loop length.
    pub steps: usize,
    /// Common initial state of the three agents.
    pub initial_state: Vec<f64>,
    /// Weight of `(c_B - setpoint)^2` in the default MPC's terminal cost.
    #[serde(default)]
    pub default_terminal_weight: f64,
    #[serde(default)]
    pub solver: SolverSettings,
    pub value: ValueSection,
}

fn unit() -> f64 {
    1.0
}

/// Monte Carlo value regression on rollouts of an unconstrained linear
/// feedback around a steady state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueSection {
    pub features: ValueFeatures,
    pub rollouts: usize,
    pub rollout_steps: usize,
    /// Leading states of each rollout used as regression samples; the
    /// remaining steps only complete their returns.
    pub fit_steps: usize,
    pub rmse_max: f64,
    /// Rollout start box (six components).
    pub x0_low: Vec<f64>,
    pub x0_high: Vec<f64>,
    pub behavior: BehaviorSection,
}

/// Discounted LQR around the steady state reached under `input`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSection {
    pub input: Vec<f64>,
    pub state_weights: Vec<f64>,
    pub input_weights: Vec<f64>,
    #[serde(default = "settle_default")]
    pub settle_steps: usize,
}

fn settle_default() -> usize {
    20_000
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        // An unreadable config is reported as a config error, not as IO.
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Sections required by the experiment are present and consistent.
    /// Any failure is reported as a config error.
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    fn check(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        let need = |present: bool, section: &str| {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!("section [{section}] is required for {:?}", self.experiment)))
            }
        };
        match self.experiment {
            ExperimentKind::LqReinforce => {
                need(self.ocp.is_some(), "ocp")?;
                need(self.learner.is_some(), "learner")?;
                let Some(EnvSection::Lq(env)) = &self.env else {
                    return Err(Error::Config("lq_reinforce needs an [env] of type \"lq\"".into()));
                };
                let env = env.to_config()?;
                let ocp = self.ocp.as_ref().expect("checked");
                let learner = self.learner.as_ref().expect("checked");
                learner.validate()?;
                if ocp.horizon == 0 {
                    return Err(Error::Config("ocp.horizon must be at least 1".into()));
                }
                if ocp.perturbation.is_none() {
                    return Err(Error::Config("lq_reinforce needs ocp.perturbation".into()));
                }
                if let Some(p) = ocp.perturbation {
                    if !(p.frobenius_a >= 0.0 && p.frobenius_b >= 0.0) {
                        return Err(Error::Config("perturbation magnitudes must be nonnegative".into()));
                    }
                }
                if let Some(b) = &ocp.input_bounds {
                    b.validate("ocp.input_bounds", env.b.ncols())?;
                }
                if learner.sigma.initial.len() != env.b.ncols() {
                    return Err(Error::dim("learner.sigma.initial", env.b.ncols(), learner.sigma.initial.len()));
                }
                for name in &learner.learnable {
                    if name != "A" && name != "B" {
                        return Err(Error::Config(format!("learnable segment {name:?}: only \"A\" and \"B\" are learnable here")));
                    }
                }
                Ok(())
            }
            ExperimentKind::CstrVfmpc => {
                need(self.ocp.is_some(), "ocp")?;
                need(self.cstr.is_some(), "cstr")?;
                let Some(EnvSection::Cstr(env)) = &self.env else {
                    return Err(Error::Config("cstr_vfmpc needs an [env] of type \"cstr\"".into()));
                };
                env.validate()?;
                let ocp = self.ocp.as_ref().expect("checked");
                if ocp.horizon == 0 {
                    return Err(Error::Config("ocp.horizon must be at least 1".into()));
                }
                if !ocp.discount_in_horizon {
                    return Err(Error::Config("the CSTR MPC always discounts inside the horizon".into()));
                }
                if ocp.input_bounds.is_some() || ocp.perturbation.is_some() {
                    return Err(Error::Config("ocp.input_bounds and ocp.perturbation are LQ-only".into()));
                }
                cstr::validate_section(env, self.cstr.as_ref().expect("checked"))
            }
            ExperimentKind::OracleSuite => Ok(()),
        }
    }
}

/// `sqrt(sum (M_phi - M)^2)`.
pub fn frobenius_mismatch(m_phi: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64> {
    if m_phi.shape() != m.shape() {
        return Err(Error::InvalidArgument(format!(
            "frobenius_mismatch: shapes {:?} and {:?} differ",
            m_phi.shape(),
            m.shape()
        )));
    }
    Ok((m_phi - m).norm())
}

/// One line of `metrics.csv`. Empty cells mean "not applicable".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: usize,
    pub episode: usize,
    #[serde(rename = "J_hat")]
    pub j_hat: Option<f64>,
    pub stderr: Option<f64>,
    #[serde(rename = "frob_A")]
    pub frob_a: Option<f64>,
    #[serde(rename = "frob_B")]
    pub frob_b: Option<f64>,
    pub td_loss: Option<f64>,
    pub violation_count: Option<usize>,
    /// Seconds since the start of the run.
    pub wall_time: f64,
}

pub const METRICS_HEADER: &str = "run_id,episode,J_hat,stderr,frob_A,frob_B,td_loss,violation_count,wall_time";

/// Everything a runner hands to [`write_outputs`].
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub rows: Vec<MetricsRow>,
    /// Runs left out of the aggregates.
    pub excluded_runs: Vec<usize>,
    /// Experiment-specific summary entries.
    pub extra: serde_json::Map<String, serde_json::Value>,
    /// Additional csv files, written verbatim.
    pub files: Vec<(String, String)>,
}

/// Per-episode aggregate of one metric over the included runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl Aggregate {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { n, mean, std })
    }
}

const CURVE_METRICS: [&str; 5] = ["J_hat", "frob_A", "frob_B", "td_loss", "violation_count"];

fn metric(row: &MetricsRow, name: &str) -> Option<f64> {
    match name {
        "J_hat" => row.j_hat,
        "frob_A" => row.frob_a,
        "frob_B" => row.frob_b,
        "td_loss" => row.td_loss,
        "violation_count" => row.violation_count.map(|v| v as f64),
        _ => None,
    }
}

/// Aggregates per episode (ascending) and metric, over rows whose run is
/// not excluded. Runs enter in row order.
pub fn aggregate(rows: &[MetricsRow], excluded: &[usize]) -> Vec<(usize, Vec<Option<Aggregate>>)> {
    let mut episodes: Vec<usize> = rows.iter().map(|r| r.episode).collect();
    episodes.sort_unstable();
    episodes.dedup();
    episodes
        .into_iter()
        .map(|ep| {
            let sel: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.episode == ep && !excluded.contains(&r.run_id))
                .collect();
            let aggs = CURVE_METRICS
                .iter()
                .map(|m| Aggregate::of(&sel.iter().filter_map(|r| metric(r, m)).collect::<Vec<_>>()))
                .collect();
            (ep, aggs)
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Write `metrics.csv`, `curves.csv`, `summary.json` and any extra files
/// into `dir`, creating it if needed.
pub fn write_outputs(out: &RunOutputs, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let path = dir.join("metrics.csv");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path).map_err(csv_err(&path))?;
    w.write_record(METRICS_HEADER.split(',')).map_err(csv_err(&path))?;
    for row in &out.rows {
        w.serialize(row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let curves = aggregate(&out.rows, &out.excluded_runs);
    let path = dir.join("curves.csv");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["episode".to_string(), "n_runs".to_string()];
    for m in CURVE_METRICS {
        for suffix in ["mean", "std", "lo", "hi"] {
            header.push(format!("{m}_{suffix}"));
        }
    }
    w.write_record(&header).map_err(csv_err(&path))?;
    for (ep, aggs) in &curves {
        let n_runs = aggs.iter().flatten().map(|a| a.n).max().unwrap_or(0);
        let mut rec = vec![ep.to_string(), n_runs.to_string()];
        for a in aggs {
            rec.push(cell(a.map(|a| a.mean)));
            rec.push(cell(a.map(|a| a.std)));
            rec.push(cell(a.map(|a| a.mean - 2.0 * a.std)));
            rec.push(cell(a.map(|a| a.mean + 2.0 * a.std)));
        }
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let mut summary = serde_json::Map::new();
    let runs: Vec<usize> = {
        let mut r: Vec<usize> = out.rows.iter().map(|r| r.run_id).collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    summary.insert("runs".into(), runs.len().into());
    summary.insert("excluded_runs".into(), serde_json::to_value(&out.excluded_runs)?);
    if let Some((ep, aggs)) = curves.last() {
        let mut fin = serde_json::Map::new();
        fin.insert("episode".into(), (*ep).into());
        for (m, a) in CURVE_METRICS.iter().zip(aggs) {
            if let Some(a) = a {
                fin.insert((*m).into(), serde_json::to_value(a)?);
            }
        }
        summary.insert("final".into(), fin.into());
    }
    for (k, v) in &out.extra {
        summary.insert(k.clone(), v.clone());
    }
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(summary))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;

    for (name, contents) in &out.files {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Parse a `metrics.csv` written by [`write_outputs`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

/// Dispatch on the experiment kind and write the outputs into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutputs> {
    cfg.validate()?;
    let out = match cfg.experiment {
        ExperimentKind::LqReinforce => run_lq_reinforce(cfg)?.outputs,
        ExperimentKind::CstrVfmpc => run_cstr_vfmpc(cfg)?.outputs,
        ExperimentKind::OracleSuite => {
            let settings = cfg.oracle.clone().unwrap_or_default();
            run_oracle_suite(&OracleSettings { seed: cfg.seed, ..settings })?.outputs
        }
    };
    write_outputs(&out, dir)?;
    Ok(out)
}
