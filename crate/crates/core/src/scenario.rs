//! Scenario files: a TOML description of topology, workload, protocol,
//! hardware and run parameters, plus the drivers behind the command line
//! (single runs, sweeps, stability checks and oracle comparisons).

use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{mean_ci, Convergence, RunOutput, Summary};
use crate::protocol::{simulate, AckWerner, StepScaling, PiConfig, ProtocolConfig, ProtocolError, QtcpConfig, RunResult, Variant};
use crate::qnum::{
    brute_force_oracle, solve_centralized, QnumError, Solution, StepSizes, DEFAULT_KKT_TOL, ORACLE_GRID, W_INIT,
};
use crate::sim::{sim_rng, TimedIntervention};
use crate::stability::{integrate, linearization_matrix, lyapunov_derivative, OdeState, StabilityError};
use crate::topology::{
    build_dumbbell_with_chi, build_nsfnet_with_chi, dumbbell_sessions, LinkId, NodeId, SessionSpec, Topology,
    TopologyError, DEFAULT_CHI,
};
use crate::utility::UtilityKind;
use crate::ProblemInstance;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Qnum(#[from] QnumError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error("{0} utilities are not concave; pass --allow-nonconcave to analyze anyway")]
    NonConcave(UtilityKind),
}

pub type Result<T, E = ScenarioError> = std::result::Result<T, E>;

fn invalid(field: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field: field.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Dumbbell,
    Nsfnet,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitLink {
    pub a: usize,
    pub b: usize,
    pub length_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub kind: TopologyKind,
    /// Dumbbell link length; for the other kinds, overrides every length.
    #[serde(default)]
    pub link_length_km: Option<f64>,
    #[serde(default = "default_downscale")]
    pub downscale: f64,
    #[serde(default)]
    pub nodes: usize,
    #[serde(default)]
    pub links: Vec<ExplicitLink>,
}

fn default_downscale() -> f64 {
    25.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionPreset {
    /// Leaf pairs across the bottleneck, both directions.
    Dumbbell,
    /// `count` random source/sink pairs on shortest paths, drawn per seed.
    Random,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitSession {
    pub src: usize,
    pub dst: usize,
    /// Link ids; the shortest path when absent.
    #[serde(default)]
    pub path: Option<Vec<usize>>,
    #[serde(default)]
    pub utility: Option<UtilityKind>,
    #[serde(default)]
    pub f_min: Option<f64>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionsSection {
    pub preset: SessionPreset,
    #[serde(default = "default_utility")]
    pub utility: UtilityKind,
    #[serde(default = "default_f_min")]
    pub f_min: f64,
    /// Number of sessions (random preset) or a prefix of the dumbbell set.
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub list: Vec<ExplicitSession>,
}

fn default_utility() -> UtilityKind {
    UtilityKind::Skr
}

fn default_f_min() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub variant: Variant,
    pub step_scaling: StepScaling,
    pub ack_werner: AckWerner,
    pub alpha: f64,
    pub w_init: f64,
    pub pi: PiConfig,
    pub qtcp: QtcpConfig,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let d = ProtocolConfig::default();
        Self {
            variant: d.variant,
            step_scaling: d.step_scaling,
            ack_werner: d.ack_werner,
            alpha: d.alpha,
            w_init: d.w_init,
            pi: d.pi,
            qtcp: d.qtcp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepsSection {
    pub k_lambda: f64,
    pub k_lambda_rel: f64,
    pub k_mu: f64,
    pub k_w: f64,
    pub t_outer: u64,
}

impl Default for StepsSection {
    fn default() -> Self {
        let d = ProtocolConfig::default();
        Self { k_lambda: d.k_lambda, k_lambda_rel: d.k_lambda_rel, k_mu: d.k_mu, k_w: d.k_w, t_outer: d.t_outer }
    }
}

/// Coherence time: seconds, or the string `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoherenceTime {
    Seconds(f64),
    Text(String),
}

impl Default for CoherenceTime {
    fn default() -> Self {
        Self::Text("inf".into())
    }
}

impl CoherenceTime {
    pub fn seconds(&self) -> Result<Option<f64>> {
        match self {
            Self::Seconds(v) if *v > 0.0 && v.is_finite() => Ok(Some(*v)),
            Self::Seconds(v) if *v == f64::INFINITY => Ok(None),
            Self::Text(s) if matches!(s.as_str(), "inf" | "infinity") => Ok(None),
            other => Err(invalid("hardware.t_c", format!("expected a positive number or \"inf\", got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareSection {
    pub chi: f64,
    pub n_mem: usize,
    pub t_c: CoherenceTime,
    pub g: f64,
}

impl Default for HardwareSection {
    fn default() -> Self {
        Self { chi: DEFAULT_CHI, n_mem: 50, t_c: CoherenceTime::default(), g: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub duration_s: f64,
    pub seeds: Vec<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { duration_s: 160.0, seeds: (1..=8).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub sample_period_s: f64,
    pub aggregate_window_s: f64,
    /// Utility whose aggregate defines convergence and steady state.
    pub primary: UtilityKind,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let d = ProtocolConfig::default();
        Self { sample_period_s: d.sample_period_s, aggregate_window_s: d.aggregate_window_s, primary: d.primary }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySection {
    pub starts: usize,
    /// Relative size of the perturbations around a locally stable point.
    pub perturbation: f64,
    pub dt: f64,
    pub t_end: f64,
    /// Replace every `d_l` by 1 (keeps the dynamics well conditioned).
    pub normalize: bool,
    pub tolerance: f64,
}

impl Default for StabilitySection {
    fn default() -> Self {
        Self { starts: 20, perturbation: 0.01, dt: 2e-3, t_end: 200.0, normalize: true, tolerance: 1e-4 }
    }
}

/// A complete scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    pub topology: TopologySection,
    pub sessions: SessionsSection,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub steps: StepsSection,
    #[serde(default)]
    pub hardware: HardwareSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub interventions: Vec<TimedIntervention>,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub stability: StabilitySection,
}

impl Scenario {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let sc: Self = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Checks every cross-reference by building the run inputs for the
    /// first seed.
    pub fn validate(&self) -> Result<()> {
        if !(self.run.duration_s > 0.0) {
            return Err(invalid("run.duration_s", "must be positive"));
        }
        if self.run.seeds.is_empty() {
            return Err(invalid("run.seeds", "needs at least one seed"));
        }
        if !(self.hardware.chi > 0.0) {
            return Err(invalid("hardware.chi", "must be positive"));
        }
        self.hardware.t_c.seconds()?;
        let topo = self.build_topology()?;
        let sessions = self.build_sessions(&topo, self.run.seeds[0])?;
        let cfg = self.protocol_config()?;
        cfg.validate().map_err(|e| invalid("protocol", e.to_string()))?;
        for (i, iv) in self.interventions.iter().enumerate() {
            let field = format!("interventions[{i}]");
            if !(iv.time_s >= 0.0) {
                return Err(invalid(&field, "time_s must be nonnegative"));
            }
            iv.action.validate(&topo, sessions.len()).map_err(|e| invalid(&field, e.to_string()))?;
        }
        if self.stability.starts == 0 || !(self.stability.dt > 0.0) || !(self.stability.t_end > 0.0) {
            return Err(invalid("stability", "starts, dt and t_end must be positive"));
        }
        Ok(())
    }

    pub fn build_topology(&self) -> Result<Topology> {
        let t = &self.topology;
        let chi = self.hardware.chi;
        let wrap = |e: TopologyError| invalid("topology", e.to_string());
        let topo = match t.kind {
            TopologyKind::Dumbbell => build_dumbbell_with_chi(t.link_length_km.unwrap_or(80.0), chi).map_err(wrap)?,
            TopologyKind::Nsfnet => {
                let base = build_nsfnet_with_chi(t.downscale, chi).map_err(wrap)?;
                match t.link_length_km {
                    Some(len) => base.with_uniform_length(len).map_err(wrap)?,
                    None => base,
                }
            }
            TopologyKind::Explicit => {
                if t.links.is_empty() {
                    return Err(invalid("topology.links", "explicit topology needs links"));
                }
                let len = |l: &ExplicitLink| t.link_length_km.unwrap_or(l.length_km);
                Topology::new(t.nodes, t.links.iter().map(|l| (l.a, l.b, len(l), chi)))
                    .map_err(|e| invalid("topology.links", e.to_string()))?
            }
        };
        Ok(topo)
    }

    /// Session list; random presets depend on `seed`.
    pub fn build_sessions(&self, topo: &Topology, seed: u64) -> Result<Vec<SessionSpec>> {
        let s = &self.sessions;
        let kind = s.utility;
        let list = match s.preset {
            SessionPreset::Dumbbell => {
                if self.topology.kind != TopologyKind::Dumbbell {
                    return Err(invalid("sessions.preset", "the dumbbell preset needs the dumbbell topology"));
                }
                let mut all = dumbbell_sessions(topo, kind, s.f_min).map_err(|e| invalid("sessions", e.to_string()))?;
                if let Some(n) = s.count {
                    if n == 0 || n > all.len() {
                        return Err(invalid("sessions.count", format!("must lie in 1..={}", all.len())));
                    }
                    all.truncate(n);
                }
                all
            }
            SessionPreset::Random => {
                let n = s.count.ok_or_else(|| invalid("sessions.count", "required by the random preset"))?;
                if n == 0 {
                    return Err(invalid("sessions.count", "must be positive"));
                }
                let mut rng = sim_rng(seed ^ 0x5e55_1055);
                let nodes: Vec<usize> = (0..topo.node_count()).collect();
                (0..n)
                    .map(|id| {
                        let pair: Vec<usize> = nodes.choose_multiple(&mut rng, 2).copied().collect();
                        SessionSpec::shortest(topo, id, pair[0], pair[1], kind, s.f_min)
                            .map_err(|e| invalid("sessions", e.to_string()))
                    })
                    .collect::<Result<_>>()?
            }
            SessionPreset::Explicit => {
                if s.list.is_empty() {
                    return Err(invalid("sessions.list", "explicit preset needs sessions"));
                }
                let mut out = Vec::new();
                for (id, e) in s.list.iter().enumerate() {
                    let field = format!("sessions.list[{id}]");
                    if e.src >= topo.node_count() || e.dst >= topo.node_count() {
                        return Err(invalid(&field, "unknown node"));
                    }
                    let path = match &e.path {
                        Some(p) => {
                            if let Some(&bad) = p.iter().find(|&&l| l >= topo.link_count()) {
                                return Err(invalid(&format!("{field}.path"), format!("unknown link {bad}")));
                            }
                            p.iter().map(|&l| LinkId(l)).collect()
                        }
                        None => topo.shortest_path(NodeId(e.src), NodeId(e.dst)).map_err(|x| invalid(&field, x.to_string()))?,
                    };
                    let spec = SessionSpec {
                        id,
                        src: NodeId(e.src),
                        dst: NodeId(e.dst),
                        path,
                        utility: e.utility.unwrap_or(kind),
                        f_min: e.f_min.unwrap_or(s.f_min),
                        logprod_weights: e.weights.clone(),
                    };
                    spec.validate(topo).map_err(|x| invalid(&field, x.to_string()))?;
                    out.push(spec);
                }
                out
            }
        };
        Ok(list)
    }

    pub fn protocol_config(&self) -> Result<ProtocolConfig> {
        let p = &self.protocol;
        Ok(ProtocolConfig {
            variant: p.variant,
            k_lambda: self.steps.k_lambda,
            k_lambda_rel: self.steps.k_lambda_rel,
            k_mu: self.steps.k_mu,
            k_w: self.steps.k_w,
            t_outer: self.steps.t_outer,
            step_scaling: p.step_scaling,
            w_init: p.w_init,
            n_mem: self.hardware.n_mem,
            t_c: self.hardware.t_c.seconds()?,
            g: self.hardware.g,
            alpha: p.alpha,
            ack_werner: p.ack_werner,
            sample_period_s: self.metrics.sample_period_s,
            aggregate_window_s: self.metrics.aggregate_window_s,
            primary: self.metrics.primary,
            pi: p.pi.clone(),
            qtcp: p.qtcp.clone(),
        })
    }

    /// Optimization instance for `seed` (sessions may depend on it).
    pub fn instance(&self, seed: u64) -> Result<ProblemInstance<f64>> {
        let topo = self.build_topology()?;
        let sessions = self.build_sessions(&topo, seed)?;
        Ok(ProblemInstance::new(topo, sessions)?)
    }

    /// Applies one sweep value.
    pub fn with_axis(&self, axis: SweepAxis, value: &str) -> Result<Self> {
        let mut sc = self.clone();
        let num = || value.parse::<f64>().map_err(|_| invalid(axis.name(), format!("not a number: {value:?}")));
        match axis {
            SweepAxis::LinkLengthKm => sc.topology.link_length_km = Some(num()?),
            SweepAxis::NSessions => {
                let n = value.parse::<usize>().map_err(|_| invalid("n_sessions", format!("not a count: {value:?}")))?;
                sc.sessions.count = Some(n);
            }
            SweepAxis::TOuter => {
                sc.steps.t_outer = value.parse().map_err(|_| invalid("T_outer", format!("not a count: {value:?}")))?
            }
            SweepAxis::Tc => {
                sc.hardware.t_c = match value {
                    "inf" | "infinity" => CoherenceTime::Text("inf".into()),
                    _ => CoherenceTime::Seconds(num()?),
                }
            }
            SweepAxis::Variant => sc.protocol.variant = value.parse().map_err(|e: ProtocolError| invalid("variant", e.to_string()))?,
        }
        sc.validate()?;
        Ok(sc)
    }
}

/// Runs one seed of a scenario.
pub fn run_scenario(sc: &Scenario, seed: u64, duration_s: Option<f64>) -> Result<RunResult> {
    let topo = sc.build_topology()?;
    let sessions = sc.build_sessions(&topo, seed)?;
    let cfg = sc.protocol_config()?;
    Ok(simulate(topo, sessions, cfg, sc.interventions.clone(), duration_s.unwrap_or(sc.run.duration_s), seed)?)
}

/// Summary-only output for runs that failed before producing data.
pub fn failure_output(status: &str, message: &str) -> RunOutput {
    let mut s = Summary::default();
    s.set("status", status);
    s.set("message", message.replace([',', '\n'], ";"));
    RunOutput { summary: s, ..RunOutput::default() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LinkLengthKm,
    NSessions,
    TOuter,
    Tc,
    Variant,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::LinkLengthKm => "link_length_km",
            Self::NSessions => "n_sessions",
            Self::TOuter => "T_outer",
            Self::Tc => "T_c",
            Self::Variant => "variant",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = ScenarioError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "link_length_km" => Self::LinkLengthKm,
            "n_sessions" => Self::NSessions,
            "T_outer" | "t_outer" => Self::TOuter,
            "T_c" | "t_c" => Self::Tc,
            "variant" => Self::Variant,
            _ => return Err(invalid("axis", format!("unknown sweep axis {s:?}"))),
        })
    }
}

/// Outcome of one sweep run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub value: String,
    pub seed: u64,
    pub status: String,
    pub steady_skr: f64,
    pub steady_neg: f64,
    pub convergence: Convergence,
    pub drops: u64,
}

impl SweepRun {
    pub fn from_result(value: &str, seed: u64, r: &RunResult, primary: UtilityKind) -> Self {
        Self {
            value: value.to_string(),
            seed,
            status: if r.blowup.is_some() { "blowup".into() } else { "ok".into() },
            steady_skr: r.steady(UtilityKind::Skr),
            steady_neg: r.steady(UtilityKind::Neg),
            convergence: r.convergence(primary),
            drops: r.counters.drops,
        }
    }

    pub fn failed(value: &str, seed: u64, status: &str) -> Self {
        Self {
            value: value.to_string(),
            seed,
            status: status.to_string(),
            steady_skr: f64::NAN,
            steady_neg: f64::NAN,
            convergence: Convergence::DidNotConverge,
            drops: 0,
        }
    }
}

fn conv_cell(c: Convergence) -> String {
    c.time().map_or_else(|| "did_not_converge".to_string(), crate::metrics::fmt_num)
}

/// `axis,value,seed,status,steady_skr,steady_neg,convergence_time_s,converged,drops`.
pub fn sweep_runs_csv(axis: SweepAxis, runs: &[SweepRun]) -> String {
    use crate::metrics::fmt_num;
    let mut out = String::from("axis,value,seed,status,steady_skr,steady_neg,convergence_time_s,converged,drops\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            axis.name(),
            r.value,
            r.seed,
            r.status,
            fmt_num(r.steady_skr),
            fmt_num(r.steady_neg),
            conv_cell(r.convergence),
            r.convergence.is_converged(),
            r.drops
        ));
    }
    out
}

/// Per-point means and 95% half-widths, in the order values first appear.
pub fn sweep_csv(axis: SweepAxis, runs: &[SweepRun]) -> String {
    use crate::metrics::fmt_num;
    let mut values: Vec<&str> = Vec::new();
    for r in runs {
        if !values.contains(&r.value.as_str()) {
            values.push(&r.value);
        }
    }
    let mut out = String::from(
        "axis,value,runs,mean_steady_skr,ci95_steady_skr,mean_steady_neg,ci95_steady_neg,converged,mean_convergence_time_s\n",
    );
    for v in values {
        let pts: Vec<&SweepRun> = runs.iter().filter(|r| r.value == v && r.status == "ok").collect();
        let total = runs.iter().filter(|r| r.value == v).count();
        let skr: Vec<f64> = pts.iter().map(|r| r.steady_skr).collect();
        let neg: Vec<f64> = pts.iter().map(|r| r.steady_neg).collect();
        let times: Vec<f64> = pts.iter().filter_map(|r| r.convergence.time()).collect();
        let (ms, cs) = mean_ci(&skr);
        let (mn, cn) = mean_ci(&neg);
        let mt = if times.is_empty() { f64::NAN } else { times.iter().sum::<f64>() / times.len() as f64 };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}/{},{}\n",
            axis.name(),
            v,
            total,
            fmt_num(ms),
            fmt_num(cs),
            fmt_num(mn),
            fmt_num(cn),
            times.len(),
            total,
            fmt_num(mt)
        ));
    }
    out
}

/// Findings of [`stability_check`].
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub equilibrium: OdeState<f64>,
    pub solver_iterations: u64,
    pub starts: usize,
    /// Starts that ended within the tolerance of the equilibrium.
    pub converged: usize,
    pub max_final_distance: f64,
    /// Samples with `V' > 1e-9`.
    pub vdot_violations: usize,
    pub max_vdot: f64,
    pub local_condition: Vec<bool>,
    pub b_eigenvalues: Vec<f64>,
    pub j_y_eigenvalues: Vec<f64>,
    pub sym_eigenvalues: Vec<f64>,
    /// Largest distance after perturbing a locally stable equilibrium
    /// (`None` when some link fails the local condition).
    pub perturbation_distance: Option<f64>,
}

impl StabilityReport {
    pub fn to_summary(&self) -> Summary {
        let mut s = Summary::default();
        s.set("status", "ok");
        s.set("starts", self.starts);
        s.set("converged_starts", self.converged);
        s.set_f64("max_final_distance", self.max_final_distance);
        s.set("vdot_violations", self.vdot_violations);
        s.set_f64("max_vdot", self.max_vdot);
        s.set("solver_iterations", self.solver_iterations);
        let flags: Vec<String> = self.local_condition.iter().map(|b| b.to_string()).collect();
        s.set("local_condition_links", flags.join(";"));
        s.set("local_condition_all", self.local_condition.iter().all(|&b| b));
        let join = |v: &[f64]| v.iter().map(|x| crate::metrics::fmt_num(*x)).collect::<Vec<_>>().join(";");
        s.set("b_eigenvalues", join(&self.b_eigenvalues));
        s.set("j_y_eigenvalues", join(&self.j_y_eigenvalues));
        s.set("sym_eigenvalues", join(&self.sym_eigenvalues));
        match self.perturbation_distance {
            Some(d) => s.set_f64("perturbation_distance", d),
            None => s.set("perturbation_distance", "skipped"),
        }
        s.set("w_star", join(&self.equilibrium.w));
        s.set("mu_star", join(&self.equilibrium.mu));
        s.set("lambda_star", join(&self.equilibrium.lambda));
        s
    }
}

/// Solves the equilibrium, integrates the primal-dual dynamics from random
/// starts, tracks the Lyapunov derivative, and linearizes.
pub fn stability_check(sc: &Scenario, allow_nonconcave: bool, seed: u64) -> Result<StabilityReport> {
    let mut inst = sc.instance(seed)?;
    if !allow_nonconcave {
        if let Some(u) = inst.utilities.iter().find(|u| u.kind() != UtilityKind::LogProd) {
            return Err(ScenarioError::NonConcave(u.kind()));
        }
    }
    let cfg = &sc.stability;
    if cfg.normalize {
        inst.d = vec![1.0; inst.link_count()];
    }
    let sol = solve_centralized(&inst, &StepSizes::for_solver(&inst), DEFAULT_KKT_TOL, 20_000_000)?;
    let star = OdeState::from_primal_dual(&sol.state);
    let lin = linearization_matrix(&star, &inst)?;

    let mut rng = sim_rng(seed);
    use rand::Rng;
    let sample_every = ((1.0 / cfg.dt).round() as usize).max(1);
    let (mut converged, mut max_dist, mut violations, mut max_vdot) = (0, 0.0f64, 0, f64::NEG_INFINITY);
    for _ in 0..cfg.starts {
        let x0 = OdeState {
            w: (0..inst.link_count()).map(|_| rng.random_range(0.3..0.99)).collect(),
            mu: (0..inst.session_count()).map(|_| rng.random_range(0.0..0.5)).collect(),
            lambda: star.lambda.iter().map(|&l| l * rng.random_range(0.5..2.0) + rng.random_range(0.0..0.1)).collect(),
            t: 0.0,
        };
        let traj = integrate(&x0, &inst, cfg.dt, cfg.t_end, sample_every)?;
        for s in &traj.samples {
            let v = lyapunov_derivative(s, &star, &inst);
            max_vdot = max_vdot.max(v);
            if v > 1e-9 {
                violations += 1;
            }
        }
        let d = traj.last().distance(&star);
        max_dist = max_dist.max(d);
        if d < cfg.tolerance {
            converged += 1;
        }
    }
    let perturbation_distance = if lin.locally_stable() {
        let mut worst = 0.0f64;
        for _ in 0..cfg.starts {
            let mut jiggle = |v: f64| v * (1.0 + cfg.perturbation * rng.random_range(-1.0..1.0));
            let x0 = OdeState {
                w: star.w.iter().map(|&w| jiggle(w).min(1.0)).collect(),
                mu: star.mu.iter().map(|&m| jiggle(m)).collect(),
                lambda: star.lambda.iter().map(|&l| jiggle(l)).collect(),
                t: 0.0,
            };
            let traj = integrate(&x0, &inst, cfg.dt, cfg.t_end, usize::MAX)?;
            worst = worst.max(traj.last().distance(&star));
        }
        Some(worst)
    } else {
        None
    };
    Ok(StabilityReport {
        equilibrium: star,
        solver_iterations: sol.iterations,
        starts: cfg.starts,
        converged,
        max_final_distance: max_dist,
        vdot_violations: violations,
        max_vdot,
        local_condition: lin.local_condition.clone(),
        b_eigenvalues: lin.b_eigenvalues.clone(),
        j_y_eigenvalues: lin.j_y_eigenvalues.clone(),
        sym_eigenvalues: lin.sym_eigenvalues.clone(),
        perturbation_distance,
    })
}

/// Centralized solution against the grid oracle.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub solver: Solution<f64>,
    pub oracle_utility: f64,
    pub oracle_w: Vec<f64>,
    pub oracle_r: Vec<f64>,
    /// `oracle - solver` objective.
    pub gap: f64,
    pub grid: f64,
}

impl OracleReport {
    /// The solver is at least as good as the grid, up to twice its spacing.
    pub fn within_tolerance(&self) -> bool {
        self.gap.abs() < 2.0 * self.grid || self.gap < 0.0
    }

    pub fn to_summary(&self) -> Summary {
        let join = |v: &[f64]| v.iter().map(|x| crate::metrics::fmt_num(*x)).collect::<Vec<_>>().join(";");
        let mut s = Summary::default();
        s.set("status", "ok");
        s.set_f64("solver_utility", self.solver.utility);
        s.set_f64("oracle_utility", self.oracle_utility);
        s.set_f64("gap", self.gap);
        s.set_f64("grid", self.grid);
        s.set("within_tolerance", self.within_tolerance());
        s.set("solver_w", join(&self.solver.state.w));
        s.set("solver_r", join(&self.solver.state.r));
        s.set("oracle_w", join(&self.oracle_w));
        s.set("oracle_r", join(&self.oracle_r));
        s
    }
}

pub fn oracle_compare(sc: &Scenario, seed: u64) -> Result<OracleReport> {
    let inst = sc.instance(seed)?;
    let oracle = brute_force_oracle(&inst)?;
    let solver = solve_centralized(&inst, &StepSizes::for_solver(&inst), DEFAULT_KKT_TOL, 20_000_000)?;
    Ok(OracleReport {
        gap: oracle.utility - solver.utility,
        oracle_utility: oracle.utility,
        oracle_w: oracle.w,
        oracle_r: oracle.r,
        solver,
        grid: ORACLE_GRID,
    })
}

/// Upper bound for a scenario's first seed: centralized optimum, its
/// utility and the absolute aggregate it implies.
pub fn upper_bound(sc: &Scenario, seed: u64) -> Result<(Solution<f64>, f64)> {
    let inst = sc.instance(seed)?;
    let kind = sc.metrics.primary;
    let sol = solve_centralized(&inst, &StepSizes::for_solver(&inst), DEFAULT_KKT_TOL, 50_000_000)?;
    let abs: f64 = (0..inst.session_count())
        .map(|r| sol.state.r[r] * crate::utility::absolute_factor(kind, sol.state.e2e_werner(&inst, r)))
        .sum();
    Ok((sol, abs))
}

/// Default nominal Werner parameter, exposed for scenario documentation.
pub const DEFAULT_W_INIT: f64 = W_INIT;

#[cfg(test)]
mod tests {
    use super::*;

    const DUMBBELL: &str = r#"
[topology]
kind = "dumbbell"
link_length_km = 80.0

[sessions]
preset = "dumbbell"
utility = "skr"
f_min = 0.5
"#;

    #[test]
    fn minimal_scenario_defaults() {
        let sc = Scenario::from_toml_str(DUMBBELL).unwrap();
        assert_eq!(sc.run.duration_s, 160.0);
        assert_eq!(sc.run.seeds.len(), 8);
        assert_eq!(sc.hardware.t_c.seconds().unwrap(), None);
        assert_eq!(sc.hardware.n_mem, 50);
        let cfg = sc.protocol_config().unwrap();
        assert_eq!(cfg, ProtocolConfig::default());
        let topo = sc.build_topology().unwrap();
        assert_eq!(sc.build_sessions(&topo, 1).unwrap().len(), 6);
    }

    #[test]
    fn round_trip() {
        let sc = Scenario::from_toml_str(DUMBBELL).unwrap();
        let again = Scenario::from_toml_str(&sc.to_toml_string()).unwrap();
        assert_eq!(sc, again);
    }

    #[test]
    fn unknown_link_names_field() {
        let text = format!("{DUMBBELL}\n[[interventions]]\ntime_s = 10.0\nkind = \"link_failure\"\nlink = 42\n");
        let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("interventions[0]") && err.contains("42"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let text = DUMBBELL.replace("f_min = 0.5", "f_min = 0.5\nfmin = 0.6");
        let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("fmin"), "{err}");
    }

    #[test]
    fn explicit_path_checked() {
        let text = r#"
[topology]
kind = "explicit"
nodes = 3
links = [{ a = 0, b = 1, length_km = 10.0 }, { a = 1, b = 2, length_km = 10.0 }]

[sessions]
preset = "explicit"
list = [{ src = 0, dst = 2, path = [0, 5] }]
"#;
        let err = Scenario::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("sessions.list[0].path"), "{err}");
    }

    #[test]
    fn coherence_time_forms() {
        assert_eq!(CoherenceTime::Seconds(2.0).seconds().unwrap(), Some(2.0));
        assert_eq!(CoherenceTime::Text("inf".into()).seconds().unwrap(), None);
        assert!(CoherenceTime::Seconds(-1.0).seconds().is_err());
        assert!(CoherenceTime::Text("soon".into()).seconds().is_err());
    }

    #[test]
    fn axis_overrides() {
        let sc = Scenario::from_toml_str(DUMBBELL).unwrap();
        assert_eq!(sc.with_axis(SweepAxis::TOuter, "50").unwrap().steps.t_outer, 50);
        assert_eq!(sc.with_axis(SweepAxis::Tc, "1").unwrap().hardware.t_c.seconds().unwrap(), Some(1.0));
        assert_eq!(sc.with_axis(SweepAxis::Variant, "qtcp").unwrap().protocol.variant, Variant::Qtcp);
        assert_eq!(sc.with_axis(SweepAxis::LinkLengthKm, "40").unwrap().topology.link_length_km, Some(40.0));
        assert!(sc.with_axis(SweepAxis::NSessions, "9").is_err());
        assert!(sc.with_axis(SweepAxis::Variant, "tcp").is_err());
        assert_eq!("T_outer".parse::<SweepAxis>().unwrap(), SweepAxis::TOuter);
    }

    #[test]
    fn random_sessions_depend_on_seed() {
        let text = r#"
[topology]
kind = "nsfnet"

[sessions]
preset = "random"
count = 8
f_min = 0.6
"#;
        let sc = Scenario::from_toml_str(text).unwrap();
        let topo = sc.build_topology().unwrap();
        let a = sc.build_sessions(&topo, 1).unwrap();
        let b = sc.build_sessions(&topo, 1).unwrap();
        let c = sc.build_sessions(&topo, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|s| s.src != s.dst));
    }

    #[test]
    fn sweep_tables() {
        let runs = vec![
            SweepRun { value: "1".into(), seed: 1, status: "ok".into(), steady_skr: 1.0, steady_neg: 2.0, convergence: Convergence::At(5.0), drops: 0 },
            SweepRun { value: "1".into(), seed: 2, status: "ok".into(), steady_skr: 3.0, steady_neg: 2.0, convergence: Convergence::DidNotConverge, drops: 1 },
        ];
        let csv = sweep_csv(SweepAxis::TOuter, &runs);
        let row = csv.lines().nth(1).unwrap();
        assert!(row.starts_with("T_outer,1,2,2,"), "{row}");
        assert!(row.contains(",1/2,5"), "{row}");
        assert_eq!(sweep_runs_csv(SweepAxis::TOuter, &runs).lines().count(), 3);
    }
}
