//! Sequential-network embedding of the primal-dual controllers.
//!
//! A session controller emits q-datagrams at rate `R_r`. Each datagram
//! travels hop by hop: on arrival the link controller reads the header,
//! updates its prices and Werner parameter and stamps `W_prod` and
//! `Lambda_sum`; when the datagram reaches the head of the link's FIFO the
//! link starts generating a pair, and once the pair exists the datagram
//! moves on (after the fiber delay). The
//! sink acknowledges with `Lambda_sum` and `W_prod`, from which the session
//! sets `R = 1 / Lambda_sum` and, every `T_outer` ACKs, its fidelity price.
//!
//! Memory is `N_mem` slots per link; an arrival at a full link overwrites the
//! oldest waiting datagram. Exact-mode losses send a correction upstream so
//! upstream links undo the lost `Delta R` and `Delta mu`; approx-mode losses
//! also bank the lost weight, which rides on the next datagram of the session
//! forwarded by the dropping link.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{aggregate_absolute, moving_average, Convergence, Delivery, MetricSeries, RunOutput, Summary};
use crate::qnum::{project_w, wu_prime_guarded, W_INIT};
use crate::sim::{propagation_delay, sample_lle_time, sim_rng, EventQueue, Intervention, SimError, SimRng, TimedIntervention};
use crate::topology::{link_rate_param, NodeId, SessionSpec, Topology, TopologyError};
use crate::utility::{absolute_factor, UtilityKind};

/// Largest Werner parameter a link may be driven to; `w = 1` would stop
/// link-level generation altogether.
pub const W_CEIL: f64 = 1.0 - 1e-3;

/// Events kept for the trace printed after a blow-up.
pub const TRACE_TAIL: usize = 16;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("session {0}: the protocol simulator supports skr and neg utilities only")]
    UnsupportedUtility(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric blow-up at t = {t}: {what}")]
    BlowUp { t: f64, what: String },
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;

/// Protocol family run by every controller in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "qpd")]
    Qpd,
    #[serde(rename = "qpd-approx")]
    QpdApprox,
    #[serde(rename = "qpd-da")]
    QpdDa,
    #[serde(rename = "qpd-da-approx")]
    QpdDaApprox,
    #[serde(rename = "qpd-pi")]
    QpdPi,
    #[serde(rename = "qtcp")]
    Qtcp,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Self::Qpd, Self::QpdApprox, Self::QpdDa, Self::QpdDaApprox, Self::QpdPi, Self::Qtcp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Qpd => "qpd",
            Self::QpdApprox => "qpd-approx",
            Self::QpdDa => "qpd-da",
            Self::QpdDaApprox => "qpd-da-approx",
            Self::QpdPi => "qpd-pi",
            Self::Qtcp => "qtcp",
        }
    }

    /// Links estimate `R_sum` from interarrival times.
    pub fn approx(self) -> bool {
        matches!(self, Self::QpdApprox | Self::QpdDaApprox)
    }

    /// Capacity reduced by `G / T_c`.
    pub fn decoherence_aware(self) -> bool {
        matches!(self, Self::QpdDa | Self::QpdDaApprox)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = ProtocolError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ProtocolError::Config(format!("unknown variant {s:?}")))
    }
}

/// Which end-to-end Werner value the ACK reports to the session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AckWerner {
    /// `prod w_l` as stamped by the links.
    #[default]
    Nominal,
    /// After memory decoherence.
    Delivered,
}

/// Link length at which the configured step sizes apply unscaled.
pub const STEP_REFERENCE_KM: f64 = 80.0;

/// How the per-link price and Werner steps are set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepScaling {
    /// Same `k_lambda` and `k_w` on every link.
    #[default]
    Uniform,
    /// Price step `k_lambda_rel max(lambda, 1/c) / c` with `c` the current
    /// capacity, so each update moves the price by a fixed fraction of the
    /// relative overload. `k_w` is multiplied by `d_ref / d_l`, with `d_ref`
    /// the rate of a reference-length link.
    Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiConfig {
    pub kp: f64,
    pub ki: f64,
    /// Queue-length set point (datagrams).
    pub queue_target: f64,
    /// The moving average must stay within `band` for this long before the
    /// switch to PI control.
    pub hold_s: f64,
    /// Relative band on each link capacity `d (1 - w)`.
    pub band: f64,
    /// Switch to PI control at this time even if the capacities have not
    /// settled; `None` waits indefinitely.
    pub max_wait_s: Option<f64>,
}

impl Default for PiConfig {
    fn default() -> Self {
        Self { kp: 0.1, ki: 0.01, queue_target: 2.0, hold_s: 20.0, band: 0.1, max_wait_s: Some(60.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QtcpConfig {
    /// Additive increase per window without losses, pairs/s.
    pub ai_step: f64,
    pub window_s: f64,
    /// Fixed link Werner parameter.
    pub w_fixed: f64,
}

impl Default for QtcpConfig {
    fn default() -> Self {
        Self { ai_step: 1.0, window_s: 0.1, w_fixed: W_INIT }
    }
}

/// Controller and hardware parameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub variant: Variant,
    pub k_lambda: f64,
    /// Relative price step, used with [`StepScaling::Rate`].
    pub k_lambda_rel: f64,
    pub k_mu: f64,
    pub k_w: f64,
    pub t_outer: u64,
    pub step_scaling: StepScaling,
    pub w_init: f64,
    pub n_mem: usize,
    /// Memory coherence time; `None` disables decoherence.
    pub t_c: Option<f64>,
    /// Decoherence-aware slack multiplier.
    pub g: f64,
    /// Interarrival averaging weight of the approx variants.
    pub alpha: f64,
    pub ack_werner: AckWerner,
    pub sample_period_s: f64,
    /// Window over which delivered pairs are turned into an aggregate rate.
    pub aggregate_window_s: f64,
    /// Utility whose absolute aggregate drives convergence detection.
    pub primary: UtilityKind,
    pub pi: PiConfig,
    pub qtcp: QtcpConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Qpd,
            k_lambda: 3e-7,
            k_lambda_rel: 4e-3,
            k_mu: 1e-2,
            k_w: 3e-6,
            t_outer: 10,
            step_scaling: StepScaling::Uniform,
            w_init: W_INIT,
            n_mem: 50,
            t_c: None,
            g: 50.0,
            alpha: 0.9,
            ack_werner: AckWerner::Nominal,
            sample_period_s: 0.1,
            aggregate_window_s: 1.0,
            primary: UtilityKind::Skr,
            pi: PiConfig::default(),
            qtcp: QtcpConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ProtocolError::Config(m.to_string()));
        if !(self.k_lambda > 0.0 && self.k_lambda_rel > 0.0 && self.k_mu > 0.0 && self.k_w > 0.0) {
            return bad("step sizes must be positive");
        }
        if self.t_outer == 0 {
            return bad("t_outer must be at least 1");
        }
        if !(self.w_init > 0.0 && self.w_init < 1.0) {
            return bad("w_init must lie in (0, 1)");
        }
        if self.n_mem == 0 {
            return bad("n_mem must be at least 1");
        }
        if let Some(tc) = self.t_c {
            if !(tc > 0.0) {
                return bad("t_c must be positive");
            }
        }
        if self.variant.decoherence_aware() && !(self.g > 1.0) {
            return bad("decoherence-aware variants need G > 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.sample_period_s > 0.0 && self.aggregate_window_s > 0.0) {
            return bad("sampling periods must be positive");
        }
        if !(self.qtcp.window_s > 0.0 && self.qtcp.ai_step > 0.0) || !(self.qtcp.w_fixed > 0.0 && self.qtcp.w_fixed < 1.0) {
            return bad("invalid qtcp options");
        }
        if self.pi.max_wait_s.is_some_and(|m| !(m > 0.0)) {
            return bad("pi max_wait_s must be positive");
        }
        if !(self.pi.kp >= 0.0 && self.pi.ki >= 0.0 && self.pi.queue_target >= 0.0 && self.pi.hold_s > 0.0 && self.pi.band > 0.0) {
            return bad("invalid pi options");
        }
        Ok(())
    }

    /// Capacity slack per link: `G / T_c` for decoherence-aware variants.
    pub fn slack(&self) -> f64 {
        match (self.variant.decoherence_aware(), self.t_c) {
            (true, Some(tc)) => self.g / tc,
            _ => 0.0,
        }
    }
}

/// Classical control record carried hop by hop.
#[derive(Debug, Clone, PartialEq)]
pub struct QDatagramHeader {
    pub src: NodeId,
    pub dst: NodeId,
    pub seq: u64,
    pub session: usize,
    /// Session incarnation; bumps when a terminated session restarts.
    pub incarnation: u32,
    /// Pauli frame accumulated by the swaps (carried, never interpreted).
    pub pauli: u8,
    pub delta_r: f64,
    pub lambda_sum: f64,
    pub w_prod: f64,
    pub wu_prime: f64,
    pub delta_mu: f64,
    pub weight: u64,
    /// Smallest PI rate cap on the path so far.
    pub rate_cap: Option<f64>,
}

#[derive(Debug, Clone)]
struct Datagram {
    header: QDatagramHeader,
    hop: usize,
    created: f64,
    lle_done: Vec<f64>,
}

/// Timeline of one delivered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRecord {
    pub session: usize,
    pub created: f64,
    pub delivered: f64,
    /// Storage intervals: source half first, then each intermediate half.
    pub storage: Vec<f64>,
    pub w_nominal: f64,
    pub w_delivered: f64,
}

impl DeliveryRecord {
    /// The source half waits from its pair's creation until delivery; the
    /// intermediate half left by link `i` waits until link `i + 1` produces
    /// the pair it is swapped with.
    pub fn from_timeline(session: usize, created: f64, lle_done: &[f64], delivered: f64, w_nominal: f64, t_c: Option<f64>) -> Self {
        let mut storage = Vec::with_capacity(lle_done.len());
        if let Some(&first) = lle_done.first() {
            storage.push((delivered - first).max(0.0));
            storage.extend(lle_done.windows(2).map(|p| (p[1] - p[0]).max(0.0)));
        }
        let total: f64 = storage.iter().sum();
        let w_delivered = match t_c {
            Some(tc) => decohere(w_nominal, total, tc),
            None => w_nominal,
        };
        Self { session, created, delivered, storage, w_nominal, w_delivered }
    }
}

/// Depolarizing memory: the Werner parameter decays by `exp(-t / T_c)`.
pub fn decohere(w: f64, storage_s: f64, t_c: f64) -> f64 {
    w * (-storage_s.max(0.0) / t_c).exp()
}

/// Exponential average of interarrival gaps and the implied aggregate rate.
/// `None` is the state before the first measured gap.
pub fn approx_rate_estimate(t_int: Option<f64>, gap: f64, alpha: f64) -> (f64, f64) {
    let t = match t_int {
        None => gap,
        Some(prev) => alpha * prev + (1.0 - alpha) * gap,
    };
    (t, if t > 0.0 { 1.0 / t } else { f64::INFINITY })
}

/// Decoherence-aware capacity `d (1 - w) - G / T_c`; the flag is false when
/// nothing is left for the sessions.
pub fn da_capacity(d: f64, w: f64, g: f64, t_c: f64) -> (f64, bool) {
    let c = d * (1.0 - w) - g / t_c;
    (c, c > 0.0)
}

#[derive(Debug, Clone)]
struct SessionCtl {
    spec: SessionSpec,
    path: Vec<usize>,
    /// Cumulative fiber delay from the source to the upstream end of each hop.
    ack_delay: f64,
    kind: UtilityKind,
    k: f64,
    active: bool,
    incarnation: u32,
    r: f64,
    mu: f64,
    werner: f64,
    announced_r: f64,
    announced_mu: f64,
    seq: u64,
    last_ack_seq: u64,
    acks: u64,
    timer_epoch: u64,
    last_emit: Option<f64>,
    r_max: f64,
    r_min: f64,
    window_start: f64,
    window_acks: u64,
    window_loss: bool,
    last_decrease: f64,
    generated: u64,
    delivered_weight: u64,
    lost_weight: u64,
    stopped_by_link: Option<usize>,
}

#[derive(Debug, Clone, Default)]
struct PiState {
    integral: f64,
    u: f64,
    last_t: f64,
}

#[derive(Debug, Clone)]
struct LinkCtl {
    d: f64,
    chi: f64,
    prop: f64,
    w: f64,
    lambda: f64,
    k_lambda: f64,
    k_w: f64,
    r_sum: f64,
    m_sum: f64,
    /// `W U'` per session, from the latest datagram.
    wu: BTreeMap<usize, f64>,
    /// Per-session `(R, mu)` contributions to the sums.
    ledger: BTreeMap<usize, (f64, f64)>,
    /// Omniscient `(R, mu)` contributions (audit only).
    oracle: BTreeMap<usize, (f64, f64)>,
    /// Corrections in flight toward this link, per session (audit only).
    pending: BTreeMap<usize, u32>,
    terminated: BTreeMap<usize, u32>,
    queue: VecDeque<u64>,
    in_service: Option<u64>,
    lle_epoch: u64,
    failed: bool,
    processed: u64,
    t_int: Option<f64>,
    last_arrival: Option<f64>,
    bank: BTreeMap<usize, u64>,
    pi: PiState,
    drops: u64,
}

impl LinkCtl {
    fn occupancy(&self) -> usize {
        self.queue.len() + usize::from(self.in_service.is_some())
    }

    fn knows(&self, session: usize, incarnation: u32) -> bool {
        self.terminated.get(&session).is_none_or(|&inc| inc < incarnation)
    }

    fn capacity(&self, slack: f64) -> f64 {
        self.d * (1.0 - self.w) - slack
    }
}

#[derive(Debug, Clone)]
enum Ev {
    SessionStart(usize),
    Timer { s: usize, epoch: u64 },
    Arrive(u64),
    LleDone { link: usize, epoch: u64 },
    Deliver(u64),
    Ack { s: usize, incarnation: u32, seq: u64, lambda_sum: f64, w_nominal: f64, w_delivered: f64, rate_cap: Option<f64> },
    Correction { s: usize, incarnation: u32, hop: usize, dr: f64, dmu: f64 },
    Terminate { s: usize, incarnation: u32, hop: usize },
    Intervention(usize),
    /// The `k`-th metrics sample, due at `k * sample_period`.
    Sample(u64),
}

/// Aggregate counters of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    pub generated: u64,
    pub delivered: u64,
    pub drops: u64,
    pub unknown: u64,
    pub stale_acks: u64,
    pub zero_price_holds: u64,
    pub corrections: u64,
    pub audit_checks: u64,
    pub audit_violations: u64,
}

/// Online version of the moving-average convergence rule: fires once the
/// moving average has stayed within `band` of its current value for `hold`.
#[derive(Debug, Clone)]
pub struct ConvergenceDetector {
    window: f64,
    hold: f64,
    band: f64,
    samples: VecDeque<(f64, f64)>,
    sum: f64,
    history: VecDeque<(f64, f64)>,
    start: f64,
}

impl ConvergenceDetector {
    pub fn new(window: f64, hold: f64, band: f64) -> Self {
        Self { window, hold, band, samples: VecDeque::new(), sum: 0.0, history: VecDeque::new(), start: 0.0 }
    }

    pub fn reset(&mut self, t: f64) {
        self.samples.clear();
        self.history.clear();
        self.sum = 0.0;
        self.start = t;
    }

    /// Feeds one sample; returns true when converged.
    pub fn push(&mut self, t: f64, v: f64) -> bool {
        self.samples.push_back((t, v));
        self.sum += v;
        while let Some(&(t0, v0)) = self.samples.front() {
            if t0 <= t - self.window {
                self.sum -= v0;
                self.samples.pop_front();
            } else {
                break;
            }
        }
        let ma = self.sum / self.samples.len() as f64;
        self.history.push_back((t, ma));
        while self.history.front().is_some_and(|&(t0, _)| t0 < t - self.hold) {
            self.history.pop_front();
        }
        if t - self.start < self.window + self.hold || !(ma > 0.0) {
            return false;
        }
        let tol = self.band * ma;
        self.history.iter().all(|&(_, m)| (m - ma).abs() <= tol)
    }
}

/// Results of a finished run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub output: RunOutput,
    pub counters: Counters,
    pub deliveries: Vec<Delivery>,
    pub final_w: Vec<f64>,
    pub final_lambda: Vec<f64>,
    pub final_r: Vec<f64>,
    pub pi_switch_time: Option<f64>,
    pub blowup: Option<String>,
    /// Last dispatched events, oldest first.
    pub trace_tail: Vec<String>,
}

impl RunResult {
    pub fn aggregate(&self, kind: UtilityKind) -> Option<&MetricSeries> {
        self.output.aggregate.get(&format!("aggregate:{kind}"))
    }

    /// Mean of the 10 s moving average of the absolute aggregate over
    /// `[t_from, t_to]`.
    pub fn steady_between(&self, kind: UtilityKind, t_from: f64, t_to: f64) -> f64 {
        self.aggregate(kind)
            .map(|s| moving_average(s, crate::metrics::MA_WINDOW_S).mean_between(t_from, t_to).unwrap_or(0.0))
            .unwrap_or(0.0)
    }

    /// Steady-state value: mean of the final 10% of the moving average.
    pub fn steady(&self, kind: UtilityKind) -> f64 {
        self.aggregate(kind)
            .and_then(|s| moving_average(s, crate::metrics::MA_WINDOW_S).tail_mean(crate::metrics::STEADY_FRACTION))
            .unwrap_or(0.0)
    }

    pub fn convergence(&self, kind: UtilityKind) -> Convergence {
        self.aggregate(kind)
            .map(|s| crate::metrics::convergence_time_raw(s, crate::metrics::MA_WINDOW_S, crate::metrics::CONVERGENCE_BAND))
            .unwrap_or(Convergence::DidNotConverge)
    }

    /// Mean of a link channel (e.g. `l3:w`) over `[t_from, t_to]`.
    pub fn link_mean(&self, channel: &str, t_from: f64, t_to: f64) -> Option<f64> {
        self.output.links.get(channel)?.mean_between(t_from, t_to)
    }
}

/// One simulation instance.
pub struct Engine {
    cfg: ProtocolConfig,
    topo: Topology,
    sessions: Vec<SessionCtl>,
    links: Vec<LinkCtl>,
    events: EventQueue<Ev>,
    rng: SimRng,
    live: BTreeMap<u64, Datagram>,
    next_dg: u64,
    interventions: Vec<TimedIntervention>,
    deliveries: Vec<Delivery>,
    recent: VecDeque<Delivery>,
    out: RunOutput,
    counters: Counters,
    slack: f64,
    /// One per link, fed with the link capacity `d (1 - w)`.
    detectors: Vec<ConvergenceDetector>,
    pi_active: bool,
    pi_switch_time: Option<f64>,
    /// Start of the current PI waiting period.
    pi_epoch_start: f64,
    w_frozen: bool,
    quiescing: bool,
    blowup: Option<String>,
    keep_deliveries: bool,
    /// Most recent events, for blow-up diagnostics.
    tail: VecDeque<(f64, Ev)>,
}

impl Engine {
    pub fn new(
        topo: Topology,
        specs: Vec<SessionSpec>,
        cfg: ProtocolConfig,
        interventions: Vec<TimedIntervention>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        for s in &specs {
            s.validate(&topo)?;
            if s.utility == UtilityKind::LogProd {
                return Err(ProtocolError::UnsupportedUtility(s.id));
            }
        }
        for iv in &interventions {
            iv.action.validate(&topo, specs.len())?;
            if let Intervention::UtilitySwitch { utility: UtilityKind::LogProd, .. } = iv.action {
                return Err(ProtocolError::Config("cannot switch sessions to logprod".into()));
            }
            if !(iv.time_s >= 0.0) {
                return Err(ProtocolError::Config(format!("intervention time {} is negative", iv.time_s)));
            }
        }
        let mut rng = sim_rng(seed);
        let slack = cfg.slack();
        let d_all = topo.rate_params();
        let qtcp = cfg.variant == Variant::Qtcp;
        let mut links = Vec::with_capacity(topo.link_count());
        for (l, link) in topo.links().iter().enumerate() {
            let scale = match cfg.step_scaling {
                StepScaling::Uniform => 1.0,
                StepScaling::Rate => link_rate_param(STEP_REFERENCE_KM, link.chi)? / d_all[l],
            };
            links.push(LinkCtl {
                d: d_all[l],
                chi: link.chi,
                prop: propagation_delay(link.length_km)?,
                w: if qtcp { cfg.qtcp.w_fixed } else { cfg.w_init },
                lambda: 0.1 * (1.0 - rng.random::<f64>()),
                k_lambda: cfg.k_lambda * scale,
                k_w: cfg.k_w * scale,
                r_sum: 0.0,
                m_sum: 0.0,
                wu: BTreeMap::new(),
                ledger: BTreeMap::new(),
                oracle: BTreeMap::new(),
                pending: BTreeMap::new(),
                terminated: BTreeMap::new(),
                queue: VecDeque::new(),
                in_service: None,
                lle_epoch: 0,
                failed: false,
                processed: 0,
                t_int: None,
                last_arrival: None,
                bank: BTreeMap::new(),
                pi: PiState::default(),
                drops: 0,
            });
        }
        let n_max = (0..topo.link_count())
            .map(|l| specs.iter().filter(|s| s.path.iter().any(|p| p.0 == l)).count())
            .max()
            .unwrap_or(1)
            .max(1);
        let d_min_topo = d_all.iter().copied().fold(f64::INFINITY, f64::min);
        let r0_hi = d_min_topo / (2.0 * n_max as f64);
        let mut sessions = Vec::with_capacity(specs.len());
        for spec in specs {
            let path: Vec<usize> = spec.path.iter().map(|l| l.0).collect();
            let r_max = path.iter().map(|&l| links[l].d).fold(f64::INFINITY, f64::min);
            let w0 = if qtcp { cfg.qtcp.w_fixed } else { cfg.w_init };
            let ack_delay = path.iter().map(|&l| links[l].prop).sum();
            sessions.push(SessionCtl {
                kind: spec.utility,
                k: ((4.0 * spec.f_min - 1.0) / 3.0).ln(),
                active: false,
                incarnation: 0,
                r: r0_hi * (1.0 - rng.random::<f64>()),
                mu: 0.1 * (1.0 - rng.random::<f64>()),
                werner: w0.powi(path.len() as i32),
                announced_r: 0.0,
                announced_mu: 0.0,
                seq: 0,
                last_ack_seq: 0,
                acks: 0,
                timer_epoch: 0,
                last_emit: None,
                r_max,
                r_min: 1e-3 * r_max,
                window_start: 0.0,
                window_acks: 0,
                window_loss: false,
                last_decrease: f64::NEG_INFINITY,
                generated: 0,
                delivered_weight: 0,
                lost_weight: 0,
                stopped_by_link: None,
                ack_delay,
                path,
                spec,
            });
        }
        let mut events = EventQueue::new();
        let delayed: Vec<usize> = interventions
            .iter()
            .filter_map(|iv| match iv.action {
                Intervention::SessionStart { session } if iv.time_s > 0.0 => Some(session),
                _ => None,
            })
            .collect();
        for s in 0..sessions.len() {
            if !delayed.contains(&s) {
                events.schedule(0.0, Ev::SessionStart(s))?;
            }
        }
        for (i, iv) in interventions.iter().enumerate() {
            events.schedule(iv.time_s, Ev::Intervention(i))?;
        }
        events.schedule(0.0, Ev::Sample(0))?;
        let detectors = (0..topo.link_count())
            .map(|_| ConvergenceDetector::new(crate::metrics::MA_WINDOW_S, cfg.pi.hold_s, cfg.pi.band))
            .collect();
        Ok(Self {
            cfg,
            topo,
            sessions,
            links,
            events,
            rng,
            live: BTreeMap::new(),
            next_dg: 0,
            interventions,
            deliveries: Vec::new(),
            recent: VecDeque::new(),
            out: RunOutput::default(),
            counters: Counters::default(),
            slack,
            detectors,
            pi_active: false,
            pi_switch_time: None,
            pi_epoch_start: 0.0,
            w_frozen: qtcp,
            quiescing: false,
            blowup: None,
            keep_deliveries: true,
            tail: VecDeque::with_capacity(TRACE_TAIL),
        })
    }

    /// Drop per-pair delivery records (keeps memory flat on long runs).
    pub fn discard_deliveries(&mut self) {
        self.keep_deliveries = false;
    }

    pub fn now(&self) -> f64 {
        self.events.now()
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn link_w(&self) -> Vec<f64> {
        self.links.iter().map(|l| l.w).collect()
    }

    pub fn link_lambda(&self) -> Vec<f64> {
        self.links.iter().map(|l| l.lambda).collect()
    }

    pub fn session_rates(&self) -> Vec<f64> {
        self.sessions.iter().map(|s| s.r).collect()
    }

    pub fn pi_active(&self) -> bool {
        self.pi_active
    }

    /// Runs until simulated time `t_end` (or a blow-up).
    pub fn run_until(&mut self, t_end: f64) -> Result<()> {
        while self.blowup.is_none() {
            let Some((t, ev)) = self.events.pop_until(t_end) else { break };
            self.dispatch(t, ev)?;
        }
        if let Some(what) = &self.blowup {
            return Err(ProtocolError::BlowUp { t: self.now(), what: what.clone() });
        }
        Ok(())
    }

    /// Stops every session from emitting and drains all in-flight traffic.
    pub fn quiesce(&mut self) -> Result<()> {
        self.quiescing = true;
        for s in &mut self.sessions {
            s.timer_epoch += 1;
        }
        while let Some((t, ev)) = self.events.pop() {
            if matches!(ev, Ev::Sample(_) | Ev::Intervention(_) | Ev::SessionStart(_)) {
                continue;
            }
            self.dispatch(t, ev)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, t: f64, ev: Ev) -> Result<()> {
        if self.tail.len() == TRACE_TAIL {
            self.tail.pop_front();
        }
        self.tail.push_back((t, ev.clone()));
        match ev {
            Ev::SessionStart(s) => self.start_session(s)?,
            Ev::Timer { s, epoch } => self.on_timer(s, epoch)?,
            Ev::Arrive(id) => self.on_arrive(id)?,
            Ev::LleDone { link, epoch } => self.on_lle_done(link, epoch)?,
            Ev::Deliver(id) => self.on_deliver(id)?,
            Ev::Ack { s, incarnation, seq, lambda_sum, w_nominal, w_delivered, rate_cap } => {
                self.on_ack(s, incarnation, seq, lambda_sum, w_nominal, w_delivered, rate_cap)?
            }
            Ev::Correction { s, incarnation, hop, dr, dmu } => self.on_correction(s, incarnation, hop, dr, dmu)?,
            Ev::Terminate { s, incarnation, hop } => self.on_terminate_msg(s, incarnation, hop)?,
            Ev::Intervention(i) => self.on_intervention(i)?,
            Ev::Sample(k) => self.on_sample(t, k)?,
        }
        Ok(())
    }

    fn start_session(&mut self, s: usize) -> Result<()> {
        let now = self.now();
        let ses = &mut self.sessions[s];
        if ses.active {
            return Ok(());
        }
        if ses.path.iter().any(|&l| self.links[l].failed) {
            return Ok(());
        }
        if ses.generated > 0 || ses.incarnation > 0 || ses.seq > 0 {
            ses.incarnation += 1;
        }
        ses.active = true;
        ses.stopped_by_link = None;
        ses.announced_r = 0.0;
        ses.announced_mu = 0.0;
        ses.window_start = now;
        ses.timer_epoch += 1;
        let epoch = ses.timer_epoch;
        self.events.schedule(now, Ev::Timer { s, epoch })?;
        Ok(())
    }

    fn on_timer(&mut self, s: usize, epoch: u64) -> Result<()> {
        let now = self.now();
        let approx = self.cfg.variant.approx();
        let ses = &mut self.sessions[s];
        if !ses.active || epoch != ses.timer_epoch || self.quiescing {
            return Ok(());
        }
        ses.seq += 1;
        let delta_r = if approx { 0.0 } else { ses.r - ses.announced_r };
        ses.announced_r = ses.r;
        let delta_mu = ses.mu - ses.announced_mu;
        ses.announced_mu = ses.mu;
        ses.generated += 1;
        ses.last_emit = Some(now);
        let header = QDatagramHeader {
            src: ses.spec.src,
            dst: ses.spec.dst,
            seq: ses.seq,
            session: s,
            incarnation: ses.incarnation,
            pauli: 0,
            delta_r,
            lambda_sum: 0.0,
            w_prod: 1.0,
            wu_prime: wu_prime_guarded(ses.kind, ses.werner),
            delta_mu,
            weight: 1,
            rate_cap: None,
        };
        let next = now + 1.0 / ses.r;
        self.events.schedule(next, Ev::Timer { s, epoch })?;
        let id = self.next_dg;
        self.next_dg += 1;
        self.live.insert(id, Datagram { header, hop: 0, created: now, lle_done: Vec::new() });
        self.counters.generated += 1;
        self.on_arrive(id)
    }

    fn session_known(&self, s: usize, incarnation: u32) -> bool {
        let ses = &self.sessions[s];
        ses.active && ses.incarnation == incarnation
    }

    fn on_arrive(&mut self, id: u64) -> Result<()> {
        let now = self.now();
        let Some(dg) = self.live.get(&id) else { return Ok(()) };
        let (s, inc, hop) = (dg.header.session, dg.header.incarnation, dg.hop);
        let weight = dg.header.weight;
        let l = self.sessions[s].path[hop];
        if !self.links[l].knows(s, inc) || !self.session_known(s, inc) && self.links[l].terminated.contains_key(&s) {
            self.counters.unknown += 1;
            self.live.remove(&id);
            return Ok(());
        }
        if self.links[l].failed {
            return self.drop_datagram(id, l, hop, hop);
        }
        if self.cfg.variant.approx() {
            let alpha = self.cfg.alpha;
            let link = &mut self.links[l];
            if let Some(prev) = link.last_arrival {
                let gap = (now - prev) / weight as f64;
                for _ in 0..weight {
                    let (t, r) = approx_rate_estimate(link.t_int, gap, alpha);
                    link.t_int = Some(t);
                    link.r_sum = if r.is_finite() { r } else { link.r_sum };
                }
            }
            link.last_arrival = Some(now);
        }
        self.process_header(l, id);
        self.links[l].queue.push_back(id);
        if self.links[l].in_service.is_none() {
            self.start_service(l)?;
        } else if self.links[l].occupancy() > self.cfg.n_mem {
            let victim = self.links[l].queue.pop_front().expect("queue holds the new arrival");
            let vhop = self.live[&victim].hop;
            self.drop_datagram(victim, l, vhop, vhop + 1)?;
        }
        Ok(())
    }

    /// Pops the next serviceable datagram and runs the link controller on it.
    fn start_service(&mut self, l: usize) -> Result<()> {
        while self.links[l].in_service.is_none() && !self.links[l].failed {
            let Some(id) = self.links[l].queue.pop_front() else { break };
            let Some(dg) = self.live.get(&id) else { continue };
            let (s, inc) = (dg.header.session, dg.header.incarnation);
            if !self.links[l].knows(s, inc) {
                self.counters.unknown += 1;
                self.live.remove(&id);
                continue;
            }
            let w = self.links[l].w;
            let tau = sample_lle_time(self.links[l].d, w, self.links[l].chi, &mut self.rng)?;
            let link = &mut self.links[l];
            link.in_service = Some(id);
            link.lle_epoch += 1;
            let epoch = link.lle_epoch;
            self.events.schedule_in(tau, Ev::LleDone { link: l, epoch })?;
        }
        Ok(())
    }

    /// Link controller steps when a header arrives: sums, price, Werner
    /// parameter, then the header stamps. Generation starts later, when the
    /// datagram reaches the head of the FIFO.
    fn process_header(&mut self, l: usize, id: u64) {
        let now = self.now();
        let variant = self.cfg.variant;
        let t_outer = self.cfg.t_outer;
        let step_scaling = self.cfg.step_scaling;
        let k_rel = self.cfg.k_lambda_rel;
        let slack = self.slack;
        let pi_active = self.pi_active;
        let frozen = self.w_frozen;
        let pi_cfg = self.cfg.pi.clone();
        let dg = self.live.get_mut(&id).expect("live datagram");
        let h = &mut dg.header;
        let link = &mut self.links[l];
        let s = h.session;
        if variant != Variant::Qtcp {
            let entry = link.ledger.entry(s).or_insert((0.0, 0.0));
            let oracle = link.oracle.entry(s).or_insert((0.0, 0.0));
            if !variant.approx() {
                link.r_sum += h.delta_r;
                entry.0 += h.delta_r;
                oracle.0 += h.delta_r;
            }
            link.m_sum += h.delta_mu;
            entry.1 += h.delta_mu;
            oracle.1 += h.delta_mu;
            link.wu.insert(s, h.wu_prime);
            link.processed += 1;
            if !pi_active {
                let cap = link.capacity(slack);
                let k = match step_scaling {
                    StepScaling::Uniform => link.k_lambda,
                    StepScaling::Rate => {
                        let c = cap.max(1e-9);
                        k_rel * link.lambda.max(1.0 / c) / c
                    }
                };
                link.lambda = (link.lambda + k * (link.r_sum - cap)).max(0.0);
            }
            if !frozen && link.processed.is_multiple_of(t_outer) {
                let w = link.w.max(crate::qnum::W_FLOOR);
                let wu_sum: f64 = link.wu.values().sum();
                let grad = -link.d * link.lambda + wu_sum / w + link.m_sum.max(0.0) / w;
                link.w = project_w(link.w + link.k_w * grad).min(W_CEIL);
            }
            if pi_active {
                let dt = (now - link.pi.last_t).max(0.0);
                link.pi.last_t = now;
                let e = link.occupancy() as f64 - pi_cfg.queue_target;
                let saturated = (link.pi.u >= 1.0 && e > 0.0) || (link.pi.u <= 0.0 && e < 0.0);
                if !saturated {
                    link.pi.integral += e * dt;
                }
                link.pi.u = (pi_cfg.kp * e + pi_cfg.ki * link.pi.integral).clamp(0.0, 1.0);
                let n = link.wu.len().max(1) as f64;
                let cap = (link.capacity(slack).max(0.0) / n) * (1.0 - link.pi.u);
                h.rate_cap = Some(h.rate_cap.map_or(cap, |c| c.min(cap)));
            }
        }
        h.w_prod *= link.w;
        h.lambda_sum += link.lambda;
    }

    fn on_lle_done(&mut self, l: usize, epoch: u64) -> Result<()> {
        let now = self.now();
        if self.links[l].lle_epoch != epoch || self.links[l].failed {
            return Ok(());
        }
        let Some(id) = self.links[l].in_service.take() else { return Ok(()) };
        let prop = self.links[l].prop;
        let pauli: u8 = self.rng.random_range(0..4);
        if let Some(dg) = self.live.get_mut(&id) {
            let s = dg.header.session;
            dg.lle_done.push(now);
            dg.header.pauli ^= pauli;
            if let Some(extra) = self.links[l].bank.remove(&s) {
                dg.header.weight += extra;
            }
            let last = dg.hop + 1 == self.sessions[s].path.len();
            if last {
                self.events.schedule_in(prop, Ev::Deliver(id))?;
            } else {
                dg.hop += 1;
                self.events.schedule_in(prop, Ev::Arrive(id))?;
            }
        }
        self.start_service(l)
    }

    fn on_deliver(&mut self, id: u64) -> Result<()> {
        let now = self.now();
        let Some(dg) = self.live.remove(&id) else { return Ok(()) };
        let s = dg.header.session;
        let rec = DeliveryRecord::from_timeline(s, dg.created, &dg.lle_done, now, dg.header.w_prod, self.cfg.t_c);
        self.sessions[s].delivered_weight += dg.header.weight;
        self.counters.delivered += 1;
        let d = Delivery { session: s, time: now, werner: rec.w_delivered };
        if self.keep_deliveries {
            self.deliveries.push(d);
        }
        self.recent.push_back(d);
        let h = dg.header;
        self.events.schedule_in(
            self.sessions[s].ack_delay,
            Ev::Ack {
                s,
                incarnation: h.incarnation,
                seq: h.seq,
                lambda_sum: h.lambda_sum,
                w_nominal: h.w_prod,
                w_delivered: rec.w_delivered,
                rate_cap: h.rate_cap,
            },
        )?;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn on_ack(
        &mut self,
        s: usize,
        incarnation: u32,
        seq: u64,
        lambda_sum: f64,
        w_nominal: f64,
        w_delivered: f64,
        rate_cap: Option<f64>,
    ) -> Result<()> {
        let now = self.now();
        if !self.session_known(s, incarnation) {
            self.counters.unknown += 1;
            return Ok(());
        }
        let variant = self.cfg.variant;
        let (t_outer, k_mu) = (self.cfg.t_outer, self.cfg.k_mu);
        let ack_werner = self.cfg.ack_werner;
        let qtcp = self.cfg.qtcp.clone();
        let pi_active = self.pi_active;
        let ses = &mut self.sessions[s];
        if seq <= ses.last_ack_seq {
            self.counters.stale_acks += 1;
            return Ok(());
        }
        ses.last_ack_seq = seq;
        ses.werner = match ack_werner {
            AckWerner::Nominal => w_nominal,
            AckWerner::Delivered => w_delivered,
        };
        if variant == Variant::Qtcp {
            ses.window_acks += 1;
            if now - ses.window_start >= qtcp.window_s {
                if !ses.window_loss && ses.window_acks > 0 {
                    ses.r = (ses.r + qtcp.ai_step).min(ses.r_max);
                }
                ses.window_start = now;
                ses.window_acks = 0;
                ses.window_loss = false;
            }
        } else if pi_active {
            if let Some(cap) = rate_cap {
                ses.r = cap.clamp(ses.r_min, ses.r_max);
            }
        } else if lambda_sum > 0.0 {
            ses.r = (1.0 / lambda_sum).min(ses.r_max);
        } else {
            self.counters.zero_price_holds += 1;
        }
        if variant != Variant::Qtcp {
            ses.acks += 1;
            if ses.acks.is_multiple_of(t_outer) {
                let lw = ses.werner.max(1e-300).ln();
                ses.mu = (ses.mu + k_mu * (ses.k - lw)).max(0.0);
            }
        }
        if !ses.r.is_finite() || ses.r <= 0.0 {
            self.blowup = Some(format!("session {s} rate {}", ses.r));
            return Ok(());
        }
        self.reschedule_timer(s)
    }

    fn reschedule_timer(&mut self, s: usize) -> Result<()> {
        let now = self.now();
        let ses = &mut self.sessions[s];
        if !ses.active || self.quiescing {
            return Ok(());
        }
        ses.timer_epoch += 1;
        let epoch = ses.timer_epoch;
        let due = ses.last_emit.map_or(now, |t| (t + 1.0 / ses.r).max(now));
        self.events.schedule(due, Ev::Timer { s, epoch })?;
        Ok(())
    }

    /// Loss of datagram `id` at link `l` (path position `hop`); the first
    /// `applied` links of the path have already processed its header.
    fn drop_datagram(&mut self, id: u64, l: usize, hop: usize, applied: usize) -> Result<()> {
        let now = self.now();
        let Some(dg) = self.live.remove(&id) else { return Ok(()) };
        let h = dg.header;
        let s = h.session;
        self.counters.drops += 1;
        self.links[l].drops += 1;
        self.out.events.push(now, format!("l{l}:drop"), s as f64);
        let _ = hop;
        if !self.session_known(s, h.incarnation) {
            return Ok(());
        }
        let variant = self.cfg.variant;
        if variant.approx() {
            *self.links[l].bank.entry(s).or_insert(0) += h.weight;
        } else {
            self.sessions[s].lost_weight += h.weight;
        }
        let (dr, dmu) = if variant == Variant::Qtcp { (0.0, 0.0) } else { (h.delta_r, h.delta_mu) };
        let path = self.sessions[s].path.clone();
        for &ul in &path[..applied] {
            let link = &mut self.links[ul];
            if let Some(o) = link.oracle.get_mut(&s) {
                o.0 -= dr;
                o.1 -= dmu;
            }
            *link.pending.entry(s).or_insert(0) += 1;
        }
        self.counters.corrections += 1;
        if applied == 0 {
            return self.on_correction(s, h.incarnation, usize::MAX, dr, dmu);
        }
        let hop_next = applied - 1;
        let delay = if applied == hop + 1 { 0.0 } else { self.links[path[hop_next]].prop };
        self.events.schedule_in(delay, Ev::Correction { s, incarnation: h.incarnation, hop: hop_next, dr, dmu })
            .map(|_| ())
            .map_err(Into::into)
    }

    /// Correction (or loss notice) moving upstream; `hop == usize::MAX`
    /// means it has reached the source.
    fn on_correction(&mut self, s: usize, incarnation: u32, hop: usize, dr: f64, dmu: f64) -> Result<()> {
        let now = self.now();
        if hop != usize::MAX {
            let l = self.sessions[s].path[hop];
            let approx = self.cfg.variant.approx();
            let link = &mut self.links[l];
            if let Some(p) = link.pending.get_mut(&s) {
                *p = p.saturating_sub(1);
            }
            if link.knows(s, incarnation) {
                if let Some(e) = link.ledger.get_mut(&s) {
                    if !approx {
                        link.r_sum -= dr;
                        e.0 -= dr;
                    }
                    link.m_sum -= dmu;
                    e.1 -= dmu;
                }
                if link.pending.get(&s) == Some(&0) {
                    if let (Some(e), Some(o)) = (link.ledger.get(&s), link.oracle.get(&s)) {
                        self.counters.audit_checks += 1;
                        let scale = 1.0 + e.0.abs() + o.0.abs();
                        if (e.0 - o.0).abs() > 1e-9 * scale || (e.1 - o.1).abs() > 1e-9 * (1.0 + o.1.abs()) {
                            self.counters.audit_violations += 1;
                        }
                    }
                }
            }
            let next = if hop == 0 { usize::MAX } else { hop - 1 };
            let delay = if hop == 0 { 0.0 } else { self.links[self.sessions[s].path[hop - 1]].prop };
            self.events.schedule_in(delay, Ev::Correction { s, incarnation, hop: next, dr, dmu })?;
            return Ok(());
        }
        if !self.session_known(s, incarnation) {
            return Ok(());
        }
        let window = self.cfg.qtcp.window_s;
        let qtcp = self.cfg.variant == Variant::Qtcp;
        let ses = &mut self.sessions[s];
        if qtcp {
            ses.window_loss = true;
            if now - ses.last_decrease >= window {
                ses.r = (ses.r / 2.0).max(ses.r_min);
                ses.last_decrease = now;
            }
        } else {
            ses.announced_r -= dr;
            ses.announced_mu -= dmu;
        }
        Ok(())
    }

    fn terminate_session(&mut self, s: usize) -> Result<()> {
        let ses = &mut self.sessions[s];
        if !ses.active {
            self.counters.unknown += 1;
            return Ok(());
        }
        ses.active = false;
        ses.timer_epoch += 1;
        let incarnation = ses.incarnation;
        self.on_terminate_msg(s, incarnation, 0)
    }

    fn on_terminate_msg(&mut self, s: usize, incarnation: u32, hop: usize) -> Result<()> {
        let l = self.sessions[s].path[hop];
        let approx = self.cfg.variant.approx();
        let link = &mut self.links[l];
        if let Some((r, m)) = link.ledger.remove(&s) {
            if !approx {
                link.r_sum -= r;
            }
            link.m_sum -= m;
        }
        link.oracle.remove(&s);
        link.pending.remove(&s);
        link.wu.remove(&s);
        link.bank.remove(&s);
        link.terminated.insert(s, incarnation);
        let prop = link.prop;
        if hop + 1 < self.sessions[s].path.len() {
            self.events.schedule_in(prop, Ev::Terminate { s, incarnation, hop: hop + 1 })?;
        }
        Ok(())
    }

    fn on_intervention(&mut self, i: usize) -> Result<()> {
        let now = self.now();
        let action = self.interventions[i].action.clone();
        self.out.events.push(now, action.label(), 1.0);
        match action {
            Intervention::LinkFailure { link } => {
                if self.links[link].failed {
                    return Ok(());
                }
                self.links[link].failed = true;
                self.links[link].lle_epoch += 1;
                let pos = |e: &Self, id: u64| e.live.get(&id).map(|d| d.hop);
                if let Some(id) = self.links[link].in_service.take() {
                    if let Some(hop) = pos(self, id) {
                        self.drop_datagram(id, link, hop, hop + 1)?;
                    }
                }
                while let Some(id) = self.links[link].queue.pop_front() {
                    if let Some(hop) = pos(self, id) {
                        self.drop_datagram(id, link, hop, hop + 1)?;
                    }
                }
                let hit: Vec<usize> = (0..self.sessions.len())
                    .filter(|&s| self.sessions[s].active && self.sessions[s].path.contains(&link))
                    .collect();
                for s in hit {
                    self.terminate_session(s)?;
                    self.sessions[s].stopped_by_link = Some(link);
                }
                self.topology_changed(now);
            }
            Intervention::LinkRestore { link } => {
                if !self.links[link].failed {
                    return Ok(());
                }
                self.links[link].failed = false;
                let back: Vec<usize> =
                    (0..self.sessions.len()).filter(|&s| self.sessions[s].stopped_by_link == Some(link)).collect();
                for s in back {
                    self.start_session(s)?;
                }
                self.topology_changed(now);
            }
            Intervention::SessionStart { session } => self.start_session(session)?,
            Intervention::SessionTerminate { session } => self.terminate_session(session)?,
            Intervention::UtilitySwitch { sessions, utility } => {
                for s in sessions {
                    self.sessions[s].kind = utility;
                }
            }
        }
        Ok(())
    }

    /// Topology changes hand control back to the primal-dual controllers.
    fn topology_changed(&mut self, now: f64) {
        if self.cfg.variant == Variant::QpdPi && self.pi_active {
            self.pi_active = false;
            self.w_frozen = false;
            self.out.events.push(now, "pi:release", 1.0);
        }
        for d in &mut self.detectors {
            d.reset(now);
        }
        self.pi_epoch_start = now;
    }

    fn on_sample(&mut self, t: f64, k: u64) -> Result<()> {
        let win = self.cfg.aggregate_window_s;
        while self.recent.front().is_some_and(|d| d.time <= t - win) {
            self.recent.pop_front();
        }
        let span = win.min(t).max(self.cfg.sample_period_s);
        let recent: Vec<Delivery> = self.recent.iter().copied().collect();
        let skr = aggregate_absolute(UtilityKind::Skr, &recent, t - span, t);
        let neg = aggregate_absolute(UtilityKind::Neg, &recent, t - span, t);
        let mut log_u = 0.0;
        for (s, ses) in self.sessions.iter().enumerate() {
            let tag = format!("s{s}");
            self.out.sessions.push(&format!("{tag}:rate"), t, if ses.active { ses.r } else { 0.0 });
            self.out.sessions.push(&format!("{tag}:werner"), t, ses.werner);
            self.out.sessions.push(&format!("{tag}:mu"), t, ses.mu);
            if ses.active {
                let g = absolute_factor(ses.kind, ses.werner);
                if g > 0.0 {
                    log_u += (ses.r * g).ln();
                }
            }
        }
        for (l, link) in self.links.iter().enumerate() {
            let tag = format!("l{l}");
            self.out.links.push(&format!("{tag}:w"), t, link.w);
            self.out.links.push(&format!("{tag}:lambda"), t, link.lambda);
            self.out.links.push(&format!("{tag}:queue"), t, link.occupancy() as f64);
            self.out.links.push(&format!("{tag}:r_sum"), t, link.r_sum);
            if !link.lambda.is_finite() || !link.w.is_finite() || !link.r_sum.is_finite() {
                self.blowup = Some(format!("link {l} state is not finite"));
            }
        }
        let delivered = recent.iter().filter(|d| d.time > t - span).count() as f64 / span;
        self.out.aggregate.push("aggregate:skr", t, skr);
        self.out.aggregate.push("aggregate:neg", t, neg);
        self.out.aggregate.push("aggregate:utility", t, log_u);
        self.out.aggregate.push("aggregate:delivered", t, delivered);
        if self.cfg.variant == Variant::QpdPi && !self.pi_active {
            let mut settled = true;
            for (det, link) in self.detectors.iter_mut().zip(&self.links) {
                settled &= det.push(t, link.d * (1.0 - link.w));
            }
            let deadline = self.cfg.pi.max_wait_s.is_some_and(|m| t - self.pi_epoch_start >= m);
            if settled || deadline {
                self.pi_active = true;
                self.w_frozen = true;
                self.pi_switch_time = Some(t);
                for link in &mut self.links {
                    link.pi = PiState { last_t: t, ..PiState::default() };
                }
                self.out.events.push(t, "pi:engage", 1.0);
            }
        }
        self.events.schedule((k + 1) as f64 * self.cfg.sample_period_s, Ev::Sample(k + 1))?;
        Ok(())
    }

    /// `generated = delivered weight + banked weight + in-flight weight`
    /// per active session (approx variants). Returns the first mismatch.
    pub fn weight_balance(&self) -> Result<(), String> {
        let mut in_flight = vec![0u64; self.sessions.len()];
        for dg in self.live.values() {
            in_flight[dg.header.session] += dg.header.weight;
        }
        let mut banked = vec![0u64; self.sessions.len()];
        for link in &self.links {
            for (&s, &w) in &link.bank {
                banked[s] += w;
            }
        }
        for (s, ses) in self.sessions.iter().enumerate() {
            if ses.incarnation > 0 || !ses.active {
                continue;
            }
            let rhs = ses.delivered_weight + banked[s] + in_flight[s] + ses.lost_weight;
            if ses.generated != rhs {
                return Err(format!(
                    "session {s}: generated {} != delivered {} + banked {} + in flight {} + lost {}",
                    ses.generated, ses.delivered_weight, banked[s], in_flight[s], ses.lost_weight
                ));
            }
        }
        Ok(())
    }

    /// For every link and active session: the link's ledger entry against
    /// the session's announced values, and `R_sum` against the ledger sum.
    /// Meaningful after [`Engine::quiesce`] in exact mode.
    pub fn ledger_mismatches(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (l, link) in self.links.iter().enumerate() {
            let mut sum = 0.0;
            for (&s, &(r, m)) in &link.ledger {
                sum += r;
                let ses = &self.sessions[s];
                if !ses.active {
                    continue;
                }
                if (r - ses.announced_r).abs() > 1e-6 * (1.0 + ses.announced_r.abs()) {
                    out.push(format!("l{l} s{s}: ledger R {r} vs announced {}", ses.announced_r));
                }
                if (m - ses.announced_mu).abs() > 1e-9 * (1.0 + ses.announced_mu.abs()) {
                    out.push(format!("l{l} s{s}: ledger mu {m} vs announced {}", ses.announced_mu));
                }
            }
            if !self.cfg.variant.approx() && (sum - link.r_sum).abs() > 1e-6 * (1.0 + sum.abs()) {
                out.push(format!("l{l}: R_sum {} vs ledger {sum}", link.r_sum));
            }
        }
        out
    }

    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    /// Finishes the run and assembles outputs and the summary.
    pub fn finish(mut self, seed: u64) -> RunResult {
        let now = self.now();
        let mut sum = Summary::default();
        sum.set("status", if self.blowup.is_some() { "blowup" } else { "ok" });
        sum.set("variant", self.cfg.variant);
        sum.set("seed", seed);
        sum.set_f64("duration_s", now);
        let primary = self.cfg.primary;
        let result_for = |out: &RunOutput, kind: UtilityKind| {
            out.aggregate.get(&format!("aggregate:{kind}")).cloned().unwrap_or_default()
        };
        for kind in [UtilityKind::Skr, UtilityKind::Neg] {
            let s = result_for(&self.out, kind);
            let ma = moving_average(&s, crate::metrics::MA_WINDOW_S);
            sum.set_f64(&format!("steady_{kind}"), ma.tail_mean(crate::metrics::STEADY_FRACTION).unwrap_or(0.0));
        }
        let conv = crate::metrics::convergence_time_raw(
            &result_for(&self.out, primary),
            crate::metrics::MA_WINDOW_S,
            crate::metrics::CONVERGENCE_BAND,
        );
        match conv {
            Convergence::At(t) => sum.set_f64("convergence_time_s", t),
            Convergence::DidNotConverge => sum.set("convergence_time_s", "did_not_converge"),
        }
        sum.set("converged", conv.is_converged());
        let c = &self.counters;
        sum.set("generated", c.generated);
        sum.set("delivered", c.delivered);
        sum.set("drops", c.drops);
        sum.set("unknown", c.unknown);
        sum.set("stale_acks", c.stale_acks);
        sum.set("zero_price_holds", c.zero_price_holds);
        sum.set("events", self.events.dispatched());
        if let Some(t) = self.pi_switch_time {
            sum.set_f64("pi_switch_time_s", t);
        }
        if let Some(b) = &self.blowup {
            sum.set("blowup", b.replace(',', ";"));
        }
        self.out.summary = sum;
        RunResult {
            final_w: self.links.iter().map(|l| l.w).collect(),
            final_lambda: self.links.iter().map(|l| l.lambda).collect(),
            final_r: self.sessions.iter().map(|s| s.r).collect(),
            output: self.out,
            counters: self.counters,
            deliveries: self.deliveries,
            pi_switch_time: self.pi_switch_time,
            blowup: self.blowup,
            trace_tail: self.tail.iter().map(|(t, e)| format!("t={t:.6} {e:?}")).collect(),
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }
}

/// Builds an engine, runs it for `duration_s` and returns the result. A
/// blow-up ends the run early and is reported in the result.
pub fn simulate(
    topo: Topology,
    sessions: Vec<SessionSpec>,
    cfg: ProtocolConfig,
    interventions: Vec<TimedIntervention>,
    duration_s: f64,
    seed: u64,
) -> Result<RunResult> {
    let mut e = Engine::new(topo, sessions, cfg, interventions, seed)?;
    match e.run_until(duration_s) {
        Ok(()) | Err(ProtocolError::BlowUp { .. }) => {}
        Err(err) => return Err(err),
    }
    Ok(e.finish(seed))
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::topology::{build_dumbbell, dumbbell_sessions, LinkId};

    #[test]
    fn decoherence_factor() {
        assert_eq!(decohere(0.9, 0.0, 1.0), 0.9);
        assert_relative_eq!(decohere(1.0, 1.0, 1.0), 0.36788, epsilon = 1e-5);
        assert!(decohere(0.9, 1e6, 1.0) < 1e-300);
    }

    #[test]
    fn delivery_record_storage() {
        let r = DeliveryRecord::from_timeline(0, 0.0, &[1.0, 1.5, 2.0], 2.0, 0.8, None);
        assert_eq!(r.w_delivered, 0.8);
        assert_eq!(r.storage, vec![1.0, 0.5, 0.5]);
        let r = DeliveryRecord::from_timeline(0, 0.0, &[0.0], 1.0, 0.8, Some(1.0));
        assert_relative_eq!(r.w_delivered, 0.8 * (-1.0f64).exp(), epsilon = 1e-12);
        let z = DeliveryRecord::from_timeline(0, 0.0, &[2.0, 2.0], 2.0, 0.7, Some(1.0));
        assert_eq!(z.w_delivered, 0.7);
    }

    #[test]
    fn approx_estimate() {
        let (t, r) = approx_rate_estimate(Some(0.01), 0.02, 0.9);
        assert_relative_eq!(t, 0.011, epsilon = 1e-15);
        assert_relative_eq!(r, 90.909, epsilon = 1e-3);
        assert_eq!(approx_rate_estimate(None, 0.005, 0.9).0, 0.005);
        let mut t = Some(1.0);
        for _ in 0..400 {
            t = Some(approx_rate_estimate(t, 0.25, 0.9).0);
        }
        assert_relative_eq!(t.unwrap(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn da_capacity_examples() {
        let d = crate::topology::link_rate_param(80.0, 1e5).unwrap();
        let (c, ok) = da_capacity(d, 0.967, 50.0, 1.0);
        assert!(ok);
        assert_relative_eq!(c, d * 0.033 - 50.0, epsilon = 1e-9);
        assert_relative_eq!(c, 150.87, epsilon = 0.01);
        assert!(!da_capacity(1000.0, 0.96, 50.0, 1.0).1);
        assert_eq!(da_capacity(d, 0.9, 0.0, 1.0).0, d * (1.0 - 0.9));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("tcp".parse::<Variant>().is_err());
    }

    #[test]
    fn logprod_sessions_rejected() {
        let topo = build_dumbbell(80.0).unwrap();
        let s = dumbbell_sessions(&topo, UtilityKind::LogProd, 0.5).unwrap();
        assert!(matches!(
            Engine::new(topo, s, ProtocolConfig::default(), vec![], 1),
            Err(ProtocolError::UnsupportedUtility(0))
        ));
    }

    fn line(n: usize) -> (Topology, Vec<SessionSpec>) {
        let edges: Vec<_> = (0..n).map(|i| (i, i + 1, 80.0, 1e5)).collect();
        let topo = Topology::new(n + 1, edges).unwrap();
        let s = SessionSpec {
            id: 0,
            src: NodeId(0),
            dst: NodeId(n),
            path: (0..n).map(LinkId).collect(),
            utility: UtilityKind::Skr,
            f_min: 0.5,
            logprod_weights: None,
        };
        (topo, vec![s])
    }

    #[test]
    fn header_conservation_loss_free() {
        // Mirror the link updates by hand on the first datagram of a
        // single-session chain.
        let (topo, s) = line(2);
        let mut e = Engine::new(topo, s, ProtocolConfig::default(), vec![], 5).unwrap();
        let lambda0 = e.link_lambda();
        let w0 = e.link_w();
        let r0 = e.sessions[0].r;
        let k = e.cfg.k_lambda;
        e.run_until(0.0).unwrap();
        let id = *e.live.keys().next().unwrap();
        let expect_l0 = (lambda0[0] + k * (r0 - e.links[0].d * (1.0 - w0[0]))).max(0.0);
        assert_relative_eq!(e.links[0].lambda, expect_l0, epsilon = 1e-15);
        assert_relative_eq!(e.live[&id].header.lambda_sum, expect_l0, epsilon = 1e-15);
        assert_relative_eq!(e.live[&id].header.w_prod, w0[0], epsilon = 1e-15);
        e.run_until(0.5).unwrap();
        let c = e.counters().clone();
        assert!(c.delivered > 0);
        assert_eq!(c.generated, c.delivered + c.drops + e.live.len() as u64);
    }

    #[test]
    fn fifo_single_link() {
        let (topo, s) = line(1);
        let mut e = Engine::new(topo, s, ProtocolConfig::default(), vec![], 9).unwrap();
        e.run_until(2.0).unwrap();
        let seqs: Vec<u64> = e.deliveries().iter().map(|d| d.time.to_bits()).collect();
        assert!(seqs.windows(2).all(|w| f64::from_bits(w[0]) <= f64::from_bits(w[1])));
        assert!(e.sessions[0].last_ack_seq > 0);
    }
}
