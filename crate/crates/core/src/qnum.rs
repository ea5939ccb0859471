//! Primal-dual updates for the quantum network utility maximization problem.
//!
//! ```text
//! max  sum_r U_r(R_r, w_r)
//! s.t. sum_{r: l in r} R_r <= d_l (1 - w_l) - slack_l      (capacity)
//!      sum_{l in r} ln w_l >= K_r                         (fidelity)
//! ```
//!
//! Every update in [`bilevel_step`] reads the state at iteration `t` and
//! writes the state at `t + 1` (Jacobi style).

use rand::Rng;
use thiserror::Error;

use crate::topology::{RoutingMatrix, SessionSpec, Topology, TopologyError};
use crate::utility::{self, Utility, UtilityError, UtilityKind};
use crate::Real;

/// Lower projection bound for link Werner parameters.
pub const W_FLOOR: f64 = 1e-4;
/// Initial per-link Werner parameter.
pub const W_INIT: f64 = 0.967;
/// Distance kept from the lower edge of a utility domain when a marginal
/// utility has to be evaluated at an out-of-domain state.
pub const DOMAIN_MARGIN: f64 = 0.01;
pub const DEFAULT_KKT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum QnumError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error("instance has {links} links and {sessions} sessions; the grid oracle handles at most 2 of each")]
    TooLarge { links: usize, sessions: usize },
    #[error("no strictly feasible point: {0}")]
    NoSlater(String),
    #[error("link {0} has a zero Werner parameter while pricing fidelity")]
    Degenerate(usize),
    #[error("no convergence after {iterations} iterations (KKT residual {residual:e})")]
    NonConvergence { iterations: u64, residual: f64 },
    #[error("invalid step sizes: {0}")]
    BadSteps(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub type Result<T, E = QnumError> = std::result::Result<T, E>;

/// A QNUM instance: topology, sessions, link parameters and thresholds.
#[derive(Debug, Clone)]
pub struct ProblemInstance<T> {
    pub topology: Topology,
    pub sessions: Vec<SessionSpec>,
    pub utilities: Vec<Utility<T>>,
    /// `d_l`, pairs/s at `w_l = 0`.
    pub d: Vec<T>,
    /// `K_r = ln((4 F_min - 1)/3)`.
    pub k: Vec<T>,
    /// Per-link capacity reduction (`G / T_c` when decoherence-aware).
    pub slack: Vec<T>,
    /// Link indices per session, path order.
    pub paths: Vec<Vec<usize>>,
    /// `(session, position in path)` per link.
    pub sessions_on: Vec<Vec<(usize, usize)>>,
    pub routing: RoutingMatrix,
}

impl<T: Real> ProblemInstance<T> {
    pub fn new(topology: Topology, sessions: Vec<SessionSpec>) -> Result<Self> {
        let n_links = topology.link_count();
        let mut utilities = Vec::with_capacity(sessions.len());
        let mut k = Vec::with_capacity(sessions.len());
        let mut paths = Vec::with_capacity(sessions.len());
        let mut sessions_on = vec![Vec::new(); n_links];
        for (r, s) in sessions.iter().enumerate() {
            s.validate(&topology)?;
            utilities.push(Utility::from_kind(s.utility, s.path.len(), s.logprod_weights.as_deref())?);
            k.push(utility::k_threshold(T::lit(s.f_min))?);
            let p: Vec<usize> = s.path.iter().map(|l| l.0).collect();
            for (pos, &l) in p.iter().enumerate() {
                sessions_on[l].push((r, pos));
            }
            paths.push(p);
        }
        let d = topology.rate_params().into_iter().map(T::lit).collect();
        let routing = RoutingMatrix::new(n_links, &sessions);
        Ok(Self {
            topology,
            sessions,
            utilities,
            d,
            k,
            slack: vec![T::zero(); n_links],
            paths,
            sessions_on,
            routing,
        })
    }

    /// Applies the same capacity slack (e.g. `G / T_c`) to every link.
    pub fn with_uniform_slack(mut self, slack: T) -> Self {
        self.slack = vec![slack; self.link_count()];
        self
    }

    pub fn link_count(&self) -> usize {
        self.d.len()
    }

    pub fn session_count(&self) -> usize {
        self.paths.len()
    }

    /// `d_l (1 - w_l) - slack_l`.
    pub fn capacity(&self, link: usize, w: T) -> T {
        self.d[link] * (T::one() - w) - self.slack[link]
    }

    /// Sessions crossing `link`.
    pub fn load_count(&self, link: usize) -> usize {
        self.sessions_on[link].len()
    }

    pub fn path_werner(&self, session: usize, w: &[T]) -> Vec<T> {
        self.paths[session].iter().map(|&l| w[l]).collect()
    }
}

/// Primal and dual variables plus the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualState<T> {
    pub r: Vec<T>,
    pub w: Vec<T>,
    pub lambda: Vec<T>,
    pub mu: Vec<T>,
    pub t: u64,
    /// Rate updates skipped because the path price was zero.
    pub zero_price_holds: u64,
}

impl<T: Real> PrimalDualState<T> {
    /// Random feasible start: `w = 0.967`, `lambda, mu ~ U(0, 0.1]`,
    /// `R ~ U(0, d_min / (2 N_max)]`.
    pub fn initial<G: Rng + ?Sized>(inst: &ProblemInstance<T>, rng: &mut G) -> Self {
        let d_min = inst.d.iter().map(|d| d.to_f64_lossy()).fold(f64::INFINITY, f64::min);
        let n_max = inst.sessions_on.iter().map(Vec::len).max().unwrap_or(1).max(1) as f64;
        let r_hi = d_min / (2.0 * n_max);
        let mut unit = |hi: f64| T::lit(hi * (1.0 - rng.random::<f64>()));
        let lambda = (0..inst.link_count()).map(|_| unit(0.1)).collect();
        let mu = (0..inst.session_count()).map(|_| unit(0.1)).collect();
        let r = (0..inst.session_count()).map(|_| unit(r_hi)).collect();
        Self {
            r,
            w: vec![T::lit(W_INIT); inst.link_count()],
            lambda,
            mu,
            t: 0,
            zero_price_holds: 0,
        }
    }

    /// Deterministic start used by the reference solver: `w = 0.967`,
    /// `mu = 0`, and each link priced so every session gets an equal share
    /// of its tightest link.
    pub fn neutral(inst: &ProblemInstance<T>) -> Self {
        let w0 = T::lit(W_INIT);
        let lambda: Vec<T> = (0..inst.link_count())
            .map(|l| {
                let n = inst.load_count(l);
                let cap = inst.capacity(l, w0).max(T::lit(1e-3));
                if n == 0 {
                    T::zero()
                } else {
                    T::lit(n as f64) / cap
                }
            })
            .collect();
        let r = inst
            .paths
            .iter()
            .map(|p| p.iter().fold(T::zero(), |s, &l| s + lambda[l]).recip())
            .collect();
        Self {
            r,
            w: vec![w0; inst.link_count()],
            lambda,
            mu: vec![T::zero(); inst.session_count()],
            t: 0,
            zero_price_holds: 0,
        }
    }

    pub fn check_dims(&self, inst: &ProblemInstance<T>) -> Result<()> {
        if self.r.len() != inst.session_count()
            || self.mu.len() != inst.session_count()
            || self.w.len() != inst.link_count()
            || self.lambda.len() != inst.link_count()
        {
            return Err(QnumError::Dimension(format!(
                "state ({} sessions, {} links) vs instance ({}, {})",
                self.r.len(),
                self.w.len(),
                inst.session_count(),
                inst.link_count()
            )));
        }
        Ok(())
    }

    /// Load `sum_{r: l in r} R_r` per link.
    pub fn loads(&self, inst: &ProblemInstance<T>) -> Vec<T> {
        inst.sessions_on
            .iter()
            .map(|on| on.iter().fold(T::zero(), |s, &(r, _)| s + self.r[r]))
            .collect()
    }

    pub fn path_price(&self, inst: &ProblemInstance<T>, session: usize) -> T {
        inst.paths[session].iter().fold(T::zero(), |s, &l| s + self.lambda[l])
    }

    pub fn path_log_werner(&self, inst: &ProblemInstance<T>, session: usize) -> T {
        inst.paths[session].iter().fold(T::zero(), |s, &l| s + self.w[l].ln())
    }

    pub fn e2e_werner(&self, inst: &ProblemInstance<T>, session: usize) -> T {
        inst.paths[session].iter().fold(T::one(), |s, &l| s * self.w[l])
    }
}

/// Step sizes and the outer-loop period.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizes<T> {
    pub k_lambda: Vec<T>,
    pub k_mu: Vec<T>,
    pub k_w: Vec<T>,
    pub t_outer: u64,
}

impl<T: Real> StepSizes<T> {
    pub fn uniform(links: usize, sessions: usize, k_lambda: T, k_mu: T, k_w: T, t_outer: u64) -> Self {
        Self {
            k_lambda: vec![k_lambda; links],
            k_mu: vec![k_mu; sessions],
            k_w: vec![k_w; links],
            t_outer,
        }
    }

    /// `k_lambda = 1e-5`, `k_mu = 1e-2`, `k_w = 1e-4`, `T_outer = 10`.
    pub fn defaults(inst: &ProblemInstance<T>) -> Self {
        Self::uniform(inst.link_count(), inst.session_count(), T::lit(1e-5), T::lit(1e-2), T::lit(1e-4), 10)
    }

    /// Conservative steps for the reference solver. The price step of each
    /// link is scaled by the largest rate its sessions could reach
    /// (`d_l / N_l`), which keeps the `R = 1/sum(lambda)` loop stable on
    /// short, high-capacity links.
    pub fn for_solver(inst: &ProblemInstance<T>) -> Self {
        let mut k_lambda = vec![T::lit(1e-5); inst.link_count()];
        for (l, k) in k_lambda.iter_mut().enumerate() {
            let rhat2: f64 = inst.sessions_on[l]
                .iter()
                .map(|&(r, _)| {
                    let dmin = inst.paths[r].iter().map(|&m| inst.d[m].to_f64_lossy()).fold(f64::INFINITY, f64::min);
                    let share = dmin / inst.load_count(l).max(1) as f64;
                    share * share
                })
                .sum();
            if rhat2 > 0.0 {
                *k = T::lit(0.5 / rhat2);
            }
        }
        Self {
            k_lambda,
            k_mu: vec![T::lit(1e-2); inst.session_count()],
            k_w: vec![T::lit(1e-5); inst.link_count()],
            t_outer: 1,
        }
    }

    pub fn validate(&self, inst: &ProblemInstance<T>) -> Result<()> {
        if self.k_lambda.len() != inst.link_count()
            || self.k_w.len() != inst.link_count()
            || self.k_mu.len() != inst.session_count()
        {
            return Err(QnumError::BadSteps("vector lengths do not match the instance".into()));
        }
        let all_pos = self.k_lambda.iter().chain(&self.k_mu).chain(&self.k_w).all(|&k| k > T::zero());
        if !all_pos {
            return Err(QnumError::BadSteps("step sizes must be positive".into()));
        }
        if self.t_outer == 0 {
            return Err(QnumError::BadSteps("T_outer must be at least 1".into()));
        }
        Ok(())
    }

    pub fn outer_due(&self, t: u64) -> bool {
        t.is_multiple_of(self.t_outer)
    }
}

/// `W U'_W` evaluated at `werner`, moved inside the domain if needed. The
/// controllers keep running while a transient pushes a session below its
/// utility domain; the marginal utility at the domain edge pulls `w` back up.
pub fn wu_prime_guarded<T: Real>(kind: UtilityKind, werner: T) -> T {
    let lo = T::lit(utility::domain_min_werner(kind) + DOMAIN_MARGIN);
    let hi = T::one() - T::lit(1e-12);
    let wv = werner.max(lo).min(hi);
    utility::wu_prime(kind, wv).expect("guarded Werner value lies inside the domain")
}

/// `dU_r/dw_l` for the session at path position `pos`, with the domain guard.
pub fn marginal_w<T: Real>(u: &Utility<T>, wv: &[T], pos: usize) -> T {
    match u {
        Utility::LogProd(a) => a[pos] / wv[pos].max(T::lit(W_FLOOR)),
        _ => {
            let werner = wv.iter().fold(T::one(), |s, &w| s * w);
            wu_prime_guarded(u.kind(), werner) / wv[pos].max(T::lit(W_FLOOR))
        }
    }
}

/// Price update: `lambda <- max(lambda + k (load - capacity), 0)`.
pub fn update_lambda<T: Real>(st: &PrimalDualState<T>, inst: &ProblemInstance<T>, steps: &StepSizes<T>) -> Vec<T> {
    let loads = st.loads(inst);
    (0..inst.link_count())
        .map(|l| lambda_step(st.lambda[l], steps.k_lambda[l], loads[l], inst.capacity(l, st.w[l])))
        .collect()
}

/// Scalar form of the price update.
pub fn lambda_step<T: Real>(lambda: T, k: T, load: T, capacity: T) -> T {
    (lambda + k * (load - capacity)).max(T::zero())
}

/// Rate update `R = 1 / sum(lambda)`; `None` when the path price is zero
/// (the caller keeps the previous rate).
pub fn update_rate<T: Real>(st: &PrimalDualState<T>, inst: &ProblemInstance<T>, session: usize) -> Option<T> {
    utility::rate_inverse(st.path_price(inst, session)).ok()
}

/// Fidelity price update: `mu <- max(mu + k (K - sum ln w), 0)`.
pub fn update_mu<T: Real>(
    st: &PrimalDualState<T>,
    inst: &ProblemInstance<T>,
    steps: &StepSizes<T>,
    session: usize,
) -> Result<T> {
    if let Some(&l) = inst.paths[session].iter().find(|&&l| st.w[l] <= T::zero()) {
        return Err(QnumError::Degenerate(l));
    }
    let g = inst.k[session] - st.path_log_werner(inst, session);
    Ok((st.mu[session] + steps.k_mu[session] * g).max(T::zero()))
}

/// `dw_l/dt = -d_l lambda_l + sum_r f_l + (sum_r mu_r) / w_l`.
pub fn w_gradient<T: Real>(st: &PrimalDualState<T>, inst: &ProblemInstance<T>, link: usize) -> T {
    let w = st.w[link].max(T::lit(W_FLOOR));
    let mut g = -inst.d[link] * st.lambda[link];
    let mut mu_sum = T::zero();
    for &(r, pos) in &inst.sessions_on[link] {
        let wv = inst.path_werner(r, &st.w);
        g = g + marginal_w(&inst.utilities[r], &wv, pos);
        mu_sum = mu_sum + st.mu[r];
    }
    g + mu_sum / w
}

/// Werner update with projection onto `[W_FLOOR, 1]`.
pub fn update_w<T: Real>(st: &PrimalDualState<T>, inst: &ProblemInstance<T>, steps: &StepSizes<T>, link: usize) -> T {
    project_w(st.w[link] + steps.k_w[link] * w_gradient(st, inst, link))
}

pub fn project_w<T: Real>(w: T) -> T {
    w.max(T::lit(W_FLOOR)).min(T::one())
}

/// One iteration: prices and rates every time, fidelity prices and Werner
/// parameters when `t mod T_outer == 0`.
pub fn bilevel_step<T: Real>(st: &mut PrimalDualState<T>, inst: &ProblemInstance<T>, steps: &StepSizes<T>) -> Result<()> {
    let outer = steps.outer_due(st.t);
    let lambda = update_lambda(st, inst, steps);
    let mut r = st.r.clone();
    for (s, rate) in r.iter_mut().enumerate() {
        match update_rate(st, inst, s) {
            Some(v) => *rate = v,
            None => st.zero_price_holds += 1,
        }
    }
    if outer {
        let mu = (0..inst.session_count())
            .map(|s| update_mu(st, inst, steps, s))
            .collect::<Result<Vec<_>>>()?;
        let w = (0..inst.link_count()).map(|l| update_w(st, inst, steps, l)).collect();
        st.mu = mu;
        st.w = w;
    }
    st.lambda = lambda;
    st.r = r;
    st.t += 1;
    Ok(())
}

/// `sum_r U_r`, or an error when some session is outside its domain.
pub fn aggregate_utility<T: Real>(st: &PrimalDualState<T>, inst: &ProblemInstance<T>) -> Result<T> {
    let mut total = T::zero();
    for (r, u) in inst.utilities.iter().enumerate() {
        total = total + u.value(st.r[r], &inst.path_werner(r, &st.w))?;
    }
    Ok(total)
}

/// Infinity norm of the KKT violations: projected gradients of every
/// variable family, complementary slackness and primal infeasibility.
pub fn kkt_residual<T: Real>(st: &PrimalDualState<T>, inst: &ProblemInstance<T>) -> T {
    let mut res = T::zero();
    let mut bump = |x: T| {
        let a = x.abs();
        if a > res || a.is_nan() {
            res = if a.is_nan() { T::infinity() } else { a };
        }
    };
    let loads = st.loads(inst);
    for l in 0..inst.link_count() {
        let g = w_gradient(st, inst, l);
        bump(st.w[l] - project_w(st.w[l] + g));
        let viol = loads[l] - inst.capacity(l, st.w[l]);
        bump(st.lambda[l] - (st.lambda[l] + viol).max(T::zero()));
        bump(st.lambda[l] * viol);
        bump(viol.max(T::zero()));
    }
    for r in 0..inst.session_count() {
        if st.r[r] > T::zero() {
            bump(st.r[r].recip() - st.path_price(inst, r));
        } else {
            bump(T::infinity());
        }
        let viol = inst.k[r] - st.path_log_werner(inst, r);
        bump(st.mu[r] - (st.mu[r] + viol).max(T::zero()));
        bump(st.mu[r] * viol);
        bump(viol.max(T::zero()));
    }
    res
}

/// Output of [`solve_centralized`].
#[derive(Debug, Clone)]
pub struct Solution<T> {
    pub state: PrimalDualState<T>,
    pub utility: T,
    pub residual: T,
    pub iterations: u64,
}

/// Reference solver: synchronous bi-level iteration with `T_outer = 1` from
/// [`PrimalDualState::neutral`] until the KKT residual drops below `tol`.
pub fn solve_centralized<T: Real>(
    inst: &ProblemInstance<T>,
    steps: &StepSizes<T>,
    tol: T,
    max_iter: u64,
) -> Result<Solution<T>> {
    solve_from(PrimalDualState::neutral(inst), inst, steps, tol, max_iter)
}

/// [`solve_centralized`] from a caller-supplied start.
pub fn solve_from<T: Real>(
    mut st: PrimalDualState<T>,
    inst: &ProblemInstance<T>,
    steps: &StepSizes<T>,
    tol: T,
    max_iter: u64,
) -> Result<Solution<T>> {
    st.check_dims(inst)?;
    steps.validate(inst)?;
    let steps = StepSizes { t_outer: 1, ..steps.clone() };
    let check_every = 64;
    let mut residual = kkt_residual(&st, inst);
    let mut it = 0;
    while it < max_iter {
        if residual < tol {
            break;
        }
        for _ in 0..check_every.min(max_iter - it) {
            bilevel_step(&mut st, inst, &steps)?;
            it += 1;
        }
        residual = kkt_residual(&st, inst);
        if !residual.is_finite() {
            break;
        }
    }
    if !(residual < tol) {
        return Err(QnumError::NonConvergence { iterations: it, residual: residual.to_f64_lossy() });
    }
    let utility = aggregate_utility(&st, inst)?;
    Ok(Solution { state: st, utility, residual, iterations: it })
}

/// A strictly feasible point of the constraint set.
#[derive(Debug, Clone, PartialEq)]
pub struct SlaterPoint<T> {
    pub r: Vec<T>,
    pub w: Vec<T>,
    pub delta: T,
    pub epsilon: T,
}

/// Uniform `w = 1 - delta` with `delta` half the largest value that keeps the
/// longest-path fidelity constraint strict, and uniform `R = epsilon` at half
/// the tightest remaining capacity share.
pub fn slater_point<T: Real>(inst: &ProblemInstance<T>) -> Result<SlaterPoint<T>> {
    let mut delta_max = T::one();
    for (r, p) in inst.paths.iter().enumerate() {
        let k = inst.k[r];
        if !(k < T::zero()) {
            return Err(QnumError::NoSlater(format!("session {r} requires F_min = 1")));
        }
        delta_max = delta_max.min(T::one() - (k / T::lit(p.len() as f64)).exp());
    }
    let delta = delta_max / T::lit(2.0);
    let mut eps = T::infinity();
    for l in 0..inst.link_count() {
        let n = inst.load_count(l);
        if n > 0 {
            eps = eps.min((inst.d[l] * delta - inst.slack[l]) / T::lit(n as f64));
        }
    }
    let eps = eps / T::lit(2.0);
    if !(eps > T::zero()) || !eps.is_finite() {
        return Err(QnumError::NoSlater("capacity slack leaves no positive rate".into()));
    }
    Ok(SlaterPoint {
        r: vec![eps; inst.session_count()],
        w: vec![T::one() - delta; inst.link_count()],
        delta,
        epsilon: eps,
    })
}

/// Smallest slack of the capacity and fidelity constraints at `(r, w)`;
/// positive iff the point is strictly feasible.
pub fn strict_margin<T: Real>(inst: &ProblemInstance<T>, r: &[T], w: &[T]) -> T {
    let mut m = T::infinity();
    for l in 0..inst.link_count() {
        let load = inst.sessions_on[l].iter().fold(T::zero(), |s, &(q, _)| s + r[q]);
        m = m.min(inst.capacity(l, w[l]) - load);
    }
    for (q, p) in inst.paths.iter().enumerate() {
        let lw = p.iter().fold(T::zero(), |s, &l| s + w[l].ln());
        m = m.min(lw - inst.k[q]);
    }
    m
}

/// Best grid point found by [`brute_force_oracle`].
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub w: Vec<f64>,
    pub r: Vec<f64>,
    pub utility: f64,
}

pub const ORACLE_GRID: f64 = 1e-3;

/// Exhaustive search over `w` on a `1e-3` grid for instances with at most
/// two links and two sessions. For fixed `w` the rate subproblem is
/// proportional-fair (`sum ln R_r` under capacity) and solved exactly.
pub fn brute_force_oracle(inst: &ProblemInstance<f64>) -> Result<OracleResult> {
    let (nl, ns) = (inst.link_count(), inst.session_count());
    if nl > 2 || ns > 2 || ns == 0 {
        return Err(QnumError::TooLarge { links: nl, sessions: ns });
    }
    let steps = (1.0 / ORACLE_GRID).round() as usize;
    let grid = |i: usize| (i as f64 * ORACLE_GRID).max(W_FLOOR);
    let mut best: Option<OracleResult> = None;
    let mut w = vec![1.0; nl];
    let total = (steps + 1).pow(nl as u32);
    for idx in 0..total {
        let mut rem = idx;
        for wl in w.iter_mut() {
            *wl = grid(rem % (steps + 1));
            rem /= steps + 1;
        }
        let Some(r) = proportional_fair(inst, &w) else { continue };
        let mut u = 0.0;
        let mut ok = true;
        for q in 0..ns {
            if inst.paths[q].iter().map(|&l| w[l].ln()).sum::<f64>() < inst.k[q] {
                ok = false;
                break;
            }
            match inst.utilities[q].value(r[q], &inst.path_werner(q, &w)) {
                Ok(v) => u += v,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok && best.as_ref().is_none_or(|b| u > b.utility) {
            best = Some(OracleResult { w: w.clone(), r, utility: u });
        }
    }
    best.ok_or_else(|| QnumError::NoSlater("no feasible grid point".into()))
}

/// Maximizes `sum ln R_r` subject to capacity for at most two sessions.
fn proportional_fair(inst: &ProblemInstance<f64>, w: &[f64]) -> Option<Vec<f64>> {
    let ns = inst.session_count();
    let mut own = vec![f64::INFINITY; ns];
    let mut shared = f64::INFINITY;
    for l in 0..inst.link_count() {
        let c = inst.capacity(l, w[l]);
        match inst.sessions_on[l].as_slice() {
            [] => {}
            [(q, _)] => own[*q] = own[*q].min(c),
            _ => shared = shared.min(c),
        }
    }
    let r = if ns == 1 {
        vec![own[0].min(shared)]
    } else if !shared.is_finite() || own[0] + own[1] <= shared {
        vec![own[0].min(shared), own[1].min(shared)]
    } else {
        let r1 = (shared / 2.0).max(shared - own[1]).min(own[0]);
        vec![r1, shared - r1]
    };
    r.iter().all(|&x| x > 0.0 && x.is_finite()).then_some(r)
}
