//! Continuous-time primal-dual dynamics with `R` eliminated through
//! `R_r = 1 / sum_{l in r} lambda_l`:
//!
//! ```text
//! w'      = dU/dw_l - d_l lambda_l + sum_{r: l in r} mu_r / w_l
//! lambda' = [sum_{r: l in r} R_r - d_l (1 - w_l)]^+_lambda
//! mu'     = [K_r - sum_{l in r} ln w_l]^+_mu
//! ```
//!
//! Integration is classical RK4 with a box projection after every step.
//! The dynamics are stiff in `lambda` when `d_l` is large (the price loop
//! gain is `R^2`); instances normalized to `d_l = 1` run comfortably at
//! `dt = 1e-3`.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::qnum::{marginal_w, PrimalDualState, ProblemInstance, W_FLOOR};
use crate::utility::UtilityError;
use crate::Real;

/// Lower bound on a path price when recovering `R = 1/price`.
pub const PRICE_FLOOR: f64 = 1e-9;
pub const BLOWUP: f64 = 1e12;

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("state blew up at t = {t}: component {index} = {value:e}")]
    BlowUp { t: f64, index: usize, value: f64 },
    #[error("dt must be positive, got {0}")]
    BadStep(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error("equilibrium has w_{0} outside (0, 1)")]
    Boundary(usize),
}

pub type Result<T, E = StabilityError> = std::result::Result<T, E>;

/// `x = [w, mu, lambda]` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeState<T> {
    pub w: Vec<T>,
    pub mu: Vec<T>,
    pub lambda: Vec<T>,
    pub t: T,
}

impl<T: Real> OdeState<T> {
    pub fn from_primal_dual(st: &PrimalDualState<T>) -> Self {
        Self { w: st.w.clone(), mu: st.mu.clone(), lambda: st.lambda.clone(), t: T::zero() }
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.w.iter().chain(&self.mu).chain(&self.lambda).copied().collect()
    }

    pub fn from_vec(x: &[T], links: usize, sessions: usize, t: T) -> Self {
        assert_eq!(x.len(), 2 * links + sessions);
        Self {
            w: x[..links].to_vec(),
            mu: x[links..links + sessions].to_vec(),
            lambda: x[links + sessions..].to_vec(),
            t,
        }
    }

    /// Session rates implied by the prices.
    pub fn rates(&self, inst: &ProblemInstance<T>) -> Vec<T> {
        inst.paths
            .iter()
            .map(|p| p.iter().fold(T::zero(), |s, &l| s + self.lambda[l]).max(T::lit(PRICE_FLOOR)).recip())
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.w.len() + self.mu.len() + self.lambda.len()
    }

    /// Infinity-norm distance between two states.
    pub fn distance(&self, other: &Self) -> T {
        self.to_vec()
            .iter()
            .zip(other.to_vec())
            .fold(T::zero(), |m, (&a, b)| m.max((a - b).abs()))
    }

    fn project(&mut self) {
        for w in &mut self.w {
            *w = w.max(T::lit(W_FLOOR)).min(T::one());
        }
        for m in self.mu.iter_mut().chain(self.lambda.iter_mut()) {
            *m = m.max(T::zero());
        }
    }
}

/// `[z]^+_a`: `z`, or `max(z, 0)` when the variable sits at its lower bound.
fn plus<T: Real>(z: T, a: T) -> T {
    if a > T::zero() {
        z
    } else {
        z.max(T::zero())
    }
}

/// Right-hand side in `[w, mu, lambda]` layout.
pub fn ode_rhs<T: Real>(x: &OdeState<T>, inst: &ProblemInstance<T>) -> Vec<T> {
    let (nl, ns) = (inst.link_count(), inst.session_count());
    let rates = x.rates(inst);
    let mut out = vec![T::zero(); 2 * nl + ns];
    for l in 0..nl {
        let w = x.w[l].max(T::lit(W_FLOOR));
        let mut g = -inst.d[l] * x.lambda[l];
        let mut load = T::zero();
        for &(r, pos) in &inst.sessions_on[l] {
            g = g + marginal_w(&inst.utilities[r], &inst.path_werner(r, &x.w), pos) + x.mu[r] / w;
            load = load + rates[r];
        }
        if (x.w[l] <= T::lit(W_FLOOR) && g < T::zero()) || (x.w[l] >= T::one() && g > T::zero()) {
            g = T::zero();
        }
        out[l] = g;
        out[nl + ns + l] = plus(load - inst.capacity(l, x.w[l]), x.lambda[l]);
    }
    for r in 0..ns {
        let lw = inst.paths[r].iter().fold(T::zero(), |s, &l| s + x.w[l].max(T::lit(W_FLOOR)).ln());
        out[nl + r] = plus(inst.k[r] - lw, x.mu[r]);
    }
    out
}

/// Sampled trajectory of [`integrate`].
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub samples: Vec<OdeState<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn last(&self) -> &OdeState<T> {
        self.samples.last().expect("trajectory holds the initial state")
    }
}

fn axpy<T: Real>(x: &[T], a: T, k: &[T]) -> Vec<T> {
    x.iter().zip(k).map(|(&xi, &ki)| xi + a * ki).collect()
}

/// Fixed-step RK4 from `x0` to `t_end`, keeping every `sample_every`-th
/// state (plus the final one).
pub fn integrate<T: Real>(
    x0: &OdeState<T>,
    inst: &ProblemInstance<T>,
    dt: T,
    t_end: T,
    sample_every: usize,
) -> Result<Trajectory<T>> {
    if !(dt > T::zero()) {
        return Err(StabilityError::BadStep(dt.to_f64_lossy()));
    }
    let (nl, ns) = (inst.link_count(), inst.session_count());
    if x0.w.len() != nl || x0.lambda.len() != nl || x0.mu.len() != ns {
        return Err(StabilityError::Dimension("initial state does not match the instance".into()));
    }
    let n_steps = ((t_end - x0.t) / dt).round().to_usize().unwrap_or(0);
    let every = sample_every.max(1);
    let mut cur = x0.clone();
    cur.project();
    let mut samples = vec![cur.clone()];
    let half = T::lit(0.5);
    let rhs = |v: &[T], t: T| ode_rhs(&OdeState::from_vec(v, nl, ns, t), inst);
    for step in 1..=n_steps {
        let x = cur.to_vec();
        let t = cur.t;
        let k1 = rhs(&x, t);
        let k2 = rhs(&axpy(&x, dt * half, &k1), t + dt * half);
        let k3 = rhs(&axpy(&x, dt * half, &k2), t + dt * half);
        let k4 = rhs(&axpy(&x, dt, &k3), t + dt);
        let next: Vec<T> = (0..x.len())
            .map(|i| x[i] + dt / T::lit(6.0) * (k1[i] + T::lit(2.0) * (k2[i] + k3[i]) + k4[i]))
            .collect();
        if let Some((index, &v)) = next.iter().enumerate().find(|(_, v)| !(v.abs() <= T::lit(BLOWUP))) {
            return Err(StabilityError::BlowUp { t: (t + dt).to_f64_lossy(), index, value: v.to_f64_lossy() });
        }
        cur = OdeState::from_vec(&next, nl, ns, x0.t + dt * T::lit(step as f64));
        cur.project();
        if step % every == 0 || step == n_steps {
            samples.push(cur.clone());
        }
    }
    Ok(Trajectory { samples })
}

/// `V = 1/2 |x - x*|^2`.
pub fn lyapunov_value<T: Real>(x: &OdeState<T>, x_star: &OdeState<T>) -> T {
    x.to_vec()
        .iter()
        .zip(x_star.to_vec())
        .fold(T::zero(), |s, (&a, b)| s + (a - b) * (a - b))
        * T::lit(0.5)
}

/// `V' = (x - x*) . rhs(x)`.
pub fn lyapunov_derivative<T: Real>(x: &OdeState<T>, x_star: &OdeState<T>, inst: &ProblemInstance<T>) -> T {
    let f = ode_rhs(x, inst);
    x.to_vec()
        .iter()
        .zip(x_star.to_vec())
        .zip(f)
        .fold(T::zero(), |s, ((&a, b), fi)| s + (a - b) * fi)
}

/// `g(x_i, x_j) = (x_i - x_j)/x_i + ln(x_j/x_i)`, the summand bounding the
/// fidelity-price cross terms; nonpositive on `(0, 1)^2`.
pub fn g_term<T: Real>(xi: T, xj: T) -> T {
    (xi - xj) / xi + (xj / xi).ln()
}

/// Linearization of the dynamics at an equilibrium.
#[derive(Debug, Clone)]
pub struct Linearization<T> {
    pub links: usize,
    pub sessions: usize,
    /// Row-major `(2L + S) x (2L + S)` matrix in `[w, mu, lambda]` order.
    pub a: Vec<T>,
    /// Diagonal of `B`: `U''_{w_l} - sum_r mu_r / w_l^2`.
    pub b_diag: Vec<T>,
    /// `U''_{w_l}`, the diagonal of the utility Hessian in `w`.
    pub u_second: Vec<T>,
    /// `J_y = R diag(-R^2) R^T`, row-major `L x L`.
    pub j_y: Vec<T>,
    /// Per link: `U''_{w_l} < sum_r mu_r / w_l^2`.
    pub local_condition: Vec<bool>,
    pub b_eigenvalues: Vec<f64>,
    pub j_y_eigenvalues: Vec<f64>,
    /// Spectrum of `A + A^T`.
    pub sym_eigenvalues: Vec<f64>,
}

impl<T: Real> Linearization<T> {
    pub fn dim(&self) -> usize {
        2 * self.links + self.sessions
    }

    pub fn a_at(&self, i: usize, j: usize) -> T {
        self.a[i * self.dim() + j]
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.a_at(i, j).to_f64_lossy())
    }

    /// All links satisfy the local-stability inequality.
    pub fn locally_stable(&self) -> bool {
        self.local_condition.iter().all(|&b| b)
    }
}

/// `d^2 U / dw_l^2` summed over the sessions crossing each link.
pub fn utility_second_w<T: Real>(inst: &ProblemInstance<T>, w: &[T]) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); inst.link_count()];
    for (r, u) in inst.utilities.iter().enumerate() {
        let h = u.hess_diag_w(&inst.path_werner(r, w))?;
        for (pos, &l) in inst.paths[r].iter().enumerate() {
            out[l] = out[l] + h[pos];
        }
    }
    Ok(out)
}

fn sym_eigs(m: DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Builds `A = [[B, W^-1 R, -D], [-(W^-1 R)^T, 0, 0], [D, 0, J_y]]`, where
/// `D = diag(d)` (the identity when capacities are normalized).
pub fn linearization_matrix<T: Real>(x_star: &OdeState<T>, inst: &ProblemInstance<T>) -> Result<Linearization<T>> {
    let (nl, ns) = (inst.link_count(), inst.session_count());
    if x_star.w.len() != nl || x_star.mu.len() != ns || x_star.lambda.len() != nl {
        return Err(StabilityError::Dimension("equilibrium does not match the instance".into()));
    }
    if let Some(l) = (0..nl).find(|&l| !inst.sessions_on[l].is_empty() && !(x_star.w[l] > T::zero() && x_star.w[l] < T::one())) {
        return Err(StabilityError::Boundary(l));
    }
    let n = 2 * nl + ns;
    let (iw, imu, ilam) = (0, nl, nl + ns);
    let mut a = vec![T::zero(); n * n];
    let mut set = |i: usize, j: usize, v: T| a[i * n + j] = v;

    let u2 = utility_second_w(inst, &x_star.w)?;
    let rates = x_star.rates(inst);
    let mut b_diag = vec![T::zero(); nl];
    let mut local_condition = vec![true; nl];
    for l in 0..nl {
        let w = x_star.w[l];
        let mu_sum = inst.sessions_on[l].iter().fold(T::zero(), |s, &(r, _)| s + x_star.mu[r]);
        let pull = mu_sum / (w * w);
        b_diag[l] = u2[l] - pull;
        local_condition[l] = u2[l] < pull;
        set(iw + l, iw + l, b_diag[l]);
        set(iw + l, ilam + l, -inst.d[l]);
        set(ilam + l, iw + l, inst.d[l]);
        for &(r, _) in &inst.sessions_on[l] {
            set(iw + l, imu + r, w.recip());
            set(imu + r, iw + l, -w.recip());
        }
    }
    let mut j_y = vec![T::zero(); nl * nl];
    for i in 0..nl {
        for j in 0..nl {
            let v = inst.sessions_on[i]
                .iter()
                .filter(|&&(r, _)| inst.routing.get(j, r) == 1)
                .fold(T::zero(), |s, &(r, _)| s - rates[r] * rates[r]);
            j_y[i * nl + j] = v;
            set(ilam + i, ilam + j, v);
        }
    }

    let b_eigenvalues = sym_eigs(DMatrix::from_fn(nl, nl, |i, j| if i == j { b_diag[i].to_f64_lossy() } else { 0.0 }));
    let jy = DMatrix::from_fn(nl, nl, |i, j| j_y[i * nl + j].to_f64_lossy());
    let j_y_eigenvalues = sym_eigs((&jy + jy.transpose()) * 0.5);
    let am = DMatrix::from_fn(n, n, |i, j| a[i * n + j].to_f64_lossy());
    let sym_eigenvalues = sym_eigs(&am + am.transpose());
    Ok(Linearization {
        links: nl,
        sessions: ns,
        a,
        b_diag,
        u_second: u2,
        j_y,
        local_condition,
        b_eigenvalues,
        j_y_eigenvalues,
        sym_eigenvalues,
    })
}

/// Per-link local-stability inequality `U''_{w_l}(w*) < sum_r mu*_r / w*_l^2`.
pub fn local_stability_condition<T: Real>(x_star: &OdeState<T>, inst: &ProblemInstance<T>) -> Result<Vec<bool>> {
    Ok(linearization_matrix(x_star, inst)?.local_condition)
}
